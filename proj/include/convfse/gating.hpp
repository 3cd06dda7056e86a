#pragma once

#include <cmath>
#include <span>
#include <vector>

#include "convfse/errors.hpp"
#include "convfse/rng.hpp"
#include "convfse/tensor.hpp"

namespace convfse {

// Backprop strategy through the Heaviside binarization. Surrogate modes keep
// a hard binary forward and substitute a smooth derivative; Binary Concrete
// instead samples a relaxed gate during training with an exact
// reparameterized gradient.
enum class BinarizeKind { SigmoidSurrogate, SuperSpike, BinaryConcrete };

struct BinarizeConfig {
  BinarizeKind kind = BinarizeKind::SuperSpike;
  double tau = 1.0;        // sigmoid surrogate temperature
  double nu = 1.0;         // superspike sharpness
  double lambda = 2.0 / 3.0;  // binary concrete temperature
  // Gradient-checking aid: replaces the hard forward of the surrogate modes
  // with the antiderivative of the surrogate, making forward and backward a
  // consistent smooth pair so finite differences apply. Never used in
  // training or inference.
  bool relaxed_forward = false;

  void validate() const {
    if (tau <= 0 || nu <= 0 || lambda <= 0)
      throw UsageError("binarize: tau, nu, lambda must be positive");
  }
};

namespace surrogate {

template <typename T>
T heaviside(T s) {
  return s >= T(0) ? T(1) : T(0);  // H(0) = 1: ties keep the channel
}

template <typename T>
T sigmoid(T x) {
  return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
}

// d/ds sigma(s/tau) = sigma'(s/tau)/tau
template <typename T>
T sigmoid_grad(T s, T tau) {
  const T g = sigmoid(s / tau);
  return g * (T(1) - g) / tau;
}

// SuperSpike-style fast-sigmoid derivative.
template <typename T>
T superspike_grad(T s, T nu) {
  const T d = T(1) + nu * std::abs(s);
  return T(1) / (d * d);
}

// Antiderivatives of the two surrogates, pinned to 0.5 at s = 0.
template <typename T>
T sigmoid_primitive(T s, T tau) {
  return sigmoid(s / tau);
}

template <typename T>
T superspike_primitive(T s, T nu) {
  return T(0.5) + s / (T(1) + nu * std::abs(s));
}

}  // namespace surrogate

// Causal boxcar mean over the last min(l+1, L_pool) frames; the window
// expands at the start of the sequence. Training-time pooling P(.).
template <typename T>
Tensor<T> pool_moving_average(const Tensor<T>& x, int l_pool) {
  if (x.ndim() != 3) throw ShapeError("pool_moving_average: expected [N, C, L]");
  if (l_pool < 1) throw UsageError("pool_moving_average: L_pool must be >= 1");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      double run = 0.0;
      for (int l = 0; l < L; ++l) {
        run += static_cast<double>(xp[l]);
        if (l >= l_pool) run -= static_cast<double>(xp[l - l_pool]);
        yp[l] = static_cast<T>(run / std::min(l + 1, l_pool));
      }
    }
  }
  return y;
}

// Streaming approximation: first-order IIR, P(x_t) = beta*x_t + (1-beta)*P(x_{t-1}).
// State is owned by one stream; initialize to zero.
template <typename T>
void pool_iir(std::vector<T>& state, std::span<const T> x_t, T beta, std::span<T> out) {
  if (!(beta > T(0) && beta <= T(1))) throw UsageError("pool_iir: beta must be in (0, 1]");
  if (state.size() != x_t.size() || out.size() != x_t.size())
    throw ShapeError("pool_iir: state/input width mismatch");
  for (std::size_t c = 0; c < x_t.size(); ++c) {
    state[c] = beta * x_t[c] + (T(1) - beta) * state[c];
    out[c] = state[c];
  }
}

// EMA coefficient with the same effective averaging length as the boxcar.
inline double iir_beta_for_pool(int l_pool) { return 2.0 / (l_pool + 1); }

// Hard binarization of raw scores (eval path and surrogate-mode training
// forward). The relaxed Binary Concrete forward lives in the autodiff op.
template <typename T>
Tensor<T> binarize_hard(const Tensor<T>& scores) {
  Tensor<T> g(scores.shape());
  for (std::size_t i = 0; i < scores.numel(); ++i) g[i] = surrogate::heaviside(scores[i]);
  return g;
}

}  // namespace convfse
