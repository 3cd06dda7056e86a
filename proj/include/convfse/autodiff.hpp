#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <utility>
#include <vector>

#include "convfse/errors.hpp"
#include "convfse/gating.hpp"
#include "convfse/rng.hpp"
#include "convfse/tensor.hpp"

namespace convfse {

// ---------------------------------------------------------------------------
// Shared forward kernels. The tape ops and the plain eval paths both run
// through these so the two cannot drift apart.
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormStats {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  long long batches = 0;  // 0 means never updated; folding requires > 0

  explicit BatchNormStats(int channels = 1)
      : running_mean({channels}, T(0)), running_var({channels}, T(1)) {}
};

inline constexpr double kBnEps = 1e-5;
inline constexpr double kBnMomentum = 0.1;

namespace nn {

template <typename T>
void check3(const Tensor<T>& x, const char* who) {
  if (x.ndim() != 3) throw ShapeError(std::string(who) + ": expected a rank-3 tensor");
}

// out[n,o,l] = b[o] + sum_i w[o,i,0] * x[n,i,l]
template <typename T>
Tensor<T> pointwise_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  check3(x, "pointwise_conv");
  if (w.ndim() != 3 || w.dim(2) != 1 || w.dim(1) != x.dim(1))
    throw ShapeError("pointwise_conv: weight must be [Cout, Cin, 1] with Cin matching input");
  if (b.ndim() != 1 || b.dim(0) != w.dim(0))
    throw ShapeError("pointwise_conv: bias must be [Cout]");
  const int N = x.dim(0), Ci = x.dim(1), L = x.dim(2), Co = w.dim(0);
  Tensor<T> y({N, Co, L});
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < Co; ++o) {
      T* yp = &y.at(n, o, 0);
      const T bias = b[static_cast<std::size_t>(o)];
      for (int l = 0; l < L; ++l) yp[l] = bias;
      for (int i = 0; i < Ci; ++i) {
        const T wv = w.at(o, i, 0);
        if (wv == T(0)) continue;
        const T* xp = &x.at(n, i, 0);
        for (int l = 0; l < L; ++l) yp[l] += wv * xp[l];
      }
    }
  }
  return y;
}

template <typename T>
void pointwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                        Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
  const int N = x.dim(0), Ci = x.dim(1), L = x.dim(2), Co = w.dim(0);
  for (int n = 0; n < N; ++n) {
    for (int o = 0; o < Co; ++o) {
      const T* dyp = &dy.at(n, o, 0);
      double acc_b = 0.0;
      for (int l = 0; l < L; ++l) acc_b += static_cast<double>(dyp[l]);
      db[static_cast<std::size_t>(o)] += static_cast<T>(acc_b);
      for (int i = 0; i < Ci; ++i) {
        const T* xp = &x.at(n, i, 0);
        T* dxp = &dx.at(n, i, 0);
        const T wv = w.at(o, i, 0);
        double acc_w = 0.0;
        for (int l = 0; l < L; ++l) {
          acc_w += static_cast<double>(dyp[l]) * static_cast<double>(xp[l]);
          dxp[l] += wv * dyp[l];
        }
        dw.at(o, i, 0) += static_cast<T>(acc_w);
      }
    }
  }
}

inline int dilated_left_pad(int kernel, int dilation, bool causal) {
  const int total = (kernel - 1) * dilation;
  return causal ? total : (total + 1) / 2;  // left-heavy when odd
}

// Depthwise conv, one filter per channel, dilation d, zero padding.
// out[n,c,l] = b[c] + sum_j w[c,0,j] * x[n,c,l + j*d - left_pad]
template <typename T>
Tensor<T> depthwise_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b,
                            int dilation, bool causal) {
  check3(x, "depthwise_dilated_conv");
  if (dilation < 1) throw UsageError("depthwise_dilated_conv: dilation must be >= 1");
  if (w.ndim() != 3 || w.dim(0) != x.dim(1) || w.dim(1) != 1)
    throw ShapeError("depthwise_dilated_conv: weight must be [C, 1, k]");
  if (b.ndim() != 1 || b.dim(0) != x.dim(1))
    throw ShapeError("depthwise_dilated_conv: bias must be [C]");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2), K = w.dim(2);
  const int lp = dilated_left_pad(K, dilation, causal);
  Tensor<T> y({N, C, L});
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      const T bias = b[static_cast<std::size_t>(c)];
      for (int l = 0; l < L; ++l) yp[l] = bias;
      for (int j = 0; j < K; ++j) {
        const T wv = w.at(c, 0, j);
        const int shift = j * dilation - lp;
        const int lo = std::max(0, -shift);
        const int hi = std::min(L, L - shift);
        for (int l = lo; l < hi; ++l) yp[l] += wv * xp[l + shift];
      }
    }
  }
  return y;
}

template <typename T>
void depthwise_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                        int dilation, bool causal, Tensor<T>& dx, Tensor<T>& dw, Tensor<T>& db) {
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2), K = w.dim(2);
  const int lp = dilated_left_pad(K, dilation, causal);
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < C; ++c) {
      const T* xp = &x.at(n, c, 0);
      const T* dyp = &dy.at(n, c, 0);
      T* dxp = &dx.at(n, c, 0);
      double acc_b = 0.0;
      for (int l = 0; l < L; ++l) acc_b += static_cast<double>(dyp[l]);
      db[static_cast<std::size_t>(c)] += static_cast<T>(acc_b);
      for (int j = 0; j < K; ++j) {
        const T wv = w.at(c, 0, j);
        const int shift = j * dilation - lp;
        const int lo = std::max(0, -shift);
        const int hi = std::min(L, L - shift);
        double acc_w = 0.0;
        for (int l = lo; l < hi; ++l) {
          acc_w += static_cast<double>(dyp[l]) * static_cast<double>(xp[l + shift]);
          dxp[l + shift] += wv * dyp[l];
        }
        dw.at(c, 0, j) += static_cast<T>(acc_w);
      }
    }
  }
}

template <typename T>
Tensor<T> prelu_forward(const Tensor<T>& x, const Tensor<T>& a) {
  check3(x, "prelu");
  if (a.ndim() != 1 || a.dim(0) != x.dim(1)) throw ShapeError("prelu: slopes must be [C]");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T slope = a[static_cast<std::size_t>(c)];
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      for (int l = 0; l < L; ++l) yp[l] = xp[l] > T(0) ? xp[l] : slope * xp[l];
    }
  return y;
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = x[i] > T(0) ? x[i] : T(0);
  return y;
}

template <typename T>
Tensor<T> sigmoid_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = surrogate::sigmoid(x[i]);
  return y;
}

// Training-mode batch norm: normalize per channel over (N, L) with batch
// statistics (biased variance), then update the running stats.
template <typename T>
Tensor<T> bn_train_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                           BatchNormStats<T>& stats, std::vector<double>& save_mean,
                           std::vector<double>& save_invstd) {
  check3(x, "batch_norm");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (gamma.ndim() != 1 || gamma.dim(0) != C || beta.ndim() != 1 || beta.dim(0) != C)
    throw ShapeError("batch_norm: gamma/beta must be [C]");
  const double M = static_cast<double>(N) * L;
  save_mean.assign(static_cast<std::size_t>(C), 0.0);
  save_invstd.assign(static_cast<std::size_t>(C), 0.0);
  Tensor<T> y(x.shape());
  for (int c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* xp = &x.at(n, c, 0);
      for (int l = 0; l < L; ++l) mean += static_cast<double>(xp[l]);
    }
    mean /= M;
    double var = 0.0;
    for (int n = 0; n < N; ++n) {
      const T* xp = &x.at(n, c, 0);
      for (int l = 0; l < L; ++l) {
        const double d = static_cast<double>(xp[l]) - mean;
        var += d * d;
      }
    }
    var /= M;
    const double invstd = 1.0 / std::sqrt(var + kBnEps);
    save_mean[static_cast<std::size_t>(c)] = mean;
    save_invstd[static_cast<std::size_t>(c)] = invstd;
    const double g = static_cast<double>(gamma[static_cast<std::size_t>(c)]);
    const double bt = static_cast<double>(beta[static_cast<std::size_t>(c)]);
    for (int n = 0; n < N; ++n) {
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      for (int l = 0; l < L; ++l)
        yp[l] = static_cast<T>(g * ((static_cast<double>(xp[l]) - mean) * invstd) + bt);
    }
    stats.running_mean[static_cast<std::size_t>(c)] = static_cast<T>(
        (1.0 - kBnMomentum) * static_cast<double>(stats.running_mean[static_cast<std::size_t>(c)]) +
        kBnMomentum * mean);
    stats.running_var[static_cast<std::size_t>(c)] = static_cast<T>(
        (1.0 - kBnMomentum) * static_cast<double>(stats.running_var[static_cast<std::size_t>(c)]) +
        kBnMomentum * var);
  }
  stats.batches++;
  return y;
}

template <typename T>
Tensor<T> bn_eval_forward(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                          const BatchNormStats<T>& stats) {
  check3(x, "batch_norm");
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor<T> y(x.shape());
  for (int c = 0; c < C; ++c) {
    const double invstd =
        1.0 / std::sqrt(static_cast<double>(stats.running_var[static_cast<std::size_t>(c)]) + kBnEps);
    const double mean = static_cast<double>(stats.running_mean[static_cast<std::size_t>(c)]);
    const double g = static_cast<double>(gamma[static_cast<std::size_t>(c)]);
    const double bt = static_cast<double>(beta[static_cast<std::size_t>(c)]);
    for (int n = 0; n < N; ++n) {
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      for (int l = 0; l < L; ++l)
        yp[l] = static_cast<T>(g * ((static_cast<double>(xp[l]) - mean) * invstd) + bt);
    }
  }
  return y;
}

}  // namespace nn

// ---------------------------------------------------------------------------
// Reverse-mode tape. The operator set is closed: the convolutions,
// activations and batch norm above, binarization, causal pooling, and the
// element-wise/reduction helpers the losses need. No broadcasting engine.
// ---------------------------------------------------------------------------

template <typename T>
struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

template <typename T>
class Tape {
 public:
  Var<T> leaf(Tensor<T> v) { return push(std::move(v), nullptr); }

  const Tensor<T>& value(Var<T> v) const {
    check(v);
    return vals_[static_cast<std::size_t>(v.id)];
  }

  const Tensor<T>& grad(Var<T> v) const {
    check(v);
    if (!has_grads_) throw UsageError("tape: gradients requested before backward");
    return grads_[static_cast<std::size_t>(v.id)];
  }

  double scalar(Var<T> v) const {
    const Tensor<T>& t = value(v);
    if (t.numel() != 1) throw ShapeError("tape: scalar() on non-scalar var");
    return static_cast<double>(t[0]);
  }

  std::size_t size() const { return vals_.size(); }

  void reset() {
    vals_.clear();
    grads_.clear();
    nodes_.clear();
    has_grads_ = false;
  }

  // Seeds d(loss)=1 and walks the tape in reverse; gradients accumulate
  // additively at fan-out. Tape order is already topological.
  void backward(Var<T> loss) {
    check(loss);
    if (vals_[static_cast<std::size_t>(loss.id)].numel() != 1)
      throw UsageError("tape: backward requires a scalar loss");
    grads_.clear();
    grads_.reserve(vals_.size());
    for (const auto& v : vals_) grads_.emplace_back(v.shape(), T(0));
    grads_[static_cast<std::size_t>(loss.id)][0] = T(1);
    has_grads_ = true;
    for (std::size_t i = nodes_.size(); i-- > 0;)
      if (nodes_[i]) nodes_[i](*this);
  }

  // --- operator set -------------------------------------------------------

  Var<T> pointwise_conv(Var<T> x, Var<T> w, Var<T> b) {
    Tensor<T> y = nn::pointwise_forward(value(x), value(w), value(b));
    const int xi = x.id, wi = w.id, bi = b.id, yi = next_id();
    return push(std::move(y), [xi, wi, bi, yi](Tape& tp) {
      nn::pointwise_backward(tp.val(xi), tp.val(wi), tp.g(yi), tp.g(xi), tp.g(wi), tp.g(bi));
    });
  }

  Var<T> depthwise_dilated_conv(Var<T> x, Var<T> w, Var<T> b, int dilation, bool causal) {
    Tensor<T> y = nn::depthwise_forward(value(x), value(w), value(b), dilation, causal);
    const int xi = x.id, wi = w.id, bi = b.id, yi = next_id();
    return push(std::move(y), [xi, wi, bi, yi, dilation, causal](Tape& tp) {
      nn::depthwise_backward(tp.val(xi), tp.val(wi), tp.g(yi), dilation, causal, tp.g(xi),
                             tp.g(wi), tp.g(bi));
    });
  }

  Var<T> prelu(Var<T> x, Var<T> slopes) {
    Tensor<T> y = nn::prelu_forward(value(x), value(slopes));
    const int xi = x.id, ai = slopes.id, yi = next_id();
    return push(std::move(y), [xi, ai, yi](Tape& tp) {
      const Tensor<T>& xv = tp.val(xi);
      const Tensor<T>& av = tp.val(ai);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& dx = tp.g(xi);
      Tensor<T>& da = tp.g(ai);
      const int N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T slope = av[static_cast<std::size_t>(c)];
          const T* xp = &xv.at(n, c, 0);
          const T* dyp = &dy.at(n, c, 0);
          T* dxp = &dx.at(n, c, 0);
          double acc = 0.0;
          for (int l = 0; l < L; ++l) {
            if (xp[l] > T(0)) {
              dxp[l] += dyp[l];
            } else {
              dxp[l] += slope * dyp[l];
              acc += static_cast<double>(dyp[l]) * static_cast<double>(xp[l]);
            }
          }
          da[static_cast<std::size_t>(c)] += static_cast<T>(acc);
        }
    });
  }

  Var<T> relu(Var<T> x) {
    Tensor<T> y = nn::relu_forward(value(x));
    const int xi = x.id, yi = next_id();
    return push(std::move(y), [xi, yi](Tape& tp) {
      const Tensor<T>& xv = tp.val(xi);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& dx = tp.g(xi);
      for (std::size_t i = 0; i < xv.numel(); ++i)
        if (xv[i] > T(0)) dx[i] += dy[i];
    });
  }

  Var<T> sigmoid(Var<T> x) {
    Tensor<T> y = nn::sigmoid_forward(value(x));
    const int xi = x.id, yi = next_id();
    return push(std::move(y), [xi, yi](Tape& tp) {
      const Tensor<T>& yv = tp.val(yi);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& dx = tp.g(xi);
      for (std::size_t i = 0; i < yv.numel(); ++i) dx[i] += dy[i] * yv[i] * (T(1) - yv[i]);
    });
  }

  Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, BatchNormStats<T>& stats, bool training) {
    const int xi = x.id, gi = gamma.id, bi = beta.id, yi = next_id();
    if (training) {
      std::vector<double> mean, invstd;
      Tensor<T> y = nn::bn_train_forward(value(x), value(gamma), value(beta), stats, mean, invstd);
      return push(std::move(y), [xi, gi, bi, yi, mean, invstd](Tape& tp) {
        const Tensor<T>& xv = tp.val(xi);
        const Tensor<T>& gv = tp.val(gi);
        const Tensor<T>& dy = tp.g(yi);
        Tensor<T>& dx = tp.g(xi);
        Tensor<T>& dg = tp.g(gi);
        Tensor<T>& db = tp.g(bi);
        const int N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
        const double M = static_cast<double>(N) * L;
        for (int c = 0; c < C; ++c) {
          const double mu = mean[static_cast<std::size_t>(c)];
          const double is = invstd[static_cast<std::size_t>(c)];
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (int n = 0; n < N; ++n) {
            const T* xp = &xv.at(n, c, 0);
            const T* dyp = &dy.at(n, c, 0);
            for (int l = 0; l < L; ++l) {
              const double xhat = (static_cast<double>(xp[l]) - mu) * is;
              sum_dy += static_cast<double>(dyp[l]);
              sum_dy_xhat += static_cast<double>(dyp[l]) * xhat;
            }
          }
          dg[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
          db[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
          const double gs = static_cast<double>(gv[static_cast<std::size_t>(c)]) * is;
          const double m_dy = sum_dy / M;
          const double m_dy_xhat = sum_dy_xhat / M;
          for (int n = 0; n < N; ++n) {
            const T* xp = &xv.at(n, c, 0);
            const T* dyp = &dy.at(n, c, 0);
            T* dxp = &dx.at(n, c, 0);
            for (int l = 0; l < L; ++l) {
              const double xhat = (static_cast<double>(xp[l]) - mu) * is;
              dxp[l] += static_cast<T>(gs * (static_cast<double>(dyp[l]) - m_dy - xhat * m_dy_xhat));
            }
          }
        }
      });
    }
    // Eval mode: a per-channel affine map with frozen statistics.
    std::vector<double> mean(static_cast<std::size_t>(value(x).dim(1)));
    std::vector<double> invstd(mean.size());
    for (std::size_t c = 0; c < mean.size(); ++c) {
      mean[c] = static_cast<double>(stats.running_mean[c]);
      invstd[c] = 1.0 / std::sqrt(static_cast<double>(stats.running_var[c]) + kBnEps);
    }
    Tensor<T> y = nn::bn_eval_forward(value(x), value(gamma), value(beta), stats);
    return push(std::move(y), [xi, gi, bi, yi, mean, invstd](Tape& tp) {
      const Tensor<T>& xv = tp.val(xi);
      const Tensor<T>& gv = tp.val(gi);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& dx = tp.g(xi);
      Tensor<T>& dg = tp.g(gi);
      Tensor<T>& db = tp.g(bi);
      const int N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
      for (int c = 0; c < C; ++c) {
        const double mu = mean[static_cast<std::size_t>(c)];
        const double is = invstd[static_cast<std::size_t>(c)];
        const double gs = static_cast<double>(gv[static_cast<std::size_t>(c)]) * is;
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int n = 0; n < N; ++n) {
          const T* xp = &xv.at(n, c, 0);
          const T* dyp = &dy.at(n, c, 0);
          T* dxp = &dx.at(n, c, 0);
          for (int l = 0; l < L; ++l) {
            sum_dy += static_cast<double>(dyp[l]);
            sum_dy_xhat += static_cast<double>(dyp[l]) * (static_cast<double>(xp[l]) - mu) * is;
            dxp[l] += static_cast<T>(gs * static_cast<double>(dyp[l]));
          }
        }
        dg[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy_xhat);
        db[static_cast<std::size_t>(c)] += static_cast<T>(sum_dy);
      }
    });
  }

  Var<T> moving_average(Var<T> x, int l_pool) {
    Tensor<T> y = pool_moving_average(value(x), l_pool);
    const int xi = x.id, yi = next_id();
    return push(std::move(y), [xi, yi, l_pool](Tape& tp) {
      const Tensor<T>& xv = tp.val(xi);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& dx = tp.g(xi);
      const int N = xv.dim(0), C = xv.dim(1), L = xv.dim(2);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T* dyp = &dy.at(n, c, 0);
          T* dxp = &dx.at(n, c, 0);
          for (int l = 0; l < L; ++l) {
            const int w = std::min(l + 1, l_pool);
            const T share = dyp[l] / static_cast<T>(w);
            for (int j = l - w + 1; j <= l; ++j) dxp[j] += share;
          }
        }
    });
  }

  // Heaviside gate with the configured backward strategy. Training forward is
  // binary for the surrogate modes and a sampled relaxed gate for Binary
  // Concrete; eval forward is always hard.
  Var<T> binarize(Var<T> scores, const BinarizeConfig& bc, bool training, Rng* rng) {
    bc.validate();
    const Tensor<T>& s = value(scores);
    const int si = scores.id, yi = next_id();

    if (bc.kind == BinarizeKind::BinaryConcrete && training) {
      if (rng == nullptr) throw UsageError("binarize: Binary Concrete training requires an rng");
      Tensor<T> gate(s.shape());
      const double lambda = bc.lambda;
      for (std::size_t i = 0; i < s.numel(); ++i) {
        double u = rng->uniform();
        u = std::min(std::max(u, 1e-7), 1.0 - 1e-7);
        const double z = (std::log(u) - std::log1p(-u) + static_cast<double>(s[i])) / lambda;
        gate[i] = static_cast<T>(surrogate::sigmoid(z));
      }
      Tensor<T> saved = gate;
      return push(std::move(gate), [si, yi, saved, lambda](Tape& tp) {
        const Tensor<T>& dy = tp.g(yi);
        Tensor<T>& ds = tp.g(si);
        for (std::size_t i = 0; i < saved.numel(); ++i)
          ds[i] += static_cast<T>(static_cast<double>(dy[i]) * static_cast<double>(saved[i]) *
                                  (1.0 - static_cast<double>(saved[i])) / lambda);
      });
    }

    Tensor<T> gate(s.shape());
    const bool relaxed = training && bc.relaxed_forward &&
                         bc.kind != BinarizeKind::BinaryConcrete;
    for (std::size_t i = 0; i < s.numel(); ++i) {
      if (relaxed) {
        gate[i] = bc.kind == BinarizeKind::SigmoidSurrogate
                      ? surrogate::sigmoid_primitive(s[i], static_cast<T>(bc.tau))
                      : surrogate::superspike_primitive(s[i], static_cast<T>(bc.nu));
      } else {
        gate[i] = surrogate::heaviside(s[i]);
      }
    }
    if (!training) {
      // Eval gates are constants; no gradient flows.
      return push(std::move(gate), [](Tape&) {});
    }
    const BinarizeConfig cfg = bc;
    return push(std::move(gate), [si, yi, cfg](Tape& tp) {
      const Tensor<T>& sv = tp.val(si);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& ds = tp.g(si);
      for (std::size_t i = 0; i < sv.numel(); ++i) {
        const T surr = cfg.kind == BinarizeKind::SigmoidSurrogate
                           ? surrogate::sigmoid_grad(sv[i], static_cast<T>(cfg.tau))
                           : surrogate::superspike_grad(sv[i], static_cast<T>(cfg.nu));
        ds[i] += dy[i] * surr;
      }
    });
  }

  Var<T> add(Var<T> a, Var<T> b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!av.same_shape(bv)) throw ShapeError("add: shape mismatch");
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] + bv[i];
    const int ai = a.id, bi = b.id, yi = next_id();
    return push(std::move(y), [ai, bi, yi](Tape& tp) {
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      Tensor<T>& db = tp.g(bi);
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        da[i] += dy[i];
        db[i] += dy[i];
      }
    });
  }

  Var<T> mul(Var<T> a, Var<T> b) {
    const Tensor<T>& av = value(a);
    const Tensor<T>& bv = value(b);
    if (!av.same_shape(bv)) throw ShapeError("mul: shape mismatch");
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
    const int ai = a.id, bi = b.id, yi = next_id();
    return push(std::move(y), [ai, bi, yi](Tape& tp) {
      const Tensor<T>& av2 = tp.val(ai);
      const Tensor<T>& bv2 = tp.val(bi);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      Tensor<T>& db = tp.g(bi);
      for (std::size_t i = 0; i < dy.numel(); ++i) {
        da[i] += dy[i] * bv2[i];
        db[i] += dy[i] * av2[i];
      }
    });
  }

  Var<T> scale(Var<T> a, T k) {
    const Tensor<T>& av = value(a);
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = k * av[i];
    const int ai = a.id, yi = next_id();
    return push(std::move(y), [ai, yi, k](Tape& tp) {
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += k * dy[i];
    });
  }

  Var<T> add_scalar(Var<T> a, T k) {
    const Tensor<T>& av = value(a);
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) y[i] = av[i] + k;
    const int ai = a.id, yi = next_id();
    return push(std::move(y), [ai, yi](Tape& tp) {
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      for (std::size_t i = 0; i < dy.numel(); ++i) da[i] += dy[i];
    });
  }

  // Element-wise x^p for x >= 0. Subgradient 0 at x = 0 so that chains like
  // (|X|*M)^c stay finite on silent bins.
  Var<T> pow_scalar(Var<T> a, T p) {
    const Tensor<T>& av = value(a);
    Tensor<T> y(av.shape());
    for (std::size_t i = 0; i < y.numel(); ++i)
      y[i] = av[i] > T(0) ? static_cast<T>(std::pow(static_cast<double>(av[i]), static_cast<double>(p)))
                          : T(0);
    const int ai = a.id, yi = next_id();
    return push(std::move(y), [ai, yi, p](Tape& tp) {
      const Tensor<T>& av2 = tp.val(ai);
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      for (std::size_t i = 0; i < dy.numel(); ++i)
        if (av2[i] > T(0))
          da[i] += static_cast<T>(static_cast<double>(dy[i]) * static_cast<double>(p) *
                                  std::pow(static_cast<double>(av2[i]), static_cast<double>(p) - 1.0));
    });
  }

  Var<T> sum_all(Var<T> a) {
    const Tensor<T>& av = value(a);
    double acc = 0.0;
    for (std::size_t i = 0; i < av.numel(); ++i) acc += static_cast<double>(av[i]);
    Tensor<T> y({1});
    y[0] = static_cast<T>(acc);
    const int ai = a.id, yi = next_id();
    return push(std::move(y), [ai, yi](Tape& tp) {
      const T dy = tp.g(yi)[0];
      Tensor<T>& da = tp.g(ai);
      for (std::size_t i = 0; i < da.numel(); ++i) da[i] += dy;
    });
  }

  Var<T> mean_all(Var<T> a) {
    const Tensor<T>& av = value(a);
    const T inv = static_cast<T>(1.0 / static_cast<double>(av.numel()));
    return scale(sum_all(a), inv);
  }

  // [N, C, L] -> [C], mean over batch and time.
  Var<T> channel_mean(Var<T> a) {
    const Tensor<T>& av = value(a);
    nn::check3(av, "channel_mean");
    const int N = av.dim(0), C = av.dim(1), L = av.dim(2);
    const double M = static_cast<double>(N) * L;
    Tensor<T> y({C});
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const T* xp = &av.at(n, c, 0);
        for (int l = 0; l < L; ++l) acc += static_cast<double>(xp[l]);
      }
      y[static_cast<std::size_t>(c)] = static_cast<T>(acc / M);
    }
    const int ai = a.id, yi = next_id();
    return push(std::move(y), [ai, yi, M](Tape& tp) {
      const Tensor<T>& dy = tp.g(yi);
      Tensor<T>& da = tp.g(ai);
      const int N = da.dim(0), C = da.dim(1), L = da.dim(2);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
          const T share = static_cast<T>(static_cast<double>(dy[static_cast<std::size_t>(c)]) / M);
          T* dap = &da.at(n, c, 0);
          for (int l = 0; l < L; ++l) dap[l] += share;
        }
    });
  }

 private:
  using BackFn = std::function<void(Tape&)>;

  Tensor<T>& g(int id) { return grads_[static_cast<std::size_t>(id)]; }
  const Tensor<T>& val(int id) const { return vals_[static_cast<std::size_t>(id)]; }

  int next_id() const { return static_cast<int>(vals_.size()); }

  Var<T> push(Tensor<T> v, BackFn back) {
#ifndef NDEBUG
    if (!v.all_finite()) throw NumericError("tape: non-finite values in forward op output");
#endif
    vals_.push_back(std::move(v));
    nodes_.push_back(std::move(back));
    return Var<T>{static_cast<int>(vals_.size()) - 1};
  }

  void check(Var<T> v) const {
    if (!v.valid() || static_cast<std::size_t>(v.id) >= vals_.size())
      throw UsageError("tape: invalid variable");
  }

  std::vector<Tensor<T>> vals_;
  std::vector<Tensor<T>> grads_;
  std::vector<BackFn> nodes_;
  bool has_grads_ = false;
};

}  // namespace convfse
