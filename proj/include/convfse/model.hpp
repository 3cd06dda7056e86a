#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "convfse/autodiff.hpp"
#include "convfse/gating.hpp"

namespace convfse {

// Architecture hyper-parameters. Defaults are the full-scale reference configuration;
// desk-scale runs shrink the channel counts and stacks.
struct ModelConfig {
  int c_res = 128;
  int c_conv = 256;
  int c_gate = 16;
  int kernel = 3;
  int n_b = 3;
  int n_s = 3;
  int bins = 257;  // F = window_length/2 + 1
  bool causal = false;
  bool gating = false;
  int l_pool = 0;  // 0 -> receptive field
  float phi_trgt = 0.25f;

  int blocks() const { return n_s * n_b; }

  void validate() const {
    if (c_res < 1 || c_conv < 1 || c_gate < 1 || kernel < 1 || n_b < 1 || n_s < 1 || bins < 1)
      throw UsageError("model config: all counts must be >= 1");
    if (!(phi_trgt >= 0.0f && phi_trgt <= 1.0f))
      throw UsageError("model config: phi_trgt must be in [0, 1]");
    if (l_pool < 0) throw UsageError("model config: l_pool must be >= 0");
  }

  bool compatible_backbone(const ModelConfig& o) const {
    return c_res == o.c_res && c_conv == o.c_conv && kernel == o.kernel && n_b == o.n_b &&
           n_s == o.n_s && bins == o.bins && causal == o.causal;
  }
};

// L_RF = N_s * (k - 1) * (2^N_b - 1) + 1, dilations doubling per block
// within each stack.
inline int receptive_field(const ModelConfig& cfg) {
  cfg.validate();
  return cfg.n_s * (cfg.kernel - 1) * ((1 << cfg.n_b) - 1) + 1;
}

inline int pool_window(const ModelConfig& cfg) {
  return cfg.l_pool > 0 ? cfg.l_pool : receptive_field(cfg);
}

inline int block_dilation(const ModelConfig& cfg, int block_index) {
  return 1 << (block_index % cfg.n_b);
}

template <typename T>
struct ConvParam {
  Tensor<T> w;
  Tensor<T> b;
};

template <typename T>
struct BlockWeights {
  ConvParam<T> pw1;   // [C_conv, C_res, 1]
  Tensor<T> prelu1;   // [C_conv]
  Tensor<T> bn1_gamma, bn1_beta;
  BatchNormStats<T> bn1_stats;
  ConvParam<T> ddw;   // [C_conv, 1, k]
  Tensor<T> prelu2;   // [C_conv]
  Tensor<T> bn2_gamma, bn2_beta;
  BatchNormStats<T> bn2_stats;
  ConvParam<T> pw2;   // [C_res, C_conv, 1]
  int dilation = 1;
};

template <typename T>
struct GatingWeights {
  ConvParam<T> pw_a;  // [C_gate, C_res, 1]
  ConvParam<T> pw_b;  // [C_res, C_gate, 1]
};

template <typename T>
struct ModelWeights {
  ModelConfig cfg;
  ConvParam<T> front;  // [C_res, F, 1]
  std::vector<BlockWeights<T>> blocks;
  std::vector<GatingWeights<T>> gates;  // sized blocks() when cfg.gating
  ConvParam<T> back;   // [F, C_res, 1]
};

namespace detail {

template <typename T>
Tensor<T> kaiming_uniform(std::vector<int> shape, int fan_in, Rng& rng) {
  const double bound = std::sqrt(6.0 / fan_in);
  return Tensor<T>::uniform(std::move(shape), rng, -bound, bound);
}

template <typename T>
GatingWeights<T> init_gate(const ModelConfig& cfg, Rng& rng) {
  GatingWeights<T> g;
  g.pw_a.w = kaiming_uniform<T>({cfg.c_gate, cfg.c_res, 1}, cfg.c_res, rng);
  g.pw_a.b = Tensor<T>::zeros({cfg.c_gate});
  g.pw_b.w = kaiming_uniform<T>({cfg.c_res, cfg.c_gate, 1}, cfg.c_gate, rng);
  g.pw_b.b = Tensor<T>::zeros({cfg.c_res});
  return g;
}

}  // namespace detail

// Deterministic initialization: Kaiming-uniform fan-in weights, zero biases,
// PReLU slopes 0.25, identity batch-norm with empty running stats.
template <typename T>
ModelWeights<T> init_weights(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelWeights<T> w;
  w.cfg = cfg;
  w.front.w = detail::kaiming_uniform<T>({cfg.c_res, cfg.bins, 1}, cfg.bins, rng);
  w.front.b = Tensor<T>::zeros({cfg.c_res});
  for (int i = 0; i < cfg.blocks(); ++i) {
    BlockWeights<T> blk;
    blk.pw1.w = detail::kaiming_uniform<T>({cfg.c_conv, cfg.c_res, 1}, cfg.c_res, rng);
    blk.pw1.b = Tensor<T>::zeros({cfg.c_conv});
    blk.prelu1 = Tensor<T>::full({cfg.c_conv}, T(0.25));
    blk.bn1_gamma = Tensor<T>::full({cfg.c_conv}, T(1));
    blk.bn1_beta = Tensor<T>::zeros({cfg.c_conv});
    blk.bn1_stats = BatchNormStats<T>(cfg.c_conv);
    blk.ddw.w = detail::kaiming_uniform<T>({cfg.c_conv, 1, cfg.kernel}, cfg.kernel, rng);
    blk.ddw.b = Tensor<T>::zeros({cfg.c_conv});
    blk.prelu2 = Tensor<T>::full({cfg.c_conv}, T(0.25));
    blk.bn2_gamma = Tensor<T>::full({cfg.c_conv}, T(1));
    blk.bn2_beta = Tensor<T>::zeros({cfg.c_conv});
    blk.bn2_stats = BatchNormStats<T>(cfg.c_conv);
    blk.pw2.w = detail::kaiming_uniform<T>({cfg.c_res, cfg.c_conv, 1}, cfg.c_conv, rng);
    blk.pw2.b = Tensor<T>::zeros({cfg.c_res});
    blk.dilation = block_dilation(cfg, i);
    w.blocks.push_back(std::move(blk));
  }
  if (cfg.gating) {
    for (int i = 0; i < cfg.blocks(); ++i) w.gates.push_back(detail::init_gate<T>(cfg, rng));
  }
  w.back.w = detail::kaiming_uniform<T>({cfg.bins, cfg.c_res, 1}, cfg.c_res, rng);
  w.back.b = Tensor<T>::zeros({cfg.bins});
  return w;
}

// Raw pruning scores from pooled activations: pw_a -> ReLU -> pw_b.
template <typename T>
Tensor<T> gate_scores(const GatingWeights<T>& gw, const Tensor<T>& pooled) {
  Tensor<T> hidden = nn::relu_forward(nn::pointwise_forward(pooled, gw.pw_a.w, gw.pw_a.b));
  return nn::pointwise_forward(hidden, gw.pw_b.w, gw.pw_b.b);
}

// Fresh random gating weights for fine-tuning a pre-trained baseline.
template <typename T>
void reinit_gates(ModelWeights<T>& w, std::uint64_t seed) {
  Rng rng(seed);
  w.gates.clear();
  for (int i = 0; i < w.cfg.blocks(); ++i) w.gates.push_back(detail::init_gate<T>(w.cfg, rng));
  w.cfg.gating = true;
}

// --------------------------------------------------------------------------
// Tape-side forward for training.
// --------------------------------------------------------------------------

template <typename T>
struct ParamBinding {
  std::string name;
  Tensor<T>* tensor;
  Var<T> var;
};

template <typename T>
struct ModelVars {
  struct BlockVars {
    Var<T> pw1_w, pw1_b, prelu1, bn1_g, bn1_b;
    Var<T> ddw_w, ddw_b, prelu2, bn2_g, bn2_b;
    Var<T> pw2_w, pw2_b;
  };
  struct GateVars {
    Var<T> aw, ab, bw, bb;
  };
  Var<T> front_w, front_b, back_w, back_b;
  std::vector<BlockVars> blocks;
  std::vector<GateVars> gates;
  std::vector<ParamBinding<T>> bindings;  // flat view, fixed enumeration order
};

template <typename T>
ModelVars<T> register_model(Tape<T>& tape, ModelWeights<T>& w) {
  ModelVars<T> mv;
  auto bind = [&](const std::string& name, Tensor<T>& t) {
    Var<T> v = tape.leaf(t);
    mv.bindings.push_back({name, &t, v});
    return v;
  };
  mv.front_w = bind("front.w", w.front.w);
  mv.front_b = bind("front.b", w.front.b);
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    typename ModelVars<T>::BlockVars bv;
    bv.pw1_w = bind(p + "pw1.w", b.pw1.w);
    bv.pw1_b = bind(p + "pw1.b", b.pw1.b);
    bv.prelu1 = bind(p + "prelu1", b.prelu1);
    bv.bn1_g = bind(p + "bn1.gamma", b.bn1_gamma);
    bv.bn1_b = bind(p + "bn1.beta", b.bn1_beta);
    bv.ddw_w = bind(p + "ddw.w", b.ddw.w);
    bv.ddw_b = bind(p + "ddw.b", b.ddw.b);
    bv.prelu2 = bind(p + "prelu2", b.prelu2);
    bv.bn2_g = bind(p + "bn2.gamma", b.bn2_gamma);
    bv.bn2_b = bind(p + "bn2.beta", b.bn2_beta);
    bv.pw2_w = bind(p + "pw2.w", b.pw2.w);
    bv.pw2_b = bind(p + "pw2.b", b.pw2.b);
    mv.blocks.push_back(bv);
  }
  for (std::size_t i = 0; i < w.gates.size(); ++i) {
    auto& g = w.gates[i];
    const std::string p = "gate" + std::to_string(i) + ".";
    typename ModelVars<T>::GateVars gv;
    gv.aw = bind(p + "pw_a.w", g.pw_a.w);
    gv.ab = bind(p + "pw_a.b", g.pw_a.b);
    gv.bw = bind(p + "pw_b.w", g.pw_b.w);
    gv.bb = bind(p + "pw_b.b", g.pw_b.b);
    mv.gates.push_back(gv);
  }
  mv.back_w = bind("back.w", w.back.w);
  mv.back_b = bind("back.b", w.back.b);
  return mv;
}

template <typename T>
struct TrainForward {
  Var<T> mask;                 // [N, F, L] in (0,1)
  std::vector<Var<T>> gates;   // per block, [N, C_res, L]; empty when gating off
};

// Front-end -> N_s stacks of N_b residual blocks -> back-end. Training-time
// gating multiplies the binary mask with the block residual before the skip
// add; the gate tap is the block input, pooled with the causal boxcar.
template <typename T>
TrainForward<T> forward_train(Tape<T>& tape, const ModelVars<T>& mv, ModelWeights<T>& w,
                              Var<T> x_mag, bool training, const BinarizeConfig& bc,
                              Rng* rng = nullptr) {
  const ModelConfig& cfg = w.cfg;
  cfg.validate();
  const Tensor<T>& xv = tape.value(x_mag);
  if (xv.ndim() != 3 || xv.dim(1) != cfg.bins)
    throw ShapeError("forward_train: input must be [N, F, L] with F = " + std::to_string(cfg.bins));
  if (cfg.gating && mv.gates.size() != static_cast<std::size_t>(cfg.blocks()))
    throw ShapeError("forward_train: gating enabled but gate weights missing");

  TrainForward<T> out;
  const int lp = pool_window(cfg);

  Var<T> h = tape.relu(tape.pointwise_conv(x_mag, mv.front_w, mv.front_b));
  for (int i = 0; i < cfg.blocks(); ++i) {
    const auto& bv = mv.blocks[static_cast<std::size_t>(i)];
    auto& bw = w.blocks[static_cast<std::size_t>(i)];

    Var<T> gate;
    if (cfg.gating) {
      const auto& gv = mv.gates[static_cast<std::size_t>(i)];
      Var<T> pooled = tape.moving_average(h, lp);
      Var<T> hidden = tape.relu(tape.pointwise_conv(pooled, gv.aw, gv.ab));
      Var<T> scores = tape.pointwise_conv(hidden, gv.bw, gv.bb);
      gate = tape.binarize(scores, bc, training, rng);
      out.gates.push_back(gate);
    }

    Var<T> z = tape.pointwise_conv(h, bv.pw1_w, bv.pw1_b);
    z = tape.prelu(z, bv.prelu1);
    z = tape.batch_norm(z, bv.bn1_g, bv.bn1_b, bw.bn1_stats, training);
    z = tape.depthwise_dilated_conv(z, bv.ddw_w, bv.ddw_b, bw.dilation, cfg.causal);
    z = tape.prelu(z, bv.prelu2);
    z = tape.batch_norm(z, bv.bn2_g, bv.bn2_b, bw.bn2_stats, training);
    Var<T> r = tape.pointwise_conv(z, bv.pw2_w, bv.pw2_b);
    if (cfg.gating) r = tape.mul(gate, r);
    h = tape.add(h, r);

    const int stack = i / cfg.n_b;
    if ((i + 1) % cfg.n_b == 0 && stack < cfg.n_s - 1) h = tape.relu(h);
  }
  out.mask = tape.sigmoid(tape.pointwise_conv(h, mv.back_w, mv.back_b));
  return out;
}

// --------------------------------------------------------------------------
// Plain eval-mode forwards (no tape): the masked-multiply reference path and
// the filter-skipping inference path, selectable pooling.
// --------------------------------------------------------------------------

enum class PoolingMode { Boxcar, Iir };

template <typename T>
struct EvalForward {
  Tensor<T> mask;   // [N, F, L]
  Tensor<T> gates;  // [N, C_res, L, I]; all-ones when gating disabled
};

namespace detail {

template <typename T>
Tensor<T> pool_iir_offline(const Tensor<T>& x, T beta) {
  const int N = x.dim(0), C = x.dim(1), L = x.dim(2);
  Tensor<T> y(x.shape());
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const T* xp = &x.at(n, c, 0);
      T* yp = &y.at(n, c, 0);
      T state = T(0);
      for (int l = 0; l < L; ++l) {
        state = beta * xp[l] + (T(1) - beta) * state;
        yp[l] = state;
      }
    }
  return y;
}

}  // namespace detail

// skip_inactive=false: compute every pw2 row, multiply by the gate (the
// training-equivalent reference). skip_inactive=true: compute only active
// rows; inactive channels pass the residual through untouched. The two must
// agree to float precision for any gate pattern.
template <typename T>
EvalForward<T> forward_eval(const ModelWeights<T>& w, const Tensor<T>& x_mag,
                            PoolingMode pooling, bool skip_inactive,
                            const Tensor<T>* forced_gates = nullptr) {
  const ModelConfig& cfg = w.cfg;
  cfg.validate();
  if (x_mag.ndim() != 3 || x_mag.dim(1) != cfg.bins)
    throw ShapeError("forward_eval: input must be [N, F, L]");
  const int N = x_mag.dim(0), L = x_mag.dim(2), I = cfg.blocks();
  const bool gated = cfg.gating || forced_gates != nullptr;
  if (forced_gates != nullptr) {
    if (forced_gates->ndim() != 4 || forced_gates->dim(0) != N ||
        forced_gates->dim(1) != cfg.c_res || forced_gates->dim(2) != L || forced_gates->dim(3) != I)
      throw ShapeError("forward_eval: forced gates must be [N, C_res, L, I]");
  }
  const int lp = pool_window(cfg);
  const T beta = static_cast<T>(iir_beta_for_pool(lp));

  EvalForward<T> out;
  out.gates = Tensor<T>::full({N, cfg.c_res, L, I}, T(1));

  Tensor<T> h = nn::relu_forward(nn::pointwise_forward(x_mag, w.front.w, w.front.b));
  for (int i = 0; i < I; ++i) {
    const auto& blk = w.blocks[static_cast<std::size_t>(i)];

    Tensor<T> gate({N, cfg.c_res, L}, T(1));
    if (forced_gates != nullptr) {
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < cfg.c_res; ++c)
          for (int l = 0; l < L; ++l) gate.at(n, c, l) = forced_gates->at(n, c, l, i);
    } else if (cfg.gating) {
      const auto& gw = w.gates[static_cast<std::size_t>(i)];
      Tensor<T> pooled = pooling == PoolingMode::Boxcar ? pool_moving_average(h, lp)
                                                        : detail::pool_iir_offline(h, beta);
      gate = binarize_hard(gate_scores(gw, pooled));
    }
    if (gated)
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < cfg.c_res; ++c)
          for (int l = 0; l < L; ++l) out.gates.at(n, c, l, i) = gate.at(n, c, l);

    Tensor<T> z = nn::pointwise_forward(h, blk.pw1.w, blk.pw1.b);
    z = nn::prelu_forward(z, blk.prelu1);
    z = nn::bn_eval_forward(z, blk.bn1_gamma, blk.bn1_beta, blk.bn1_stats);
    z = nn::depthwise_forward(z, blk.ddw.w, blk.ddw.b, blk.dilation, cfg.causal);
    z = nn::prelu_forward(z, blk.prelu2);
    z = nn::bn_eval_forward(z, blk.bn2_gamma, blk.bn2_beta, blk.bn2_stats);

    if (!gated) {
      Tensor<T> r = nn::pointwise_forward(z, blk.pw2.w, blk.pw2.b);
      for (std::size_t k = 0; k < h.numel(); ++k) h[k] += r[k];
    } else if (!skip_inactive) {
      Tensor<T> r = nn::pointwise_forward(z, blk.pw2.w, blk.pw2.b);
      for (int n = 0; n < N; ++n)
        for (int c = 0; c < cfg.c_res; ++c) {
          T* hp = &h.at(n, c, 0);
          const T* rp = &r.at(n, c, 0);
          const T* gp = &gate.at(n, c, 0);
          for (int l = 0; l < L; ++l) hp[l] += gp[l] * rp[l];
        }
    } else {
      // Genuine skipping: the pw2 dot product only runs where the gate is on.
      for (int n = 0; n < N; ++n)
        for (int o = 0; o < cfg.c_res; ++o) {
          T* hp = &h.at(n, o, 0);
          const T* gp = &gate.at(n, o, 0);
          for (int l = 0; l < L; ++l) {
            if (gp[l] == T(0)) continue;
            T acc = blk.pw2.b[static_cast<std::size_t>(o)];
            for (int c = 0; c < cfg.c_conv; ++c) acc += blk.pw2.w.at(o, c, 0) * z.at(n, c, l);
            hp[l] += acc;
          }
        }
    }

    const int stack = i / cfg.n_b;
    if ((i + 1) % cfg.n_b == 0 && stack < cfg.n_s - 1) h = nn::relu_forward(h);
  }
  Tensor<T> logits = nn::pointwise_forward(h, w.back.w, w.back.b);
  out.mask = nn::sigmoid_forward(logits);
  return out;
}

template <typename T>
EvalForward<T> forward_eval_masked(const ModelWeights<T>& w, const Tensor<T>& x_mag,
                                   PoolingMode pooling = PoolingMode::Boxcar,
                                   const Tensor<T>* forced_gates = nullptr) {
  return forward_eval(w, x_mag, pooling, false, forced_gates);
}

template <typename T>
EvalForward<T> forward_infer_offline(const ModelWeights<T>& w, const Tensor<T>& x_mag,
                                     PoolingMode pooling = PoolingMode::Iir,
                                     const Tensor<T>* forced_gates = nullptr) {
  return forward_eval(w, x_mag, pooling, true, forced_gates);
}

}  // namespace convfse
