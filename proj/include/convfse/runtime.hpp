#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "convfse/dsp.hpp"
#include "convfse/model.hpp"

namespace convfse {

// --------------------------------------------------------------------------
// Batch-norm folding. Eval-mode BN is a per-channel affine map; since it sits
// between an activation and the next convolution, it folds into that
// convolution's weights:
//   ddw(bn1(x))[c] = sum_j (w[c,j]*a1[c]) x[...] + (b[c] + s1[c]*sum_j w[c,j])
//   pw2(bn2(z))[o] = sum_i (w[o,i]*a2[i]) z[i]  + (b[o] + sum_i w[o,i]*s2[i])
// with a = gamma/sqrt(var+eps), s = beta - gamma*mean/sqrt(var+eps).
// --------------------------------------------------------------------------

template <typename T>
struct FoldedBlock {
  ConvParam<T> pw1;
  Tensor<T> prelu1;
  ConvParam<T> ddw;  // bn1 folded in
  // Pre-BN value that maps to zero after bn1. The unfolded graph zero-pads
  // the DDW input in BN-output space, so an empty streaming history must be
  // primed with this value, not with zero.
  Tensor<T> ring_init;
  Tensor<T> prelu2;
  ConvParam<T> pw2;  // bn2 folded in
  int dilation = 1;
};

template <typename T>
struct InferenceWeights {
  ModelConfig cfg;
  ConvParam<T> front;
  ConvParam<T> back;
  std::vector<FoldedBlock<T>> blocks;
  std::vector<GatingWeights<T>> gates;
  int pool_len = 1;
  T pool_beta = T(1);
};

template <typename T>
InferenceWeights<T> fold_batchnorm(const ModelWeights<T>& w) {
  w.cfg.validate();
  InferenceWeights<T> out;
  out.cfg = w.cfg;
  out.front = w.front;
  out.back = w.back;
  out.gates = w.gates;
  out.pool_len = pool_window(w.cfg);
  out.pool_beta = static_cast<T>(iir_beta_for_pool(out.pool_len));

  for (const auto& blk : w.blocks) {
    if (blk.bn1_stats.batches == 0 || blk.bn2_stats.batches == 0)
      throw DataError("fold_batchnorm: running statistics never populated");
    FoldedBlock<T> fb;
    fb.pw1 = blk.pw1;
    fb.prelu1 = blk.prelu1;
    fb.prelu2 = blk.prelu2;
    fb.dilation = blk.dilation;

    const int C = w.cfg.c_conv;
    const int K = w.cfg.kernel;
    fb.ddw.w = Tensor<T>({C, 1, K});
    fb.ddw.b = Tensor<T>({C});
    fb.ring_init = Tensor<T>({C});
    for (int c = 0; c < C; ++c) {
      const double invstd =
          1.0 / std::sqrt(static_cast<double>(blk.bn1_stats.running_var[static_cast<std::size_t>(c)]) + kBnEps);
      const double a = static_cast<double>(blk.bn1_gamma[static_cast<std::size_t>(c)]) * invstd;
      const double s = static_cast<double>(blk.bn1_beta[static_cast<std::size_t>(c)]) -
                       static_cast<double>(blk.bn1_gamma[static_cast<std::size_t>(c)]) *
                           static_cast<double>(blk.bn1_stats.running_mean[static_cast<std::size_t>(c)]) * invstd;
      double wsum = 0.0;
      for (int j = 0; j < K; ++j) {
        const double wv = static_cast<double>(blk.ddw.w.at(c, 0, j));
        fb.ddw.w.at(c, 0, j) = static_cast<T>(wv * a);
        wsum += wv;
      }
      fb.ddw.b[static_cast<std::size_t>(c)] =
          static_cast<T>(static_cast<double>(blk.ddw.b[static_cast<std::size_t>(c)]) + s * wsum);
      fb.ring_init[static_cast<std::size_t>(c)] = static_cast<T>(a != 0.0 ? -s / a : 0.0);
    }

    const int Cr = w.cfg.c_res;
    fb.pw2.w = Tensor<T>({Cr, C, 1});
    fb.pw2.b = Tensor<T>({Cr});
    std::vector<double> a2(static_cast<std::size_t>(C)), s2(static_cast<std::size_t>(C));
    for (int i = 0; i < C; ++i) {
      const double invstd =
          1.0 / std::sqrt(static_cast<double>(blk.bn2_stats.running_var[static_cast<std::size_t>(i)]) + kBnEps);
      a2[static_cast<std::size_t>(i)] = static_cast<double>(blk.bn2_gamma[static_cast<std::size_t>(i)]) * invstd;
      s2[static_cast<std::size_t>(i)] = static_cast<double>(blk.bn2_beta[static_cast<std::size_t>(i)]) -
                                        static_cast<double>(blk.bn2_gamma[static_cast<std::size_t>(i)]) *
                                            static_cast<double>(blk.bn2_stats.running_mean[static_cast<std::size_t>(i)]) * invstd;
    }
    for (int o = 0; o < Cr; ++o) {
      double bias = static_cast<double>(blk.pw2.b[static_cast<std::size_t>(o)]);
      for (int i = 0; i < C; ++i) {
        const double wv = static_cast<double>(blk.pw2.w.at(o, i, 0));
        fb.pw2.w.at(o, i, 0) = static_cast<T>(wv * a2[static_cast<std::size_t>(i)]);
        bias += wv * s2[static_cast<std::size_t>(i)];
      }
      fb.pw2.b[static_cast<std::size_t>(o)] = static_cast<T>(bias);
    }
    out.blocks.push_back(std::move(fb));
  }
  return out;
}

// --------------------------------------------------------------------------
// MAC accounting. Only convolution multiply-accumulates are counted;
// activations, pooling, and folded batch norm are free, matching the MAC
// approximation the architecture is costed with.
// --------------------------------------------------------------------------

struct MacCounts {
  double front = 0.0;
  double back = 0.0;
  double gating = 0.0;
  std::vector<double> pw1, ddw, pw2;  // per block

  double blocks_total() const {
    double t = 0.0;
    for (double v : pw1) t += v;
    for (double v : ddw) t += v;
    for (double v : pw2) t += v;
    return t;
  }
  double total() const { return front + back + gating + blocks_total(); }
};

struct MacReport {
  std::uint64_t frames = 1;
  MacCounts counts;              // totals over `frames`
  double static_total = 0.0;     // ungated analytic count over the same frames
  std::vector<double> realized_ratio;  // mean active fraction per block

  double per_frame() const { return counts.total() / static_cast<double>(frames); }
  double reduction_percent() const {
    return static_total > 0.0 ? 100.0 * (1.0 - counts.total() / static_total) : 0.0;
  }
};

// Per-frame analytic counts. Without phi: the static (ungated) baseline.
// With phi: gating overhead plus the expected active fraction of pw2 rows.
inline MacReport count_macs_analytic(const ModelConfig& cfg, std::optional<double> phi = {}) {
  cfg.validate();
  if (phi && !(*phi >= 0.0 && *phi <= 1.0))
    throw UsageError("count_macs_analytic: phi must be in [0, 1]");
  MacReport r;
  r.frames = 1;
  const int I = cfg.blocks();
  r.counts.front = static_cast<double>(cfg.bins) * cfg.c_res;
  r.counts.back = static_cast<double>(cfg.c_res) * cfg.bins;
  r.counts.pw1.assign(static_cast<std::size_t>(I), static_cast<double>(cfg.c_res) * cfg.c_conv);
  r.counts.ddw.assign(static_cast<std::size_t>(I), static_cast<double>(cfg.c_conv) * cfg.kernel);
  const double active_rows = phi ? *phi * cfg.c_res : static_cast<double>(cfg.c_res);
  r.counts.pw2.assign(static_cast<std::size_t>(I), static_cast<double>(cfg.c_conv) * active_rows);
  if (phi)
    r.counts.gating = static_cast<double>(I) * (static_cast<double>(cfg.c_res) * cfg.c_gate +
                                                static_cast<double>(cfg.c_gate) * cfg.c_res);
  r.realized_ratio.assign(static_cast<std::size_t>(I), phi ? *phi : 1.0);
  // Static reference: same backbone without gating.
  MacCounts st;
  st.front = r.counts.front;
  st.back = r.counts.back;
  st.pw1 = r.counts.pw1;
  st.ddw = r.counts.ddw;
  st.pw2.assign(static_cast<std::size_t>(I), static_cast<double>(cfg.c_conv) * cfg.c_res);
  r.static_total = st.total();
  return r;
}

// --------------------------------------------------------------------------
// Static pruning plan: channels that never fired during calibration are
// removed outright (their pw2 row and gate output disappear); channels that
// are almost always on bypass the gate.
// --------------------------------------------------------------------------

enum class ChannelMode : std::uint8_t { Gated = 0, AlwaysOn = 1, Removed = 2 };

struct PruningPlan {
  std::vector<std::vector<ChannelMode>> blocks;  // [I][C_res]

  bool empty() const { return blocks.empty(); }
};

// --------------------------------------------------------------------------
// Frame-by-frame causal streaming with genuine filter skipping. One
// StreamRunner owns one stream's state; weights may be shared across
// runners.
// --------------------------------------------------------------------------

template <typename T>
class StreamRunner {
 public:
  StreamRunner(const InferenceWeights<T>& w, const PruningPlan* plan = nullptr)
      : w_(&w), plan_(plan) {
    w.cfg.validate();
    if (!w.cfg.causal)
      throw UsageError("streaming requires causal=true");
    if (w.cfg.gating && w.gates.size() != static_cast<std::size_t>(w.cfg.blocks()))
      throw UsageError("streaming: gating enabled but gate weights missing");
    if (plan_ != nullptr && plan_->blocks.size() != static_cast<std::size_t>(w.cfg.blocks()))
      throw UsageError("streaming: pruning plan does not match the model");
    const int I = w.cfg.blocks();
    blocks_.resize(static_cast<std::size_t>(I));
    for (int i = 0; i < I; ++i) {
      auto& bs = blocks_[static_cast<std::size_t>(i)];
      bs.ring_len = (w.cfg.kernel - 1) * w.blocks[static_cast<std::size_t>(i)].dilation + 1;
      bs.ring.resize(static_cast<std::size_t>(bs.ring_len) * w.cfg.c_conv);
      bs.iir.assign(static_cast<std::size_t>(w.cfg.c_res), T(0));
    }
    reset();
  }

  // Empty history == zero padding in the unfolded graph: rings are primed
  // with each channel's folded zero-equivalent.
  void reset() {
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      auto& bs = blocks_[i];
      const Tensor<T>& init = w_->blocks[i].ring_init;
      for (int slot = 0; slot < bs.ring_len; ++slot)
        for (int c = 0; c < w_->cfg.c_conv; ++c)
          bs.ring[static_cast<std::size_t>(slot) * w_->cfg.c_conv + c] =
              init[static_cast<std::size_t>(c)];
      std::fill(bs.iir.begin(), bs.iir.end(), T(0));
      bs.pos = 0;
    }
    reset_counters();
  }

  // x_mag: magnitude frame [F]. Fills out_mask [F] and, if requested, the
  // per-block gate vector (C_res per block, row-major by block).
  void process_frame(std::span<const T> x_mag, std::span<T> out_mask,
                     std::vector<std::uint8_t>* gate_out = nullptr) {
    const ModelConfig& cfg = w_->cfg;
    if (static_cast<int>(x_mag.size()) != cfg.bins || static_cast<int>(out_mask.size()) != cfg.bins)
      throw ShapeError("process_frame: frame width must equal F");

    const int Cr = cfg.c_res, Cc = cfg.c_conv, K = cfg.kernel, F = cfg.bins;
    std::vector<T> v(static_cast<std::size_t>(Cr));
    std::vector<T> z1(static_cast<std::size_t>(Cc));
    std::vector<T> z2(static_cast<std::size_t>(Cc));
    std::vector<T> pooled(static_cast<std::size_t>(Cr));
    std::vector<T> hidden(static_cast<std::size_t>(cfg.c_gate));
    std::vector<std::uint8_t> gate(static_cast<std::size_t>(Cr), 1);

    // Front-end: PW + ReLU.
    for (int o = 0; o < Cr; ++o) {
      T acc = w_->front.b[static_cast<std::size_t>(o)];
      for (int f = 0; f < F; ++f) acc += w_->front.w.at(o, f, 0) * x_mag[static_cast<std::size_t>(f)];
      v[static_cast<std::size_t>(o)] = acc > T(0) ? acc : T(0);
    }
    macs_.front += static_cast<std::uint64_t>(F) * Cr;

    for (int i = 0; i < cfg.blocks(); ++i) {
      const auto& fb = w_->blocks[static_cast<std::size_t>(i)];
      auto& bs = blocks_[static_cast<std::size_t>(i)];
      const std::vector<ChannelMode>* modes =
          plan_ != nullptr ? &plan_->blocks[static_cast<std::size_t>(i)] : nullptr;

      // Gate decision from the IIR-pooled block input.
      std::fill(gate.begin(), gate.end(), std::uint8_t(1));
      if (cfg.gating) {
        pool_iir<T>(bs.iir, std::span<const T>(v), w_->pool_beta, std::span<T>(pooled));
        const auto& gw = w_->gates[static_cast<std::size_t>(i)];
        for (int h = 0; h < cfg.c_gate; ++h) {
          T acc = gw.pw_a.b[static_cast<std::size_t>(h)];
          for (int c = 0; c < Cr; ++c) acc += gw.pw_a.w.at(h, c, 0) * pooled[static_cast<std::size_t>(c)];
          hidden[static_cast<std::size_t>(h)] = acc > T(0) ? acc : T(0);
        }
        macs_.gating += static_cast<std::uint64_t>(cfg.c_gate) * Cr;
        for (int o = 0; o < Cr; ++o) {
          const ChannelMode m = modes != nullptr ? (*modes)[static_cast<std::size_t>(o)] : ChannelMode::Gated;
          if (m == ChannelMode::Removed) {
            gate[static_cast<std::size_t>(o)] = 0;
            continue;
          }
          if (m == ChannelMode::AlwaysOn) {
            gate[static_cast<std::size_t>(o)] = 1;
            continue;
          }
          T acc = gw.pw_b.b[static_cast<std::size_t>(o)];
          for (int h = 0; h < cfg.c_gate; ++h)
            acc += gw.pw_b.w.at(o, h, 0) * hidden[static_cast<std::size_t>(h)];
          macs_.gating += static_cast<std::uint64_t>(cfg.c_gate);
          gate[static_cast<std::size_t>(o)] = acc >= T(0) ? 1 : 0;
        }
      }

      // pw1 + PReLU, always computed in full.
      for (int c = 0; c < Cc; ++c) {
        T acc = fb.pw1.b[static_cast<std::size_t>(c)];
        for (int r = 0; r < Cr; ++r) acc += fb.pw1.w.at(c, r, 0) * v[static_cast<std::size_t>(r)];
        const T slope = fb.prelu1[static_cast<std::size_t>(c)];
        z1[static_cast<std::size_t>(c)] = acc > T(0) ? acc : slope * acc;
      }
      macs_.block_pw1[static_cast<std::size_t>(i)] += static_cast<std::uint64_t>(Cr) * Cc;

      // Push into the dilation ring, then the causal DDW over its taps.
      T* slot = &bs.ring[static_cast<std::size_t>(bs.pos) * Cc];
      for (int c = 0; c < Cc; ++c) slot[c] = z1[static_cast<std::size_t>(c)];
      for (int c = 0; c < Cc; ++c) {
        T acc = fb.ddw.b[static_cast<std::size_t>(c)];
        for (int j = 0; j < K; ++j) {
          const int back = (K - 1 - j) * fb.dilation;  // back < ring_len by construction
          int idx = bs.pos - back;
          if (idx < 0) idx += bs.ring_len;
          acc += fb.ddw.w.at(c, 0, j) * bs.ring[static_cast<std::size_t>(idx) * Cc + c];
        }
        const T slope = fb.prelu2[static_cast<std::size_t>(c)];
        z2[static_cast<std::size_t>(c)] = acc > T(0) ? acc : slope * acc;
      }
      macs_.block_ddw[static_cast<std::size_t>(i)] += static_cast<std::uint64_t>(Cc) * K;
      bs.pos = (bs.pos + 1) % bs.ring_len;

      // pw2 only for active rows; inactive channels keep the residual value.
      int active = 0;
      for (int o = 0; o < Cr; ++o) {
        if (gate[static_cast<std::size_t>(o)] == 0) continue;
        T acc = fb.pw2.b[static_cast<std::size_t>(o)];
        for (int c = 0; c < Cc; ++c) acc += fb.pw2.w.at(o, c, 0) * z2[static_cast<std::size_t>(c)];
        v[static_cast<std::size_t>(o)] += acc;
        active++;
      }
      macs_.block_pw2[static_cast<std::size_t>(i)] += static_cast<std::uint64_t>(active) * Cc;
      for (int o = 0; o < Cr; ++o)
        active_frames_[static_cast<std::size_t>(i) * Cr + o] += gate[static_cast<std::size_t>(o)];

      if (gate_out != nullptr)
        gate_out->insert(gate_out->end(), gate.begin(), gate.end());

      const int stack = i / cfg.n_b;
      if ((i + 1) % cfg.n_b == 0 && stack < cfg.n_s - 1)
        for (auto& x : v) x = x > T(0) ? x : T(0);
    }

    for (int f = 0; f < F; ++f) {
      T acc = w_->back.w.at(f, 0, 0) * v[0];
      for (int r = 1; r < Cr; ++r) acc += w_->back.w.at(f, r, 0) * v[static_cast<std::size_t>(r)];
      acc += w_->back.b[static_cast<std::size_t>(f)];
      out_mask[static_cast<std::size_t>(f)] = surrogate::sigmoid(acc);
    }
    macs_.back += static_cast<std::uint64_t>(Cr) * F;
    frames_++;
  }

  std::uint64_t frames_processed() const { return frames_; }

  // Fraction of calibration frames each channel was active in, [I][C_res].
  Tensor<double> activity() const {
    const int I = w_->cfg.blocks(), Cr = w_->cfg.c_res;
    Tensor<double> a({I, Cr}, 0.0);
    if (frames_ == 0) return a;
    for (int i = 0; i < I; ++i)
      for (int c = 0; c < Cr; ++c)
        a.at(i, c) = static_cast<double>(active_frames_[static_cast<std::size_t>(i) * Cr + c]) /
                     static_cast<double>(frames_);
    return a;
  }

  MacReport report() const {
    MacReport r;
    r.frames = frames_ == 0 ? 1 : frames_;
    const int I = w_->cfg.blocks();
    r.counts.front = static_cast<double>(macs_.front);
    r.counts.back = static_cast<double>(macs_.back);
    r.counts.gating = static_cast<double>(macs_.gating);
    r.counts.pw1.resize(static_cast<std::size_t>(I));
    r.counts.ddw.resize(static_cast<std::size_t>(I));
    r.counts.pw2.resize(static_cast<std::size_t>(I));
    r.realized_ratio.resize(static_cast<std::size_t>(I));
    const Tensor<double> act = activity();
    for (int i = 0; i < I; ++i) {
      r.counts.pw1[static_cast<std::size_t>(i)] = static_cast<double>(macs_.block_pw1[static_cast<std::size_t>(i)]);
      r.counts.ddw[static_cast<std::size_t>(i)] = static_cast<double>(macs_.block_ddw[static_cast<std::size_t>(i)]);
      r.counts.pw2[static_cast<std::size_t>(i)] = static_cast<double>(macs_.block_pw2[static_cast<std::size_t>(i)]);
      double mean = 0.0;
      for (int c = 0; c < w_->cfg.c_res; ++c) mean += act.at(i, c);
      r.realized_ratio[static_cast<std::size_t>(i)] = mean / w_->cfg.c_res;
    }
    r.static_total = count_macs_analytic(w_->cfg).counts.total() * static_cast<double>(r.frames);
    return r;
  }

 private:
  struct BlockState {
    std::vector<T> ring;  // [ring_len][C_conv]
    std::vector<T> iir;   // [C_res]
    int ring_len = 1;
    int pos = 0;
  };

  struct Counters {
    std::uint64_t front = 0, back = 0, gating = 0;
    std::vector<std::uint64_t> block_pw1, block_ddw, block_pw2;
  };

  void reset_counters() {
    const int I = w_->cfg.blocks();
    macs_ = Counters{};
    macs_.block_pw1.assign(static_cast<std::size_t>(I), 0);
    macs_.block_ddw.assign(static_cast<std::size_t>(I), 0);
    macs_.block_pw2.assign(static_cast<std::size_t>(I), 0);
    active_frames_.assign(static_cast<std::size_t>(I) * w_->cfg.c_res, 0);
    frames_ = 0;
  }

  const InferenceWeights<T>* w_;
  const PruningPlan* plan_;
  std::vector<BlockState> blocks_;
  Counters macs_;
  std::vector<std::uint64_t> active_frames_;
  std::uint64_t frames_ = 0;
};

// --------------------------------------------------------------------------
// Whole-utterance streaming: frame the input exactly like the offline STFT,
// run the stateful per-frame model, and synthesize with streaming
// overlap-add.
// --------------------------------------------------------------------------

struct StreamOutput {
  Waveform enhanced;
  Tensor<float> masks;         // [frames, bins]
  Tensor<float> gates;         // [1, C_res, frames, I]
  MacReport macs;
};

template <typename T>
StreamOutput stream_enhance(const InferenceWeights<T>& w, const Waveform& input,
                            const StftConfig& stft_cfg, const PruningPlan* plan = nullptr) {
  if (stft_cfg.bins() != w.cfg.bins)
    throw UsageError("stream_enhance: STFT bins do not match the model");
  StreamRunner<T> runner(w, plan);
  const ComplexSpectrogram X = stft(input, stft_cfg);
  StreamingSynth synth(stft_cfg);

  StreamOutput out;
  out.masks = Tensor<float>({X.frames, X.bins});
  out.gates = Tensor<float>({1, w.cfg.c_res, X.frames, w.cfg.blocks()}, 1.0f);
  std::vector<T> xmag(static_cast<std::size_t>(X.bins));
  std::vector<T> mask(static_cast<std::size_t>(X.bins));
  std::vector<std::complex<double>> frame(static_cast<std::size_t>(X.bins));
  std::vector<std::uint8_t> gates;
  out.enhanced.samples.reserve(input.samples.size());

  for (int l = 0; l < X.frames; ++l) {
    for (int f = 0; f < X.bins; ++f) xmag[static_cast<std::size_t>(f)] = static_cast<T>(std::abs(X.at(l, f)));
    gates.clear();
    runner.process_frame(xmag, mask, &gates);
    for (int f = 0; f < X.bins; ++f) {
      out.masks.at(l, f) = static_cast<float>(mask[static_cast<std::size_t>(f)]);
      frame[static_cast<std::size_t>(f)] = X.at(l, f) * static_cast<double>(mask[static_cast<std::size_t>(f)]);
    }
    for (int i = 0; i < w.cfg.blocks(); ++i)
      for (int c = 0; c < w.cfg.c_res; ++c)
        out.gates.at(0, c, l, i) = static_cast<float>(gates[static_cast<std::size_t>(i) * w.cfg.c_res + c]);
    synth.push_frame(frame.data());
    auto chunk = synth.pop();
    out.enhanced.samples.insert(out.enhanced.samples.end(), chunk.begin(), chunk.end());
  }
  auto tail = synth.finalize();
  out.enhanced.samples.insert(out.enhanced.samples.end(), tail.begin(), tail.end());
  if (out.enhanced.samples.size() > input.samples.size())
    out.enhanced.samples.resize(input.samples.size());
  out.macs = runner.report();
  return out;
}

// --------------------------------------------------------------------------
// Static pruning from calibration activity.
// --------------------------------------------------------------------------

struct PruneOptions {
  double never_active_below = 0.01;  // volatile-channel heuristic low threshold
  double always_active_above = 0.99;
  bool heuristic = true;  // false: only channels with exactly zero activity are removed
};

struct PruneReport {
  std::vector<int> removed_per_block;
  std::vector<int> always_on_per_block;
  std::vector<int> gated_per_block;
  std::uint64_t param_floats_before = 0;
  std::uint64_t param_floats_after = 0;

  double storage_reduction_percent() const {
    return param_floats_before == 0
               ? 0.0
               : 100.0 * (1.0 - static_cast<double>(param_floats_after) /
                                    static_cast<double>(param_floats_before));
  }
};

template <typename T>
struct PrunedModel {
  InferenceWeights<T> weights;
  PruningPlan plan;
  PruneReport report;
};

// activity: [I][C_res] fraction of calibration frames each channel fired in.
template <typename T>
PrunedModel<T> static_prune(const InferenceWeights<T>& w, const Tensor<double>& activity,
                            std::uint64_t calibration_frames, const PruneOptions& opt = {}) {
  if (!w.cfg.gating) throw UsageError("static_prune: model has no gating to calibrate");
  if (calibration_frames == 0) throw DataError("static_prune: empty calibration run");
  const int I = w.cfg.blocks(), Cr = w.cfg.c_res;
  if (activity.ndim() != 2 || activity.dim(0) != I || activity.dim(1) != Cr)
    throw ShapeError("static_prune: activity must be [blocks, C_res]");

  PrunedModel<T> out;
  out.weights = w;
  out.plan.blocks.assign(static_cast<std::size_t>(I), std::vector<ChannelMode>(static_cast<std::size_t>(Cr), ChannelMode::Gated));
  out.report.removed_per_block.assign(static_cast<std::size_t>(I), 0);
  out.report.always_on_per_block.assign(static_cast<std::size_t>(I), 0);
  out.report.gated_per_block.assign(static_cast<std::size_t>(I), 0);

  std::uint64_t before = 0, after = 0;
  auto full_count = [&](const InferenceWeights<T>& iw) {
    std::uint64_t n = iw.front.w.numel() + iw.front.b.numel() + iw.back.w.numel() + iw.back.b.numel();
    for (const auto& b : iw.blocks)
      n += b.pw1.w.numel() + b.pw1.b.numel() + b.prelu1.numel() + b.ddw.w.numel() +
           b.ddw.b.numel() + b.prelu2.numel() + b.pw2.w.numel() + b.pw2.b.numel();
    for (const auto& g : iw.gates)
      n += g.pw_a.w.numel() + g.pw_a.b.numel() + g.pw_b.w.numel() + g.pw_b.b.numel();
    return n;
  };
  before = full_count(w);
  after = before;

  for (int i = 0; i < I; ++i) {
    for (int c = 0; c < Cr; ++c) {
      const double a = activity.at(i, c);
      ChannelMode m = ChannelMode::Gated;
      if (a == 0.0 || (opt.heuristic && a < opt.never_active_below))
        m = ChannelMode::Removed;
      else if (opt.heuristic && a > opt.always_active_above)
        m = ChannelMode::AlwaysOn;
      out.plan.blocks[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = m;
      if (m == ChannelMode::Removed) {
        out.report.removed_per_block[static_cast<std::size_t>(i)]++;
        // pw2 row and gate output row go away entirely.
        for (int cc = 0; cc < w.cfg.c_conv; ++cc)
          out.weights.blocks[static_cast<std::size_t>(i)].pw2.w.at(c, cc, 0) = T(0);
        out.weights.blocks[static_cast<std::size_t>(i)].pw2.b[static_cast<std::size_t>(c)] = T(0);
        after -= static_cast<std::uint64_t>(w.cfg.c_conv) + 1;
        for (int h = 0; h < w.cfg.c_gate; ++h)
          out.weights.gates[static_cast<std::size_t>(i)].pw_b.w.at(c, h, 0) = T(0);
        out.weights.gates[static_cast<std::size_t>(i)].pw_b.b[static_cast<std::size_t>(c)] = T(0);
        after -= static_cast<std::uint64_t>(w.cfg.c_gate) + 1;
      } else if (m == ChannelMode::AlwaysOn) {
        out.report.always_on_per_block[static_cast<std::size_t>(i)]++;
        // The gate never has to predict this channel.
        for (int h = 0; h < w.cfg.c_gate; ++h)
          out.weights.gates[static_cast<std::size_t>(i)].pw_b.w.at(c, h, 0) = T(0);
        out.weights.gates[static_cast<std::size_t>(i)].pw_b.b[static_cast<std::size_t>(c)] = T(0);
        after -= static_cast<std::uint64_t>(w.cfg.c_gate) + 1;
      } else {
        out.report.gated_per_block[static_cast<std::size_t>(i)]++;
      }
    }
  }
  out.report.param_floats_before = before;
  out.report.param_floats_after = after;
  return out;
}

}  // namespace convfse
