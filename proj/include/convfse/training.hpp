#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include "convfse/dsp.hpp"
#include "convfse/model.hpp"

namespace convfse {

struct LossConfig {
  double alpha = 0.3;       // complex/magnitude blend
  double c = 0.3;           // compression exponent
  float phi_trgt = 0.25f;   // target pruning ratio
  double lambda_dcp = 1.0;  // weight of the pruning loss

  void validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw UsageError("loss: alpha must be in [0, 1]");
    if (!(c > 0.0 && c <= 1.0)) throw UsageError("loss: c must be in (0, 1]");
    if (!(phi_trgt >= 0.0f && phi_trgt <= 1.0f)) throw UsageError("loss: phi_trgt in [0, 1]");
    if (lambda_dcp < 0.0) throw UsageError("loss: lambda_dcp must be >= 0");
  }
};

struct OptimizerConfig {
  double learning_rate = 1e-3;
  double weight_decay = 1e-5;
  int batch_size = 64;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int max_epochs = 400;
  int patience_epochs = 20;    // stop after this many epochs without improvement
  double lr_decay = 0.5;       // after 3 stale validation rounds
  int decay_after_stale = 3;
  int validate_every = 2;      // epochs per validation round

  void validate() const {
    if (learning_rate <= 0 || batch_size < 1 || max_epochs < 1 || patience_epochs < 1 ||
        validate_every < 1 || decay_after_stale < 1)
      throw UsageError("optimizer: positive hyperparameters required");
  }
};

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

// alpha * sum |compress(S) - compress(S_hat)|^2 + (1-alpha) * sum (|S|^c - |S_hat|^c)^2
inline double loss_se(const ComplexSpectrogram& S, const ComplexSpectrogram& S_hat, double alpha,
                      double c) {
  if (S.frames != S_hat.frames || S.bins != S_hat.bins)
    throw ShapeError("loss_se: spectrogram shape mismatch");
  if (!(c > 0.0 && c <= 1.0)) throw UsageError("loss_se: c must be in (0, 1]");
  double complex_term = 0.0, mag_term = 0.0;
  for (std::size_t i = 0; i < S.data.size(); ++i) {
    const double a = std::abs(S.data[i]);
    const double b = std::abs(S_hat.data[i]);
    const double ac = a > 0.0 ? std::pow(a, c) : 0.0;
    const double bc = b > 0.0 ? std::pow(b, c) : 0.0;
    const std::complex<double> sc = a > 0.0 ? S.data[i] * (ac / a) : std::complex<double>(0.0);
    const std::complex<double> shc = b > 0.0 ? S_hat.data[i] * (bc / b) : std::complex<double>(0.0);
    complex_term += std::norm(sc - shc);
    const double dm = ac - bc;
    mag_term += dm * dm;
  }
  return alpha * complex_term + (1.0 - alpha) * mag_term;
}

// (1/C) * sum_c (mean over batch, time, blocks of G - phi)^2
template <typename T>
double loss_dcp(const Tensor<T>& gates, double phi) {
  if (gates.ndim() != 4) throw ShapeError("loss_dcp: gate mask must be [N, C, L, I]");
  const int N = gates.dim(0), C = gates.dim(1), L = gates.dim(2), I = gates.dim(3);
  const double M = static_cast<double>(N) * L * I;
  double acc = 0.0;
  for (int c = 0; c < C; ++c) {
    double mean = 0.0;
    for (int n = 0; n < N; ++n)
      for (int l = 0; l < L; ++l)
        for (int i = 0; i < I; ++i) mean += static_cast<double>(gates.at(n, c, l, i));
    mean = mean / M - phi;
    acc += mean * mean;
  }
  return acc / C;
}

// --------------------------------------------------------------------------
// Tape-side loss construction. For a real-valued mask M on fixed noisy
// spectra X, |S_hat| = |X| * M and the phase of S_hat equals the phase of X,
// so Eq-style spectral losses reduce to element-wise terms in
// p = (|X| * M)^c:
//   |S^c e^{j.th_S} - p e^{j.th_X}|^2 = p^2 - 2 p a^c cos(th_S - th_X) + a^2c
// --------------------------------------------------------------------------

template <typename T>
struct SpectralLossTerms {
  Tensor<T> x_mag;     // |X|, [N, F, L] (also the model input)
  Tensor<T> proj;      // a^c * cos(th_S - th_X), [N, F, L]
  Tensor<T> clean_c;   // a^c, [N, F, L]
  double const_term = 0.0;  // sum a^(2c)
};

template <typename T>
SpectralLossTerms<T> make_spectral_terms(const std::vector<ComplexSpectrogram>& noisy,
                                         const std::vector<ComplexSpectrogram>& clean, double c) {
  if (noisy.empty() || noisy.size() != clean.size())
    throw ShapeError("make_spectral_terms: need matching non-empty spectrogram batches");
  const int N = static_cast<int>(noisy.size());
  const int F = noisy[0].bins;
  const int L = noisy[0].frames;
  SpectralLossTerms<T> t;
  t.x_mag = Tensor<T>({N, F, L});
  t.proj = Tensor<T>({N, F, L});
  t.clean_c = Tensor<T>({N, F, L});
  for (int n = 0; n < N; ++n) {
    const auto& X = noisy[static_cast<std::size_t>(n)];
    const auto& S = clean[static_cast<std::size_t>(n)];
    if (X.frames != L || X.bins != F || S.frames != L || S.bins != F)
      throw ShapeError("make_spectral_terms: ragged batch");
    for (int l = 0; l < L; ++l)
      for (int f = 0; f < F; ++f) {
        const std::complex<double> xv = X.at(l, f);
        const std::complex<double> sv = S.at(l, f);
        const double xm = std::abs(xv);
        const double a = std::abs(sv);
        const double ac = a > 0.0 ? std::pow(a, c) : 0.0;
        double cosd = 0.0;
        if (xm > 0.0 && a > 0.0) {
          // cos(th_S - th_X) = Re(S * conj(X)) / (|S| |X|)
          cosd = (sv.real() * xv.real() + sv.imag() * xv.imag()) / (a * xm);
        }
        t.x_mag.at(n, f, l) = static_cast<T>(xm);
        t.proj.at(n, f, l) = static_cast<T>(ac * cosd);
        t.clean_c.at(n, f, l) = static_cast<T>(ac);
        t.const_term += ac * ac;
      }
  }
  return t;
}

// Batch-mean of the compressed spectral loss as a tape node; gradients flow into the
// mask only.
template <typename T>
Var<T> build_loss_se(Tape<T>& tape, Var<T> mask, const SpectralLossTerms<T>& terms, double alpha,
                     double c) {
  const int N = tape.value(mask).dim(0);
  Var<T> xmag = tape.leaf(terms.x_mag);
  Var<T> proj = tape.leaf(terms.proj);
  Var<T> clean_c = tape.leaf(terms.clean_c);
  Var<T> p = tape.pow_scalar(tape.mul(mask, xmag), static_cast<T>(c));
  // complex-domain term: sum p^2 - 2 sum p*proj + const
  Var<T> l1 = tape.add(tape.sum_all(tape.mul(p, p)),
                       tape.scale(tape.sum_all(tape.mul(p, proj)), T(-2)));
  l1 = tape.add_scalar(l1, static_cast<T>(terms.const_term));
  // magnitude-domain term: sum (p - a^c)^2
  Var<T> q = tape.add(p, tape.scale(clean_c, T(-1)));
  Var<T> l2 = tape.sum_all(tape.mul(q, q));
  Var<T> total = tape.add(tape.scale(l1, static_cast<T>(alpha)),
                          tape.scale(l2, static_cast<T>(1.0 - alpha)));
  return tape.scale(total, static_cast<T>(1.0 / N));
}

template <typename T>
Var<T> build_loss_dcp(Tape<T>& tape, const std::vector<Var<T>>& gates, double phi) {
  if (gates.empty()) throw UsageError("build_loss_dcp: no gate tensors");
  const T inv_blocks = static_cast<T>(1.0 / static_cast<double>(gates.size()));
  Var<T> acc;
  for (const Var<T>& g : gates) {
    Var<T> cm = tape.channel_mean(g);  // [C]
    acc = acc.valid() ? tape.add(acc, cm) : cm;
  }
  Var<T> dev = tape.add_scalar(tape.scale(acc, inv_blocks), static_cast<T>(-phi));
  return tape.mean_all(tape.mul(dev, dev));
}

// --------------------------------------------------------------------------
// Adam with decoupled weight decay.
// --------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  long long step = 0;
};

template <typename T>
void adam_update(Tensor<T>& w, const Tensor<T>& g, Tensor<T>& m, Tensor<T>& v, long long step,
                 double lr, const OptimizerConfig& opt) {
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < w.numel(); ++i) {
    const double gi = static_cast<double>(g[i]);
    const double mi = opt.beta1 * static_cast<double>(m[i]) + (1.0 - opt.beta1) * gi;
    const double vi = opt.beta2 * static_cast<double>(v[i]) + (1.0 - opt.beta2) * gi * gi;
    m[i] = static_cast<T>(mi);
    v[i] = static_cast<T>(vi);
    const double update = (mi / bc1) / (std::sqrt(vi / bc2) + opt.eps);
    double wi = static_cast<double>(w[i]) - lr * update;
    wi -= lr * opt.weight_decay * wi;  // decoupled decay
    w[i] = static_cast<T>(wi);
  }
}

template <typename T>
void adam_step(const std::vector<ParamBinding<T>>& bindings, const Tape<T>& tape,
               AdamState<T>& state, double lr, const OptimizerConfig& opt) {
  if (state.m.empty()) {
    for (const auto& b : bindings) {
      state.m.emplace_back(b.tensor->shape(), T(0));
      state.v.emplace_back(b.tensor->shape(), T(0));
    }
  }
  if (state.m.size() != bindings.size())
    throw ShapeError("adam_step: optimizer state does not match parameter set");
  state.step++;
  for (std::size_t i = 0; i < bindings.size(); ++i)
    adam_update(*bindings[i].tensor, tape.grad(bindings[i].var), state.m[i], state.v[i],
                state.step, lr, opt);
}

// --------------------------------------------------------------------------
// Validation scheduling: early stopping and LR decay on stale rounds.
// --------------------------------------------------------------------------

class EarlyStopper {
 public:
  EarlyStopper(int patience_epochs, int validate_every, int decay_after_stale)
      : patience_epochs_(patience_epochs),
        validate_every_(validate_every),
        decay_after_stale_(decay_after_stale) {}

  struct Decision {
    bool improved = false;
    bool decay_lr = false;
    bool stop = false;
  };

  Decision observe(double val_metric) {
    Decision d;
    if (val_metric < best_) {
      best_ = val_metric;
      stale_ = 0;
      d.improved = true;
    } else {
      stale_++;
      if (stale_ % decay_after_stale_ == 0) d.decay_lr = true;
      if (stale_ * validate_every_ >= patience_epochs_) d.stop = true;
    }
    return d;
  }

  double best() const { return best_; }

 private:
  int patience_epochs_;
  int validate_every_;
  int decay_after_stale_;
  double best_ = std::numeric_limits<double>::infinity();
  int stale_ = 0;
};

// --------------------------------------------------------------------------
// Synthetic desk-scale data: amplitude-modulated harmonic tones as the
// speech stand-in, filtered noise bursts as the interference, mixed at an
// SNR drawn from {0, 5, 10, 15} dB, then a random pair gain in [-6, +6] dB.
// --------------------------------------------------------------------------

struct NoisyCleanPair {
  Waveform clean;
  Waveform noisy;
  double snr_db = 0.0;
};

struct Dataset {
  std::vector<NoisyCleanPair> pairs;
};

namespace detail {

inline double rms(const std::vector<float>& x) {
  double acc = 0.0;
  for (float v : x) acc += static_cast<double>(v) * v;
  return std::sqrt(acc / std::max<std::size_t>(1, x.size()));
}

inline void scale_to_rms(std::vector<float>& x, double target) {
  const double r = rms(x);
  if (r <= 0.0) return;
  const double k = target / r;
  for (float& v : x) v = static_cast<float>(v * k);
}

}  // namespace detail

inline Dataset synth_dataset(int n_pairs, std::uint64_t seed, double seconds = 4.0) {
  if (n_pairs < 1) throw UsageError("synth_dataset: need at least one pair");
  Rng rng(seed);
  const int n = static_cast<int>(seconds * kSampleRate);
  const double dt = 1.0 / kSampleRate;
  Dataset ds;
  ds.pairs.reserve(static_cast<std::size_t>(n_pairs));
  static const int kSnrChoices[4] = {0, 5, 10, 15};

  for (int p = 0; p < n_pairs; ++p) {
    NoisyCleanPair pair;
    // Voiced tone: slow vibrato around f0 with decaying harmonics and a
    // syllabic amplitude envelope.
    const double f0 = rng.uniform(110.0, 280.0);
    const double vib_rate = rng.uniform(2.0, 5.0);
    const double vib_phase = rng.uniform(0.0, 2.0 * kPi);
    const double syl_rate = rng.uniform(1.5, 4.0);
    const double syl_phase = rng.uniform(0.0, 2.0 * kPi);
    double harm_phase[5];
    for (double& ph : harm_phase) ph = rng.uniform(0.0, 2.0 * kPi);

    std::vector<float> clean(static_cast<std::size_t>(n), 0.0f);
    double phase = 0.0;
    for (int i = 0; i < n; ++i) {
      const double t = i * dt;
      const double inst = f0 * (1.0 + 0.03 * std::sin(2.0 * kPi * vib_rate * t + vib_phase));
      phase += 2.0 * kPi * inst * dt;
      const double syl = 0.5 + 0.5 * std::sin(2.0 * kPi * syl_rate * t + syl_phase);
      const double env = 0.15 + 0.85 * syl * syl;
      double v = 0.0;
      for (int h = 1; h <= 5; ++h)
        v += std::sin(phase * h + harm_phase[h - 1]) / h;
      clean[static_cast<std::size_t>(i)] = static_cast<float>(env * v);
    }
    detail::scale_to_rms(clean, 0.1);

    // Filtered noise with slow burst modulation.
    const bool lowpass = rng.uniform() < 0.5;
    const double fc = lowpass ? rng.uniform(500.0, 4000.0) : rng.uniform(1000.0, 6000.0);
    const double a = 1.0 - std::exp(-2.0 * kPi * fc * dt);
    const double burst_rate = rng.uniform(0.5, 2.0);
    const double burst_phase = rng.uniform(0.0, 2.0 * kPi);
    std::vector<float> noise(static_cast<std::size_t>(n), 0.0f);
    double lp_state = 0.0;
    for (int i = 0; i < n; ++i) {
      const double white = rng.normal();
      lp_state += a * (white - lp_state);
      const double shaped = lowpass ? lp_state : white - lp_state;
      const double t = i * dt;
      const double b = 0.5 + 0.5 * std::sin(2.0 * kPi * burst_rate * t + burst_phase);
      noise[static_cast<std::size_t>(i)] = static_cast<float>(shaped * (0.35 + 0.65 * b * b));
    }
    detail::scale_to_rms(noise, 0.1);

    const int snr = kSnrChoices[rng.uniform_int(0, 3)];
    const double pc = detail::rms(clean);
    const double pn = detail::rms(noise);
    const double gain_n = pc / (pn * std::pow(10.0, snr / 20.0));

    std::vector<float> noisy(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
      noisy[static_cast<std::size_t>(i)] =
          clean[static_cast<std::size_t>(i)] +
          static_cast<float>(gain_n) * noise[static_cast<std::size_t>(i)];

    // Level augmentation: the same random gain on both sides of the pair.
    double g = std::pow(10.0, rng.uniform(-6.0, 6.0) / 20.0);
    float peak = 0.0f;
    for (int i = 0; i < n; ++i)
      peak = std::max(peak, std::abs(noisy[static_cast<std::size_t>(i)]) * static_cast<float>(g));
    if (peak > 0.99f) g *= 0.99 / peak;
    for (int i = 0; i < n; ++i) {
      clean[static_cast<std::size_t>(i)] = static_cast<float>(clean[static_cast<std::size_t>(i)] * g);
      noisy[static_cast<std::size_t>(i)] = static_cast<float>(noisy[static_cast<std::size_t>(i)] * g);
    }

    pair.clean.samples = std::move(clean);
    pair.noisy.samples = std::move(noisy);
    pair.snr_db = snr;
    ds.pairs.push_back(std::move(pair));
  }
  return ds;
}

// Aligned random crop; pairs shorter than the segment are used whole.
inline NoisyCleanPair crop_pair(const NoisyCleanPair& p, int segment_samples, Rng& rng) {
  const int len = static_cast<int>(p.clean.samples.size());
  if (segment_samples >= len) return p;
  const int off = static_cast<int>(rng.uniform_int(0, len - segment_samples));
  NoisyCleanPair out;
  out.snr_db = p.snr_db;
  out.clean.samples.assign(p.clean.samples.begin() + off,
                           p.clean.samples.begin() + off + segment_samples);
  out.noisy.samples.assign(p.noisy.samples.begin() + off,
                           p.noisy.samples.begin() + off + segment_samples);
  return out;
}

// --------------------------------------------------------------------------
// Training protocols
// --------------------------------------------------------------------------

struct TrainRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
  double realized_ratio = 0.0;  // mean eval-mode gate activity; 1.0 when ungated
  bool improved = false;
};

struct TrainResult {
  ModelWeights<float> weights;
  std::vector<TrainRecord> history;
};

struct TrainSetup {
  ModelConfig model;
  StftConfig stft;
  LossConfig loss;
  OptimizerConfig opt;
  BinarizeConfig binarize;
  double segment_seconds = 4.0;
  std::uint64_t seed = 1;
};

namespace detail {

struct SplitView {
  std::vector<const NoisyCleanPair*> train;
  std::vector<const NoisyCleanPair*> val;
};

inline SplitView split_dataset(const Dataset& ds) {
  if (ds.pairs.empty()) throw DataError("training: empty dataset");
  SplitView sv;
  const std::size_t n_val = std::max<std::size_t>(1, ds.pairs.size() / 6);
  for (std::size_t i = 0; i < ds.pairs.size(); ++i) {
    if (i < ds.pairs.size() - n_val)
      sv.train.push_back(&ds.pairs[i]);
    else
      sv.val.push_back(&ds.pairs[i]);
  }
  if (sv.train.empty()) sv.train = sv.val;
  return sv;
}

inline double validate_model(const ModelWeights<float>& w, const StftConfig& stft_cfg,
                             const std::vector<const NoisyCleanPair*>& val, const LossConfig& loss,
                             int segment_samples, double* realized_ratio) {
  double total = 0.0;
  double gate_sum = 0.0;
  std::size_t gate_count = 0;
  for (const NoisyCleanPair* p : val) {
    NoisyCleanPair seg = *p;
    const int len = static_cast<int>(seg.clean.samples.size());
    if (segment_samples < len) {
      const int off = (len - segment_samples) / 2;  // deterministic center crop
      seg.clean.samples.assign(p->clean.samples.begin() + off,
                               p->clean.samples.begin() + off + segment_samples);
      seg.noisy.samples.assign(p->noisy.samples.begin() + off,
                               p->noisy.samples.begin() + off + segment_samples);
    }
    const ComplexSpectrogram X = stft(seg.noisy, stft_cfg);
    const ComplexSpectrogram S = stft(seg.clean, stft_cfg);
    Tensor<float> xmag({1, X.bins, X.frames});
    for (int l = 0; l < X.frames; ++l)
      for (int f = 0; f < X.bins; ++f)
        xmag.at(0, f, l) = static_cast<float>(std::abs(X.at(l, f)));
    EvalForward<float> fw = forward_eval_masked(w, xmag, PoolingMode::Boxcar);
    Tensor<float> mask2d({X.frames, X.bins});
    for (int l = 0; l < X.frames; ++l)
      for (int f = 0; f < X.bins; ++f) mask2d.at(l, f) = fw.mask.at(0, f, l);
    total += loss_se(S, apply_mask(X, mask2d), loss.alpha, loss.c);
    if (w.cfg.gating) {
      for (std::size_t i = 0; i < fw.gates.numel(); ++i) gate_sum += fw.gates[i];
      gate_count += fw.gates.numel();
    }
  }
  if (realized_ratio != nullptr)
    *realized_ratio = w.cfg.gating && gate_count > 0 ? gate_sum / gate_count : 1.0;
  return total / static_cast<double>(val.size());
}

inline TrainResult run_training(ModelWeights<float> weights, const TrainSetup& setup,
                                const Dataset& dataset) {
  setup.model.validate();
  setup.loss.validate();
  setup.opt.validate();
  validate_stft_config(setup.stft);

  const SplitView split = split_dataset(dataset);
  Rng rng(setup.seed);
  AdamState<float> adam;
  EarlyStopper stopper(setup.opt.patience_epochs, setup.opt.validate_every,
                       setup.opt.decay_after_stale);
  double lr = setup.opt.learning_rate;
  const int segment_samples = static_cast<int>(setup.segment_seconds * kSampleRate);
  const bool gated = weights.cfg.gating;

  TrainResult result;
  result.weights = weights;  // best-so-far snapshot

  for (int epoch = 1; epoch <= setup.opt.max_epochs; ++epoch) {
    std::vector<std::size_t> order(split.train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);

    double epoch_loss = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(setup.opt.batch_size)) {
      const std::size_t stop =
          std::min(order.size(), start + static_cast<std::size_t>(setup.opt.batch_size));
      std::vector<ComplexSpectrogram> noisy, clean;
      for (std::size_t k = start; k < stop; ++k) {
        NoisyCleanPair seg = crop_pair(*split.train[order[k]], segment_samples, rng);
        noisy.push_back(stft(seg.noisy, setup.stft));
        clean.push_back(stft(seg.clean, setup.stft));
      }
      SpectralLossTerms<float> terms = make_spectral_terms<float>(noisy, clean, setup.loss.c);

      Tape<float> tape;
      ModelVars<float> mv = register_model(tape, weights);
      Var<float> x = tape.leaf(terms.x_mag);
      TrainForward<float> fw = forward_train(tape, mv, weights, x, true, setup.binarize, &rng);
      Var<float> loss = build_loss_se(tape, fw.mask, terms, setup.loss.alpha, setup.loss.c);
      if (gated && setup.loss.lambda_dcp > 0.0) {
        Var<float> dcp = build_loss_dcp(tape, fw.gates, setup.loss.phi_trgt);
        loss = tape.add(loss, tape.scale(dcp, static_cast<float>(setup.loss.lambda_dcp)));
      }
      const double loss_value = tape.scalar(loss);
      if (!std::isfinite(loss_value) || !tape.value(fw.mask).all_finite())
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch));
      tape.backward(loss);
      adam_step(mv.bindings, tape, adam, lr, setup.opt);
      epoch_loss += loss_value;
      batches++;
    }
    epoch_loss /= std::max(1, batches);

    TrainRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss;
    rec.lr = lr;
    rec.val_loss = std::numeric_limits<double>::quiet_NaN();
    rec.realized_ratio = gated ? 0.0 : 1.0;

    if (epoch % setup.opt.validate_every == 0) {
      double ratio = 1.0;
      rec.val_loss = validate_model(weights, setup.stft, split.val, setup.loss, segment_samples,
                                    &ratio);
      rec.realized_ratio = ratio;
      const EarlyStopper::Decision d = stopper.observe(rec.val_loss);
      rec.improved = d.improved;
      if (d.improved) {
        result.weights = weights;
      }
      if (d.decay_lr) lr *= setup.opt.lr_decay;
      result.history.push_back(rec);
      if (d.stop) break;
    } else {
      result.history.push_back(rec);
    }
  }
  if (result.history.empty() || !(stopper.best() < std::numeric_limits<double>::infinity()))
    result.weights = weights;  // never validated: return the last state
  return result;
}

}  // namespace detail

// Static baseline: gating disabled, minimize the spectral loss only.
inline TrainResult train_baseline(const TrainSetup& setup, const Dataset& dataset) {
  TrainSetup s = setup;
  s.model.gating = false;
  ModelWeights<float> w = init_weights<float>(s.model, s.seed);
  return detail::run_training(std::move(w), s, dataset);
}

// DynCP fine-tune: start from pre-trained baseline weights, fresh random
// gating weights, minimize loss_se + lambda_dcp * loss_dcp.
inline TrainResult finetune_dyncp(const ModelWeights<float>& baseline, const TrainSetup& setup,
                                  const Dataset& dataset) {
  TrainSetup s = setup;
  if (!baseline.cfg.compatible_backbone(s.model))
    throw UsageError("finetune_dyncp: baseline config does not match the requested model");
  ModelWeights<float> w = baseline;
  w.cfg = s.model;
  w.cfg.gating = true;
  s.model.gating = true;
  reinit_gates(w, s.seed + 0x9e3779b9ull);
  return detail::run_training(std::move(w), s, dataset);
}

}  // namespace convfse
