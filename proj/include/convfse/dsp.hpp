#pragma once

#include <algorithm>
#include <cmath>
#include <complex>
#include <cstddef>
#include <utility>
#include <vector>

#include "convfse/errors.hpp"
#include "convfse/tensor.hpp"

namespace convfse {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr int kSampleRate = 16000;

struct Waveform {
  std::vector<float> samples;
  int sample_rate = kSampleRate;
};

enum class WindowKind { SqrtHannPeriodic };

struct StftConfig {
  int window_length = 512;
  int hop = 256;
  WindowKind window = WindowKind::SqrtHannPeriodic;

  int bins() const { return window_length / 2 + 1; }

  bool operator==(const StftConfig& o) const {
    return window_length == o.window_length && hop == o.hop && window == o.window;
  }
};

// Frame-major layout: data[l * bins + f]. Analysis/synthesis run in double;
// the model side consumes float magnitudes.
struct ComplexSpectrogram {
  int frames = 0;
  int bins = 0;
  std::vector<std::complex<double>> data;
  StftConfig config;

  std::complex<double>& at(int l, int f) { return data[static_cast<std::size_t>(l) * bins + f]; }
  const std::complex<double>& at(int l, int f) const {
    return data[static_cast<std::size_t>(l) * bins + f];
  }
};

namespace detail {

inline bool is_pow2(int n) { return n > 0 && (n & (n - 1)) == 0; }

// Iterative radix-2 FFT, in place. Inverse includes the 1/N scale.
inline void fft(std::vector<std::complex<double>>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
    const std::complex<double> wl(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (std::size_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wl;
      }
    }
  }
  if (inverse) {
    for (auto& x : a) x /= static_cast<double>(n);
  }
}

inline std::vector<double> make_window(const StftConfig& cfg) {
  std::vector<double> w(static_cast<std::size_t>(cfg.window_length));
  for (int n = 0; n < cfg.window_length; ++n) {
    const double hann = 0.5 * (1.0 - std::cos(2.0 * kPi * n / cfg.window_length));
    w[static_cast<std::size_t>(n)] = std::sqrt(hann);
  }
  return w;
}

// Reflection without edge repetition (numpy 'reflect'); degenerates to
// clamping for signals shorter than the pad.
inline std::size_t reflect_index(long long t, long long len) {
  if (len == 1) return 0;
  const long long period = 2 * (len - 1);
  long long m = t % period;
  if (m < 0) m += period;
  if (m >= len) m = period - m;
  return static_cast<std::size_t>(m);
}

}  // namespace detail

inline void validate_stft_config(const StftConfig& cfg) {
  if (cfg.window_length < 16 || !detail::is_pow2(cfg.window_length))
    throw UsageError("stft: window_length must be a power of two >= 16");
  if (cfg.hop < 1 || cfg.hop > cfg.window_length)
    throw UsageError("stft: hop must satisfy 1 <= hop <= window_length");
  // COLA: the overlapped analysis*synthesis product must be constant.
  const auto w = detail::make_window(cfg);
  const int N = cfg.window_length;
  std::vector<double> acc(static_cast<std::size_t>(cfg.hop), 0.0);
  for (int start = -N; start <= N; start += cfg.hop) {
    for (int n = 0; n < N; ++n) {
      const int p = start + n;
      if (p >= 0 && p < cfg.hop) acc[static_cast<std::size_t>(p)] += w[n] * w[n];
    }
  }
  for (int p = 0; p < cfg.hop; ++p) {
    if (std::abs(acc[static_cast<std::size_t>(p)] - acc[0]) > 1e-10 * acc[0])
      throw UsageError("stft: window/hop combination violates COLA");
  }
}

// Centered STFT with reflection padding of window_length/2 on both sides.
// Frame count is floor(len/hop) + 1; frame l is centered on sample l*hop.
inline ComplexSpectrogram stft(const Waveform& w, const StftConfig& cfg) {
  validate_stft_config(cfg);
  if (w.samples.empty()) throw DataError("stft: empty waveform");

  const int N = cfg.window_length;
  const int pad = N / 2;
  const long long len = static_cast<long long>(w.samples.size());
  const int frames = static_cast<int>(len / cfg.hop) + 1;
  const auto win = detail::make_window(cfg);

  ComplexSpectrogram S;
  S.frames = frames;
  S.bins = cfg.bins();
  S.config = cfg;
  S.data.resize(static_cast<std::size_t>(frames) * S.bins);

  std::vector<std::complex<double>> buf(static_cast<std::size_t>(N));
  for (int l = 0; l < frames; ++l) {
    const long long start = static_cast<long long>(l) * cfg.hop - pad;
    for (int n = 0; n < N; ++n) {
      const double x = w.samples[detail::reflect_index(start + n, len)];
      buf[static_cast<std::size_t>(n)] = {x * win[static_cast<std::size_t>(n)], 0.0};
    }
    detail::fft(buf, false);
    for (int f = 0; f < S.bins; ++f) S.at(l, f) = buf[static_cast<std::size_t>(f)];
  }
  return S;
}

// Weighted overlap-add synthesis. Returns frames*hop samples; callers crop
// to the original length. Exact inverse of stft in the interior.
inline Waveform istft(const ComplexSpectrogram& S) {
  validate_stft_config(S.config);
  if (S.frames < 1 || S.bins != S.config.bins())
    throw UsageError("istft: spectrogram/config mismatch");

  const int N = S.config.window_length;
  const int hop = S.config.hop;
  const int pad = N / 2;
  const auto win = detail::make_window(S.config);
  const std::size_t padded_len = static_cast<std::size_t>(S.frames - 1) * hop + N;

  std::vector<double> acc(padded_len, 0.0);
  std::vector<double> wsum(padded_len, 0.0);
  std::vector<std::complex<double>> buf(static_cast<std::size_t>(N));

  for (int l = 0; l < S.frames; ++l) {
    for (int f = 0; f < S.bins; ++f) buf[static_cast<std::size_t>(f)] = S.at(l, f);
    for (int f = S.bins; f < N; ++f) buf[static_cast<std::size_t>(f)] = std::conj(S.at(l, N - f));
    detail::fft(buf, true);
    const std::size_t base = static_cast<std::size_t>(l) * hop;
    for (int n = 0; n < N; ++n) {
      acc[base + n] += buf[static_cast<std::size_t>(n)].real() * win[static_cast<std::size_t>(n)];
      wsum[base + n] += win[static_cast<std::size_t>(n)] * win[static_cast<std::size_t>(n)];
    }
  }

  Waveform out;
  out.sample_rate = kSampleRate;
  const std::size_t out_len = static_cast<std::size_t>(S.frames) * hop;
  out.samples.resize(out_len);
  for (std::size_t i = 0; i < out_len; ++i) {
    const std::size_t p = i + static_cast<std::size_t>(pad);
    const double denom = (p < padded_len && wsum[p] > 1e-10) ? wsum[p] : 1.0;
    out.samples[i] = static_cast<float>((p < padded_len ? acc[p] : 0.0) / denom);
  }
  return out;
}

// S_hat(l,f) = X(l,f) * M(l,f), M real-valued in [0,1] (sigmoid output).
inline ComplexSpectrogram apply_mask(const ComplexSpectrogram& X, const Tensor<float>& mask) {
  if (mask.ndim() != 2 || mask.dim(0) != X.frames || mask.dim(1) != X.bins)
    throw ShapeError("apply_mask: mask must be [frames, bins] matching the spectrogram");
  for (std::size_t i = 0; i < mask.numel(); ++i) {
    const float m = mask[i];
    if (!(m >= -1e-6f && m <= 1.0f + 1e-6f))
      throw DataError("apply_mask: mask value outside [0, 1]");
  }
  ComplexSpectrogram out = X;
  for (int l = 0; l < X.frames; ++l)
    for (int f = 0; f < X.bins; ++f)
      out.at(l, f) = X.at(l, f) * static_cast<double>(mask.at(l, f));
  return out;
}

// Frame-by-frame overlap-add synthesis. Pushing frames in order and then
// finalizing produces exactly the istft() output for the same spectrogram:
// the per-sample accumulation order is identical.
class StreamingSynth {
 public:
  explicit StreamingSynth(StftConfig cfg) : cfg_(cfg), win_(detail::make_window(cfg)) {
    validate_stft_config(cfg);
  }

  // half_spectrum holds cfg.bins() values for one frame.
  void push_frame(const std::complex<double>* half_spectrum) {
    const int N = cfg_.window_length;
    const std::size_t base = static_cast<std::size_t>(frames_) * cfg_.hop;
    if (acc_.size() < base + static_cast<std::size_t>(N)) {
      acc_.resize(base + static_cast<std::size_t>(N), 0.0);
      wsum_.resize(base + static_cast<std::size_t>(N), 0.0);
    }
    std::vector<std::complex<double>> buf(static_cast<std::size_t>(N));
    for (int f = 0; f < cfg_.bins(); ++f) buf[static_cast<std::size_t>(f)] = half_spectrum[f];
    for (int f = cfg_.bins(); f < N; ++f)
      buf[static_cast<std::size_t>(f)] = std::conj(half_spectrum[N - f]);
    detail::fft(buf, true);
    for (int n = 0; n < N; ++n) {
      acc_[base + n] += buf[static_cast<std::size_t>(n)].real() * win_[static_cast<std::size_t>(n)];
      wsum_[base + n] += win_[static_cast<std::size_t>(n)] * win_[static_cast<std::size_t>(n)];
    }
    frames_++;
    // Samples before the next frame's start can no longer change.
    emit_until(static_cast<long long>(frames_) * cfg_.hop);
  }

  // Drains samples that are final so far.
  std::vector<float> pop() { return std::exchange(ready_, {}); }

  // Flushes the tail; total emitted length is frames * hop, matching istft.
  std::vector<float> finalize() {
    emit_until(static_cast<long long>(frames_) * cfg_.hop + cfg_.window_length / 2);
    return std::exchange(ready_, {});
  }

  int frames() const { return frames_; }

 private:
  void emit_until(long long padded_limit) {
    const int pad = cfg_.window_length / 2;
    const long long out_limit =
        std::min<long long>(padded_limit - pad, static_cast<long long>(frames_) * cfg_.hop);
    while (emitted_ < out_limit) {
      const std::size_t p = static_cast<std::size_t>(emitted_ + pad);
      const double denom = (p < wsum_.size() && wsum_[p] > 1e-10) ? wsum_[p] : 1.0;
      ready_.push_back(static_cast<float>((p < acc_.size() ? acc_[p] : 0.0) / denom));
      emitted_++;
    }
  }

  StftConfig cfg_;
  std::vector<double> win_;
  std::vector<double> acc_, wsum_;
  std::vector<float> ready_;
  long long emitted_ = 0;
  int frames_ = 0;
};

// Magnitude compression m -> m^c with phase preserved; zero maps to zero.
inline ComplexSpectrogram compress(const ComplexSpectrogram& S, double c) {
  if (!(c > 0.0 && c <= 1.0)) throw UsageError("compress: exponent must be in (0, 1]");
  ComplexSpectrogram out = S;
  for (auto& v : out.data) {
    const double m = std::abs(v);
    v = (m > 0.0) ? v * (std::pow(m, c) / m) : std::complex<double>(0.0, 0.0);
  }
  return out;
}

}  // namespace convfse
