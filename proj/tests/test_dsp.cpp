#include <catch2/catch.hpp>

#include <complex>
#include <thread>
#include <vector>

#include <convfse/dsp.hpp>
#include <convfse/rng.hpp>

using namespace convfse;

namespace {

Waveform random_wave(int n, std::uint64_t seed) {
  Rng rng(seed);
  Waveform w;
  w.samples.resize(static_cast<std::size_t>(n));
  for (auto& s : w.samples) s = static_cast<float>(rng.uniform(-0.5, 0.5));
  return w;
}

// Independent oracle: direct O(N^2) DFT of one windowed frame.
std::vector<std::complex<double>> direct_dft_frame(const std::vector<double>& frame, int bins) {
  const int N = static_cast<int>(frame.size());
  std::vector<std::complex<double>> out(static_cast<std::size_t>(bins));
  for (int k = 0; k < bins; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (int n = 0; n < N; ++n) {
      const double ang = -2.0 * kPi * k * n / N;
      acc += frame[static_cast<std::size_t>(n)] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[static_cast<std::size_t>(k)] = acc;
  }
  return out;
}

}  // namespace

TEST_CASE("stft defaults produce 257 bins", "[dsp]") {
  Waveform w = random_wave(4 * kSampleRate, 1);
  const ComplexSpectrogram S = stft(w, StftConfig{});
  REQUIRE(S.bins == 257);
  REQUIRE(S.frames == 4 * kSampleRate / 256 + 1);
}

TEST_CASE("stft of silence is zero", "[dsp]") {
  Waveform w;
  w.samples.assign(8000, 0.0f);
  const ComplexSpectrogram S = stft(w, StftConfig{});
  for (const auto& v : S.data) REQUIRE(std::abs(v) == 0.0);
}

TEST_CASE("stft rejects bad input and config", "[dsp]") {
  Waveform empty;
  REQUIRE_THROWS_AS(stft(empty, StftConfig{}), DataError);
  StftConfig bad;
  bad.window_length = 500;  // not a power of two
  REQUIRE_THROWS_AS(validate_stft_config(bad), UsageError);
  StftConfig no_cola;
  no_cola.window_length = 512;
  no_cola.hop = 384;  // sqrt-Hann^2 does not satisfy COLA at 75% hop
  REQUIRE_THROWS_AS(validate_stft_config(no_cola), UsageError);
  StftConfig big_hop;
  big_hop.hop = 1024;
  REQUIRE_THROWS_AS(validate_stft_config(big_hop), UsageError);
}

TEST_CASE("stft matches a direct DFT oracle on a steady frame", "[dsp]") {
  // Pure sinusoid centered on bin 20 (625 Hz at the default config).
  const StftConfig cfg;
  const int bin = 20;
  const double freq = static_cast<double>(bin) * kSampleRate / cfg.window_length;
  Waveform w;
  w.samples.resize(static_cast<std::size_t>(kSampleRate));
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    w.samples[i] = static_cast<float>(0.5 * std::sin(2.0 * kPi * freq * static_cast<double>(i) / kSampleRate));
  const ComplexSpectrogram S = stft(w, cfg);

  // Rebuild the exact windowed frame the implementation saw (interior frame 30)
  // and push it through the direct DFT.
  const int l = 30;
  const int pad = cfg.window_length / 2;
  const auto win = detail::make_window(cfg);
  std::vector<double> frame(static_cast<std::size_t>(cfg.window_length));
  for (int n = 0; n < cfg.window_length; ++n)
    frame[static_cast<std::size_t>(n)] =
        static_cast<double>(w.samples[static_cast<std::size_t>(l * cfg.hop - pad + n)]) *
        win[static_cast<std::size_t>(n)];
  const auto oracle = direct_dft_frame(frame, cfg.bins());

  double total = 0.0, peak_energy = 0.0;
  int peak = 0;
  for (int f = 0; f < cfg.bins(); ++f) {
    REQUIRE(std::abs(S.at(l, f) - oracle[static_cast<std::size_t>(f)]) < 1e-9 * cfg.window_length);
    const double e = std::norm(S.at(l, f));
    total += e;
    if (e > peak_energy) {
      peak_energy = e;
      peak = f;
    }
  }
  REQUIRE(peak == bin);
  // The sqrt-Hann analysis window leaks into the even neighbours: the oracle
  // puts ~81% of the frame energy in the center bin, not more.
  const double concentration = peak_energy / total;
  double oracle_total = 0.0;
  for (const auto& v : oracle) oracle_total += std::norm(v);
  REQUIRE(concentration == Approx(std::norm(oracle[bin]) / oracle_total).epsilon(1e-9));
  REQUIRE(concentration > 0.75);
}

TEST_CASE("istft round trip is exact in the interior", "[dsp]") {
  const StftConfig cfg;
  Waveform w = random_wave(kSampleRate, 7);
  const Waveform r = istft(stft(w, cfg));
  REQUIRE(r.samples.size() >= w.samples.size());
  double max_err = 0.0;
  for (std::size_t i = static_cast<std::size_t>(cfg.window_length);
       i < w.samples.size() - static_cast<std::size_t>(cfg.window_length); ++i)
    max_err = std::max(max_err, std::abs(static_cast<double>(r.samples[i]) - w.samples[i]));
  REQUIRE(max_err < 1e-6);
}

TEST_CASE("istft of a zero spectrogram is zero", "[dsp]") {
  Waveform w;
  w.samples.assign(8000, 0.25f);
  ComplexSpectrogram S = stft(w, StftConfig{});
  for (auto& v : S.data) v = 0.0;
  const Waveform r = istft(S);
  for (float s : r.samples) REQUIRE(s == 0.0f);
}

TEST_CASE("istft validates the spectrogram", "[dsp]") {
  Waveform w = random_wave(4000, 3);
  ComplexSpectrogram S = stft(w, StftConfig{});
  S.bins = 100;  // config mismatch
  REQUIRE_THROWS_AS(istft(S), UsageError);
}

TEST_CASE("stft is linear", "[dsp]") {
  const StftConfig cfg;
  Waveform w1 = random_wave(8000, 11);
  Waveform w2 = random_wave(8000, 12);
  const double a = 0.7, b = -1.3;
  Waveform mix;
  mix.samples.resize(w1.samples.size());
  for (std::size_t i = 0; i < mix.samples.size(); ++i)
    mix.samples[i] = static_cast<float>(a * w1.samples[i] + b * w2.samples[i]);
  const ComplexSpectrogram Sm = stft(mix, cfg);
  const ComplexSpectrogram S1 = stft(w1, cfg);
  const ComplexSpectrogram S2 = stft(w2, cfg);
  double max_err = 0.0;
  for (std::size_t i = 0; i < Sm.data.size(); ++i)
    max_err = std::max(max_err, std::abs(Sm.data[i] - (a * S1.data[i] + b * S2.data[i])));
  // float samples limit the mix construction; the transform itself is double
  REQUIRE(max_err < 1e-4);

  // linearity of the transform proper, double-exact: scaling a spectrogram
  Waveform half = w1;
  for (auto& s : half.samples) s *= 0.5f;
  const ComplexSpectrogram Sh = stft(half, cfg);
  max_err = 0.0;
  for (std::size_t i = 0; i < Sh.data.size(); ++i)
    max_err = std::max(max_err, std::abs(Sh.data[i] - 0.5 * S1.data[i]));
  REQUIRE(max_err < 1e-9);
}

TEST_CASE("apply_mask", "[dsp]") {
  Waveform w = random_wave(4000, 5);
  const ComplexSpectrogram X = stft(w, StftConfig{});

  Tensor<float> ones({X.frames, X.bins}, 1.0f);
  const ComplexSpectrogram same = apply_mask(X, ones);
  for (std::size_t i = 0; i < X.data.size(); ++i) REQUIRE(same.data[i] == X.data[i]);

  Tensor<float> zeros({X.frames, X.bins}, 0.0f);
  const ComplexSpectrogram nil = apply_mask(X, zeros);
  for (const auto& v : nil.data) REQUIRE(std::abs(v) == 0.0);

  ComplexSpectrogram one_bin = X;
  one_bin.at(0, 0) = {2.0, 2.0};
  Tensor<float> half({X.frames, X.bins}, 0.5f);
  const ComplexSpectrogram scaled = apply_mask(one_bin, half);
  REQUIRE(scaled.at(0, 0).real() == Approx(1.0));
  REQUIRE(scaled.at(0, 0).imag() == Approx(1.0));

  Tensor<float> wrong({X.frames, X.bins + 1}, 1.0f);
  REQUIRE_THROWS_AS(apply_mask(X, wrong), ShapeError);
  Tensor<float> out_of_range({X.frames, X.bins}, 1.5f);
  REQUIRE_THROWS_AS(apply_mask(X, out_of_range), DataError);
}

TEST_CASE("compress", "[dsp]") {
  ComplexSpectrogram S;
  S.frames = 1;
  S.bins = 3;
  S.config = StftConfig{};
  S.data = {{4.0, 0.0}, {0.0, 0.0}, {0.0, 0.0}};
  // magnitude 8 at phase pi/4
  S.data[2] = std::polar(8.0, kPi / 4.0);

  const ComplexSpectrogram c1 = compress(S, 1.0);
  for (std::size_t i = 0; i < S.data.size(); ++i)
    REQUIRE(std::abs(c1.data[i] - S.data[i]) < 1e-12);

  const ComplexSpectrogram c05 = compress(S, 0.5);
  REQUIRE(c05.data[0].real() == Approx(2.0));
  REQUIRE(c05.data[0].imag() == Approx(0.0).margin(1e-12));
  REQUIRE(std::abs(c05.data[1]) == 0.0);

  // polar-form oracle: m^c at unchanged phase
  const ComplexSpectrogram c13 = compress(S, 1.0 / 3.0);
  REQUIRE(std::abs(c13.data[2]) == Approx(2.0).epsilon(1e-12));
  REQUIRE(std::arg(c13.data[2]) == Approx(kPi / 4.0).epsilon(1e-12));

  REQUIRE_THROWS_AS(compress(S, 0.0), UsageError);
  REQUIRE_THROWS_AS(compress(S, -0.3), UsageError);
}

TEST_CASE("compress preserves magnitudes to |S|^c", "[dsp]") {
  Waveform w = random_wave(4000, 9);
  const ComplexSpectrogram S = stft(w, StftConfig{});
  const ComplexSpectrogram C = compress(S, 0.3);
  for (std::size_t i = 0; i < S.data.size(); ++i) {
    const double m = std::abs(S.data[i]);
    const double expect = m > 0.0 ? std::pow(m, 0.3) : 0.0;
    REQUIRE(std::abs(std::abs(C.data[i]) - expect) < 1e-9 * (1.0 + expect));
  }
}

TEST_CASE("streaming synthesis equals offline istft", "[dsp]") {
  const StftConfig cfg;
  Waveform w = random_wave(kSampleRate / 2, 21);
  const ComplexSpectrogram S = stft(w, cfg);
  const Waveform off = istft(S);

  StreamingSynth synth(cfg);
  std::vector<float> streamed;
  std::vector<std::complex<double>> frame(static_cast<std::size_t>(S.bins));
  for (int l = 0; l < S.frames; ++l) {
    for (int f = 0; f < S.bins; ++f) frame[static_cast<std::size_t>(f)] = S.at(l, f);
    synth.push_frame(frame.data());
    const auto chunk = synth.pop();
    streamed.insert(streamed.end(), chunk.begin(), chunk.end());
  }
  const auto tail = synth.finalize();
  streamed.insert(streamed.end(), tail.begin(), tail.end());

  REQUIRE(streamed.size() == off.samples.size());
  for (std::size_t i = 0; i < streamed.size(); ++i) REQUIRE(streamed[i] == off.samples[i]);
}

TEST_CASE("stft is safe to call concurrently", "[dsp]") {
  Waveform w = random_wave(8000, 33);
  const ComplexSpectrogram ref = stft(w, StftConfig{});
  std::vector<ComplexSpectrogram> results(4);
  std::vector<std::thread> threads;
  for (int t = 0; t < 4; ++t)
    threads.emplace_back([&, t] { results[static_cast<std::size_t>(t)] = stft(w, StftConfig{}); });
  for (auto& th : threads) th.join();
  for (const auto& r : results)
    for (std::size_t i = 0; i < ref.data.size(); ++i) REQUIRE(r.data[i] == ref.data[i]);
}
