#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "convfse/dsp.hpp"
#include "convfse/tensor.hpp"

namespace convfse {

inline constexpr double kSiSdrCapDb = 100.0;

// Scale-Invariant SDR in dB: project the estimate onto the reference,
// 10*log10(||a s||^2 / ||a s - s_hat||^2) with a = <s_hat, s>/||s||^2.
inline double si_sdr(std::span<const float> estimate, std::span<const float> reference) {
  if (estimate.size() != reference.size() || estimate.empty())
    throw ShapeError("si_sdr: signals must be non-empty and equal length");
  double ref_energy = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    ref_energy += static_cast<double>(reference[i]) * reference[i];
    dot += static_cast<double>(estimate[i]) * reference[i];
  }
  if (ref_energy <= 0.0) throw DataError("si_sdr: silent reference");
  const double a = dot / ref_energy;
  double target = 0.0, err = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double t = a * reference[i];
    const double e = t - estimate[i];
    target += t * t;
    err += e * e;
  }
  if (err <= 0.0 || 10.0 * std::log10(target / err) > kSiSdrCapDb) return kSiSdrCapDb;
  return 10.0 * std::log10(target / err);
}

inline double si_sdr(const Waveform& estimate, const Waveform& reference) {
  return si_sdr(std::span<const float>(estimate.samples), std::span<const float>(reference.samples));
}

// --------------------------------------------------------------------------
// Gate-mask statistics. Masks are [N, C_res, L, I] with binary entries.
// --------------------------------------------------------------------------

struct PruningStats {
  double global_ratio = 0.0;
  std::vector<double> per_block;                 // [I]
  std::vector<std::vector<double>> instantaneous;  // [I][L], mean over N and C
};

template <typename T>
PruningStats pruning_stats(const Tensor<T>& gates) {
  if (gates.ndim() != 4) throw ShapeError("pruning_stats: gate mask must be [N, C, L, I]");
  const int N = gates.dim(0), C = gates.dim(1), L = gates.dim(2), I = gates.dim(3);
  PruningStats st;
  st.per_block.assign(static_cast<std::size_t>(I), 0.0);
  st.instantaneous.assign(static_cast<std::size_t>(I),
                          std::vector<double>(static_cast<std::size_t>(L), 0.0));
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int l = 0; l < L; ++l)
        for (int i = 0; i < I; ++i)
          st.instantaneous[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)] +=
              static_cast<double>(gates.at(n, c, l, i));
  double global = 0.0;
  for (int i = 0; i < I; ++i) {
    double block = 0.0;
    for (int l = 0; l < L; ++l) {
      st.instantaneous[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)] /=
          static_cast<double>(N) * C;
      block += st.instantaneous[static_cast<std::size_t>(i)][static_cast<std::size_t>(l)];
    }
    st.per_block[static_cast<std::size_t>(i)] = block / L;
    global += st.per_block[static_cast<std::size_t>(i)];
  }
  st.global_ratio = global / I;
  return st;
}

// One block's channels-by-frames activity slice plus its summary ratios.
struct ActivityMap {
  int block_index = 0;
  int channels = 0;
  int frames = 0;
  std::vector<std::uint8_t> active;  // [channels][frames]
  std::vector<double> instantaneous_ratio;  // per frame
  double average_ratio = 0.0;

  std::uint8_t at(int c, int l) const {
    return active[static_cast<std::size_t>(c) * frames + l];
  }
};

template <typename T>
ActivityMap activity_map(const Tensor<T>& gates, int block_index) {
  if (gates.ndim() != 4) throw ShapeError("activity_map: gate mask must be [N, C, L, I]");
  if (block_index < 0 || block_index >= gates.dim(3))
    throw UsageError("activity_map: block index out of range");
  const int N = gates.dim(0), C = gates.dim(1), L = gates.dim(2);
  ActivityMap m;
  m.block_index = block_index;
  m.channels = C;
  m.frames = L;
  m.active.assign(static_cast<std::size_t>(C) * L, 0);
  m.instantaneous_ratio.assign(static_cast<std::size_t>(L), 0.0);
  for (int c = 0; c < C; ++c)
    for (int l = 0; l < L; ++l) {
      double v = 0.0;
      for (int n = 0; n < N; ++n) v += static_cast<double>(gates.at(n, c, l, block_index));
      const bool on = v / N >= 0.5;
      m.active[static_cast<std::size_t>(c) * L + l] = on ? 1 : 0;
      m.instantaneous_ratio[static_cast<std::size_t>(l)] += on ? 1.0 : 0.0;
    }
  for (int l = 0; l < L; ++l) {
    m.instantaneous_ratio[static_cast<std::size_t>(l)] /= C;
    m.average_ratio += m.instantaneous_ratio[static_cast<std::size_t>(l)];
  }
  m.average_ratio /= L;
  return m;
}

// CSV: header row "channel,f0,...,f{L-1}", one row per channel with 0/1 cells.
inline std::string activity_map_csv(const ActivityMap& m) {
  std::string out = "channel";
  for (int l = 0; l < m.frames; ++l) out += ",f" + std::to_string(l);
  out += "\n";
  for (int c = 0; c < m.channels; ++c) {
    out += std::to_string(c);
    for (int l = 0; l < m.frames; ++l) out += m.at(c, l) ? ",1" : ",0";
    out += "\n";
  }
  return out;
}

}  // namespace convfse
