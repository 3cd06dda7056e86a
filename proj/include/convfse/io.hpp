#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "convfse/dsp.hpp"
#include "convfse/model.hpp"
#include "convfse/runtime.hpp"
#include "convfse/training.hpp"

namespace convfse {

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

// --------------------------------------------------------------------------
// WAV codec: RIFF PCM-16, mono, 16 kHz only. Samples normalize to [-1, 1];
// writing inverts reading bit-exactly for in-range samples.
// --------------------------------------------------------------------------

inline Waveform wav_read(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("wav_read: cannot open " + path);
  auto read_u32 = [&in, &path]() {
    std::uint32_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 4)) throw DataError("wav_read: truncated " + path);
    return v;
  };
  auto read_u16 = [&in, &path]() {
    std::uint16_t v;
    if (!in.read(reinterpret_cast<char*>(&v), 2)) throw DataError("wav_read: truncated " + path);
    return v;
  };
  char tag[4];
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "RIFF", 4) != 0) throw DataError("wav_read: not a RIFF file: " + path);
  read_u32();
  in.read(tag, 4);
  if (!in || std::memcmp(tag, "WAVE", 4) != 0) throw DataError("wav_read: not a WAVE file: " + path);

  bool have_fmt = false;
  std::vector<std::int16_t> pcm;
  while (in.read(tag, 4)) {
    const std::uint32_t sz = read_u32();
    if (std::memcmp(tag, "fmt ", 4) == 0) {
      const std::uint16_t fmt = read_u16();
      const std::uint16_t channels = read_u16();
      const std::uint32_t rate = read_u32();
      read_u32();
      read_u16();
      const std::uint16_t bits = read_u16();
      if (sz > 16) in.seekg(sz - 16, std::ios::cur);
      if (fmt != 1) throw DataError("wav_read: only PCM supported: " + path);
      if (channels != 1) throw DataError("wav_read: only mono supported: " + path);
      if (rate != static_cast<std::uint32_t>(kSampleRate))
        throw DataError("wav_read: sample rate must be 16000 Hz, got " + std::to_string(rate) +
                        ": " + path);
      if (bits != 16) throw DataError("wav_read: only 16-bit PCM supported: " + path);
      have_fmt = true;
    } else if (std::memcmp(tag, "data", 4) == 0) {
      if (!have_fmt) throw DataError("wav_read: data chunk before fmt: " + path);
      pcm.resize(sz / 2);
      if (!in.read(reinterpret_cast<char*>(pcm.data()), static_cast<std::streamsize>(sz & ~1u)))
        throw DataError("wav_read: truncated data chunk: " + path);
      break;
    } else {
      in.seekg(sz + (sz & 1), std::ios::cur);
    }
  }
  if (pcm.empty()) throw DataError("wav_read: no samples: " + path);
  Waveform w;
  w.sample_rate = kSampleRate;
  w.samples.resize(pcm.size());
  for (std::size_t i = 0; i < pcm.size(); ++i)
    w.samples[i] = static_cast<float>(pcm[i]) / 32768.0f;
  return w;
}

// Returns the number of saturated samples (a warning is printed when > 0).
inline std::size_t wav_write(const std::string& path, const Waveform& w) {
  if (w.sample_rate != kSampleRate) throw DataError("wav_write: sample rate must be 16000 Hz");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("wav_write: cannot open " + path);
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(w.samples.size() * 2);
  auto put_u32 = [&out](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  auto put_u16 = [&out](std::uint16_t v) { out.write(reinterpret_cast<const char*>(&v), 2); };
  out.write("RIFF", 4);
  put_u32(36 + data_bytes);
  out.write("WAVE", 4);
  out.write("fmt ", 4);
  put_u32(16);
  put_u16(1);
  put_u16(1);
  put_u32(static_cast<std::uint32_t>(kSampleRate));
  put_u32(static_cast<std::uint32_t>(kSampleRate) * 2);
  put_u16(2);
  put_u16(16);
  out.write("data", 4);
  put_u32(data_bytes);
  std::size_t clipped = 0;
  for (float s : w.samples) {
    long v = std::lrint(static_cast<double>(s) * 32768.0);
    if (v > 32767) {
      v = 32767;
      clipped++;
    } else if (v < -32768) {
      v = -32768;
      clipped++;
    }
    const std::int16_t q = static_cast<std::int16_t>(v);
    out.write(reinterpret_cast<const char*>(&q), 2);
  }
  if (!out) throw DataError("wav_write: write failed: " + path);
  if (clipped > 0)
    std::cerr << "warning: wav_write saturated " << clipped << " sample(s) in " << path << "\n";
  return clipped;
}

// Paired corpus layout: identical filenames in the clean and noisy
// directories. Orphans on either side are an error.
inline Dataset dataset_load(const std::string& clean_dir, const std::string& noisy_dir) {
  namespace fs = std::filesystem;
  auto list_wavs = [](const std::string& dir) {
    if (!fs::is_directory(dir)) throw DataError("dataset_load: not a directory: " + dir);
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.is_regular_file() && e.path().extension() == ".wav")
        names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    return names;
  };
  const auto clean_names = list_wavs(clean_dir);
  const auto noisy_names = list_wavs(noisy_dir);
  std::string orphans;
  std::vector<std::string> matched;
  std::size_t ci = 0, ni = 0;
  while (ci < clean_names.size() || ni < noisy_names.size()) {
    if (ci < clean_names.size() && ni < noisy_names.size() && clean_names[ci] == noisy_names[ni]) {
      matched.push_back(clean_names[ci]);
      ci++;
      ni++;
    } else if (ni >= noisy_names.size() ||
               (ci < clean_names.size() && clean_names[ci] < noisy_names[ni])) {
      orphans += " clean/" + clean_names[ci++];
    } else {
      orphans += " noisy/" + noisy_names[ni++];
    }
  }
  if (!orphans.empty()) throw DataError("dataset_load: unpaired files:" + orphans);
  if (matched.empty()) throw DataError("dataset_load: no wav pairs found");
  Dataset ds;
  for (const auto& name : matched) {
    NoisyCleanPair p;
    p.clean = wav_read((fs::path(clean_dir) / name).string());
    p.noisy = wav_read((fs::path(noisy_dir) / name).string());
    if (p.clean.samples.size() != p.noisy.samples.size())
      throw DataError("dataset_load: length mismatch for " + name);
    ds.pairs.push_back(std::move(p));
  }
  return ds;
}

// --------------------------------------------------------------------------
// Weight files. Single binary with named float32 tensors so that a baseline
// file loads into a gated model (gate tensors simply absent). Layout, all
// little-endian:
//   "CFSE" | u32 version | config block | u32 tensor_count |
//   { u32 name_len | name | u32 ndim | u32 dims[] | f32 data[] }* | u32 crc32
// The CRC covers everything between the magic and itself.
// --------------------------------------------------------------------------

inline constexpr std::uint32_t kWeightsVersion = 1;

namespace detail {

inline std::uint32_t crc32(const std::uint8_t* data, std::size_t n) {
  static std::uint32_t table[256];
  static bool init = false;
  if (!init) {
    for (std::uint32_t i = 0; i < 256; ++i) {
      std::uint32_t c = i;
      for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xEDB88320u ^ (c >> 1) : c >> 1;
      table[i] = c;
    }
    init = true;
  }
  std::uint32_t c = 0xFFFFFFFFu;
  for (std::size_t i = 0; i < n; ++i) c = table[(c ^ data[i]) & 0xFF] ^ (c >> 8);
  return c ^ 0xFFFFFFFFu;
}

struct ByteWriter {
  std::vector<std::uint8_t> bytes;
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u8(std::uint8_t v) { raw(&v, 1); }
  void f32(float v) { raw(&v, 4); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  void tensor(const std::string& name, const Tensor<float>& t) {
    str(name);
    u32(static_cast<std::uint32_t>(t.ndim()));
    for (int i = 0; i < t.ndim(); ++i) u32(static_cast<std::uint32_t>(t.dim(i)));
    raw(t.data(), t.numel() * 4);
  }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
};

struct ByteReader {
  const std::uint8_t* p;
  std::size_t n;
  std::size_t pos = 0;
  void need(std::size_t k) const {
    if (pos + k > n) throw DataError("weights file: truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v;
    std::memcpy(&v, p + pos, 4);
    pos += 4;
    return v;
  }
  std::uint8_t u8() {
    need(1);
    return p[pos++];
  }
  float f32() {
    need(4);
    float v;
    std::memcpy(&v, p + pos, 4);
    pos += 4;
    return v;
  }
  std::string str() {
    const std::uint32_t len = u32();
    need(len);
    std::string s(reinterpret_cast<const char*>(p + pos), len);
    pos += len;
    return s;
  }
  Tensor<float> tensor() {
    const std::uint32_t ndim = u32();
    if (ndim < 1 || ndim > 4) throw DataError("weights file: bad tensor rank");
    std::vector<int> dims;
    for (std::uint32_t i = 0; i < ndim; ++i) dims.push_back(static_cast<int>(u32()));
    Tensor<float> t(dims);
    need(t.numel() * 4);
    std::memcpy(t.data(), p + pos, t.numel() * 4);
    pos += t.numel() * 4;
    return t;
  }
};

inline void write_config(ByteWriter& w, const ModelConfig& cfg, const StftConfig& stft,
                         bool folded) {
  w.u32(static_cast<std::uint32_t>(cfg.c_res));
  w.u32(static_cast<std::uint32_t>(cfg.c_conv));
  w.u32(static_cast<std::uint32_t>(cfg.c_gate));
  w.u32(static_cast<std::uint32_t>(cfg.kernel));
  w.u32(static_cast<std::uint32_t>(cfg.n_b));
  w.u32(static_cast<std::uint32_t>(cfg.n_s));
  w.u32(static_cast<std::uint32_t>(cfg.bins));
  w.u8(cfg.causal ? 1 : 0);
  w.u8(cfg.gating ? 1 : 0);
  w.u8(folded ? 1 : 0);
  w.u8(0);
  w.u32(static_cast<std::uint32_t>(cfg.l_pool));
  w.f32(cfg.phi_trgt);
  w.u32(static_cast<std::uint32_t>(stft.window_length));
  w.u32(static_cast<std::uint32_t>(stft.hop));
}

inline void read_config(ByteReader& r, ModelConfig& cfg, StftConfig& stft, bool& folded) {
  cfg.c_res = static_cast<int>(r.u32());
  cfg.c_conv = static_cast<int>(r.u32());
  cfg.c_gate = static_cast<int>(r.u32());
  cfg.kernel = static_cast<int>(r.u32());
  cfg.n_b = static_cast<int>(r.u32());
  cfg.n_s = static_cast<int>(r.u32());
  cfg.bins = static_cast<int>(r.u32());
  cfg.causal = r.u8() != 0;
  cfg.gating = r.u8() != 0;
  folded = r.u8() != 0;
  r.u8();
  cfg.l_pool = static_cast<int>(r.u32());
  cfg.phi_trgt = r.f32();
  stft.window_length = static_cast<int>(r.u32());
  stft.hop = static_cast<int>(r.u32());
}

using TensorTable = std::map<std::string, Tensor<float>>;

inline void write_file(const std::string& path, const ModelConfig& cfg, const StftConfig& stft,
                       bool folded, const std::vector<std::pair<std::string, const Tensor<float>*>>& tensors) {
  ByteWriter w;
  w.u32(kWeightsVersion);
  write_config(w, cfg, stft, folded);
  w.u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) w.tensor(name, *t);
  const std::uint32_t crc = crc32(w.bytes.data(), w.bytes.size());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("weights: cannot open " + path + " for writing");
  out.write("CFSE", 4);
  out.write(reinterpret_cast<const char*>(w.bytes.data()),
            static_cast<std::streamsize>(w.bytes.size()));
  out.write(reinterpret_cast<const char*>(&crc), 4);
  if (!out) throw DataError("weights: write failed: " + path);
}

struct RawWeightsFile {
  ModelConfig cfg;
  StftConfig stft;
  bool folded = false;
  TensorTable tensors;
};

inline RawWeightsFile read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("weights: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "CFSE", 4) != 0)
    throw DataError("weights: bad magic in " + path);
  const std::size_t body = bytes.size() - 8;
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (crc32(bytes.data() + 4, body) != stored_crc)
    throw DataError("weights: checksum mismatch in " + path);
  ByteReader r{bytes.data() + 4, body, 0};
  const std::uint32_t version = r.u32();
  if (version != kWeightsVersion)
    throw DataError("weights: unsupported version " + std::to_string(version));
  RawWeightsFile f;
  read_config(r, f.cfg, f.stft, f.folded);
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    if (f.tensors.count(name)) throw DataError("weights: duplicate tensor " + name);
    f.tensors.emplace(std::move(name), r.tensor());
  }
  return f;
}

inline Tensor<float> take_tensor(TensorTable& table, const std::string& name,
                                 const std::vector<int>& shape) {
  auto it = table.find(name);
  if (it == table.end()) throw DataError("weights: missing tensor " + name);
  if (it->second.shape() != shape)
    throw DataError("weights: shape mismatch for " + name + ": file has " +
                    Tensor<float>::shape_str(it->second.shape()) + ", expected " +
                    Tensor<float>::shape_str(shape));
  Tensor<float> t = std::move(it->second);
  table.erase(it);
  return t;
}

}  // namespace detail

inline void save_model(const std::string& path, const ModelWeights<float>& w,
                       const StftConfig& stft) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  std::vector<Tensor<float>> extra;  // batches counters, kept alive until write
  extra.reserve(w.blocks.size() * 2);
  tensors.push_back({"front.w", &w.front.w});
  tensors.push_back({"front.b", &w.front.b});
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    tensors.push_back({p + "pw1.w", &b.pw1.w});
    tensors.push_back({p + "pw1.b", &b.pw1.b});
    tensors.push_back({p + "prelu1", &b.prelu1});
    tensors.push_back({p + "bn1.gamma", &b.bn1_gamma});
    tensors.push_back({p + "bn1.beta", &b.bn1_beta});
    tensors.push_back({p + "bn1.running_mean", &b.bn1_stats.running_mean});
    tensors.push_back({p + "bn1.running_var", &b.bn1_stats.running_var});
    extra.push_back(Tensor<float>::full({1}, static_cast<float>(b.bn1_stats.batches)));
    tensors.push_back({p + "bn1.batches", &extra.back()});
    tensors.push_back({p + "ddw.w", &b.ddw.w});
    tensors.push_back({p + "ddw.b", &b.ddw.b});
    tensors.push_back({p + "prelu2", &b.prelu2});
    tensors.push_back({p + "bn2.gamma", &b.bn2_gamma});
    tensors.push_back({p + "bn2.beta", &b.bn2_beta});
    tensors.push_back({p + "bn2.running_mean", &b.bn2_stats.running_mean});
    tensors.push_back({p + "bn2.running_var", &b.bn2_stats.running_var});
    extra.push_back(Tensor<float>::full({1}, static_cast<float>(b.bn2_stats.batches)));
    tensors.push_back({p + "bn2.batches", &extra.back()});
    tensors.push_back({p + "pw2.w", &b.pw2.w});
    tensors.push_back({p + "pw2.b", &b.pw2.b});
  }
  for (std::size_t i = 0; i < w.gates.size(); ++i) {
    const auto& g = w.gates[i];
    const std::string p = "gate" + std::to_string(i) + ".";
    tensors.push_back({p + "pw_a.w", &g.pw_a.w});
    tensors.push_back({p + "pw_a.b", &g.pw_a.b});
    tensors.push_back({p + "pw_b.w", &g.pw_b.w});
    tensors.push_back({p + "pw_b.b", &g.pw_b.b});
  }
  tensors.push_back({"back.w", &w.back.w});
  tensors.push_back({"back.b", &w.back.b});
  detail::write_file(path, w.cfg, stft, false, tensors);
}

struct LoadedModel {
  ModelWeights<float> weights;
  StftConfig stft;
};

inline LoadedModel load_model(const std::string& path) {
  detail::RawWeightsFile f = detail::read_file(path);
  if (f.folded) throw DataError("weights: " + path + " holds folded inference weights");
  f.cfg.validate();
  LoadedModel out;
  out.stft = f.stft;
  ModelWeights<float>& w = out.weights;
  w.cfg = f.cfg;
  auto& t = f.tensors;
  w.front.w = detail::take_tensor(t, "front.w", {f.cfg.c_res, f.cfg.bins, 1});
  w.front.b = detail::take_tensor(t, "front.b", {f.cfg.c_res});
  for (int i = 0; i < f.cfg.blocks(); ++i) {
    BlockWeights<float> b;
    const std::string p = "block" + std::to_string(i) + ".";
    b.pw1.w = detail::take_tensor(t, p + "pw1.w", {f.cfg.c_conv, f.cfg.c_res, 1});
    b.pw1.b = detail::take_tensor(t, p + "pw1.b", {f.cfg.c_conv});
    b.prelu1 = detail::take_tensor(t, p + "prelu1", {f.cfg.c_conv});
    b.bn1_gamma = detail::take_tensor(t, p + "bn1.gamma", {f.cfg.c_conv});
    b.bn1_beta = detail::take_tensor(t, p + "bn1.beta", {f.cfg.c_conv});
    b.bn1_stats = BatchNormStats<float>(f.cfg.c_conv);
    b.bn1_stats.running_mean = detail::take_tensor(t, p + "bn1.running_mean", {f.cfg.c_conv});
    b.bn1_stats.running_var = detail::take_tensor(t, p + "bn1.running_var", {f.cfg.c_conv});
    b.bn1_stats.batches =
        static_cast<long long>(detail::take_tensor(t, p + "bn1.batches", {1})[0]);
    b.ddw.w = detail::take_tensor(t, p + "ddw.w", {f.cfg.c_conv, 1, f.cfg.kernel});
    b.ddw.b = detail::take_tensor(t, p + "ddw.b", {f.cfg.c_conv});
    b.prelu2 = detail::take_tensor(t, p + "prelu2", {f.cfg.c_conv});
    b.bn2_gamma = detail::take_tensor(t, p + "bn2.gamma", {f.cfg.c_conv});
    b.bn2_beta = detail::take_tensor(t, p + "bn2.beta", {f.cfg.c_conv});
    b.bn2_stats = BatchNormStats<float>(f.cfg.c_conv);
    b.bn2_stats.running_mean = detail::take_tensor(t, p + "bn2.running_mean", {f.cfg.c_conv});
    b.bn2_stats.running_var = detail::take_tensor(t, p + "bn2.running_var", {f.cfg.c_conv});
    b.bn2_stats.batches =
        static_cast<long long>(detail::take_tensor(t, p + "bn2.batches", {1})[0]);
    b.pw2.w = detail::take_tensor(t, p + "pw2.w", {f.cfg.c_res, f.cfg.c_conv, 1});
    b.pw2.b = detail::take_tensor(t, p + "pw2.b", {f.cfg.c_res});
    b.dilation = block_dilation(f.cfg, i);
    w.blocks.push_back(std::move(b));
  }
  if (f.cfg.gating) {
    for (int i = 0; i < f.cfg.blocks(); ++i) {
      GatingWeights<float> g;
      const std::string p = "gate" + std::to_string(i) + ".";
      g.pw_a.w = detail::take_tensor(t, p + "pw_a.w", {f.cfg.c_gate, f.cfg.c_res, 1});
      g.pw_a.b = detail::take_tensor(t, p + "pw_a.b", {f.cfg.c_gate});
      g.pw_b.w = detail::take_tensor(t, p + "pw_b.w", {f.cfg.c_res, f.cfg.c_gate, 1});
      g.pw_b.b = detail::take_tensor(t, p + "pw_b.b", {f.cfg.c_res});
      w.gates.push_back(std::move(g));
    }
  }
  w.back.w = detail::take_tensor(t, "back.w", {f.cfg.bins, f.cfg.c_res, 1});
  w.back.b = detail::take_tensor(t, "back.b", {f.cfg.bins});
  if (!t.empty()) throw DataError("weights: unexpected tensor " + t.begin()->first);
  return out;
}

inline void save_inference(const std::string& path, const InferenceWeights<float>& w,
                           const StftConfig& stft, const PruningPlan* plan = nullptr) {
  std::vector<std::pair<std::string, const Tensor<float>*>> tensors;
  std::vector<Tensor<float>> extra;
  extra.reserve(w.blocks.size() + 1);
  tensors.push_back({"front.w", &w.front.w});
  tensors.push_back({"front.b", &w.front.b});
  for (std::size_t i = 0; i < w.blocks.size(); ++i) {
    const auto& b = w.blocks[i];
    const std::string p = "block" + std::to_string(i) + ".";
    tensors.push_back({p + "pw1.w", &b.pw1.w});
    tensors.push_back({p + "pw1.b", &b.pw1.b});
    tensors.push_back({p + "prelu1", &b.prelu1});
    tensors.push_back({p + "ddw.w", &b.ddw.w});
    tensors.push_back({p + "ddw.b", &b.ddw.b});
    tensors.push_back({p + "ring_init", &b.ring_init});
    tensors.push_back({p + "prelu2", &b.prelu2});
    tensors.push_back({p + "pw2.w", &b.pw2.w});
    tensors.push_back({p + "pw2.b", &b.pw2.b});
  }
  for (std::size_t i = 0; i < w.gates.size(); ++i) {
    const auto& g = w.gates[i];
    const std::string p = "gate" + std::to_string(i) + ".";
    tensors.push_back({p + "pw_a.w", &g.pw_a.w});
    tensors.push_back({p + "pw_a.b", &g.pw_a.b});
    tensors.push_back({p + "pw_b.w", &g.pw_b.w});
    tensors.push_back({p + "pw_b.b", &g.pw_b.b});
  }
  tensors.push_back({"back.w", &w.back.w});
  tensors.push_back({"back.b", &w.back.b});
  if (plan != nullptr) {
    for (std::size_t i = 0; i < plan->blocks.size(); ++i) {
      Tensor<float> mode({static_cast<int>(plan->blocks[i].size())});
      for (std::size_t c = 0; c < plan->blocks[i].size(); ++c)
        mode[c] = static_cast<float>(static_cast<int>(plan->blocks[i][c]));
      extra.push_back(std::move(mode));
      tensors.push_back({"prune.block" + std::to_string(i) + ".mode", &extra.back()});
    }
  }
  detail::write_file(path, w.cfg, stft, true, tensors);
}

struct LoadedInference {
  InferenceWeights<float> weights;
  StftConfig stft;
  std::optional<PruningPlan> plan;
};

inline bool weights_file_is_folded(const std::string& path) {
  return detail::read_file(path).folded;
}

// Folded files load directly; unfolded model files are folded on the fly.
inline LoadedInference load_inference(const std::string& path) {
  detail::RawWeightsFile f = detail::read_file(path);
  LoadedInference out;
  if (!f.folded) {
    LoadedModel m = load_model(path);
    out.weights = fold_batchnorm(m.weights);
    out.stft = m.stft;
    return out;
  }
  f.cfg.validate();
  out.stft = f.stft;
  InferenceWeights<float>& w = out.weights;
  w.cfg = f.cfg;
  w.pool_len = pool_window(f.cfg);
  w.pool_beta = static_cast<float>(iir_beta_for_pool(w.pool_len));
  auto& t = f.tensors;
  w.front.w = detail::take_tensor(t, "front.w", {f.cfg.c_res, f.cfg.bins, 1});
  w.front.b = detail::take_tensor(t, "front.b", {f.cfg.c_res});
  for (int i = 0; i < f.cfg.blocks(); ++i) {
    FoldedBlock<float> b;
    const std::string p = "block" + std::to_string(i) + ".";
    b.pw1.w = detail::take_tensor(t, p + "pw1.w", {f.cfg.c_conv, f.cfg.c_res, 1});
    b.pw1.b = detail::take_tensor(t, p + "pw1.b", {f.cfg.c_conv});
    b.prelu1 = detail::take_tensor(t, p + "prelu1", {f.cfg.c_conv});
    b.ddw.w = detail::take_tensor(t, p + "ddw.w", {f.cfg.c_conv, 1, f.cfg.kernel});
    b.ddw.b = detail::take_tensor(t, p + "ddw.b", {f.cfg.c_conv});
    b.ring_init = detail::take_tensor(t, p + "ring_init", {f.cfg.c_conv});
    b.prelu2 = detail::take_tensor(t, p + "prelu2", {f.cfg.c_conv});
    b.pw2.w = detail::take_tensor(t, p + "pw2.w", {f.cfg.c_res, f.cfg.c_conv, 1});
    b.pw2.b = detail::take_tensor(t, p + "pw2.b", {f.cfg.c_res});
    b.dilation = block_dilation(f.cfg, i);
    w.blocks.push_back(std::move(b));
  }
  if (f.cfg.gating) {
    for (int i = 0; i < f.cfg.blocks(); ++i) {
      GatingWeights<float> g;
      const std::string p = "gate" + std::to_string(i) + ".";
      g.pw_a.w = detail::take_tensor(t, p + "pw_a.w", {f.cfg.c_gate, f.cfg.c_res, 1});
      g.pw_a.b = detail::take_tensor(t, p + "pw_a.b", {f.cfg.c_gate});
      g.pw_b.w = detail::take_tensor(t, p + "pw_b.w", {f.cfg.c_res, f.cfg.c_gate, 1});
      g.pw_b.b = detail::take_tensor(t, p + "pw_b.b", {f.cfg.c_res});
      w.gates.push_back(std::move(g));
    }
  }
  w.back.w = detail::take_tensor(t, "back.w", {f.cfg.bins, f.cfg.c_res, 1});
  w.back.b = detail::take_tensor(t, "back.b", {f.cfg.bins});
  if (t.count("prune.block0.mode")) {
    PruningPlan plan;
    for (int i = 0; i < f.cfg.blocks(); ++i) {
      Tensor<float> mode =
          detail::take_tensor(t, "prune.block" + std::to_string(i) + ".mode", {f.cfg.c_res});
      std::vector<ChannelMode> modes(static_cast<std::size_t>(f.cfg.c_res));
      for (int c = 0; c < f.cfg.c_res; ++c) {
        const int v = static_cast<int>(mode[static_cast<std::size_t>(c)]);
        if (v < 0 || v > 2) throw DataError("weights: invalid pruning mode value");
        modes[static_cast<std::size_t>(c)] = static_cast<ChannelMode>(v);
      }
      plan.blocks.push_back(std::move(modes));
    }
    out.plan = std::move(plan);
  }
  if (!t.empty()) throw DataError("weights: unexpected tensor " + t.begin()->first);
  return out;
}

// --------------------------------------------------------------------------
// Flat key-value run configuration. '#' starts a comment; unknown keys are
// rejected. Defaults reproduce the full-scale reference recipe.
// --------------------------------------------------------------------------

struct RunConfig {
  ModelConfig model;
  StftConfig stft;
  LossConfig loss;
  OptimizerConfig opt;
  BinarizeConfig binarize;
  double segment_seconds = 4.0;
  int finetune_epochs = 120;
  std::uint64_t seed = 1;
  int synth_pairs = 0;        // > 0 selects the synthetic dataset
  double synth_seconds = 4.0;
  std::string clean_dir;
  std::string noisy_dir;
};

inline RunConfig parse_run_config(const std::string& text) {
  RunConfig rc;
  std::map<std::string, std::string> kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    line_no++;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string val = trim(line.substr(eq + 1));
    if (key.empty() || val.empty())
      throw UsageError("config line " + std::to_string(line_no) + ": empty key or value");
    if (kv.count(key)) throw UsageError("config: duplicate key " + key);
    kv[key] = val;
  }

  auto take = [&kv](const std::string& key) -> std::optional<std::string> {
    auto it = kv.find(key);
    if (it == kv.end()) return std::nullopt;
    std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto geti = [&](const std::string& key, int def) {
    auto v = take(key);
    return v ? std::stoi(*v) : def;
  };
  auto getd = [&](const std::string& key, double def) {
    auto v = take(key);
    return v ? std::stod(*v) : def;
  };
  auto getb = [&](const std::string& key, bool def) {
    auto v = take(key);
    if (!v) return def;
    if (*v == "true" || *v == "1") return true;
    if (*v == "false" || *v == "0") return false;
    throw UsageError("config: boolean expected for " + key);
  };
  auto gets = [&](const std::string& key, std::string def) {
    auto v = take(key);
    return v ? *v : def;
  };

  rc.stft.window_length = geti("stft.window_length", 512);
  rc.stft.hop = geti("stft.hop", 256);
  rc.model.c_res = geti("model.c_res", 128);
  rc.model.c_conv = geti("model.c_conv", 256);
  rc.model.c_gate = geti("model.c_gate", 16);
  rc.model.kernel = geti("model.kernel", 3);
  rc.model.n_b = geti("model.n_b", 3);
  rc.model.n_s = geti("model.n_s", 3);
  rc.model.causal = getb("model.causal", false);
  rc.model.gating = getb("model.gating", false);
  rc.model.l_pool = geti("model.l_pool", 0);
  rc.model.phi_trgt = static_cast<float>(getd("model.phi_trgt", 0.25));
  rc.model.bins = rc.stft.window_length / 2 + 1;
  rc.loss.alpha = getd("loss.alpha", 0.3);
  rc.loss.c = getd("loss.c", 0.3);
  rc.loss.lambda_dcp = getd("loss.lambda_dcp", 1.0);
  rc.loss.phi_trgt = rc.model.phi_trgt;
  rc.opt.learning_rate = getd("opt.lr", 1e-3);
  rc.opt.weight_decay = getd("opt.weight_decay", 1e-5);
  rc.opt.batch_size = geti("opt.batch_size", 64);
  rc.opt.max_epochs = geti("opt.max_epochs", 400);
  rc.opt.patience_epochs = geti("opt.patience", 20);
  rc.opt.lr_decay = getd("opt.lr_decay", 0.5);
  rc.opt.decay_after_stale = geti("opt.decay_after_stale", 3);
  rc.opt.validate_every = geti("opt.validate_every", 2);
  rc.opt.beta1 = getd("opt.beta1", 0.9);
  rc.opt.beta2 = getd("opt.beta2", 0.999);
  rc.opt.eps = getd("opt.eps", 1e-8);
  const std::string mode = gets("binarize.mode", "superspike");
  if (mode == "sigmoid")
    rc.binarize.kind = BinarizeKind::SigmoidSurrogate;
  else if (mode == "superspike")
    rc.binarize.kind = BinarizeKind::SuperSpike;
  else if (mode == "concrete")
    rc.binarize.kind = BinarizeKind::BinaryConcrete;
  else
    throw UsageError("config: binarize.mode must be sigmoid | superspike | concrete");
  rc.binarize.tau = getd("binarize.tau", 1.0);
  rc.binarize.nu = getd("binarize.nu", 1.0);
  rc.binarize.lambda = getd("binarize.lambda", 2.0 / 3.0);
  rc.segment_seconds = getd("train.segment_seconds", 4.0);
  rc.finetune_epochs = geti("train.finetune_epochs", 120);
  rc.seed = static_cast<std::uint64_t>(std::stoull(gets("seed", "1")));
  rc.synth_pairs = geti("data.synth_pairs", 0);
  rc.synth_seconds = getd("data.synth_seconds", 4.0);
  rc.clean_dir = gets("data.clean_dir", "");
  rc.noisy_dir = gets("data.noisy_dir", "");

  if (!kv.empty()) throw UsageError("config: unknown key " + kv.begin()->first);
  rc.model.validate();
  rc.loss.validate();
  rc.opt.validate();
  rc.binarize.validate();
  validate_stft_config(rc.stft);
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

// --------------------------------------------------------------------------
// JSON reports
// --------------------------------------------------------------------------

inline nlohmann::json mac_report_json(const MacReport& r) {
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < r.counts.pw1.size(); ++i) {
    blocks.push_back({{"pw1", r.counts.pw1[i]},
                      {"ddw", r.counts.ddw[i]},
                      {"pw2", r.counts.pw2[i]},
                      {"realized_ratio", i < r.realized_ratio.size() ? r.realized_ratio[i] : 1.0}});
  }
  return nlohmann::json{{"frames", r.frames},
                        {"front", r.counts.front},
                        {"back", r.counts.back},
                        {"gating", r.counts.gating},
                        {"blocks", blocks},
                        {"total", r.counts.total()},
                        {"per_frame_total", r.per_frame()},
                        {"static_total", r.static_total},
                        {"reduction_percent", r.reduction_percent()}};
}

inline std::string history_jsonl(const std::vector<TrainRecord>& history) {
  std::string out;
  for (const auto& rec : history) {
    nlohmann::json j{{"epoch", rec.epoch},
                     {"train_loss", rec.train_loss},
                     {"lr", rec.lr},
                     {"realized_ratio", rec.realized_ratio},
                     {"improved", rec.improved}};
    if (std::isfinite(rec.val_loss)) j["val_loss"] = rec.val_loss;
    out += j.dump() + "\n";
  }
  return out;
}

inline nlohmann::json prune_report_json(const PruneReport& r) {
  return nlohmann::json{{"removed_per_block", r.removed_per_block},
                        {"always_on_per_block", r.always_on_per_block},
                        {"gated_per_block", r.gated_per_block},
                        {"param_floats_before", r.param_floats_before},
                        {"param_floats_after", r.param_floats_after},
                        {"storage_reduction_percent", r.storage_reduction_percent()}};
}

}  // namespace convfse
