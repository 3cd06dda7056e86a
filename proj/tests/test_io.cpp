#include <catch2/catch.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <unistd.h>

#include <convfse/io.hpp>

using namespace convfse;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("convfse_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

std::vector<std::uint8_t> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ModelConfig small_cfg(bool gating) {
  ModelConfig cfg;
  cfg.c_res = 6;
  cfg.c_conv = 10;
  cfg.c_gate = 3;
  cfg.kernel = 3;
  cfg.n_b = 2;
  cfg.n_s = 1;
  cfg.bins = 17;
  cfg.causal = true;
  cfg.gating = gating;
  return cfg;
}

}  // namespace

TEST_CASE("wav write/read round trip", "[io]") {
  TempDir tmp;
  Rng rng(1);
  Waveform w;
  w.samples.resize(4000);
  for (auto& s : w.samples) s = static_cast<float>(rng.uniform(-0.9, 0.9));
  REQUIRE(wav_write(tmp.file("a.wav"), w) == 0);
  const Waveform r = wav_read(tmp.file("a.wav"));
  REQUIRE(r.samples.size() == w.samples.size());
  for (std::size_t i = 0; i < w.samples.size(); ++i)
    REQUIRE(std::abs(r.samples[i] - w.samples[i]) <= 1.0f / 32768.0f);

  // writing what was read reproduces the file byte for byte
  REQUIRE(wav_write(tmp.file("b.wav"), r) == 0);
  REQUIRE(slurp(tmp.file("a.wav")) == slurp(tmp.file("b.wav")));
}

TEST_CASE("wav rejects wrong formats", "[io]") {
  TempDir tmp;
  // craft a 44.1 kHz header
  Waveform w;
  w.samples.assign(100, 0.1f);
  wav_write(tmp.file("ok.wav"), w);
  auto bytes = slurp(tmp.file("ok.wav"));
  const std::uint32_t rate = 44100;
  std::memcpy(bytes.data() + 24, &rate, 4);
  std::ofstream out(tmp.file("44k.wav"), std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  REQUIRE_THROWS_AS(wav_read(tmp.file("44k.wav")), DataError);

  REQUIRE_THROWS_AS(wav_read(tmp.file("missing.wav")), DataError);
  std::ofstream junk(tmp.file("junk.wav"), std::ios::binary);
  junk << "not a wav";
  junk.close();
  REQUIRE_THROWS_AS(wav_read(tmp.file("junk.wav")), DataError);
}

TEST_CASE("wav saturates out-of-range samples with a warning count", "[io]") {
  TempDir tmp;
  Waveform w;
  w.samples = {0.0f, 1.5f, -2.0f, 0.5f};
  REQUIRE(wav_write(tmp.file("clip.wav"), w) == 2);
  const Waveform r = wav_read(tmp.file("clip.wav"));
  REQUIRE(r.samples[1] == Approx(32767.0f / 32768.0f));
  REQUIRE(r.samples[2] == -1.0f);
}

TEST_CASE("dataset_load pairs by filename and reports orphans", "[io]") {
  TempDir tmp;
  fs::create_directories(tmp.path / "clean");
  fs::create_directories(tmp.path / "noisy");
  Waveform w;
  w.samples.assign(1000, 0.1f);
  for (const char* name : {"p1.wav", "p2.wav", "p3.wav"}) {
    wav_write((tmp.path / "clean" / name).string(), w);
    wav_write((tmp.path / "noisy" / name).string(), w);
  }
  const Dataset ds = dataset_load((tmp.path / "clean").string(), (tmp.path / "noisy").string());
  REQUIRE(ds.pairs.size() == 3);

  wav_write((tmp.path / "clean" / "orphan.wav").string(), w);
  try {
    dataset_load((tmp.path / "clean").string(), (tmp.path / "noisy").string());
    FAIL("expected DataError");
  } catch (const DataError& e) {
    REQUIRE(std::string(e.what()).find("orphan.wav") != std::string::npos);
  }
}

TEST_CASE("model weight files round trip bit-exactly", "[io]") {
  TempDir tmp;
  const ModelConfig cfg = small_cfg(true);
  ModelWeights<float> w = init_weights<float>(cfg, 5);
  w.blocks[0].bn1_stats.batches = 3;
  Rng rng(6);
  w.blocks[0].bn1_stats.running_mean = Tensor<float>::uniform({cfg.c_conv}, rng, -1, 1);
  StftConfig stft_cfg;
  stft_cfg.window_length = 32;
  stft_cfg.hop = 16;

  save_model(tmp.file("w.cfw"), w, stft_cfg);
  const LoadedModel m = load_model(tmp.file("w.cfw"));
  REQUIRE(m.stft.window_length == 32);
  REQUIRE(m.stft.hop == 16);
  REQUIRE(m.weights.cfg.c_res == cfg.c_res);
  REQUIRE(m.weights.cfg.gating == true);
  REQUIRE(m.weights.blocks[0].bn1_stats.batches == 3);
  REQUIRE(max_abs_diff(m.weights.front.w, w.front.w) == 0.0);
  REQUIRE(max_abs_diff(m.weights.blocks[0].bn1_stats.running_mean,
                       w.blocks[0].bn1_stats.running_mean) == 0.0);
  REQUIRE(max_abs_diff(m.weights.gates[1].pw_b.w, w.gates[1].pw_b.w) == 0.0);

  // saving the loaded weights reproduces the file byte for byte
  save_model(tmp.file("w2.cfw"), m.weights, m.stft);
  REQUIRE(slurp(tmp.file("w.cfw")) == slurp(tmp.file("w2.cfw")));
}

TEST_CASE("weight files detect corruption and truncation", "[io]") {
  TempDir tmp;
  const ModelConfig cfg = small_cfg(false);
  ModelWeights<float> w = init_weights<float>(cfg, 7);
  save_model(tmp.file("w.cfw"), w, StftConfig{});

  auto bytes = slurp(tmp.file("w.cfw"));
  bytes[bytes.size() / 2] ^= 0x40;
  std::ofstream out(tmp.file("bad.cfw"), std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out.close();
  REQUIRE_THROWS_AS(load_model(tmp.file("bad.cfw")), DataError);

  std::ofstream trunc(tmp.file("trunc.cfw"), std::ios::binary);
  trunc.write(reinterpret_cast<const char*>(bytes.data()), 40);
  trunc.close();
  REQUIRE_THROWS_AS(load_model(tmp.file("trunc.cfw")), DataError);
}

TEST_CASE("loading rejects tensor shape mismatches", "[io]") {
  TempDir tmp;
  const ModelConfig cfg = small_cfg(false);
  ModelWeights<float> w = init_weights<float>(cfg, 9);
  // grow a weight tensor so the file disagrees with its own config block
  w.front.w = Tensor<float>({cfg.c_res + 1, cfg.bins, 1}, 0.1f);
  save_model(tmp.file("bad_shape.cfw"), w, StftConfig{});
  REQUIRE_THROWS_AS(load_model(tmp.file("bad_shape.cfw")), DataError);
}

TEST_CASE("inference weight files carry the pruning plan", "[io]") {
  TempDir tmp;
  const ModelConfig cfg = small_cfg(true);
  ModelWeights<float> w = init_weights<float>(cfg, 8);
  for (auto& b : w.blocks) {
    b.bn1_stats.batches = 1;
    b.bn2_stats.batches = 1;
  }
  const InferenceWeights<float> iw = fold_batchnorm(w);
  PruningPlan plan;
  plan.blocks.assign(static_cast<std::size_t>(cfg.blocks()),
                     std::vector<ChannelMode>(static_cast<std::size_t>(cfg.c_res), ChannelMode::Gated));
  plan.blocks[0][0] = ChannelMode::Removed;
  plan.blocks[1][2] = ChannelMode::AlwaysOn;

  save_inference(tmp.file("inf.cfw"), iw, StftConfig{}, &plan);
  REQUIRE(weights_file_is_folded(tmp.file("inf.cfw")));
  const LoadedInference li = load_inference(tmp.file("inf.cfw"));
  REQUIRE(li.plan.has_value());
  REQUIRE(li.plan->blocks[0][0] == ChannelMode::Removed);
  REQUIRE(li.plan->blocks[1][2] == ChannelMode::AlwaysOn);
  REQUIRE(max_abs_diff(li.weights.blocks[0].pw2.w, iw.blocks[0].pw2.w) == 0.0);

  // folded files cannot be loaded as trainable models
  REQUIRE_THROWS_AS(load_model(tmp.file("inf.cfw")), DataError);

  // unfolded files fold on the fly when loaded for inference
  save_model(tmp.file("raw.cfw"), w, StftConfig{});
  const LoadedInference li2 = load_inference(tmp.file("raw.cfw"));
  REQUIRE_FALSE(li2.plan.has_value());
  REQUIRE(max_abs_diff(li2.weights.blocks[0].pw2.w, iw.blocks[0].pw2.w) == 0.0);
}

TEST_CASE("run config defaults reproduce the reference recipe", "[io]") {
  const RunConfig rc = parse_run_config("");
  REQUIRE(rc.model.c_res == 128);
  REQUIRE(rc.model.c_conv == 256);
  REQUIRE(rc.model.c_gate == 16);
  REQUIRE(rc.model.kernel == 3);
  REQUIRE(rc.model.n_b == 3);
  REQUIRE(rc.model.n_s == 3);
  REQUIRE(rc.model.bins == 257);
  REQUIRE(rc.model.phi_trgt == 0.25f);
  REQUIRE(rc.model.l_pool == 0);  // receptive field
  REQUIRE(rc.stft.window_length == 512);
  REQUIRE(rc.stft.hop == 256);
  REQUIRE(rc.loss.alpha == 0.3);
  REQUIRE(rc.loss.c == 0.3);
  REQUIRE(rc.opt.learning_rate == 1e-3);
  REQUIRE(rc.opt.weight_decay == 1e-5);
  REQUIRE(rc.opt.batch_size == 64);
  REQUIRE(rc.opt.max_epochs == 400);
  REQUIRE(rc.finetune_epochs == 120);
  REQUIRE(rc.opt.patience_epochs == 20);
  REQUIRE(rc.opt.lr_decay == 0.5);
  REQUIRE(rc.opt.decay_after_stale == 3);
  REQUIRE(rc.opt.validate_every == 2);
  REQUIRE(rc.segment_seconds == 4.0);
  REQUIRE(rc.binarize.kind == BinarizeKind::SuperSpike);
}

TEST_CASE("run config parsing", "[io]") {
  const RunConfig rc = parse_run_config(
      "# comment\n"
      "model.c_res = 32\n"
      "stft.window_length = 256\n"
      "stft.hop = 128\n"
      "binarize.mode = concrete\n"
      "seed = 99\n");
  REQUIRE(rc.model.c_res == 32);
  REQUIRE(rc.model.bins == 129);
  REQUIRE(rc.binarize.kind == BinarizeKind::BinaryConcrete);
  REQUIRE(rc.seed == 99);

  REQUIRE_THROWS_AS(parse_run_config("model.c_res = 32\nunknown.key = 1\n"), UsageError);
  REQUIRE_THROWS_AS(parse_run_config("model.c_res\n"), UsageError);
  REQUIRE_THROWS_AS(parse_run_config("model.c_res = 1\nmodel.c_res = 2\n"), UsageError);
  REQUIRE_THROWS_AS(parse_run_config("binarize.mode = nope\n"), UsageError);
  REQUIRE_THROWS_AS(parse_run_config("model.causal = maybe\n"), UsageError);
}

TEST_CASE("history serializes as JSON lines", "[io]") {
  std::vector<TrainRecord> hist(2);
  hist[0].epoch = 1;
  hist[0].train_loss = 2.5;
  hist[0].val_loss = std::numeric_limits<double>::quiet_NaN();
  hist[0].lr = 1e-3;
  hist[1].epoch = 2;
  hist[1].train_loss = 2.0;
  hist[1].val_loss = 1.9;
  hist[1].realized_ratio = 0.5;
  hist[1].improved = true;
  const std::string text = history_jsonl(hist);
  std::istringstream in(text);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    REQUIRE(j.contains("epoch"));
    lines++;
  }
  REQUIRE(lines == 2);
  const auto j2 = nlohmann::json::parse(text.substr(text.find('\n') + 1));
  REQUIRE(j2["val_loss"] == Approx(1.9));
  REQUIRE(j2["improved"] == true);
}

TEST_CASE("mac report serializes", "[io]") {
  const MacReport r = count_macs_analytic(ModelConfig{});
  const nlohmann::json j = mac_report_json(r);
  REQUIRE(j["per_frame_total"] == Approx(662528.0));
  REQUIRE(j["blocks"].size() == 9);
}
