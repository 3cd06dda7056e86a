// Command-line surface for the Conv-FSENet speech-enhancement engine:
// baseline training, DynCP fine-tuning, offline and streaming enhancement,
// MAC profiling, static pruning, and channel-activity reporting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include <convfse/convfse.hpp>

namespace {

using namespace convfse;

RunConfig config_or_default(const std::string& path) {
  if (path.empty()) return parse_run_config("");
  return load_run_config(path);
}

Dataset load_training_data(const RunConfig& rc) {
  if (rc.synth_pairs > 0) return synth_dataset(rc.synth_pairs, rc.seed, rc.synth_seconds);
  if (!rc.clean_dir.empty() && !rc.noisy_dir.empty())
    return dataset_load(rc.clean_dir, rc.noisy_dir);
  throw UsageError("no training data: set data.synth_pairs or data.clean_dir/data.noisy_dir");
}

TrainSetup make_setup(const RunConfig& rc) {
  TrainSetup s;
  s.model = rc.model;
  s.stft = rc.stft;
  s.loss = rc.loss;
  s.opt = rc.opt;
  s.binarize = rc.binarize;
  s.segment_seconds = rc.segment_seconds;
  s.seed = rc.seed;
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out << text;
}

Tensor<float> mask_to_frame_major(const Tensor<float>& mask_nfl) {
  const int F = mask_nfl.dim(1), L = mask_nfl.dim(2);
  Tensor<float> out({L, F});
  for (int l = 0; l < L; ++l)
    for (int f = 0; f < F; ++f) out.at(l, f) = mask_nfl.at(0, f, l);
  return out;
}

int cmd_train(const std::string& config_path, const std::string& out_path,
              const std::string& history_path, std::optional<std::uint64_t> seed) {
  RunConfig rc = config_or_default(config_path);
  if (seed) rc.seed = *seed;
  Dataset ds = load_training_data(rc);
  TrainSetup setup = make_setup(rc);
  TrainResult result = train_baseline(setup, ds);
  save_model(out_path, result.weights, rc.stft);
  if (!history_path.empty()) write_text(history_path, history_jsonl(result.history));
  std::cout << "baseline trained: " << out_path << " (" << result.history.size()
            << " epochs recorded)\n";
  return 0;
}

int cmd_finetune(const std::string& config_path, const std::string& baseline_path,
                 const std::string& out_path, const std::string& history_path,
                 std::optional<std::uint64_t> seed) {
  RunConfig rc = config_or_default(config_path);
  if (seed) rc.seed = *seed;
  LoadedModel baseline = load_model(baseline_path);
  Dataset ds = load_training_data(rc);
  TrainSetup setup = make_setup(rc);
  setup.stft = baseline.stft;
  setup.model = baseline.weights.cfg;
  setup.model.gating = true;
  setup.model.c_gate = rc.model.c_gate;
  setup.model.l_pool = rc.model.l_pool;
  setup.model.phi_trgt = rc.model.phi_trgt;
  setup.opt.max_epochs = rc.finetune_epochs;
  TrainResult result = finetune_dyncp(baseline.weights, setup, ds);
  save_model(out_path, result.weights, baseline.stft);
  if (!history_path.empty()) write_text(history_path, history_jsonl(result.history));
  double ratio = result.history.empty() ? 1.0 : result.history.back().realized_ratio;
  for (auto it = result.history.rbegin(); it != result.history.rend(); ++it)
    if (std::isfinite(it->val_loss)) {
      ratio = it->realized_ratio;
      break;
    }
  std::cout << "dyncp fine-tuned: " << out_path << " (last realized ratio " << ratio << ")\n";
  return 0;
}

int cmd_enhance(const std::string& weights_path, const std::string& in_path,
                const std::string& out_path) {
  if (weights_file_is_folded(weights_path)) {
    LoadedInference li = load_inference(weights_path);
    if (!li.weights.cfg.causal)
      throw UsageError("enhance: folded non-causal weights cannot run offline");
    Waveform input = wav_read(in_path);
    StreamOutput so = stream_enhance(li.weights, input, li.stft,
                                     li.plan ? &*li.plan : nullptr);
    wav_write(out_path, so.enhanced);
    std::cout << "enhanced (streaming engine): " << out_path << "\n";
    return 0;
  }
  LoadedModel m = load_model(weights_path);
  Waveform input = wav_read(in_path);
  ComplexSpectrogram X = stft(input, m.stft);
  Tensor<float> xmag({1, X.bins, X.frames});
  for (int l = 0; l < X.frames; ++l)
    for (int f = 0; f < X.bins; ++f) xmag.at(0, f, l) = static_cast<float>(std::abs(X.at(l, f)));
  EvalForward<float> fw = forward_infer_offline(m.weights, xmag, PoolingMode::Iir);
  Waveform out = istft(apply_mask(X, mask_to_frame_major(fw.mask)));
  if (out.samples.size() > input.samples.size()) out.samples.resize(input.samples.size());
  wav_write(out_path, out);
  std::cout << "enhanced: " << out_path << "\n";
  return 0;
}

int cmd_stream(const std::string& weights_path, const std::string& in_path,
               const std::string& out_path, const std::string& report_path) {
  LoadedInference li = load_inference(weights_path);
  if (!li.weights.cfg.causal) throw UsageError("stream requires causal=true");
  Waveform input = wav_read(in_path);
  StreamOutput so = stream_enhance(li.weights, input, li.stft, li.plan ? &*li.plan : nullptr);
  wav_write(out_path, so.enhanced);
  if (!report_path.empty()) write_text(report_path, mac_report_json(so.macs).dump(2) + "\n");
  std::cout << "streamed " << so.macs.frames << " frames, per-frame MACs "
            << so.macs.per_frame() << ", reduction " << so.macs.reduction_percent() << "%\n";
  return 0;
}

int cmd_profile(const std::string& config_path, const std::string& weights_path,
                const std::string& in_path, const std::string& out_path,
                std::optional<double> phi) {
  RunConfig rc = config_or_default(config_path);
  nlohmann::json j;
  j["analytic_static"] = mac_report_json(count_macs_analytic(rc.model));
  std::optional<double> expected_phi = phi;
  if (!expected_phi && rc.model.gating) expected_phi = rc.model.phi_trgt;
  if (expected_phi)
    j["analytic_expected"] = mac_report_json(count_macs_analytic(rc.model, expected_phi));
  if (!weights_path.empty()) {
    if (in_path.empty()) throw UsageError("profile: --in is required with --weights");
    LoadedInference li = load_inference(weights_path);
    Waveform input = wav_read(in_path);
    StreamOutput so = stream_enhance(li.weights, input, li.stft, li.plan ? &*li.plan : nullptr);
    j["runtime"] = mac_report_json(so.macs);
  }
  const std::string text = j.dump(2) + "\n";
  if (out_path.empty())
    std::cout << text;
  else
    write_text(out_path, text);
  return 0;
}

int cmd_prune(const std::string& weights_path, const std::string& in_path, int synth_pairs,
              std::uint64_t seed, const std::string& out_path, const std::string& report_path,
              bool no_heuristic) {
  LoadedInference li = load_inference(weights_path);
  if (!li.weights.cfg.gating) throw UsageError("prune: weights have no gating module");
  if (!li.weights.cfg.causal) throw UsageError("prune: calibration uses the streaming runtime; causal=true required");

  StreamRunner<float> runner(li.weights, nullptr);
  std::vector<Waveform> calib;
  if (!in_path.empty()) {
    calib.push_back(wav_read(in_path));
  } else if (synth_pairs > 0) {
    Dataset ds = synth_dataset(synth_pairs, seed);
    for (auto& p : ds.pairs) calib.push_back(std::move(p.noisy));
  } else {
    throw UsageError("prune: provide --in or --synth-pairs for calibration");
  }
  std::vector<float> mask(static_cast<std::size_t>(li.weights.cfg.bins));
  std::vector<float> xmag(static_cast<std::size_t>(li.weights.cfg.bins));
  for (const Waveform& w : calib) {
    ComplexSpectrogram X = stft(w, li.stft);
    for (int l = 0; l < X.frames; ++l) {
      for (int f = 0; f < X.bins; ++f) xmag[static_cast<std::size_t>(f)] = static_cast<float>(std::abs(X.at(l, f)));
      runner.process_frame(xmag, mask);
    }
  }
  PruneOptions opt;
  opt.heuristic = !no_heuristic;
  PrunedModel<float> pruned =
      static_prune(li.weights, runner.activity(), runner.frames_processed(), opt);
  save_inference(out_path, pruned.weights, li.stft, &pruned.plan);
  if (!report_path.empty())
    write_text(report_path, prune_report_json(pruned.report).dump(2) + "\n");
  std::cout << "pruned weights: " << out_path << " (storage reduction "
            << pruned.report.storage_reduction_percent() << "%)\n";
  return 0;
}

int cmd_report(const std::string& weights_path, const std::string& in_path,
               const std::string& outdir) {
  std::filesystem::create_directories(outdir);
  Waveform input = wav_read(in_path);
  Tensor<float> gates;
  if (weights_file_is_folded(weights_path)) {
    LoadedInference li = load_inference(weights_path);
    StreamOutput so = stream_enhance(li.weights, input, li.stft, li.plan ? &*li.plan : nullptr);
    gates = so.gates;
  } else {
    LoadedModel m = load_model(weights_path);
    ComplexSpectrogram X = stft(input, m.stft);
    Tensor<float> xmag({1, X.bins, X.frames});
    for (int l = 0; l < X.frames; ++l)
      for (int f = 0; f < X.bins; ++f) xmag.at(0, f, l) = static_cast<float>(std::abs(X.at(l, f)));
    gates = forward_infer_offline(m.weights, xmag, PoolingMode::Iir).gates;
  }
  const PruningStats stats = pruning_stats(gates);
  nlohmann::json j{{"global_ratio", stats.global_ratio}, {"per_block", stats.per_block}};
  write_text((std::filesystem::path(outdir) / "pruning_stats.json").string(), j.dump(2) + "\n");
  for (int i = 0; i < gates.dim(3); ++i) {
    const ActivityMap m = activity_map(gates, i);
    write_text((std::filesystem::path(outdir) / ("activity_b" + std::to_string(i) + ".csv")).string(),
               activity_map_csv(m));
  }
  std::cout << "report written to " << outdir << " (global ratio " << stats.global_ratio << ")\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conv-FSENet speech enhancement with dynamic channel pruning"};
  app.require_subcommand(1);

  std::string config_path, weights_path, baseline_path, in_path, out_path, history_path,
      report_path, outdir;
  std::optional<std::uint64_t> seed_override;
  std::optional<double> phi;
  int synth_pairs = 0;
  std::uint64_t prune_seed = 1;
  bool no_heuristic = false;

  auto* train = app.add_subcommand("train", "train a static baseline");
  train->add_option("--config", config_path, "run configuration file");
  train->add_option("--out", out_path, "output weights file")->required();
  train->add_option("--history", history_path, "training history JSONL");
  train->add_option("--seed", seed_override, "override the config seed");

  auto* finetune = app.add_subcommand("finetune", "DynCP fine-tune from a baseline");
  finetune->add_option("--config", config_path, "run configuration file");
  finetune->add_option("--baseline", baseline_path, "baseline weights file")->required();
  finetune->add_option("--out", out_path, "output weights file")->required();
  finetune->add_option("--history", history_path, "training history JSONL");
  finetune->add_option("--seed", seed_override, "override the config seed");

  auto* enhance = app.add_subcommand("enhance", "offline denoising of a WAV file");
  enhance->add_option("--weights", weights_path, "weights file")->required();
  enhance->add_option("--in", in_path, "noisy input WAV")->required();
  enhance->add_option("--out", out_path, "enhanced output WAV")->required();

  auto* stream = app.add_subcommand("stream", "frame-by-frame streaming denoising");
  stream->add_option("--weights", weights_path, "weights file (causal model)")->required();
  stream->add_option("--in", in_path, "noisy input WAV")->required();
  stream->add_option("--out", out_path, "enhanced output WAV")->required();
  stream->add_option("--mac-report", report_path, "instrumented MAC report JSON");

  auto* profile = app.add_subcommand("profile", "analytic and instrumented MAC counts");
  profile->add_option("--config", config_path, "run configuration file");
  profile->add_option("--phi", phi, "expected pruning ratio for the analytic estimate");
  profile->add_option("--weights", weights_path, "weights for an instrumented run");
  profile->add_option("--in", in_path, "input WAV for the instrumented run");
  profile->add_option("--out", out_path, "report JSON path (stdout if omitted)");

  auto* prune = app.add_subcommand("prune", "static pruning from calibration activity");
  prune->add_option("--weights", weights_path, "fine-tuned weights file")->required();
  prune->add_option("--in", in_path, "calibration WAV");
  prune->add_option("--synth-pairs", synth_pairs, "calibrate on synthetic mixtures instead");
  prune->add_option("--seed", prune_seed, "seed for synthetic calibration");
  prune->add_option("--out", out_path, "pruned weights file")->required();
  prune->add_option("--report", report_path, "prune report JSON");
  prune->add_flag("--no-heuristic", no_heuristic,
                  "remove only channels with exactly zero activity");

  auto* report = app.add_subcommand("report", "channel-activity maps and pruning stats");
  report->add_option("--weights", weights_path, "weights file")->required();
  report->add_option("--in", in_path, "input WAV")->required();
  report->add_option("--outdir", outdir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*train) return cmd_train(config_path, out_path, history_path, seed_override);
    if (*finetune)
      return cmd_finetune(config_path, baseline_path, out_path, history_path, seed_override);
    if (*enhance) return cmd_enhance(weights_path, in_path, out_path);
    if (*stream) return cmd_stream(weights_path, in_path, out_path, report_path);
    if (*profile) return cmd_profile(config_path, weights_path, in_path, out_path, phi);
    if (*prune)
      return cmd_prune(weights_path, in_path, synth_pairs, prune_seed, out_path, report_path,
                       no_heuristic);
    if (*report) return cmd_report(weights_path, in_path, outdir);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
