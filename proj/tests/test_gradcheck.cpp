// Finite-difference validation of every autodiff operator and of the
// end-to-end training loss on a tiny gated model, all in 64-bit mode.

#include <catch2/catch.hpp>

#include <functional>
#include <vector>

#include <convfse/model.hpp>
#include <convfse/training.hpp>

using namespace convfse;

namespace {

constexpr double kH = 1e-4;
constexpr double kOpTol = 1e-4;
constexpr double kEndTol = 1e-3;

Tensor<double> rand_t(std::vector<int> shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  return Tensor<double>::uniform(std::move(shape), rng, lo, hi);
}

// Uniform magnitudes bounded away from zero, random sign: keeps relu/prelu
// kinks and pow singularities out of the finite-difference window.
Tensor<double> rand_away_from_zero(std::vector<int> shape, std::uint64_t seed) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i)
    t[i] = rng.uniform(0.05, 1.0) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
  return t;
}

struct GradCheck {
  std::vector<Tensor<double>> params;
  std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)> build;

  double eval() const {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p));
    return tape.scalar(build(tape, vars));
  }

  void run(double tol) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& p : params) vars.push_back(tape.leaf(p));
    Var<double> loss = build(tape, vars);
    tape.backward(loss);
    std::vector<Tensor<double>> analytic;
    for (auto v : vars) analytic.push_back(tape.grad(v));

    for (std::size_t i = 0; i < params.size(); ++i) {
      for (std::size_t j = 0; j < params[i].numel(); ++j) {
        const double save = params[i][j];
        params[i][j] = save + kH;
        const double lp = eval();
        params[i][j] = save - kH;
        const double lm = eval();
        params[i][j] = save;
        const double fd = (lp - lm) / (2.0 * kH);
        const double a = analytic[i][j];
        const double err = std::abs(fd - a);
        const double bound = tol * std::max(std::abs(fd), std::abs(a)) + 1e-6;
        INFO("param " << i << " elem " << j << " fd=" << fd << " analytic=" << a);
        REQUIRE(err <= bound);
      }
    }
  }
};

// loss = sum(y*y) + sum(y*d): quadratic plus a fixed linear probe.
Var<double> probe_loss(Tape<double>& tape, Var<double> y, const Tensor<double>& d) {
  Var<double> dv = tape.leaf(d);
  return tape.add(tape.sum_all(tape.mul(y, y)), tape.sum_all(tape.mul(y, dv)));
}

}  // namespace

TEST_CASE("gradcheck pointwise conv", "[gradcheck]") {
  GradCheck gc;
  gc.params = {rand_t({2, 5, 9}, 1), rand_t({4, 5, 1}, 2), rand_t({4}, 3)};
  const Tensor<double> d = rand_t({2, 4, 9}, 4);
  gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
    return probe_loss(t, t.pointwise_conv(v[0], v[1], v[2]), d);
  };
  gc.run(kOpTol);
}

TEST_CASE("gradcheck depthwise dilated conv", "[gradcheck]") {
  for (const bool causal : {true, false}) {
    GradCheck gc;
    gc.params = {rand_t({2, 4, 10}, 5), rand_t({4, 1, 3}, 6), rand_t({4}, 7)};
    const Tensor<double> d = rand_t({2, 4, 10}, 8);
    gc.build = [d, causal](Tape<double>& t, const std::vector<Var<double>>& v) {
      return probe_loss(t, t.depthwise_dilated_conv(v[0], v[1], v[2], 2, causal), d);
    };
    gc.run(kOpTol);
  }
}

TEST_CASE("gradcheck activations", "[gradcheck]") {
  {
    GradCheck gc;
    gc.params = {rand_away_from_zero({2, 3, 8}, 9), rand_t({3}, 10, 0.1, 0.5)};
    const Tensor<double> d = rand_t({2, 3, 8}, 11);
    gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
      return probe_loss(t, t.prelu(v[0], v[1]), d);
    };
    gc.run(kOpTol);
  }
  {
    GradCheck gc;
    gc.params = {rand_away_from_zero({2, 3, 8}, 12)};
    const Tensor<double> d = rand_t({2, 3, 8}, 13);
    gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
      return probe_loss(t, t.relu(v[0]), d);
    };
    gc.run(kOpTol);
  }
  {
    GradCheck gc;
    gc.params = {rand_t({2, 3, 8}, 14, -3.0, 3.0)};
    const Tensor<double> d = rand_t({2, 3, 8}, 15);
    gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
      return probe_loss(t, t.sigmoid(v[0]), d);
    };
    gc.run(kOpTol);
  }
}

TEST_CASE("gradcheck batch norm", "[gradcheck]") {
  {
    GradCheck gc;
    gc.params = {rand_t({2, 3, 8}, 16), rand_t({3}, 17, 0.5, 1.5), rand_t({3}, 18)};
    const Tensor<double> d = rand_t({2, 3, 8}, 19);
    gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
      BatchNormStats<double> stats(3);  // fresh per evaluation
      return probe_loss(t, t.batch_norm(v[0], v[1], v[2], stats, true), d);
    };
    gc.run(kOpTol);
  }
  {
    BatchNormStats<double> stats(3);
    stats.running_mean = rand_t({3}, 20, -0.5, 0.5);
    stats.running_var = rand_t({3}, 21, 0.5, 2.0);
    stats.batches = 1;
    GradCheck gc;
    gc.params = {rand_t({2, 3, 8}, 22), rand_t({3}, 23, 0.5, 1.5), rand_t({3}, 24)};
    const Tensor<double> d = rand_t({2, 3, 8}, 25);
    gc.build = [d, stats](Tape<double>& t, const std::vector<Var<double>>& v) {
      BatchNormStats<double> s = stats;
      return probe_loss(t, t.batch_norm(v[0], v[1], v[2], s, false), d);
    };
    gc.run(kOpTol);
  }
}

TEST_CASE("gradcheck causal moving average", "[gradcheck]") {
  GradCheck gc;
  gc.params = {rand_t({2, 3, 12}, 26)};
  const Tensor<double> d = rand_t({2, 3, 12}, 27);
  gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
    return probe_loss(t, t.moving_average(v[0], 4), d);
  };
  gc.run(kOpTol);
}

TEST_CASE("gradcheck binarization strategies", "[gradcheck]") {
  // Surrogate modes: the gradcheck-relaxed forward is the antiderivative of
  // the surrogate, making forward/backward a consistent smooth pair.
  for (const BinarizeKind kind : {BinarizeKind::SigmoidSurrogate, BinarizeKind::SuperSpike}) {
    GradCheck gc;
    gc.params = {rand_t({2, 4, 6}, 28, -2.0, 2.0)};
    const Tensor<double> d = rand_t({2, 4, 6}, 29);
    BinarizeConfig bc;
    bc.kind = kind;
    bc.relaxed_forward = true;
    gc.build = [d, bc](Tape<double>& t, const std::vector<Var<double>>& v) {
      return probe_loss(t, t.binarize(v[0], bc, true, nullptr), d);
    };
    gc.run(kOpTol);
  }
  // Binary Concrete: the sampled relaxed forward has an exact reparameterized
  // gradient; freezing the noise seed makes the loss a smooth function.
  {
    GradCheck gc;
    gc.params = {rand_t({2, 4, 6}, 30, -2.0, 2.0)};
    const Tensor<double> d = rand_t({2, 4, 6}, 31);
    BinarizeConfig bc;
    bc.kind = BinarizeKind::BinaryConcrete;
    gc.build = [d, bc](Tape<double>& t, const std::vector<Var<double>>& v) {
      Rng rng(777);
      return probe_loss(t, t.binarize(v[0], bc, true, &rng), d);
    };
    gc.run(kOpTol);
  }
}

TEST_CASE("gradcheck elementwise and reductions", "[gradcheck]") {
  GradCheck gc;
  gc.params = {rand_t({2, 3, 5}, 32, 0.2, 1.5), rand_t({2, 3, 5}, 33, 0.2, 1.5)};
  const Tensor<double> d = rand_t({3}, 34);
  gc.build = [d](Tape<double>& t, const std::vector<Var<double>>& v) {
    Var<double> m = t.mul(v[0], v[1]);
    Var<double> p = t.pow_scalar(m, 0.3);
    Var<double> s = t.add(t.scale(p, 1.7), t.add_scalar(v[0], 0.5));
    Var<double> cm = t.channel_mean(s);
    Var<double> probe = t.sum_all(t.mul(cm, t.leaf(d)));
    return t.add(probe, t.mean_all(t.mul(s, s)));
  };
  gc.run(kOpTol);
}

namespace {

struct EndToEndBatch {
  SpectralLossTerms<double> terms;
};

EndToEndBatch make_batch(int frames, int bins, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ComplexSpectrogram> noisy(2), clean(2);
  for (int n = 0; n < 2; ++n) {
    for (auto* S : {&noisy[static_cast<std::size_t>(n)], &clean[static_cast<std::size_t>(n)]}) {
      S->frames = frames;
      S->bins = bins;
      S->data.resize(static_cast<std::size_t>(frames) * bins);
      for (auto& v : S->data)
        v = std::polar(rng.uniform(0.3, 1.5), rng.uniform(0.0, 2.0 * kPi));
    }
  }
  EndToEndBatch b;
  b.terms = make_spectral_terms<double>(noisy, clean, 0.3);
  return b;
}

std::vector<Tensor<double>*> model_param_ptrs(ModelWeights<double>& w) {
  Tape<double> scratch;
  ModelVars<double> mv = register_model(scratch, w);
  std::vector<Tensor<double>*> out;
  for (auto& b : mv.bindings) out.push_back(b.tensor);
  return out;
}

double end_to_end_loss(const ModelWeights<double>& base, const EndToEndBatch& batch,
                       const BinarizeConfig& bc, std::vector<Tensor<double>>* grads) {
  ModelWeights<double> w = base;  // private BN-stat state per evaluation
  Tape<double> tape;
  ModelVars<double> mv = register_model(tape, w);
  Rng rng(4242);
  Var<double> x = tape.leaf(batch.terms.x_mag);
  TrainForward<double> fw = forward_train(tape, mv, w, x, true, bc, &rng);
  Var<double> loss = build_loss_se(tape, fw.mask, batch.terms, 0.3, 0.3);
  loss = tape.add(loss, build_loss_dcp(tape, fw.gates, 0.25));
  const double value = tape.scalar(loss);
  if (grads != nullptr) {
    tape.backward(loss);
    grads->clear();
    for (auto& b : mv.bindings) grads->push_back(tape.grad(b.var));
  }
  return value;
}

void end_to_end_check(const BinarizeConfig& bc) {
  ModelConfig cfg;
  cfg.c_res = 4;
  cfg.c_conv = 6;
  cfg.c_gate = 3;
  cfg.kernel = 3;
  cfg.n_b = 2;
  cfg.n_s = 1;
  cfg.bins = 9;
  cfg.causal = true;
  cfg.gating = true;
  ModelWeights<double> base = init_weights<double>(cfg, 99);
  const EndToEndBatch batch = make_batch(12, cfg.bins, 55);

  std::vector<Tensor<double>> analytic;
  end_to_end_loss(base, batch, bc, &analytic);

  ModelWeights<double> probe = base;
  std::vector<Tensor<double>*> ptrs = model_param_ptrs(probe);
  REQUIRE(ptrs.size() == analytic.size());
  for (std::size_t i = 0; i < ptrs.size(); ++i) {
    for (std::size_t j = 0; j < ptrs[i]->numel(); ++j) {
      const double save = (*ptrs[i])[j];
      (*ptrs[i])[j] = save + kH;
      const double lp = end_to_end_loss(probe, batch, bc, nullptr);
      (*ptrs[i])[j] = save - kH;
      const double lm = end_to_end_loss(probe, batch, bc, nullptr);
      (*ptrs[i])[j] = save;
      const double fd = (lp - lm) / (2.0 * kH);
      const double a = analytic[i][j];
      const double err = std::abs(fd - a);
      const double bound = kEndTol * std::max(std::abs(fd), std::abs(a)) + 1e-6;
      INFO("param " << i << " elem " << j << " fd=" << fd << " analytic=" << a);
      REQUIRE(err <= bound);
    }
  }
}

}  // namespace

TEST_CASE("gradcheck end-to-end tiny gated model", "[gradcheck]") {
  BinarizeConfig sig;
  sig.kind = BinarizeKind::SigmoidSurrogate;
  sig.relaxed_forward = true;
  end_to_end_check(sig);

  BinarizeConfig ss;
  ss.kind = BinarizeKind::SuperSpike;
  ss.relaxed_forward = true;
  end_to_end_check(ss);

  BinarizeConfig conc;
  conc.kind = BinarizeKind::BinaryConcrete;
  end_to_end_check(conc);
}
