// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Usage: jdnet_acceptance <work-dir>

#include <algorithm>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "fixtures.hpp"
#include "jdnet/commands.hpp"
#include "jdnet/gradcheck_suite.hpp"
#include "jdnet/trainer.hpp"
#include "reference.hpp"

namespace fs = std::filesystem;
using namespace jdnet;

namespace {

// Overfit experiment: 8 pairs, batch 8, so one Adam step per epoch.
constexpr int kPairs = 8;
constexpr int kSize = 64;
constexpr int kOverfitSteps = 600;
constexpr double kOverfitLr = 2e-3;
constexpr std::uint64_t kDataSeed = 7;

struct Verdict {
  bool pass = true;
  std::string detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail += (detail.empty() ? "" : "; ") + what;
    }
  }
  void note(const std::string& what) { detail += (detail.empty() ? "" : "; ") + what; }
};

std::string fmt(const char* format, double a, double b = 0, double c = 0) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), format, a, b, c);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

ModelConfig overfit_model(Ablation ablation = Ablation::R3) {
  ModelConfig m;
  m.units = 3;
  m.channels = 8;
  m.scales = 2;
  m.pool_rate = 2;
  m.ablation = ablation;
  return m;
}

TrainConfig overfit_config(LossKind loss, Ablation ablation = Ablation::R3, int steps = kOverfitSteps) {
  TrainConfig c;
  c.epochs = steps;
  c.milestones = {steps * 6 / 10, steps * 8 / 10};
  c.base_lr = kOverfitLr;
  c.crop = kSize;
  c.batch = kPairs;
  c.loss = loss;
  c.model = overfit_model(ablation);
  return c;
}

std::vector<ImagePair> overfit_pairs() { return make_synthetic_pairs(kPairs, kSize, kDataSeed); }

template <typename T>
std::vector<std::string> names(const TensorList<T>& list) {
  std::vector<std::string> out;
  for (const auto& t : list) out.push_back(t.name);
  return out;
}

// -- 1 ---------------------------------------------------------------------------

Verdict gradient_suite() {
  Verdict v;
  const auto start = std::chrono::steady_clock::now();
  double worst = 0, worst_network = 0;
  int failed = 0;
  const auto reports = run_gradcheck_suite("all", std::nullopt, [&](const GradCheckReport& r) {
    if (!r.passed) {
      ++failed;
      v.check(false, r.name + fmt(" %.2e", r.max_relative_error));
    }
    double& slot = r.name == "jdnet" ? worst_network : worst;
    slot = std::max(slot, r.max_relative_error);
  });
  v.check(reports.size() == gradcheck_registry().size(), "suite skipped cases");
  for (const auto& c : gradcheck_registry())
    v.check(c.default_tolerance <= (c.group == "network" ? 1e-3 : 1e-4), c.name + " tolerance too loose");
  v.note(std::to_string(reports.size() - failed) + "/" + std::to_string(reports.size()) + " operators" +
         fmt(", max err %.2e (network %.2e), %.0fs", worst, worst_network, seconds_since(start)));
  return v;
}

// -- 2 ---------------------------------------------------------------------------

Verdict oracle_equivalence() {
  Verdict v;
  Rng rng(2);
  double worst = 0;
  int compared = 0;
  auto track = [&](const std::string& what, double err) {
    ++compared;
    worst = std::max(worst, err);
    v.check(err <= 1e-5, what + fmt(" %.2e", err));
  };
  using fixtures::random_tensor;
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      auto p = ConvParams<double>::make(3, 4, 3, stride, rng);
      p.padding = pad;
      for (auto& b : p.bias.data()) b = rng.uniform(-0.5, 0.5);
      const auto x = random_tensor<double>({2, 3, 7, 6}, rng);
      track("conv2d", ref::max_rel_diff(conv2d(x, p), ref::conv2d(ref::from(x), p)));
    }
  const auto pooled = random_tensor<double>({2, 3, 8, 12}, rng);
  track("avg_pool", ref::max_rel_diff(avg_pool(pooled, 4), ref::avg_pool(ref::from(pooled), 4)));
  track("upsample",
        ref::max_rel_diff(upsample_bilinear(pooled, 19, 25), ref::upsample_bilinear(ref::from(pooled), 19, 25)));

  ModelConfig cfg;
  cfg.reduction = 4;
  auto att = SelfAttention<double>::make(8, cfg, rng);
  for (auto* c : {&att.phi, &att.psi, &att.beta, &att.gamma_hidden, &att.gamma_out})
    for (auto& b : c->bias.data()) b = rng.uniform(-0.3, 0.3);
  const auto xa = random_tensor<double>({1, 8, 5, 5}, rng);
  SelfAttention<double>::Trace trace;
  const auto ya = att.forward(xa, true, &trace);
  const auto want = ref::self_attention(ref::from(xa), att);
  track("attention aggregation", ref::max_rel_diff(trace.aggregated, want.aggregated));
  track("attention output", ref::max_rel_diff(ya, want.output));

  auto sc = SelfCalibratedConv<double>::make(4, 2, rng);
  for (auto* c : {&sc.split1, &sc.split2, &sc.k1, &sc.k2, &sc.k3, &sc.k4})
    for (auto& b : c->bias.data()) b = rng.uniform(-0.3, 0.3);
  const auto xs = random_tensor<double>({1, 4, 8, 8}, rng);
  track("sc_conv", ref::max_rel_diff(sc.forward(xs), ref::self_calibrated_conv(ref::from(xs), sc)));

  const auto a = random_tensor<double>({2, 3, 16, 19}, rng, 0, 1);
  auto b = a.clone();
  for (auto& e : b.data()) e = std::clamp(e + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  const double s_ref = ref::ssim(ref::from(a), ref::from(b));
  track("ssim", std::abs(ssim(a, b).item() - s_ref) / std::abs(s_ref));
  v.note(fmt("max rel err %.2e over %.0f comparisons", worst, compared));
  return v;
}

// -- 3 ---------------------------------------------------------------------------

Verdict structure() {
  Verdict v;
  Rng rng(3);
  using fixtures::random_tensor;
  const Shape s{2, 8, 16, 16};
  const auto x = random_tensor<float>(s, rng);
  ModelConfig cfg = overfit_model();
  auto att = SelfAttention<float>::make(8, cfg, rng);
  auto agg = ScaleAggregation<float>::make(8, 2, rng);
  auto sc = SelfCalibratedConv<float>::make(8, 2, rng);
  auto unit = JointUnit<float>::make(24, cfg, Ablation::R3, rng);
  SelfAttention<float>::Trace trace;
  v.check(att.forward(x, true, &trace).shape() == s, "attention shape");
  v.check(agg.forward(x).shape() == s, "scale-aggregation shape");
  v.check(sc.forward(x).shape() == s, "sc_conv shape");
  v.check(unit.forward(random_tensor<float>({2, 24, 16, 16}, rng), Ablation::R3, true).shape() == s,
          "joint unit shape");
  auto net = JDNet<float>::make(cfg, 1);
  const auto o = random_tensor<float>({2, 3, 16, 16}, rng, 0, 1);
  const auto out = net.forward(o, true);
  v.check(out.background.shape() == o.shape() && out.rain.shape() == o.shape(), "network shape");

  double worst_sum = 0;
  const int P = cfg.footprint * cfg.footprint;
  bool negative = false;
  for (int n = 0; n < s.n; ++n)
    for (int g = 0; g < att.groups(); ++g)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) {
          double total = 0;
          for (int p = 0; p < P; ++p) {
            const float wt = trace.weights.at(n, g * P + p, h, w);
            negative |= wt < 0;
            total += wt;
          }
          worst_sum = std::max(worst_sum, std::abs(total - 1));
        }
  v.check(!negative, "negative attention weight");
  v.check(worst_sum < 1e-5, fmt("attention weights sum off by %.2e", worst_sum));

  // Output halves of the self-calibrated conv depend on disjoint parameter sets.
  const std::vector<Tensor<float>> first{sc.split1.weight, sc.k2.weight, sc.k3.weight, sc.k4.weight};
  const std::vector<Tensor<float>> second{sc.split2.weight, sc.k1.weight};
  auto nonzero = [](const Tensor<float>& t) {
    const auto g = t.grad();
    return std::any_of(g.begin(), g.end(), [](float e) { return e != 0.0f; });
  };
  for (int half = 0; half < 2; ++half) {
    for (auto t : first) t.set_requires_grad(true).zero_grad();
    for (auto t : second) t.set_requires_grad(true).zero_grad();
    clear_tape<float>();
    backward(sum(slice_channels(sc.forward(x), 4 * half, 4 * half + 4)));
    for (const auto& t : first) v.check(nonzero(t) == (half == 0), "sc_conv first-path gradient sparsity");
    for (const auto& t : second) v.check(nonzero(t) == (half == 1), "sc_conv second-path gradient sparsity");
  }

  cfg.units = 5;
  const auto deep = JDNet<float>::make(cfg, 2);
  for (std::size_t k = 0; k < deep.units().size(); ++k)
    v.check(deep.units()[k].compress.in_channels() == static_cast<int>(k) * cfg.channels + cfg.channels,
            "compress width of unit " + std::to_string(k));
  v.note(fmt("attention weight sums within %.1e of 1", worst_sum));
  return v;
}

// -- 4 and 6 -----------------------------------------------------------------------

struct OverfitResult {
  EvalReport eval;
  std::vector<EpochMetrics> history;
  double seconds = 0;
};

OverfitResult overfit(const TrainConfig& config) {
  const auto start = std::chrono::steady_clock::now();
  const auto pairs = overfit_pairs();
  Trainer trainer(config, pairs);
  OverfitResult r;
  while (trainer.epoch() < config.epochs) r.history.push_back(trainer.run_epoch());
  r.eval = evaluate(trainer.model(), pairs);
  r.seconds = seconds_since(start);
  return r;
}

// Mean over consecutive windows of `width` epochs.
std::vector<double> window_means(const std::vector<EpochMetrics>& history, std::size_t width) {
  std::vector<double> out;
  for (std::size_t i = 0; i + width <= history.size(); i += width) {
    double total = 0;
    for (std::size_t k = i; k < i + width; ++k) total += history[k].loss;
    out.push_back(total / width);
  }
  return out;
}

Verdict overfit_experiment() {
  Verdict v;
  const auto ssim_run = overfit(overfit_config(LossKind::NegSsim));
  v.check(kOverfitSteps <= 2000, "too many steps");
  v.check(ssim_run.eval.mean_ssim >= 0.90, fmt("mean SSIM %.4f < 0.90", ssim_run.eval.mean_ssim));
  v.check(ssim_run.eval.mean_psnr >= 28.0, fmt("mean PSNR %.2f < 28", ssim_run.eval.mean_psnr));
  const auto windows = window_means(ssim_run.history, 20);
  int rises = 0;
  for (std::size_t i = 1; i < windows.size(); ++i) rises += windows[i] > windows[i - 1];
  v.note(fmt("neg-SSIM: %.0f steps, SSIM %.4f, PSNR %.2f dB", kOverfitSteps, ssim_run.eval.mean_ssim,
             ssim_run.eval.mean_psnr) +
         fmt(", loss %.4f, %.0f/%.0f rising 20-step windows", ssim_run.history.back().loss, rises,
             static_cast<double>(windows.size() - 1)) +
         fmt(", %.0fs", ssim_run.seconds));

  const auto mse_run = overfit(overfit_config(LossKind::Mse));
  const double mse = mse_run.history.back().loss;
  v.check(mse < 1e-3, fmt("MSE loss %.2e >= 1e-3", mse));
  v.note(fmt("MSE: final loss %.2e, SSIM %.4f, %.0fs", mse, mse_run.eval.mean_ssim, mse_run.seconds));
  return v;
}

Verdict ablation_plumbing() {
  Verdict v;
  const auto pairs = overfit_pairs();
  std::vector<std::vector<std::string>> param_names;
  for (Ablation a : {Ablation::R1, Ablation::R2, Ablation::R3}) {
    TrainConfig c = overfit_config(LossKind::NegSsim, a, 1);
    c.milestones = {};
    Trainer t(c, pairs);
    const auto m = t.run_epoch();
    v.check(std::isfinite(m.loss), std::string(to_string(a)) + " step not finite");
    param_names.push_back(names(t.model().parameters()));
  }
  auto extra = [](const std::vector<std::string>& small, const std::vector<std::string>& big) {
    std::vector<std::string> out;
    const std::set<std::string> have(small.begin(), small.end());
    for (const auto& n : big)
      if (!have.count(n)) out.push_back(n);
    return out;
  };
  auto missing = [&](const std::vector<std::string>& small, const std::vector<std::string>& big) {
    return extra(big, small).size();
  };
  const auto r2_extra = extra(param_names[0], param_names[1]);
  const auto r3_extra = extra(param_names[1], param_names[2]);
  v.check(missing(param_names[0], param_names[1]) == 0 && missing(param_names[1], param_names[2]) == 0,
          "a smaller ablation has parameters the larger one lacks");
  v.check(!r2_extra.empty() && std::all_of(r2_extra.begin(), r2_extra.end(),
                                           [](const std::string& n) { return n.find(".sc_conv.") != std::string::npos; }),
          "R2 adds parameters outside self-calibrated conv");
  v.check(!r3_extra.empty() && std::all_of(r3_extra.begin(), r3_extra.end(),
                                           [](const std::string& n) { return n.find(".attention.") != std::string::npos; }),
          "R3 adds parameters outside attention");
  v.note("R2 adds " + std::to_string(r2_extra.size()) + " sc_conv tensors, R3 adds " + std::to_string(r3_extra.size()) +
         " attention tensors");

  // Informational only: does the sc_conv stage help on the overfit set.
  const auto r1 = overfit(overfit_config(LossKind::NegSsim, Ablation::R1));
  const auto r2 = overfit(overfit_config(LossKind::NegSsim, Ablation::R2));
  v.note(fmt("informational SSIM R1 %.4f vs R2 %.4f", r1.eval.mean_ssim, r2.eval.mean_ssim) +
         (r2.eval.mean_ssim > r1.eval.mean_ssim ? " (R2 > R1)" : " (R2 <= R1)"));
  return v;
}

// -- 5 ---------------------------------------------------------------------------

Verdict schedule() {
  Verdict v;
  const TrainConfig c;
  std::set<double> plateaus;
  for (int e = 1; e <= 1000; ++e) {
    const double want = e <= 600 ? 5e-4 : e <= 800 ? 5e-5 : 5e-6;
    const double got = lr_at(e, c);
    plateaus.insert(got);
    v.check(std::abs(got - want) <= want * 1e-12, "epoch " + std::to_string(e));
  }
  v.check(plateaus.size() == 3, "expected exactly three plateaus");
  v.note("1000 epochs checked");
  return v;
}

// -- 7 ---------------------------------------------------------------------------

Verdict determinism(const fs::path& work) {
  Verdict v;
  TrainConfig c = overfit_config(LossKind::NegSsim, Ablation::R3, 2);
  c.milestones = {};
  std::vector<std::vector<std::uint8_t>> bytes;
  for (int run = 0; run < 2; ++run) {
    Trainer t(c, overfit_pairs());
    (void)t.run_epoch();
    bytes.push_back(encode_checkpoint(t.checkpoint()));
  }
  v.check(bytes[0] == bytes[1], "epoch-1 checkpoints differ");
  const fs::path path = work / "determinism.jdn";
  save_checkpoint(path, decode_checkpoint(bytes[0]));
  v.check(encode_checkpoint(load_checkpoint(path)) == bytes[0], "round trip not bit-exact");
  v.note(std::to_string(bytes[0].size()) + "-byte checkpoints identical");
  return v;
}

// -- 8 ---------------------------------------------------------------------------

int cli(std::vector<std::string> args, std::string* out = nullptr) {
  args.insert(args.begin(), "jdnet");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream o, e;
  const int code = cli::run(static_cast<int>(argv.size()), argv.data(), o, e);
  if (out) *out = o.str() + e.str();
  return code;
}

Verdict cli_pipeline(const fs::path& work) {
  Verdict v;
  const auto start = std::chrono::steady_clock::now();
  const fs::path data = work / "data", run = work / "run", derained = work / "derained";
  std::string log;
  const auto seed = std::to_string(kDataSeed);
  v.check(cli({"synth", "--procedural", std::to_string(kPairs), "--size", std::to_string(kSize), "--seed", seed,
               "--out-dir", data.string()}) == 0,
          "synth failed");
  const int steps = kOverfitSteps / 2;
  const int code = cli({"train",        "--data-root",   data.string(),
                        "--out",        run.string(),    "--units",
                        "3",            "--channels",    "8",
                        "--scales",     "2",             "--pool-rate",
                        "2",            "--batch",       std::to_string(kPairs),
                        "--epochs",     std::to_string(steps),
                        "--milestones", std::to_string(steps * 6 / 10) + "," + std::to_string(steps * 8 / 10),
                        "--lr",         fmt("%g", kOverfitLr),
                        "--quiet"},
                       &log);
  v.check(code == 0, "train exit " + std::to_string(code) + ": " + log);
  const fs::path ckpt = run / "last.jdn";
  const fs::path report = work / "report.csv";
  v.check(cli({"eval", "--checkpoint", ckpt.string(), "--data-root", data.string(), "--report", report.string()}) == 0,
          "eval failed");
  std::ifstream csv(report);
  std::vector<std::string> rows;
  for (std::string line; std::getline(csv, line);) rows.push_back(line);
  v.check(rows.size() == kPairs + 2 && rows.front() == "id,psnr,ssim" && rows.back().starts_with("mean,"),
          "malformed CSV report");

  fs::create_directories(work / "rainy");
  const auto manifest = load_manifest(data);
  for (const auto& e : manifest.pairs)
    fs::copy_file(e.rainy, work / "rainy" / (e.id + ".png"), fs::copy_options::overwrite_existing);
  v.check(cli({"derain", "--checkpoint", ckpt.string(), "--in", (work / "rainy").string(), "--out",
               derained.string()}) == 0,
          "derain failed");
  double before = 0, after = 0;
  for (const auto& e : manifest.pairs) {
    const Image clean = read_png(e.clean);
    before += score_images(read_png(e.rainy), clean).ssim;
    after += score_images(read_png(derained / (e.id + ".png")), clean).ssim;
  }
  before /= manifest.pairs.size();
  after /= manifest.pairs.size();
  v.check(after > before, fmt("derained SSIM %.4f not above rainy %.4f", after, before));
  v.note(fmt("SSIM rainy %.4f -> derained %.4f, %.0fs", before, after, seconds_since(start)));
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc != 2) {
    std::fprintf(stderr, "usage: %s <work-dir>\n", argv[0]);
    return 2;
  }
  const fs::path work = argv[1];
  fs::remove_all(work);
  fs::create_directories(work);

  const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle equivalence", oracle_equivalence},
      {"shape and structure invariants", structure},
      {"overfit experiment", overfit_experiment},
      {"schedule conformance", schedule},
      {"ablation plumbing", ablation_plumbing},
      {"determinism", [&] { return determinism(work); }},
      {"end-to-end CLI", [&] { return cli_pipeline(work); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v.check(false, std::string("exception: ") + e.what());
    }
    failures += !v.pass;
    std::printf("%s criterion %zu (%s): %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                v.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
