#include "jdnet/commands.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "jdnet/checkpoint.hpp"
#include "jdnet/data.hpp"
#include "jdnet/gradcheck_suite.hpp"
#include "jdnet/trainer.hpp"

namespace jdnet::cli {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kSynthStream = 7;

/// Error carrying the exit code it should map to.
struct CommandError : std::runtime_error {
  CommandError(ExitCode code, const std::string& message) : std::runtime_error(message), code(code) {}
  ExitCode code;
};

/// Flat `key = value` file; keys are long flag names without the dashes.
class ConfigFile {
 public:
  void attach(CLI::App* app) {
    app_ = app;
    app->add_option("--config", path_, "Flat key = value file; flags given on the command line win");
  }
  void flag(const std::string& name, bool* target) { flags_[name] = target; }

  /// Applies file values as option defaults. Must run before parsing.
  void preload(int argc, const char* const* argv) {
    std::string path;
    for (int i = 1; i < argc; ++i) {
      const std::string_view a = argv[i];
      if (a == "--config" && i + 1 < argc) path = argv[i + 1];
      if (a.starts_with("--config=")) path = std::string(a.substr(9));
    }
    if (path.empty()) return;
    std::ifstream in(path);
    if (!in) throw CommandError(kUsageError, "cannot read config file " + path);
    std::vector<CLI::ConfigItem> items;
    try {
      items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::ParseError& e) {
      throw CommandError(kUsageError, "malformed config file " + path + ": " + e.what());
    }
    for (const auto& item : items) {
      if (!item.parents.empty() || item.name == "config")
        throw CommandError(kUsageError, "invalid config key '" + item.fullname() + "' in " + path);
      if (auto f = flags_.find(item.name); f != flags_.end()) {
        pending_flags_[item.name] = item.inputs.size() == 1 && (item.inputs[0] == "true" || item.inputs[0] == "1");
        continue;
      }
      CLI::Option* opt = app_->get_option_no_throw("--" + item.name);
      if (!opt) throw CommandError(kUsageError, "invalid config key '" + item.name + "' in " + path);
      std::string joined;
      for (const auto& v : item.inputs) joined += (joined.empty() ? "" : ",") + v;
      try {
        opt->default_val(joined);
      } catch (const CLI::Error& e) {
        throw CommandError(kUsageError, "config key '" + item.name + "': " + e.what());
      }
    }
  }

  /// Flags set in the file but not on the command line.
  void apply_flags() {
    for (const auto& [name, value] : pending_flags_) {
      if (app_->get_option("--" + name)->count() == 0) *flags_[name] = value;
    }
  }

 private:
  CLI::App* app_ = nullptr;
  std::string path_;
  std::map<std::string, bool*> flags_;
  std::map<std::string, bool> pending_flags_;
};

struct SynthFlags {
  RainSynthConfig rain;

  void attach(CLI::App* app) {
    app->add_option("--streaks-min", rain.streak_count.lo, "Fewest streaks per image")->capture_default_str();
    app->add_option("--streaks-max", rain.streak_count.hi, "Most streaks per image")->capture_default_str();
    app->add_option("--angle-min", rain.angle_deg.lo, "Streak angle from vertical, degrees")->capture_default_str();
    app->add_option("--angle-max", rain.angle_deg.hi)->capture_default_str();
    app->add_option("--length-min", rain.length.lo, "Streak length, pixels")->capture_default_str();
    app->add_option("--length-max", rain.length.hi)->capture_default_str();
    app->add_option("--width-min", rain.width.lo, "Streak width, pixels")->capture_default_str();
    app->add_option("--width-max", rain.width.hi)->capture_default_str();
    app->add_option("--intensity-min", rain.intensity.lo, "Added brightness at the streak core")->capture_default_str();
    app->add_option("--intensity-max", rain.intensity.hi)->capture_default_str();
  }
  [[nodiscard]] RainSynthConfig config(std::uint64_t seed) const {
    RainSynthConfig c = rain;
    c.seed = seed;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

struct TrainCommand {
  ConfigFile config_file;
  TrainConfig cfg;
  std::string out_dir, data_root, resume, pair_pattern = PairPattern{}.str();
  std::string ablation = "r3", attention_norm = "softmax", loss = "neg_ssim", metric_space = "rgb";
  bool synth = false, print_config = false, quiet = false;
  int synth_count = 8, synth_size = 64, checkpoint_every = 0;
  SynthFlags rain;

  void attach(CLI::App* app) {
    config_file.attach(app);
    app->add_option("--out", out_dir, "Directory for checkpoints and metrics.jsonl");
    app->add_option("--data-root", data_root, "Directory of rainy/clean PNG pairs");
    app->add_flag("--synth", synth, "Train on generated scenes with synthetic rain");
    app->add_option("--synth-count", synth_count, "Generated pairs for --synth")->capture_default_str();
    app->add_option("--synth-size", synth_size, "Generated image side for --synth")->capture_default_str();
    app->add_option("--pair-pattern", pair_pattern, "rainy:clean filename templates")->capture_default_str();
    app->add_option("--resume", resume, "Continue from a checkpoint (its config is used)");
    app->add_option("--units", cfg.model.units, "Joint units U")->capture_default_str();
    app->add_option("--channels", cfg.model.channels, "Feature channels C")->capture_default_str();
    app->add_option("--scales", cfg.model.scales, "Scale-aggregation depth n")->capture_default_str();
    app->add_option("--pool-rate", cfg.model.pool_rate, "Self-calibrated pooling rate r")->capture_default_str();
    app->add_option("--footprint", cfg.model.footprint, "Attention window side")->capture_default_str();
    app->add_option("--reduction", cfg.model.reduction, "Attention channel reduction")->capture_default_str();
    app->add_option("--share", cfg.model.share, "Channels sharing one attention weight")->capture_default_str();
    app->add_option("--ablation", ablation, "r1 | r2 | r3")->capture_default_str();
    app->add_option("--attention-norm", attention_norm, "softmax | none")->capture_default_str();
    app->add_option("--epochs", cfg.epochs)->capture_default_str();
    app->add_option("--lr", cfg.base_lr, "Base learning rate")->capture_default_str();
    app->add_option("--milestones", cfg.milestones, "Epochs after which lr is multiplied by --lr-factor")
        ->delimiter(',')
        ->capture_default_str();
    app->add_option("--lr-factor", cfg.lr_factor)->capture_default_str();
    app->add_option("--crop", cfg.crop, "Training crop side")->capture_default_str();
    app->add_option("--batch", cfg.batch)->capture_default_str();
    app->add_option("--loss", loss, "neg_ssim | mae | mse")->capture_default_str();
    app->add_option("--seed", cfg.seed)->capture_default_str();
    app->add_option("--monitor-samples", cfg.monitor_samples, "Training pairs scored after each epoch")
        ->capture_default_str();
    app->add_option("--metric-space", metric_space, "rgb | luma")->capture_default_str();
    app->add_option("--checkpoint-every", checkpoint_every, "Keep ckpt-epoch-NNNN.jdn every N epochs (0: off)")
        ->capture_default_str();
    app->add_flag("--print-config", print_config, "Print the resolved configuration and exit");
    app->add_flag("--quiet", quiet, "Do not print per-epoch lines");
    rain.attach(app);
    config_file.flag("synth", &synth);
    config_file.flag("print-config", &print_config);
    config_file.flag("quiet", &quiet);
  }

  int run(std::ostream& out, std::ostream& err) {
    try {
      cfg.model.ablation = parse_ablation(ablation);
      cfg.model.attention_normalize = parse_attention_norm(attention_norm);
      cfg.loss = parse_loss(loss);
      cfg.metric_space = parse_color_space(metric_space);
    } catch (const ShapeError& e) {
      throw CommandError(kUsageError, e.what());
    }
    if (print_config) {
      out << to_json(cfg) << '\n';
      return kSuccess;
    }
    if (out_dir.empty()) throw CommandError(kUsageError, "train: --out is required");
    if (synth == !data_root.empty()) throw CommandError(kUsageError, "train: give exactly one of --data-root or --synth");

    std::vector<ImagePair> data;
    if (synth) {
      data = make_synthetic_pairs(synth_count, synth_size, derive_seed(cfg.seed, kSynthStream), rain.config(0));
    } else {
      const auto manifest = load_manifest(data_root, PairPattern::parse(pair_pattern), Split::Train);
      for (const auto& w : manifest.warnings) err << "warning: " << w << '\n';
      data = load_pairs(manifest);
    }

    std::optional<Trainer> trainer;
    if (resume.empty()) {
      trainer.emplace(cfg, std::move(data));
    } else {
      trainer.emplace(Trainer::resume(load_checkpoint(resume), std::move(data)));
    }
    out << "config " << to_json(trainer->config()) << '\n';

    TrainOptions options;
    options.out_dir = out_dir;
    options.checkpoint_every = checkpoint_every;
    if (!quiet) {
      options.on_epoch = [&out](const EpochMetrics& m) {
        char line[160];
        std::snprintf(line, sizeof(line), "epoch %4d  loss %.6f  ssim %.4f  psnr %.3f  lr %.1e\n", m.epoch, m.loss,
                      m.ssim, m.psnr, m.lr);
        out << line << std::flush;
      };
    }
    const TrainResult result = train(*trainer, options);
    if (result.diverged) {
      err << "error: " << result.failure << "; last good checkpoint kept in " << out_dir << '\n';
      return kNumericalError;
    }
    return kSuccess;
  }
};

// ---------------------------------------------------------------------------

struct EvalCommand {
  ConfigFile config_file;
  std::string checkpoint, data_root, report, pair_pattern = PairPattern{}.str(), metric_space = "rgb";

  void attach(CLI::App* app) {
    config_file.attach(app);
    app->add_option("--checkpoint", checkpoint, "Trained checkpoint (.jdn)");
    app->add_option("--data-root", data_root, "Directory of rainy/clean PNG pairs");
    app->add_option("--report", report, "CSV report path (id,psnr,ssim)");
    app->add_option("--pair-pattern", pair_pattern, "rainy:clean filename templates")->capture_default_str();
    app->add_option("--metric-space", metric_space, "rgb | luma")->capture_default_str();
  }

  int run(std::ostream& out, std::ostream& err) {
    if (checkpoint.empty() || data_root.empty() || report.empty())
      throw CommandError(kUsageError, "eval: --checkpoint, --data-root and --report are required");
    ColorSpace space;
    PairPattern pattern;
    try {
      space = parse_color_space(metric_space);
      pattern = PairPattern::parse(pair_pattern);
    } catch (const ShapeError& e) {
      throw CommandError(kUsageError, e.what());
    }
    JDNet<float> model = model_from_checkpoint(load_checkpoint(checkpoint));
    const auto manifest = load_manifest(data_root, pattern, Split::Test);
    for (const auto& w : manifest.warnings) err << "warning: " << w << '\n';
    const EvalReport result = evaluate(model, manifest, space);

    std::ofstream csv(report);
    if (!csv || !(csv << format_csv(result)) || !csv.flush()) throw CommandError(kDataError, "cannot write " + report);
    out << format_summary(result);
    for (const auto& r : result.images)
      if (!r.error.empty()) err << "error: " << r.id << ": " << r.error << '\n';
    return result.failures > 0 ? kDataError : kSuccess;
  }
};

// ---------------------------------------------------------------------------

struct DerainCommand {
  ConfigFile config_file;
  std::string checkpoint, in, out_path;
  bool dump_streaks = false;

  void attach(CLI::App* app) {
    config_file.attach(app);
    app->add_option("--checkpoint", checkpoint, "Trained checkpoint (.jdn)");
    app->add_option("--in", in, "Rainy PNG or a directory of PNGs");
    app->add_option("--out", out_path, "Output PNG, or a directory when --in is one");
    app->add_flag("--dump-streaks", dump_streaks, "Also write the min-max normalized rain layer (*-streaks.png)");
    config_file.flag("dump-streaks", &dump_streaks);
  }

  static Image normalized(const Image& rain) {
    Image out = rain;
    const auto [lo, hi] = std::minmax_element(rain.pixels.begin(), rain.pixels.end());
    const float range = *hi - *lo;
    for (float& v : out.pixels) v = range > 0 ? (v - *lo) / range : 0.0f;
    return out;
  }

  int run(std::ostream& out, std::ostream& err) {
    if (checkpoint.empty() || in.empty() || out_path.empty())
      throw CommandError(kUsageError, "derain: --checkpoint, --in and --out are required");
    JDNet<float> model = model_from_checkpoint(load_checkpoint(checkpoint));

    std::vector<std::pair<fs::path, fs::path>> jobs;
    if (fs::is_directory(in)) {
      std::error_code ec;
      fs::create_directories(out_path, ec);
      if (ec) throw CommandError(kDataError, "cannot create " + out_path + ": " + ec.message());
      std::vector<fs::path> inputs;
      for (const auto& e : fs::directory_iterator(in))
        if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
      std::sort(inputs.begin(), inputs.end());
      for (const auto& p : inputs) jobs.emplace_back(p, fs::path(out_path) / p.filename());
    } else {
      jobs.emplace_back(in, out_path);
    }

    int failures = 0;
    for (const auto& [src, dst] : jobs) {
      try {
        const DerainResult r = derain(model, read_png(src));
        write_png(dst, r.background);
        if (dump_streaks) {
          fs::path streaks = dst;
          streaks.replace_filename(dst.stem().string() + "-streaks.png");
          write_png(streaks, normalized(r.rain));
        }
        out << src.string() << " -> " << dst.string() << '\n';
      } catch (const std::exception& e) {
        err << "error: " << src.string() << ": " << e.what() << '\n';
        ++failures;
      }
    }
    return failures > 0 ? kDataError : kSuccess;
  }
};

// ---------------------------------------------------------------------------

struct GradcheckCommand {
  ConfigFile config_file;
  std::string module = "all";
  std::optional<double> tolerance;

  void attach(CLI::App* app) {
    config_file.attach(app);
    app->add_option("--module", module, "all | conv | attention | scaleagg | scconv | ssim | network")
        ->check(CLI::IsMember(gradcheck_groups()))
        ->capture_default_str();
    app->add_option("--tol", tolerance, "Max relative error (default 1e-4, network 1e-3)");
  }

  int run(std::ostream& out, std::ostream&) {
    int failed = 0;
    const auto reports = run_gradcheck_suite(module, tolerance, [&](const GradCheckReport& r) {
      char line[200];
      std::snprintf(line, sizeof(line), "%-24s max rel err %.3e  tol %.1e  %zu elements (%zu kink-refined)  %s\n",
                    r.name.c_str(), r.max_relative_error, r.tolerance, r.relative_errors.size(), r.refined_elements,
                    r.passed ? "PASS" : "FAIL");
      out << line << std::flush;
      if (!r.passed) ++failed;
    });
    out << reports.size() - failed << "/" << reports.size() << " checks passed\n";
    return failed > 0 ? kNumericalError : kSuccess;
  }
};

// ---------------------------------------------------------------------------

struct SynthCommand {
  ConfigFile config_file;
  std::string clean_dir, out_dir, pair_pattern = PairPattern{}.str();
  std::uint64_t seed = 0;
  int procedural = 0, size = 64;
  SynthFlags rain;

  void attach(CLI::App* app) {
    config_file.attach(app);
    app->add_option("--clean-dir", clean_dir, "Directory of clean PNGs to add rain to");
    app->add_option("--procedural", procedural, "Generate this many clean scenes instead of --clean-dir");
    app->add_option("--size", size, "Side of generated scenes")->capture_default_str();
    app->add_option("--out-dir", out_dir, "Destination for the rainy/clean pairs");
    app->add_option("--seed", seed)->capture_default_str();
    app->add_option("--pair-pattern", pair_pattern, "rainy:clean filename templates")->capture_default_str();
    rain.attach(app);
  }

  int run(std::ostream& out, std::ostream&) {
    if (out_dir.empty()) throw CommandError(kUsageError, "synth: --out-dir is required");
    if (clean_dir.empty() == (procedural == 0))
      throw CommandError(kUsageError, "synth: give exactly one of --clean-dir or --procedural");
    PairPattern pattern;
    RainSynthConfig base;
    try {
      pattern = PairPattern::parse(pair_pattern);
      base = rain.config(0);
    } catch (const ShapeError& e) {
      throw CommandError(kUsageError, e.what());
    }

    std::vector<std::pair<std::string, Image>> scenes;
    if (procedural > 0) {
      for (int i = 0; i < procedural; ++i) {
        char id[16];
        std::snprintf(id, sizeof(id), "%03d", i + 1);
        scenes.emplace_back(id, procedural_scene(size, size, derive_seed(seed, 2 * i)));
      }
    } else {
      if (!fs::is_directory(clean_dir)) throw CommandError(kDataError, clean_dir + " is not a directory");
      std::vector<fs::path> inputs;
      for (const auto& e : fs::directory_iterator(clean_dir))
        if (e.is_regular_file() && e.path().extension() == ".png") inputs.push_back(e.path());
      std::sort(inputs.begin(), inputs.end());
      if (inputs.empty()) throw CommandError(kDataError, "no PNG files in " + clean_dir);
      for (const auto& p : inputs) scenes.emplace_back(p.stem().string(), read_png(p));
    }

    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw CommandError(kDataError, "cannot create " + out_dir + ": " + ec.message());
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      RainSynthConfig cfg = base;
      cfg.seed = derive_seed(seed, 2 * i + 1);
      const ImagePair pair = synthesize_rain(scenes[i].second, cfg, scenes[i].first);
      write_png(fs::path(out_dir) / pattern.rainy_name(pair.id), pair.rainy);
      write_png(fs::path(out_dir) / pattern.clean_name(pair.id), pair.clean);
    }
    out << "wrote " << 2 * scenes.size() << " files to " << out_dir << '\n';
    return kSuccess;
  }
};

template <typename Command>
int guarded(Command& command, std::ostream& out, std::ostream& err) {
  try {
    return command.run(out, err);
  } catch (const CommandError& e) {
    err << "error: " << e.what() << '\n';
    return e.code;
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kNumericalError;
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return kDataError;
  } catch (const ShapeError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app("JDNet single-image deraining", "jdnet");
  app.require_subcommand(1);

  TrainCommand train_cmd;
  EvalCommand eval_cmd;
  DerainCommand derain_cmd;
  GradcheckCommand gradcheck_cmd;
  SynthCommand synth_cmd;
  CLI::App* train_app = app.add_subcommand("train", "Train a model");
  CLI::App* eval_app = app.add_subcommand("eval", "Score a checkpoint on a paired dataset");
  CLI::App* derain_app = app.add_subcommand("derain", "Remove rain from images");
  CLI::App* gradcheck_app = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  CLI::App* synth_app = app.add_subcommand("synth", "Write a synthetic rainy/clean dataset");
  train_cmd.attach(train_app);
  eval_cmd.attach(eval_app);
  derain_cmd.attach(derain_app);
  gradcheck_cmd.attach(gradcheck_app);
  synth_cmd.attach(synth_app);

  const std::string sub = argc > 1 ? argv[1] : "";
  try {
    if (sub == "train") train_cmd.config_file.preload(argc, argv);
    if (sub == "eval") eval_cmd.config_file.preload(argc, argv);
    if (sub == "derain") derain_cmd.config_file.preload(argc, argv);
    if (sub == "gradcheck") gradcheck_cmd.config_file.preload(argc, argv);
    if (sub == "synth") synth_cmd.config_file.preload(argc, argv);
  } catch (const CommandError& e) {
    err << "error: " << e.what() << '\n';
    return e.code;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << (app.get_subcommands().empty() ? app.help() : app.get_subcommands().front()->help());
    return kSuccess;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  if (train_app->parsed()) {
    train_cmd.config_file.apply_flags();
    return guarded(train_cmd, out, err);
  }
  if (eval_app->parsed()) return guarded(eval_cmd, out, err);
  if (derain_app->parsed()) {
    derain_cmd.config_file.apply_flags();
    return guarded(derain_cmd, out, err);
  }
  if (gradcheck_app->parsed()) return guarded(gradcheck_cmd, out, err);
  return guarded(synth_cmd, out, err);
}

int run(int argc, const char* const* argv) { return run(argc, argv, std::cout, std::cerr); }

}  // namespace jdnet::cli
