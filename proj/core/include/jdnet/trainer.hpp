#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "jdnet/checkpoint.hpp"
#include "jdnet/data.hpp"
#include "jdnet/losses.hpp"
#include "jdnet/modules.hpp"
#include "jdnet/optim.hpp"

namespace jdnet {

enum class ColorSpace { Rgb, Luma };
ColorSpace parse_color_space(std::string_view name);
std::string_view to_string(ColorSpace space);

struct TrainConfig {
  int epochs = 1000;
  double base_lr = 5e-4;
  std::vector<int> milestones{600, 800};
  double lr_factor = 0.1;
  int crop = 64;
  int batch = 8;
  LossKind loss = LossKind::NegSsim;
  std::uint64_t seed = 0;
  ModelConfig model;
  /// Training pairs scored after every epoch (first pairs, centre crop).
  int monitor_samples = 1;
  ColorSpace metric_space = ColorSpace::Rgb;

  void validate() const;
};

std::string to_json(const TrainConfig& config);
/// Throws ShapeError on unknown or ill-typed fields.
TrainConfig train_config_from_json(const std::string& json);

/// Piecewise-constant step schedule; `epoch` is 1-based and must lie in [1, epochs].
double lr_at(int epoch, const TrainConfig& config);

struct EpochMetrics {
  int epoch = 0;
  double loss = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;  // capped at kPsnrCap
  double lr = 0.0;
  int steps = 0;
};

std::string to_json_line(const EpochMetrics& metrics);

/// Owns the model and optimizer for one training run.
///
/// Epoch e shuffles and crops with an RNG derived from (seed, e), so a run
/// resumed from the checkpoint of epoch e replays epoch e + 1 exactly.
class Trainer {
 public:
  Trainer(TrainConfig config, std::vector<ImagePair> data);
  static Trainer resume(const Checkpoint& checkpoint, std::vector<ImagePair> data);

  /// Trains the next epoch. Throws NumericalError on a non-finite loss or
  /// gradient; the failing step applies no parameter update.
  EpochMetrics run_epoch();

  /// Scores the monitor sample in inference mode.
  std::pair<double, double> monitor();

  [[nodiscard]] Checkpoint checkpoint() const;
  [[nodiscard]] int epoch() const { return epoch_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] JDNet<float>& model() { return model_; }
  [[nodiscard]] const JDNet<float>& model() const { return model_; }
  [[nodiscard]] AdamState& optimizer() { return adam_; }

 private:
  Trainer(TrainConfig config, std::vector<ImagePair> data, JDNet<float> model);
  double train_step(const std::vector<ImagePair>& batch, double lr);

  TrainConfig config_;
  std::vector<ImagePair> data_;
  std::vector<ImagePair> monitor_;
  JDNet<float> model_;
  TensorList<float> params_;
  AdamState adam_;
  int epoch_ = 0;
};

struct TrainOptions {
  std::filesystem::path out_dir;
  /// Also keep ckpt-epoch-NNNN.jdn every this many epochs (0: only last.jdn).
  int checkpoint_every = 0;
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  bool diverged = false;
  std::string failure;
};

/// Runs `trainer` up to its configured epoch count, appending metrics.jsonl and
/// refreshing last.jdn under out_dir after every epoch. A numerical failure
/// stops the run with the previous last.jdn untouched.
TrainResult train(Trainer& trainer, const TrainOptions& options);

/// Restores a model (architecture from the config echo) from a checkpoint.
JDNet<float> model_from_checkpoint(const Checkpoint& checkpoint);
TrainConfig config_from_checkpoint(const Checkpoint& checkpoint);

struct DerainResult {
  Image background;  // clamped to [0, 1]
  Image rain;        // raw r_hat, unclamped
};

/// Inference on an arbitrary-size image: reflect-pad to the model's spatial
/// multiple, run, crop back.
DerainResult derain(JDNet<float>& model, const Image& rainy);

struct PairScore {
  double psnr = 0.0;  // may be +inf
  double ssim = 0.0;
};

/// PSNR/SSIM of a prediction against its target in the chosen colour space.
PairScore score_images(const Image& prediction, const Image& target, ColorSpace space = ColorSpace::Rgb);

struct EvalRecord {
  std::string id;
  double psnr = 0.0;
  double ssim = 0.0;
  std::string error;  // non-empty when the pair could not be scored
};

struct EvalReport {
  std::vector<EvalRecord> images;
  double mean_psnr = 0.0;  // over capped per-image values
  double mean_ssim = 0.0;
  int failures = 0;
};

EvalReport evaluate(JDNet<float>& model, const std::vector<ImagePair>& pairs, ColorSpace space = ColorSpace::Rgb);
/// Loads each pair of the manifest separately; unreadable pairs become error entries.
EvalReport evaluate(JDNet<float>& model, const DatasetManifest& manifest, ColorSpace space = ColorSpace::Rgb);

/// CSV with header `id,psnr,ssim`, one row per scored image and a final `mean` row.
std::string format_csv(const EvalReport& report);
/// Human-readable summary with published reference numbers for context.
std::string format_summary(const EvalReport& report);

}  // namespace jdnet
