#include "jdnet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace jdnet {

using detail::require;
using nlohmann::json;

namespace {

constexpr std::uint64_t kModelStream = 0;
constexpr std::uint64_t kEpochStream = 1ULL << 32;

ArrayRecord to_record(const std::string& name, const Tensor<float>& t) {
  const Shape& s = t.shape();
  ArrayRecord r{name,
                {static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c), static_cast<std::uint32_t>(s.h),
                 static_cast<std::uint32_t>(s.w)},
                {}};
  r.values.assign(t.data().begin(), t.data().end());
  return r;
}

void load_record(const ArrayRecord* r, const std::string& name, Tensor<float> t) {
  if (!r) throw CheckpointError("checkpoint lacks " + name);
  const Shape& s = t.shape();
  const std::vector<std::uint32_t> expected{static_cast<std::uint32_t>(s.n), static_cast<std::uint32_t>(s.c),
                                            static_cast<std::uint32_t>(s.h), static_cast<std::uint32_t>(s.w)};
  if (r->dims != expected) throw CheckpointError("checkpoint record " + name + " has the wrong shape");
  std::copy(r->values.begin(), r->values.end(), t.data().begin());
}

json model_json(const ModelConfig& m) {
  return {{"units", m.units},
          {"channels", m.channels},
          {"scales", m.scales},
          {"pool_rate", m.pool_rate},
          {"footprint", m.footprint},
          {"reduction", m.reduction},
          {"share", m.share},
          {"ablation", std::string(to_string(m.ablation))},
          {"attention_normalize", std::string(to_string(m.attention_normalize))}};
}

template <typename F>
void for_each_field(const json& j, const char* section, F&& f) {
  require(j.is_object(), std::string(section) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!f(key, value)) throw ShapeError(std::string("unknown ") + section + " key '" + key + "'");
  }
}

ModelConfig model_from_json(const json& j) {
  ModelConfig m;
  for_each_field(j, "model", [&](const std::string& k, const json& v) {
    if (k == "units") m.units = v.get<int>();
    else if (k == "channels") m.channels = v.get<int>();
    else if (k == "scales") m.scales = v.get<int>();
    else if (k == "pool_rate") m.pool_rate = v.get<int>();
    else if (k == "footprint") m.footprint = v.get<int>();
    else if (k == "reduction") m.reduction = v.get<int>();
    else if (k == "share") m.share = v.get<int>();
    else if (k == "ablation") m.ablation = parse_ablation(v.get<std::string>());
    else if (k == "attention_normalize") m.attention_normalize = parse_attention_norm(v.get<std::string>());
    else return false;
    return true;
  });
  return m;
}

Tensor<double> image_tensor(const Image& img, ColorSpace space) {
  Tensor<double> t = images_to_tensor<double>({&img});
  return space == ColorSpace::Luma ? to_luma(t) : t;
}

Image center_crop(const Image& img, int size) {
  if (img.height < size || img.width < size)
    throw IoError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) + " smaller than crop " +
                  std::to_string(size));
  return crop(img, (img.height - size) / 2, (img.width - size) / 2, size, size);
}

}  // namespace

ColorSpace parse_color_space(std::string_view name) {
  if (name == "rgb") return ColorSpace::Rgb;
  if (name == "luma") return ColorSpace::Luma;
  throw ShapeError("unknown colour space '" + std::string(name) + "' (expected rgb or luma)");
}

std::string_view to_string(ColorSpace space) { return space == ColorSpace::Rgb ? "rgb" : "luma"; }

void TrainConfig::validate() const {
  model.validate();
  require(epochs >= 1, "epochs must be positive");
  require(base_lr > 0, "base_lr must be positive");
  require(lr_factor > 0, "lr_factor must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    require(milestones[i] >= 1 && milestones[i] < epochs, "milestones must lie in [1, epochs)");
    require(i == 0 || milestones[i] > milestones[i - 1], "milestones must be strictly increasing");
  }
  require(batch >= 1, "batch must be positive");
  require(crop >= 1 && crop % model.spatial_multiple() == 0,
          "crop must be a positive multiple of " + std::to_string(model.spatial_multiple()));
  require(monitor_samples >= 0, "monitor_samples must be non-negative");
}

std::string to_json(const TrainConfig& c) {
  json j{{"epochs", c.epochs},
         {"base_lr", c.base_lr},
         {"milestones", c.milestones},
         {"lr_factor", c.lr_factor},
         {"crop", c.crop},
         {"batch", c.batch},
         {"loss", std::string(to_string(c.loss))},
         {"seed", c.seed},
         {"monitor_samples", c.monitor_samples},
         {"metric_space", std::string(to_string(c.metric_space))},
         {"model", model_json(c.model)}};
  return j.dump();
}

TrainConfig train_config_from_json(const std::string& text) {
  TrainConfig c;
  try {
    const json j = json::parse(text);
    for_each_field(j, "config", [&](const std::string& k, const json& v) {
      if (k == "epochs") c.epochs = v.get<int>();
      else if (k == "base_lr") c.base_lr = v.get<double>();
      else if (k == "milestones") c.milestones = v.get<std::vector<int>>();
      else if (k == "lr_factor") c.lr_factor = v.get<double>();
      else if (k == "crop") c.crop = v.get<int>();
      else if (k == "batch") c.batch = v.get<int>();
      else if (k == "loss") c.loss = parse_loss(v.get<std::string>());
      else if (k == "seed") c.seed = v.get<std::uint64_t>();
      else if (k == "monitor_samples") c.monitor_samples = v.get<int>();
      else if (k == "metric_space") c.metric_space = parse_color_space(v.get<std::string>());
      else if (k == "model") c.model = model_from_json(v);
      else return false;
      return true;
    });
  } catch (const json::exception& e) {
    throw ShapeError(std::string("malformed config JSON: ") + e.what());
  }
  return c;
}

double lr_at(int epoch, const TrainConfig& config) {
  require(epoch >= 1 && epoch <= config.epochs,
          "lr_at: epoch " + std::to_string(epoch) + " outside [1, " + std::to_string(config.epochs) + "]");
  double lr = config.base_lr;
  for (int m : config.milestones)
    if (epoch > m) lr *= config.lr_factor;
  return lr;
}

std::string to_json_line(const EpochMetrics& m) {
  return json{{"epoch", m.epoch}, {"loss", m.loss}, {"ssim", m.ssim}, {"psnr", m.psnr}, {"lr", m.lr}}.dump();
}

Trainer::Trainer(TrainConfig config, std::vector<ImagePair> data)
    : Trainer(config, std::move(data), JDNet<float>::make(config.model, derive_seed(config.seed, kModelStream))) {}

Trainer::Trainer(TrainConfig config, std::vector<ImagePair> data, JDNet<float> model)
    : config_(std::move(config)), data_(std::move(data)), model_(std::move(model)) {
  config_.validate();
  keep_freed_buffers();
  if (data_.empty()) throw IoError("training set is empty");
  for (const auto& p : data_) {
    if (p.rainy.height < config_.crop || p.rainy.width < config_.crop)
      throw IoError("training image " + p.id + " is smaller than the " + std::to_string(config_.crop) + " crop");
  }
  const std::size_t monitored = std::min<std::size_t>(config_.monitor_samples, data_.size());
  for (std::size_t i = 0; i < monitored; ++i)
    monitor_.push_back({center_crop(data_[i].rainy, config_.crop), center_crop(data_[i].clean, config_.crop),
                        data_[i].id});
  params_ = model_.parameters();
  for (auto& p : params_) p.tensor.set_requires_grad(true);
  adam_ = AdamState::for_parameters(params_);
}

JDNet<float> model_from_checkpoint(const Checkpoint& checkpoint) {
  const TrainConfig config = config_from_checkpoint(checkpoint);
  JDNet<float> model = JDNet<float>::make(config.model, 0);
  const TensorList<float> state = model.state();
  if (state.size() != checkpoint.parameters.size())
    throw CheckpointError("checkpoint holds " + std::to_string(checkpoint.parameters.size()) +
                          " parameters, the configured model has " + std::to_string(state.size()));
  for (const auto& t : state) load_record(checkpoint.find_parameter(t.name), t.name, t.tensor);
  return model;
}

TrainConfig config_from_checkpoint(const Checkpoint& checkpoint) {
  try {
    return train_config_from_json(checkpoint.config_json);
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
}

Trainer Trainer::resume(const Checkpoint& checkpoint, std::vector<ImagePair> data) {
  Trainer t(config_from_checkpoint(checkpoint), std::move(data), model_from_checkpoint(checkpoint));
  for (std::size_t i = 0; i < t.params_.size(); ++i) {
    const std::string& name = t.params_[i].name;
    load_record(checkpoint.find_optimizer("adam.m." + name), "adam.m." + name, t.adam_.m[i]);
    load_record(checkpoint.find_optimizer("adam.v." + name), "adam.v." + name, t.adam_.v[i]);
  }
  const ArrayRecord* step = checkpoint.find_optimizer("adam.step");
  if (!step || step->values.size() != 1) throw CheckpointError("checkpoint lacks adam.step");
  t.adam_.step = static_cast<std::uint32_t>(step->values[0]);
  t.epoch_ = static_cast<int>(checkpoint.epoch);
  if (checkpoint.seed != t.config_.seed) throw CheckpointError("checkpoint seed disagrees with its config echo");
  return t;
}

Checkpoint Trainer::checkpoint() const {
  Checkpoint c;
  for (const auto& t : model_.state()) c.parameters.push_back(to_record(t.name, t.tensor));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    c.optimizer.push_back(to_record("adam.m." + params_[i].name, adam_.m[i]));
    c.optimizer.push_back(to_record("adam.v." + params_[i].name, adam_.v[i]));
  }
  require(adam_.step < (1u << 24), "adam step count exceeds the exactly representable range");
  c.optimizer.push_back(ArrayRecord{"adam.step", {1}, {static_cast<float>(adam_.step)}});
  c.epoch = static_cast<std::uint32_t>(epoch_);
  c.seed = config_.seed;
  c.config_json = to_json(config_);
  return c;
}

double Trainer::train_step(const std::vector<ImagePair>& batch, double lr) {
  auto [rainy, clean] = to_tensor<float>(batch);
  for (auto& p : params_) p.tensor.zero_grad();
  clear_tape<float>();
  const auto out = model_.forward(rainy, true);
  const Tensor<float> loss = compute_loss(config_.loss, out.background, clean);
  const double value = loss.item();
  if (!std::isfinite(value)) {
    clear_tape<float>();
    throw NumericalError("non-finite loss at epoch " + std::to_string(epoch_ + 1));
  }
  backward(loss);
  adam_step(params_, adam_, lr);
  return value;
}

EpochMetrics Trainer::run_epoch() {
  require(epoch_ < config_.epochs, "training already finished");
  const int epoch = epoch_ + 1;
  const double lr = lr_at(epoch, config_);
  Rng rng(derive_seed(config_.seed, kEpochStream + static_cast<std::uint64_t>(epoch)));

  std::vector<std::size_t> order(data_.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = order.size(); i-- > 1;)
    std::swap(order[i], order[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i)))]);

  EpochMetrics m;
  m.epoch = epoch;
  m.lr = lr;
  double total = 0.0;
  for (std::size_t start = 0; start < order.size(); start += config_.batch) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch));
    std::vector<ImagePair> batch;
    for (std::size_t k = start; k < end; ++k) batch.push_back(random_crop(data_[order[k]], config_.crop, rng));
    total += train_step(batch, lr);
    ++m.steps;
  }
  m.loss = total / m.steps;
  epoch_ = epoch;
  std::tie(m.ssim, m.psnr) = monitor();
  return m;
}

std::pair<double, double> Trainer::monitor() {
  if (monitor_.empty()) return {0.0, 0.0};
  const EvalReport report = evaluate(model_, monitor_, config_.metric_space);
  return {report.mean_ssim, report.mean_psnr};
}

TrainResult train(Trainer& trainer, const TrainOptions& options) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(options.out_dir, ec);
  if (ec) throw IoError("cannot create " + options.out_dir.string() + ": " + ec.message());
  std::ofstream log(options.out_dir / "metrics.jsonl", std::ios::app);
  if (!log) throw IoError("cannot write " + (options.out_dir / "metrics.jsonl").string());

  TrainResult result;
  while (trainer.epoch() < trainer.config().epochs) {
    EpochMetrics m;
    try {
      m = trainer.run_epoch();
    } catch (const NumericalError& e) {
      result.diverged = true;
      result.failure = e.what();
      break;
    }
    log << to_json_line(m) << '\n' << std::flush;
    const Checkpoint c = trainer.checkpoint();
    save_checkpoint(options.out_dir / "last.jdn", c);
    if (options.checkpoint_every > 0 && m.epoch % options.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof(name), "ckpt-epoch-%04d.jdn", m.epoch);
      save_checkpoint(options.out_dir / name, c);
    }
    result.history.push_back(m);
    if (options.on_epoch) options.on_epoch(m);
  }
  return result;
}

DerainResult derain(JDNet<float>& model, const Image& rainy) {
  const int multiple = model.config().spatial_multiple();
  const int h = (rainy.height + multiple - 1) / multiple * multiple;
  const int w = (rainy.width + multiple - 1) / multiple * multiple;
  const Image padded = (h == rainy.height && w == rainy.width) ? rainy : reflect_pad(rainy, h, w);

  NoGradGuard no_grad;
  const auto out = model.forward(images_to_tensor<float>({&padded}), false);
  DerainResult r;
  r.background = crop(tensor_to_image(out.background), 0, 0, rainy.height, rainy.width);
  clamp_unit(r.background);
  r.rain = crop(tensor_to_image(out.rain), 0, 0, rainy.height, rainy.width);
  return r;
}

PairScore score_images(const Image& prediction, const Image& target, ColorSpace space) {
  require(prediction.height == target.height && prediction.width == target.width,
          "score_images: image sizes differ");
  NoGradGuard no_grad;
  const Tensor<double> a = image_tensor(prediction, space);
  const Tensor<double> b = image_tensor(target, space);
  return {psnr(a, b), ssim(a, b).item()};
}

EvalReport evaluate(JDNet<float>& model, const std::vector<ImagePair>& pairs, ColorSpace space) {
  EvalReport report;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  int scored = 0;
  for (const auto& p : pairs) {
    EvalRecord rec{p.id, 0.0, 0.0, {}};
    try {
      const PairScore s = score_images(derain(model, p.rainy).background, p.clean, space);
      rec.psnr = s.psnr;
      rec.ssim = s.ssim;
      psnr_sum += capped_psnr(s.psnr);
      ssim_sum += s.ssim;
      ++scored;
    } catch (const std::exception& e) {
      rec.error = e.what();
      ++report.failures;
    }
    report.images.push_back(std::move(rec));
  }
  if (scored > 0) {
    report.mean_psnr = psnr_sum / scored;
    report.mean_ssim = ssim_sum / scored;
  }
  return report;
}

EvalReport evaluate(JDNet<float>& model, const DatasetManifest& manifest, ColorSpace space) {
  EvalReport report;
  double psnr_sum = 0.0, ssim_sum = 0.0;
  int scored = 0;
  for (const auto& entry : manifest.pairs) {
    std::vector<ImagePair> one;
    try {
      one.push_back({read_png(entry.rainy), read_png(entry.clean), entry.id});
    } catch (const IoError& e) {
      report.images.push_back({entry.id, 0.0, 0.0, e.what()});
      ++report.failures;
      continue;
    }
    EvalReport single = evaluate(model, one, space);
    EvalRecord& rec = single.images.front();
    if (rec.error.empty()) {
      psnr_sum += capped_psnr(rec.psnr);
      ssim_sum += rec.ssim;
      ++scored;
    } else {
      ++report.failures;
    }
    report.images.push_back(std::move(rec));
  }
  if (scored > 0) {
    report.mean_psnr = psnr_sum / scored;
    report.mean_ssim = ssim_sum / scored;
  }
  return report;
}

std::string format_csv(const EvalReport& report) {
  std::ostringstream out;
  char line[128];
  out << "id,psnr,ssim\n";
  for (const auto& r : report.images) {
    if (!r.error.empty()) continue;
    std::snprintf(line, sizeof(line), ",%.17g,%.17g\n", capped_psnr(r.psnr), r.ssim);
    out << r.id << line;
  }
  std::snprintf(line, sizeof(line), "mean,%.17g,%.17g\n", report.mean_psnr, report.mean_ssim);
  out << line;
  return out.str();
}

std::string format_summary(const EvalReport& report) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %10s %8s\n", "image", "PSNR", "SSIM");
  out << line;
  for (const auto& r : report.images) {
    if (!r.error.empty()) {
      out << r.id << ": error: " << r.error << '\n';
      continue;
    }
    std::snprintf(line, sizeof(line), "%-24s %10.4f %8.4f\n", r.id.c_str(), capped_psnr(r.psnr), r.ssim);
    out << line;
  }
  std::snprintf(line, sizeof(line), "%-24s %10.4f %8.4f\n", "mean", report.mean_psnr, report.mean_ssim);
  out << line;
  out << "reference (JDNet, Rain100H): PSNR 30.02  SSIM 0.92\n"
         "reference ablation SSIM/PSNR: R1 0.9130/29.3357  R2 0.9219/30.0307  R3 0.9221/30.0160\n";
  return out.str();
}

}  // namespace jdnet
