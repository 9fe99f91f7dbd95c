#include "jdnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numbers>
#include <optional>

namespace jdnet {

using detail::require;

namespace {

constexpr std::string_view kIdToken = "<id>";

struct Template {
  std::string prefix;
  std::string suffix;

  static Template from(const std::string& pattern) {
    const auto pos = pattern.find(kIdToken);
    require(pos != std::string::npos, "pair pattern '" + pattern + "' lacks an <id> placeholder");
    return {pattern.substr(0, pos), pattern.substr(pos + kIdToken.size())};
  }

  [[nodiscard]] std::optional<std::string> match(const std::string& name) const {
    if (name.size() <= prefix.size() + suffix.size()) return std::nullopt;
    if (name.compare(0, prefix.size(), prefix) != 0) return std::nullopt;
    if (name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) return std::nullopt;
    return name.substr(prefix.size(), name.size() - prefix.size() - suffix.size());
  }
};

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (ax + t * vx), dy = py - (ay + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

}  // namespace

PairPattern PairPattern::parse(const std::string& spec) {
  const auto colon = spec.find(':');
  require(colon != std::string::npos, "pair pattern '" + spec + "' must look like rain-<id>.png:norain-<id>.png");
  PairPattern p{spec.substr(0, colon), spec.substr(colon + 1)};
  Template::from(p.rainy);
  Template::from(p.clean);
  require(p.rainy != p.clean, "pair pattern sides must differ");
  return p;
}

std::string PairPattern::rainy_name(const std::string& id) const {
  const auto t = Template::from(rainy);
  return t.prefix + id + t.suffix;
}

std::string PairPattern::clean_name(const std::string& id) const {
  const auto t = Template::from(clean);
  return t.prefix + id + t.suffix;
}

DatasetManifest load_manifest(const std::filesystem::path& root, const PairPattern& pattern, Split split) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("data root " + root.string() + " is not a directory");
  const Template rainy = Template::from(pattern.rainy);
  const Template clean = Template::from(pattern.clean);

  std::map<std::string, DatasetManifest::Entry> found;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    // Try the longer prefix first so "norain-" is not mistaken for "rain-".
    const bool clean_first = clean.prefix.size() >= rainy.prefix.size();
    const Template& first = clean_first ? clean : rainy;
    const Template& second = clean_first ? rainy : clean;
    if (auto id = first.match(name)) {
      auto& e = found[*id];
      e.id = *id;
      (clean_first ? e.clean : e.rainy) = entry.path();
    } else if (auto id2 = second.match(name)) {
      auto& e = found[*id2];
      e.id = *id2;
      (clean_first ? e.rainy : e.clean) = entry.path();
    }
  }

  DatasetManifest manifest;
  manifest.root = root;
  manifest.split = split;
  for (auto& [id, e] : found) {
    if (e.rainy.empty()) {
      manifest.warnings.push_back("unpaired clean file " + e.clean.filename().string());
    } else if (e.clean.empty()) {
      manifest.warnings.push_back("unpaired rainy file " + e.rainy.filename().string());
    } else {
      manifest.pairs.push_back(std::move(e));
    }
  }
  if (manifest.pairs.empty()) throw IoError("no pairs found in " + root.string());
  return manifest;
}

std::vector<ImagePair> load_pairs(const DatasetManifest& manifest) {
  std::vector<ImagePair> pairs;
  pairs.reserve(manifest.pairs.size());
  for (const auto& e : manifest.pairs) {
    ImagePair p{read_png(e.rainy), read_png(e.clean), e.id};
    if (p.rainy.height != p.clean.height || p.rainy.width != p.clean.width)
      throw IoError("pair " + e.id + " has mismatched image sizes");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

void RainSynthConfig::validate() const {
  require(streak_count.lo >= 0 && streak_count.lo <= streak_count.hi, "streak_count range is empty");
  require(angle_deg.lo <= angle_deg.hi, "angle range is empty");
  require(length.lo >= 0 && length.lo <= length.hi, "length range is empty");
  require(width.lo >= 0 && width.lo <= width.hi, "width range is empty");
  require(intensity.lo >= 0 && intensity.lo <= intensity.hi && intensity.hi <= 1.0,
          "intensity range must lie in [0, 1]");
}

ImagePair synthesize_rain(const Image& clean, const RainSynthConfig& config, const std::string& id) {
  config.validate();
  Rng rng(config.seed);
  Image rain(clean.height, clean.width);
  const int streaks = static_cast<int>(rng.uniform_int(config.streak_count.lo, config.streak_count.hi));
  for (int s = 0; s < streaks; ++s) {
    const double angle = rng.uniform(config.angle_deg.lo, config.angle_deg.hi) * std::numbers::pi / 180.0;
    const double length = rng.uniform(config.length.lo, config.length.hi);
    const double width = rng.uniform(config.width.lo, config.width.hi);
    const double intensity = rng.uniform(config.intensity.lo, config.intensity.hi);
    const double cx = rng.uniform(-length / 2, clean.width + length / 2);
    const double cy = rng.uniform(-length / 2, clean.height + length / 2);
    const double dx = std::sin(angle) * length / 2, dy = std::cos(angle) * length / 2;
    const double ax = cx - dx, ay = cy - dy, bx = cx + dx, by = cy + dy;
    const double reach = width / 2 + 1.0;
    const int x0 = std::max(0, static_cast<int>(std::floor(std::min(ax, bx) - reach)));
    const int x1 = std::min(clean.width - 1, static_cast<int>(std::ceil(std::max(ax, bx) + reach)));
    const int y0 = std::max(0, static_cast<int>(std::floor(std::min(ay, by) - reach)));
    const int y1 = std::min(clean.height - 1, static_cast<int>(std::ceil(std::max(ay, by) + reach)));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double d = segment_distance(x + 0.5, y + 0.5, ax, ay, bx, by);
        const double coverage = std::clamp(width / 2 + 0.5 - d, 0.0, 1.0);
        if (coverage <= 0) continue;
        float& r = rain.at(y, x, 0);
        r = static_cast<float>(std::min(1.0, r + intensity * coverage));
      }
  }
  ImagePair pair{clean, clean, id};
  for (int y = 0; y < clean.height; ++y)
    for (int x = 0; x < clean.width; ++x) {
      const float streak = rain.at(y, x, 0);
      for (int c = 0; c < 3; ++c) pair.rainy.at(y, x, c) = std::min(1.0f, clean.at(y, x, c) + streak);
    }
  return pair;
}

Image procedural_scene(int height, int width, std::uint64_t seed) {
  require(height > 0 && width > 0, "procedural_scene: empty size");
  Rng rng(seed);
  double c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = rng.uniform(0.05, 0.6);
    c1[c] = rng.uniform(0.05, 0.6);
  }
  const double theta = rng.uniform(0.0, 2 * std::numbers::pi);
  const double gx = std::cos(theta), gy = std::sin(theta);

  struct Blob {
    double cx, cy, rx, ry, colour[3];
  };
  std::vector<Blob> blobs(static_cast<std::size_t>(rng.uniform_int(2, 4)));
  for (auto& b : blobs) {
    b.cx = rng.uniform(0.0, width);
    b.cy = rng.uniform(0.0, height);
    b.rx = rng.uniform(0.15, 0.4) * width;
    b.ry = rng.uniform(0.15, 0.4) * height;
    for (double& v : b.colour) v = rng.uniform(0.05, 0.65);
  }
  const double fx = rng.uniform(0.5, 2.0) * 2 * std::numbers::pi / width;
  const double fy = rng.uniform(0.5, 2.0) * 2 * std::numbers::pi / height;
  const double phase = rng.uniform(0.0, 2 * std::numbers::pi);

  Image img(height, width);
  const double diag = std::abs(gx) * width + std::abs(gy) * height;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      double t = ((x - width / 2.0) * gx + (y - height / 2.0) * gy) / diag + 0.5;
      t = std::clamp(t, 0.0, 1.0);
      double px[3];
      for (int c = 0; c < 3; ++c) px[c] = (1 - t) * c0[c] + t * c1[c];
      for (const auto& b : blobs) {
        const double ex = (x - b.cx) / b.rx, ey = (y - b.cy) / b.ry;
        const double r = std::sqrt(ex * ex + ey * ey);
        const double a = std::clamp((1.2 - r) / 0.4, 0.0, 1.0);
        const double alpha = a * a * (3 - 2 * a);
        for (int c = 0; c < 3; ++c) px[c] = (1 - alpha) * px[c] + alpha * b.colour[c];
      }
      const double texture = 0.04 * std::sin(fx * x + phase) * std::sin(fy * y);
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = static_cast<float>(std::clamp(px[c] + texture, 0.0, 1.0));
    }
  return img;
}

std::vector<ImagePair> make_synthetic_pairs(int count, int size, std::uint64_t seed, const RainSynthConfig& rain) {
  require(count >= 1 && size >= 1, "make_synthetic_pairs: count and size must be positive");
  std::vector<ImagePair> pairs;
  for (int i = 0; i < count; ++i) {
    const Image scene = procedural_scene(size, size, derive_seed(seed, 2 * i));
    RainSynthConfig cfg = rain;
    cfg.seed = derive_seed(seed, 2 * i + 1);
    char id[16];
    std::snprintf(id, sizeof(id), "%03d", i + 1);
    pairs.push_back(synthesize_rain(scene, cfg, id));
  }
  return pairs;
}

ImagePair random_crop(const ImagePair& pair, int size, Rng& rng) {
  const Image& r = pair.rainy;
  require(r.height == pair.clean.height && r.width == pair.clean.width, "random_crop: pair sizes differ");
  require(r.height >= size && r.width >= size,
          "random_crop: image " + std::to_string(r.height) + "x" + std::to_string(r.width) + " smaller than crop " +
              std::to_string(size));
  const int top = static_cast<int>(rng.uniform_int(0, r.height - size));
  const int left = static_cast<int>(rng.uniform_int(0, r.width - size));
  return {crop(pair.rainy, top, left, size, size), crop(pair.clean, top, left, size, size), pair.id};
}

template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images) {
  require(!images.empty(), "images_to_tensor: empty batch");
  const int h = images.front()->height;
  const int w = images.front()->width;
  for (const Image* img : images)
    require(img->height == h && img->width == w, "to_tensor: mixed image sizes in batch");
  Tensor<T> t(Shape{static_cast<int>(images.size()), 3, h, w});
  auto data = t.data();
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (std::size_t n = 0; n < images.size(); ++n)
    for (std::size_t i = 0; i < plane; ++i)
      for (int c = 0; c < 3; ++c) data[(n * 3 + c) * plane + i] = static_cast<T>(images[n]->pixels[i * 3 + c]);
  return t;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> to_tensor(const std::vector<ImagePair>& batch) {
  std::vector<const Image*> rainy, clean;
  for (const auto& p : batch) {
    rainy.push_back(&p.rainy);
    clean.push_back(&p.clean);
  }
  return {images_to_tensor<T>(rainy), images_to_tensor<T>(clean)};
}

template <typename T>
Image tensor_to_image(const Tensor<T>& tensor, int index) {
  const Shape& s = tensor.shape();
  require(s.c == 3 && index >= 0 && index < s.n, "tensor_to_image: expected (N, 3, H, W), got " + s.str());
  Image img(s.h, s.w);
  const std::size_t plane = s.plane();
  const auto data = tensor.data();
  for (std::size_t i = 0; i < plane; ++i)
    for (int c = 0; c < 3; ++c)
      img.pixels[i * 3 + c] = static_cast<float>(data[(static_cast<std::size_t>(index) * 3 + c) * plane + i]);
  return img;
}

template std::pair<Tensor<float>, Tensor<float>> to_tensor(const std::vector<ImagePair>&);
template std::pair<Tensor<double>, Tensor<double>> to_tensor(const std::vector<ImagePair>&);
template Tensor<float> images_to_tensor(const std::vector<const Image*>&);
template Tensor<double> images_to_tensor(const std::vector<const Image*>&);
template Image tensor_to_image(const Tensor<float>&, int);
template Image tensor_to_image(const Tensor<double>&, int);

}  // namespace jdnet
