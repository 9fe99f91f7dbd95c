#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "jdnet/image.hpp"
#include "jdnet/random.hpp"
#include "jdnet/tensor.hpp"

namespace jdnet {

struct ImagePair {
  Image rainy;
  Image clean;
  std::string id;
};

/// Filename templates pairing rainy and clean files through an `<id>` placeholder.
struct PairPattern {
  std::string rainy = "rain-<id>.png";
  std::string clean = "norain-<id>.png";

  /// Parses "rain-<id>.png:norain-<id>.png".
  static PairPattern parse(const std::string& spec);
  [[nodiscard]] std::string str() const { return rainy + ":" + clean; }
  [[nodiscard]] std::string rainy_name(const std::string& id) const;
  [[nodiscard]] std::string clean_name(const std::string& id) const;
};

enum class Split { Train, Test };

struct DatasetManifest {
  struct Entry {
    std::string id;
    std::filesystem::path rainy;
    std::filesystem::path clean;
  };
  std::filesystem::path root;
  std::vector<Entry> pairs;
  Split split = Split::Train;
  /// Files matching one side of the pattern without a partner.
  std::vector<std::string> warnings;
};

/// Scans `root` (non-recursively) and pairs files by id in lexicographic order.
/// Throws IoError when the directory is missing or holds no pairs.
DatasetManifest load_manifest(const std::filesystem::path& root, const PairPattern& pattern = {},
                              Split split = Split::Train);

/// Reads every pair of a manifest.
std::vector<ImagePair> load_pairs(const DatasetManifest& manifest);

template <typename T>
struct Range {
  T lo;
  T hi;
};

struct RainSynthConfig {
  Range<int> streak_count{10, 25};
  Range<double> angle_deg{-20.0, 20.0};  // from vertical
  Range<double> length{8.0, 20.0};
  Range<double> width{1.0, 1.8};
  Range<double> intensity{0.2, 0.45};
  std::uint64_t seed = 0;

  void validate() const;
};

/// Adds anti-aliased straight streaks to `clean`; rainy >= clean pixelwise
/// before clamping.
ImagePair synthesize_rain(const Image& clean, const RainSynthConfig& config, const std::string& id = "");

/// Smooth procedural "background" scene (gradients, soft shapes, low-frequency texture).
Image procedural_scene(int height, int width, std::uint64_t seed);

/// `count` synthetic pairs of size `size`, deterministic in `seed`.
std::vector<ImagePair> make_synthetic_pairs(int count, int size, std::uint64_t seed,
                                            const RainSynthConfig& rain = {});

/// Same window cut from both images. Offsets are uniform over valid positions.
ImagePair random_crop(const ImagePair& pair, int size, Rng& rng);

/// Channel-first tensors (o, b) with shape (N, 3, H, W).
template <typename T>
std::pair<Tensor<T>, Tensor<T>> to_tensor(const std::vector<ImagePair>& batch);

/// Channel-first tensor (N, 3, H, W) from images of identical size.
template <typename T>
Tensor<T> images_to_tensor(const std::vector<const Image*>& images);

/// Batch element `index` of an (N, 3, H, W) tensor as an image (no clamping).
template <typename T>
Image tensor_to_image(const Tensor<T>& tensor, int index = 0);

}  // namespace jdnet
