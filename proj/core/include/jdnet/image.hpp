#pragma once

#include <filesystem>
#include <stdexcept>
#include <vector>

namespace jdnet {

/// I/O and decoding failures (missing files, corrupt PNGs, unwritable paths).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Interleaved RGB image, values in [0, 1], row-major (y, x, channel).
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;

  Image() = default;
  Image(int h, int w, float fill = 0.0f)
      : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill) {}

  [[nodiscard]] float& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  [[nodiscard]] float at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  [[nodiscard]] bool empty() const { return pixels.empty(); }

  friend bool operator==(const Image&, const Image&) = default;
};

/// Decodes any PNG colour type to 8-bit RGB scaled into [0, 1].
Image read_png(const std::filesystem::path& path);

/// Writes 8-bit RGB; values are clamped to [0, 1] and rounded.
void write_png(const std::filesystem::path& path, const Image& image);

/// Clamps every value into [0, 1].
void clamp_unit(Image& image);

/// Rounds every value to the nearest multiple of 1/255.
void quantize_8bit(Image& image);

Image crop(const Image& image, int top, int left, int height, int width);

/// Mirror padding (edge pixel not repeated) on the bottom and right.
Image reflect_pad(const Image& image, int height, int width);

}  // namespace jdnet
