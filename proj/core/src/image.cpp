#include "jdnet/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstdio>
#include <memory>
#include <string>

#include "jdnet/tensor.hpp"

namespace jdnet {

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

// libpng reports errors by longjmp; the protected sections below only hold
// trivially destructible locals so the jump never skips a destructor.
struct PngErrorSink {
  char message[256] = {};
};

void png_error_handler(png_structp png, png_const_charp message) {
  auto* sink = static_cast<PngErrorSink*>(png_get_error_ptr(png));
  std::snprintf(sink->message, sizeof(sink->message), "%s", message);
  png_longjmp(png, 1);
}
void png_warning_handler(png_structp, png_const_charp) {}

std::uint8_t to_byte(float v) {
  const float clamped = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(clamped * 255.0f));
}

bool read_header(png_structp png, png_infop info, std::FILE* file, int* width, int* height,
                 std::size_t* rowbytes) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const png_byte colour = png_get_color_type(png, info);
  const png_byte depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (colour == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (colour == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (colour == PNG_COLOR_TYPE_GRAY || colour == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (colour & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  *width = static_cast<int>(png_get_image_width(png, info));
  *height = static_cast<int>(png_get_image_height(png, info));
  *rowbytes = png_get_rowbytes(png, info);
  return true;
}

bool read_rows(png_structp png, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_read_image(png, rows);
  png_read_end(png, nullptr);
  return true;
}

bool write_rows(png_structp png, png_infop info, std::FILE* file, int width, int height, png_bytepp rows) {
  if (setjmp(png_jmpbuf(png))) return false;
  png_init_io(png, file);
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, rows);
  png_write_end(png, nullptr);
  return true;
}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.string().c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  unsigned char signature[8];
  if (std::fread(signature, 1, 8, file.get()) != 8 || png_sig_cmp(signature, 0, 8) != 0)
    throw IoError(path.string() + " is not a PNG file");

  PngErrorSink sink;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &sink, png_error_handler, png_warning_handler);
  if (!png) throw IoError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  struct ReadGuard {
    png_structp* png;
    png_infop* info;
    ~ReadGuard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};
  if (!info) throw IoError("libpng initialization failed");

  int width = 0, height = 0;
  std::size_t rowbytes = 0;
  if (!read_header(png, info, file.get(), &width, &height, &rowbytes))
    throw IoError(path.string() + ": " + sink.message);
  if (rowbytes != static_cast<std::size_t>(width) * 3) throw IoError("unsupported PNG layout in " + path.string());

  std::vector<png_byte> buffer(rowbytes * height);
  std::vector<png_bytep> rows(height);
  for (int y = 0; y < height; ++y) rows[y] = buffer.data() + y * rowbytes;
  if (!read_rows(png, rows.data())) throw IoError(path.string() + ": " + sink.message);

  Image image(height, width);
  for (std::size_t i = 0; i < buffer.size(); ++i) image.pixels[i] = buffer[i] / 255.0f;
  return image;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  detail::require(image.height > 0 && image.width > 0, "write_png: empty image");
  FilePtr file(std::fopen(path.string().c_str(), "wb"));
  if (!file) throw IoError("cannot write " + path.string());

  PngErrorSink sink;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &sink, png_error_handler, png_warning_handler);
  if (!png) throw IoError("libpng initialization failed");
  png_infop info = png_create_info_struct(png);
  struct WriteGuard {
    png_structp* png;
    png_infop* info;
    ~WriteGuard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};
  if (!info) throw IoError("libpng initialization failed");

  std::vector<png_byte> buffer(image.pixels.size());
  for (std::size_t i = 0; i < buffer.size(); ++i) buffer[i] = to_byte(image.pixels[i]);
  std::vector<png_bytep> rows(image.height);
  const std::size_t rowbytes = static_cast<std::size_t>(image.width) * 3;
  for (int y = 0; y < image.height; ++y) rows[y] = buffer.data() + y * rowbytes;

  if (!write_rows(png, info, file.get(), image.width, image.height, rows.data()))
    throw IoError(path.string() + ": " + sink.message);
  if (std::fflush(file.get()) != 0) throw IoError("failed writing " + path.string());
}

void clamp_unit(Image& image) {
  for (auto& v : image.pixels) v = std::clamp(v, 0.0f, 1.0f);
}

void quantize_8bit(Image& image) {
  for (auto& v : image.pixels) v = to_byte(v) / 255.0f;
}

Image crop(const Image& image, int top, int left, int height, int width) {
  detail::require(top >= 0 && left >= 0 && top + height <= image.height && left + width <= image.width,
                  "crop window outside a " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                      " image");
  Image out(height, width);
  for (int y = 0; y < height; ++y) {
    const float* src = image.pixels.data() + ((static_cast<std::size_t>(top + y) * image.width + left) * 3);
    std::copy(src, src + static_cast<std::size_t>(width) * 3, out.pixels.data() + static_cast<std::size_t>(y) * width * 3);
  }
  return out;
}

Image reflect_pad(const Image& image, int height, int width) {
  detail::require(height >= image.height && width >= image.width, "reflect_pad: target smaller than image");
  detail::require(height - image.height < image.height && width - image.width < image.width,
                  "reflect_pad: padding must be smaller than the image");
  auto mirror = [](int i, int n) { return i < n ? i : 2 * n - 2 - i; };
  Image out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(mirror(y, image.height), mirror(x, image.width), c);
  return out;
}

}  // namespace jdnet
