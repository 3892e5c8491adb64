#include "ckm/png.hpp"

#include "ckm/error.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace ckm {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

std::uint8_t quantize_unit(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::floor(v * 255.0 + 0.5));
}

void write_png_gray(const std::filesystem::path& path, const std::vector<std::uint8_t>& pixels,
                    int width, int height) {
  if (width < 1 || height < 1 || pixels.size() != static_cast<std::size_t>(width) * height) {
    throw InvalidArgument("write_png_gray: pixel buffer does not match dimensions");
  }
  File file(std::fopen(path.c_str(), "wb"));
  if (!file) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, file.get());
  png_set_IHDR(png, info, width, height, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(pixels.data() + static_cast<std::size_t>(y) * width));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::vector<std::uint8_t> read_png_gray(const std::filesystem::path& path, int& width,
                                        int& height) {
  File file(std::fopen(path.c_str(), "rb"));
  if (!file) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng initialization failed");
  }
  std::vector<std::uint8_t> pixels;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading " + path.string());
  }
  png_init_io(png, file.get());
  png_read_info(png, info);
  width = static_cast<int>(png_get_image_width(png, info));
  height = static_cast<int>(png_get_image_height(png, info));
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw InvalidArgument(path.string() + ": not an 8-bit grayscale PNG");
  }
  pixels.resize(static_cast<std::size_t>(width) * height);
  for (int y = 0; y < height; ++y) {
    png_read_row(png, pixels.data() + static_cast<std::size_t>(y) * width, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

void render_png(const NdArrayF& map, int beam, const std::filesystem::path& path,
                const NdArrayF* compare) {
  if (map.rank() != 3) throw InvalidArgument("render_png: expected a C x H x W map");
  if (beam < 0 || beam >= map.shape[0]) {
    throw InvalidArgument("render_png: beam " + std::to_string(beam) + " out of range [0, " +
                          std::to_string(map.shape[0]) + ")");
  }
  if (compare && compare->shape != map.shape) {
    throw InvalidArgument("render_png: comparison map shape differs");
  }
  const int h = static_cast<int>(map.shape[1]), w = static_cast<int>(map.shape[2]);
  const int panels = compare ? 2 : 1;
  std::vector<std::uint8_t> pixels(static_cast<std::size_t>(w) * panels * h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      pixels[static_cast<std::size_t>(y) * w * panels + x] = quantize_unit(map.at(beam, y, x));
      if (compare) {
        pixels[static_cast<std::size_t>(y) * w * panels + w + x] =
            quantize_unit(compare->at(beam, y, x));
      }
    }
  }
  write_png_gray(path, pixels, w * panels, h);
}

}  // namespace ckm
