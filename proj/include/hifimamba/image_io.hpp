/*
 * SPDX-License-Identifier: Apache-2.0
 */
#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "hifimamba/error.hpp"
#include "hifimamba/tensor.hpp"

namespace hifi::image {

/// 8-bit grayscale PNG of an [H,W] tensor, mapping [lo,hi] linearly onto 0..255.
inline void write_png(const std::filesystem::path& path, const Tensor& img, double lo = 0.0, double hi = 1.0) {
  if (img.rank() != 2) throw ShapeMismatch("write_png expects [H,W], got " + shape_str(img.shape()));
  if (!(hi > lo)) throw ConfigError("write_png needs hi > lo");
  const std::size_t h = img.dim(0), w = img.dim(1);
  std::vector<png_byte> rows(h * w);
  for (std::size_t i = 0; i < h * w; ++i) {
    const double t = std::clamp((img[i] - lo) / (hi - lo), 0.0, 1.0);
    rows[i] = static_cast<png_byte>(std::lround(t * 255.0));
  }
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < h; ++y) png_write_row(png, rows.data() + y * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

struct PngInfo {
  std::size_t height = 0, width = 0;
  std::vector<unsigned char> pixels;
};

/// Reads an 8-bit grayscale PNG (used to check exported previews).
inline PngInfo read_png(const std::filesystem::path& path) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "rb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptFile("libpng failed reading " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  PngInfo out;
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  if (png_get_color_type(png, info) != PNG_COLOR_TYPE_GRAY || png_get_bit_depth(png, info) != 8) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw CorruptFile(path.string() + " is not 8-bit grayscale");
  }
  out.pixels.resize(out.width * out.height);
  for (std::size_t y = 0; y < out.height; ++y) png_read_row(png, out.pixels.data() + y * out.width, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

/// |pred - gt| clipped to [0, clip].
inline Tensor error_map(const Tensor& pred, const Tensor& gt, double clip = 0.2) {
  pred.require_same(gt);
  Tensor e(gt.shape());
  for (std::size_t i = 0; i < gt.size(); ++i) e[i] = std::min(clip, std::abs(pred[i] - gt[i]));
  return e;
}

}  // namespace hifi::image
