#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "tilediff/error.hpp"
#include "tilediff/tensor.hpp"

namespace tilediff {

/// Images are [H, W, 3] tensors with values in [0, 1]; masks are [H, W] in {0, 1}.
using ImageTensor = Tensor<float>;
using CellMask = Tensor<float>;

inline void require_image(const ImageTensor& img, const char* what = "image") {
  if (img.rank() != 3 || img.dim(2) != 3) {
    throw DimensionError(std::string(what) + " must be [H, W, 3], got " + shape_str(img.shape()));
  }
}

inline void require_mask(const CellMask& m) {
  if (m.rank() != 2) throw DimensionError("mask must be [H, W], got " + shape_str(m.shape()));
  for (float v : m.data())
    if (v != 0.0f && v != 1.0f) throw ConfigError("mask values must be 0 or 1");
}

/// Rectangular sub-image [y, y+h) x [x, x+w).
inline ImageTensor crop_image(const ImageTensor& img, std::size_t y, std::size_t x, std::size_t h, std::size_t w) {
  if (y + h > img.dim(0) || x + w > img.dim(1)) {
    throw DimensionError("crop " + std::to_string(h) + "x" + std::to_string(w) + " at (" + std::to_string(y) + "," +
                         std::to_string(x) + ") exceeds " + shape_str(img.shape()));
  }
  const std::size_t c = img.rank() == 3 ? img.dim(2) : 1;
  Shape s = img.rank() == 3 ? Shape{h, w, c} : Shape{h, w};
  Tensor<float> out(s);
  for (std::size_t r = 0; r < h; ++r)
    std::copy_n(img.data().data() + ((y + r) * img.dim(1) + x) * c, w * c, out.data().data() + r * w * c);
  return out;
}

namespace detail {

struct PngFile {
  std::FILE* f = nullptr;
  ~PngFile() {
    if (f) std::fclose(f);
  }
};

}  // namespace detail

/// Writes an 8-bit RGB PNG ([H,W,3]) or grayscale PNG ([H,W]); values are clamped to [0,1].
inline void write_png(const std::string& path, const Tensor<float>& img) {
  const bool rgb = img.rank() == 3;
  if (!(rgb && img.dim(2) == 3) && img.rank() != 2) throw DimensionError("write_png: unsupported shape " + shape_str(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1), c = rgb ? 3 : 1;
  detail::PngFile file{std::fopen(path.c_str(), "wb")};
  if (!file.f) throw IoError("cannot write " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path);
  }
  png_init_io(png, file.f);
  png_set_IHDR(png, info, png_uint_32(w), png_uint_32(h), 8, rgb ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<unsigned char> row(w * c);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t i = 0; i < w * c; ++i) {
      const float v = std::clamp(img[y * w * c + i], 0.0f, 1.0f);
      row[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads any PNG into [H,W,3] floats in [0,1] (gray is replicated, alpha dropped).
inline ImageTensor read_png(const std::string& path) {
  detail::PngFile file{std::fopen(path.c_str(), "rb")};
  if (!file.f) throw IoError("cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("libpng failed reading " + path);
  }
  png_init_io(png, file.f);
  png_read_info(png, info);
  png_set_strip_16(png);
  png_set_expand(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const std::size_t w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  std::vector<unsigned char> row(png_get_rowbytes(png, info));
  ImageTensor img({h, w, 3});
  for (std::size_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (std::size_t i = 0; i < w * 3; ++i) img[y * w * 3 + i] = float(row[i]) / 255.0f;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Quantizes to the 8-bit grid that PNG storage would produce.
inline ImageTensor quantize8(const ImageTensor& img) {
  ImageTensor out = img;
  for (auto& v : out.data()) v = float(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f)) / 255.0f;
  return out;
}

}  // namespace tilediff
