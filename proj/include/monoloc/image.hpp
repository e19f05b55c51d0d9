// Copyright 2026 The monoloc Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef MONOLOC_IMAGE_HPP_
#define MONOLOC_IMAGE_HPP_

#include <png.h>

#include <csetjmp>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

// jpeglib.h expects size_t and FILE to be declared first.
#include <jpeglib.h>

#include "monoloc/common.hpp"
#include "monoloc/geometry.hpp"
#include "monoloc/tensor.hpp"

namespace monoloc {

/// Interleaved 8-bit raster. channels is 3 (RGB) or 4 (RGBA).
struct Image {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, int ch, std::uint8_t fill = 0)
      : width(w), height(h), channels(ch), pixels(static_cast<std::size_t>(w) * h * ch, fill) {}

  std::uint8_t* at(int x, int y) {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  bool operator==(const Image&) const = default;
};

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

inline FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.c_str(), mode));
  if (!f) throw IoError("cannot open " + path.string());
  return f;
}

}  // namespace detail

inline void write_png(const Image& img, const std::filesystem::path& path) {
  if (img.channels != 3 && img.channels != 4) throw Error("write_png: unsupported channel count");
  auto f = detail::open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 4 ? PNG_COLOR_TYPE_RGBA : PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(img.at(0, y)));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads PNG into RGB (or RGBA when keep_alpha and the file has alpha).
inline Image read_png(const std::filesystem::path& path, bool keep_alpha = false) {
  auto f = detail::open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_read_struct(&png, nullptr, nullptr);
    throw IoError("libpng init failed");
  }
  Image img;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("failed reading PNG " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (png_get_bit_depth(png, info) < 8) png_set_packing(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  const bool has_alpha = (color & PNG_COLOR_MASK_ALPHA) || png_get_valid(png, info, PNG_INFO_tRNS);
  if (has_alpha && !keep_alpha) png_set_strip_alpha(png);
  if (!has_alpha && keep_alpha) png_set_add_alpha(png, 0xff, PNG_FILLER_AFTER);
  png_read_update_info(png, info);
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = keep_alpha ? 4 : 3;
  if (png_get_rowbytes(png, info) != static_cast<std::size_t>(img.width) * img.channels) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError("unexpected PNG layout in " + path.string());
  }
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  std::vector<png_bytep> rows(img.height);
  for (int y = 0; y < img.height; ++y) rows[y] = img.at(0, y);
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

namespace detail {
struct JpegError {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};
inline void jpeg_error_exit(j_common_ptr cinfo) {
  std::longjmp(reinterpret_cast<JpegError*>(cinfo->err)->jump, 1);
}
}  // namespace detail

inline Image read_jpeg(const std::filesystem::path& path) {
  auto f = detail::open_file(path, "rb");
  jpeg_decompress_struct cinfo;
  detail::JpegError err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = detail::jpeg_error_exit;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw IoError("failed reading JPEG " + path.string());
  }
  jpeg_create_decompress(&cinfo);
  jpeg_stdio_src(&cinfo, f.get());
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  Image img(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height), 3);
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = img.at(0, static_cast<int>(cinfo.output_scanline));
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return img;
}

inline bool is_supported_image(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// RGB image from a PNG or JPEG file, chosen by extension.
inline Image read_image(const std::filesystem::path& path) {
  auto ext = path.extension().string();
  for (auto& c : ext) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (ext == ".png") return read_png(path);
  if (ext == ".jpg" || ext == ".jpeg") return read_jpeg(path);
  throw IoError("unsupported image format: " + path.string());
}

/// Center crop to the target aspect ratio, then area-average resize.
inline Image crop_resize(const Image& src, int width, int height) {
  if (src.width <= 0 || src.height <= 0) throw Error("crop_resize: empty image");
  double cw = src.width, ch = src.height;
  const double target = static_cast<double>(width) / height;
  if (cw / ch > target) cw = ch * target; else ch = cw / target;
  const double x0 = (src.width - cw) / 2, y0 = (src.height - ch) / 2;
  const double sx = cw / width, sy = ch / height;
  Image out(width, height, src.channels);
  // Each output pixel averages the source rectangle it covers, sampled on
  // a fixed sub-grid (bilinear at each sample).
  const int sub = std::max(1, static_cast<int>(std::ceil(std::max(sx, sy))));
  auto sample = [&](double fx, double fy, int c) {
    fx = std::clamp(fx - 0.5, 0.0, src.width - 1.0);
    fy = std::clamp(fy - 0.5, 0.0, src.height - 1.0);
    const int ix = std::min(static_cast<int>(fx), src.width - 2 < 0 ? 0 : src.width - 2);
    const int iy = std::min(static_cast<int>(fy), src.height - 2 < 0 ? 0 : src.height - 2);
    const int jx = std::min(ix + 1, src.width - 1), jy = std::min(iy + 1, src.height - 1);
    const double ax = fx - ix, ay = fy - iy;
    const double top = src.at(ix, iy)[c] * (1 - ax) + src.at(jx, iy)[c] * ax;
    const double bot = src.at(ix, jy)[c] * (1 - ax) + src.at(jx, jy)[c] * ax;
    return top * (1 - ay) + bot * ay;
  };
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      for (int c = 0; c < src.channels; ++c) {
        double acc = 0;
        for (int j = 0; j < sub; ++j)
          for (int i = 0; i < sub; ++i)
            acc += sample(x0 + (x + (i + 0.5) / sub) * sx, y0 + (y + (j + 0.5) / sub) * sy, c);
        out.at(x, y)[c] = static_cast<std::uint8_t>(std::lround(std::clamp(acc / (sub * sub), 0.0, 255.0)));
      }
    }
  }
  return out;
}

/// Network input [1, 3, H, W] with values in [0, 1].
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
  if (img.channels != 3) throw ShapeError("network input must be RGB");
  Tensor<T> t({1, 3, img.height, img.width});
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = static_cast<T>(img.at(x, y)[c]) / T(255);
  return t;
}

}  // namespace monoloc

#endif  // MONOLOC_IMAGE_HPP_
