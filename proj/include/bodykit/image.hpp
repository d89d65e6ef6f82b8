#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <vector>

#include <json.hpp>
#include <png.h>

#include "bodykit/affine.hpp"

namespace bodykit {

// Row-major intensity image in [0,1]. Continuous coordinates put the center
// of pixel (row i, col j) at (x, y) = (j + 0.5, i + 0.5).
struct Image {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<size_t>(h) * w * c, 0.0) {}

  double& at(int y, int x, int c = 0) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c = 0) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }

  // Bilinear sample at continuous (x, y); out-of-bounds taps read as 0.
  double sample(double x, double y, int c = 0) const {
    const double u = x - 0.5, v = y - 0.5;
    const int j0 = static_cast<int>(std::floor(u));
    const int i0 = static_cast<int>(std::floor(v));
    const double fu = u - j0, fv = v - i0;
    auto tap = [&](int i, int j) -> double {
      if (i < 0 || i >= height || j < 0 || j >= width) return 0.0;
      return at(i, j, c);
    };
    return (1 - fv) * ((1 - fu) * tap(i0, j0) + fu * tap(i0, j0 + 1)) +
           fv * ((1 - fu) * tap(i0 + 1, j0) + fu * tap(i0 + 1, j0 + 1));
  }
};

// Spatial-transformer style crop: output pixel p is sampled from the source
// at T^{-1}(p) by bilinear interpolation, zero padding outside.
inline Image crop(const Image& img, const AffineTransform& T, int out_size) {
  const AffineTransform Tinv = invert(T);
  Image out(out_size, out_size, img.channels);
  for (int i = 0; i < out_size; ++i)
    for (int j = 0; j < out_size; ++j) {
      const Vec2 src = Tinv.apply(Vec2(j + 0.5, i + 0.5));
      for (int c = 0; c < img.channels; ++c)
        out.at(i, j, c) = img.sample(src.x(), src.y(), c);
    }
  return out;
}

// --- PNG I/O (8-bit, gray or RGB) ---------------------------------------

inline void save_png(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3)
    throw InvalidInput("save_png: only 1 or 3 channels supported");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw InvalidInput("save_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw NumericalError("save_png: libpng failure writing " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(img.width) * img.channels);
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j)
      for (int c = 0; c < img.channels; ++c) {
        const double v = std::clamp(img.at(i, j, c), 0.0, 1.0);
        row[static_cast<size_t>(j) * img.channels + c] =
            static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Image load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw InvalidInput("load_png: cannot open " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw InvalidInput("load_png: not a valid PNG: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int h = png_get_image_height(png, info);
  const int w = png_get_image_width(png, info);
  const int c = png_get_channels(png, info);
  if (c != 1 && c != 3) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw InvalidInput("load_png: unsupported channel count");
  }
  Image img(h, w, c);
  std::vector<png_byte> row(static_cast<size_t>(w) * c);
  for (int i = 0; i < h; ++i) {
    png_read_row(png, row.data(), nullptr);
    for (int j = 0; j < w; ++j)
      for (int k = 0; k < c; ++k)
        img.at(i, j, k) = row[static_cast<size_t>(j) * c + k] / 255.0;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// --- raw JSON debug format, bit-exact {h, w, c, data} --------------------

inline void save_image_json(const Image& img, const std::string& path) {
  nlohmann::json j{{"h", img.height}, {"w", img.width}, {"c", img.channels},
                   {"data", img.data}};
  std::ofstream out(path);
  if (!out) throw InvalidInput("save_image_json: cannot open " + path);
  out << j.dump();
}

inline Image load_image_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("load_image_json: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput(std::string("load_image_json: parse error: ") + e.what());
  }
  Image img(j.at("h").get<int>(), j.at("w").get<int>(), j.at("c").get<int>());
  img.data = j.at("data").get<std::vector<double>>();
  if (img.data.size() != static_cast<size_t>(img.height) * img.width * img.channels)
    throw InvalidInput("load_image_json: data length mismatch");
  return img;
}

}  // namespace bodykit
