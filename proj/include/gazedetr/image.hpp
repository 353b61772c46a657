#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "gazedetr/common.hpp"
#include "gazedetr/tensor.hpp"

namespace gazedetr {

// Images are Tensors [C x H x W] with values in [0, 1]; files are binary
// portable pixmaps (P6) for RGB and portable graymaps (P5) for single planes.

inline void write_ppm(const std::string& path, const Tensor& img) {
  check(img.ndim() == 3 && img.dim(0) == 3, "write_ppm needs a [3xHxW] tensor, got " +
                                                shape_str(img.shape()));
  const int h = img.dim(1), w = img.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "P6\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        double v = img.values()[(static_cast<std::size_t>(c) * h + y) * w + x];
        v = std::clamp(v, 0.0, 1.0);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    out.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
  }
  if (!out) throw DataError("short write: " + path);
}

namespace detail {

inline void skip_pnm_whitespace(std::istream& in) {
  for (;;) {
    int c = in.peek();
    if (c == '#') {
      std::string junk;
      std::getline(in, junk);
    } else if (c == ' ' || c == '\t' || c == '\r' || c == '\n') {
      in.get();
    } else {
      return;
    }
  }
}

inline int read_pnm_int(std::istream& in) {
  skip_pnm_whitespace(in);
  int v = 0;
  if (!(in >> v)) throw DataError("malformed PNM header");
  return v;
}

}  // namespace detail

inline Tensor read_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P6") throw DataError("not a binary PPM (P6): " + path);
  const int w = detail::read_pnm_int(in);
  const int h = detail::read_pnm_int(in);
  const int maxval = detail::read_pnm_int(in);
  if (maxval != 255) throw DataError("unsupported PPM maxval in " + path);
  in.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw DataError("truncated PPM payload: " + path);
  std::vector<double> pix(raw.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        pix[(static_cast<std::size_t>(c) * h + y) * w + x] =
            raw[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0;
  return Tensor::from_values({3, h, w}, std::move(pix));
}

// 8-bit graymap from a [H x W] plane already scaled to [0, 1].
inline void write_pgm(const std::string& path, const std::vector<double>& plane, int h, int w) {
  check(static_cast<std::size_t>(h) * w == plane.size(), "write_pgm plane size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open for writing: " + path);
  out << "P5\n" << w << " " << h << "\n255\n";
  std::vector<unsigned char> bytes(plane.size());
  for (std::size_t i = 0; i < plane.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(plane[i], 0.0, 1.0) * 255.0));
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write: " + path);
}

inline std::vector<double> read_pgm(const std::string& path, int& h, int& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open image: " + path);
  std::string magic(2, '\0');
  in.read(magic.data(), 2);
  if (magic != "P5") throw DataError("not a binary PGM (P5): " + path);
  w = detail::read_pnm_int(in);
  h = detail::read_pnm_int(in);
  const int maxval = detail::read_pnm_int(in);
  if (maxval != 255) throw DataError("unsupported PGM maxval in " + path);
  in.get();
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw DataError("truncated PGM payload: " + path);
  std::vector<double> plane(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) plane[i] = raw[i] / 255.0;
  return plane;
}

// ---------------------------------------------------------------------------
// Resampling

// Bilinear plane resize with the half-pixel-center mapping, so a same-size
// resize is the exact identity.
inline std::vector<double> bilinear_resize_plane(const std::vector<double>& src, int h, int w,
                                                 int oh, int ow) {
  check(h > 0 && w > 0 && oh > 0 && ow > 0, "bilinear_resize: extents must be positive");
  std::vector<double> dst(static_cast<std::size_t>(oh) * ow);
  const double sy = static_cast<double>(h) / oh;
  const double sx = static_cast<double>(w) / ow;
  for (int y = 0; y < oh; ++y) {
    const double fy = (y + 0.5) * sy - 0.5;
    const int y0 = static_cast<int>(std::floor(fy));
    const double wy = fy - y0;
    const int ya = std::clamp(y0, 0, h - 1), yb = std::clamp(y0 + 1, 0, h - 1);
    for (int x = 0; x < ow; ++x) {
      const double fx = (x + 0.5) * sx - 0.5;
      const int x0 = static_cast<int>(std::floor(fx));
      const double wx = fx - x0;
      const int xa = std::clamp(x0, 0, w - 1), xb = std::clamp(x0 + 1, 0, w - 1);
      const double top = src[static_cast<std::size_t>(ya) * w + xa] * (1 - wx) +
                         src[static_cast<std::size_t>(ya) * w + xb] * wx;
      const double bot = src[static_cast<std::size_t>(yb) * w + xa] * (1 - wx) +
                         src[static_cast<std::size_t>(yb) * w + xb] * wx;
      dst[static_cast<std::size_t>(y) * ow + x] = top * (1 - wy) + bot * wy;
    }
  }
  return dst;
}

inline Tensor bilinear_resize(const Tensor& img, int oh, int ow) {
  check(img.ndim() == 3, "bilinear_resize needs [CxHxW], got " + shape_str(img.shape()));
  const int c = img.dim(0), h = img.dim(1), w = img.dim(2);
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(c) * oh * ow);
  for (int ch = 0; ch < c; ++ch) {
    std::vector<double> plane(img.values().begin() + static_cast<std::size_t>(ch) * h * w,
                              img.values().begin() + static_cast<std::size_t>(ch + 1) * h * w);
    auto r = bilinear_resize_plane(plane, h, w, oh, ow);
    out.insert(out.end(), r.begin(), r.end());
  }
  return Tensor::from_values({c, oh, ow}, std::move(out));
}

// ---------------------------------------------------------------------------
// Rasterization (synthetic scenes and overlays)

struct Color {
  double r, g, b;
};

inline void put_pixel(Tensor& img, int x, int y, const Color& c) {
  const int h = img.dim(1), w = img.dim(2);
  if (x < 0 || x >= w || y < 0 || y >= h) return;
  auto& v = img.values();
  v[(0 * static_cast<std::size_t>(h) + y) * w + x] = c.r;
  v[(1 * static_cast<std::size_t>(h) + y) * w + x] = c.g;
  v[(2 * static_cast<std::size_t>(h) + y) * w + x] = c.b;
}

inline void draw_disc(Tensor& img, double cx, double cy, double radius, const Color& c) {
  const int x0 = static_cast<int>(std::floor(cx - radius)), x1 = static_cast<int>(std::ceil(cx + radius));
  const int y0 = static_cast<int>(std::floor(cy - radius)), y1 = static_cast<int>(std::ceil(cy + radius));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      if (dx * dx + dy * dy <= radius * radius) put_pixel(img, x, y, c);
    }
}

inline void draw_filled_rect(Tensor& img, int x0, int y0, int x1, int y1, const Color& c) {
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x) put_pixel(img, x, y, c);
}

inline void draw_rect_outline(Tensor& img, int x0, int y0, int x1, int y1, const Color& c) {
  for (int x = x0; x <= x1; ++x) {
    put_pixel(img, x, y0, c);
    put_pixel(img, x, y1, c);
  }
  for (int y = y0; y <= y1; ++y) {
    put_pixel(img, x0, y, c);
    put_pixel(img, x1, y, c);
  }
}

inline void draw_line(Tensor& img, double x0, double y0, double x1, double y1, const Color& c) {
  const int steps = static_cast<int>(std::ceil(std::max(std::fabs(x1 - x0), std::fabs(y1 - y0)))) + 1;
  for (int i = 0; i <= steps; ++i) {
    const double t = static_cast<double>(i) / steps;
    put_pixel(img, static_cast<int>(std::lround(x0 + (x1 - x0) * t)),
              static_cast<int>(std::lround(y0 + (y1 - y0) * t)), c);
  }
}

}  // namespace gazedetr
