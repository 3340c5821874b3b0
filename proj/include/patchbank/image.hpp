#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "patchbank/error.hpp"

namespace patchbank {

/// Side length of one square patch in pixels.
inline constexpr int kPatchPx = 14;

/// 8-bit interleaved RGB image.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height*width*3, row-major

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  std::uint8_t& at(int x, int y, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  bool empty() const { return width == 0 || height == 0; }

  friend bool operator==(const Image&, const Image&) = default;
};

enum class MaskingMode { kAuto, kOn, kOff };

inline std::string to_string(MaskingMode m) {
  switch (m) {
    case MaskingMode::kAuto: return "auto";
    case MaskingMode::kOn: return "on";
    case MaskingMode::kOff: return "off";
  }
  return "auto";
}

inline MaskingMode parse_masking_mode(const std::string& s) {
  if (s == "auto") return MaskingMode::kAuto;
  if (s == "on") return MaskingMode::kOn;
  if (s == "off") return MaskingMode::kOff;
  throw InvalidInput("unknown masking mode '" + s + "' (expected auto|on|off)");
}

struct PreprocessConfig {
  int resolution = 448;  // target smaller edge
  std::vector<double> rotation_angles{0, 90, 180, 270};
  MaskingMode masking_mode = MaskingMode::kAuto;
  bool texture_flag = false;
  bool arbitrary_angles = false;  // allow non-right angles (reflect padding)

  void validate() const {
    if (resolution <= 0 || resolution % kPatchPx != 0) {
      throw InvalidInput("resolution must be a positive multiple of 14, got " +
                         std::to_string(resolution));
    }
    if (rotation_angles.empty()) throw InvalidInput("rotation_angles must not be empty");
    std::set<double> seen;
    bool has_zero = false;
    for (double a : rotation_angles) {
      if (!seen.insert(a).second) throw InvalidInput("rotation_angles must be distinct");
      if (a == 0.0) has_zero = true;
    }
    if (!has_zero) throw InvalidInput("rotation_angles must contain 0");
  }
};

namespace detail {

inline double clampd(double v, double lo, double hi) { return std::min(std::max(v, lo), hi); }

inline std::uint8_t to_u8(double v) {
  return static_cast<std::uint8_t>(clampd(std::floor(v + 0.5), 0.0, 255.0));
}

// Half-sample symmetric reflection of an index into [0, n).
inline int reflect_index(long i, long n) {
  if (n == 1) return 0;
  const long period = 2 * n;
  long r = i % period;
  if (r < 0) r += period;
  return static_cast<int>(r < n ? r : period - 1 - r);
}

}  // namespace detail

/// Bilinear resize with half-pixel centers and edge clamping.
inline Image resize_bilinear(const Image& src, int out_w, int out_h) {
  if (src.empty() || out_w <= 0 || out_h <= 0) throw InvalidInput("resize: empty image or size");
  if (out_w == src.width && out_h == src.height) return src;
  Image dst(out_w, out_h);
  const double sx = static_cast<double>(src.width) / out_w;
  const double sy = static_cast<double>(src.height) / out_h;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double gx = detail::clampd((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
    x0[x] = static_cast<int>(std::floor(gx));
    x1[x] = std::min(x0[x] + 1, src.width - 1);
    fx[x] = gx - x0[x];
  }
  for (int y = 0; y < out_h; ++y) {
    const double gy = detail::clampd((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
    const int y0 = static_cast<int>(std::floor(gy));
    const int y1 = std::min(y0 + 1, src.height - 1);
    const double fy = gy - y0;
    for (int x = 0; x < out_w; ++x) {
      for (int c = 0; c < 3; ++c) {
        const double top = src.at(x0[x], y0, c) * (1 - fx[x]) + src.at(x1[x], y0, c) * fx[x];
        const double bot = src.at(x0[x], y1, c) * (1 - fx[x]) + src.at(x1[x], y1, c) * fx[x];
        dst.at(x, y, c) = detail::to_u8(top * (1 - fy) + bot * fy);
      }
    }
  }
  return dst;
}

inline Image crop(const Image& src, int x0, int y0, int w, int h) {
  if (x0 < 0 || y0 < 0 || w <= 0 || h <= 0 || x0 + w > src.width || y0 + h > src.height) {
    throw InvalidInput("crop window outside image");
  }
  if (x0 == 0 && y0 == 0 && w == src.width && h == src.height) return src;
  Image dst(w, h);
  for (int y = 0; y < h; ++y) {
    const auto* row = &src.pixels[(static_cast<std::size_t>(y0 + y) * src.width + x0) * 3];
    std::copy(row, row + static_cast<std::size_t>(w) * 3,
              &dst.pixels[static_cast<std::size_t>(y) * w * 3]);
  }
  return dst;
}

struct Size2 {
  int width = 0;
  int height = 0;
  friend bool operator==(const Size2&, const Size2&) = default;
};

/// Geometry of preprocess_image without touching pixels: the resized size
/// (smaller edge = resolution, longer edge rounded) and the final size after
/// the centered floor-to-14 crop.
struct PreprocessGeometry {
  Size2 resized;
  Size2 output;
};

inline PreprocessGeometry preprocess_geometry(int width, int height, int resolution) {
  if (width < kPatchPx || height < kPatchPx) {
    throw InvalidInput("image " + std::to_string(width) + "x" + std::to_string(height) +
                       " is smaller than 14x14");
  }
  if (resolution <= 0 || resolution % kPatchPx != 0) {
    throw InvalidInput("resolution must be a positive multiple of 14");
  }
  PreprocessGeometry g;
  const double scale = static_cast<double>(resolution) / std::min(width, height);
  if (width <= height) {
    g.resized = {resolution, static_cast<int>(std::lround(height * scale))};
  } else {
    g.resized = {static_cast<int>(std::lround(width * scale)), resolution};
  }
  g.output = {g.resized.width / kPatchPx * kPatchPx, g.resized.height / kPatchPx * kPatchPx};
  if (g.output.width < kPatchPx || g.output.height < kPatchPx) {
    throw InvalidInput("image smaller than 14x14 after scaling");
  }
  return g;
}

/// Scales the smaller edge to `resolution` (bilinear, aspect preserved), then
/// center-crops both edges down to multiples of 14. Idempotent.
inline Image preprocess_image(const Image& img, int resolution) {
  const PreprocessGeometry g = preprocess_geometry(img.width, img.height, resolution);
  Image resized = resize_bilinear(img, g.resized.width, g.resized.height);
  return crop(resized, (g.resized.width - g.output.width) / 2,
              (g.resized.height - g.output.height) / 2, g.output.width, g.output.height);
}

inline Image preprocess_image(const Image& img, const PreprocessConfig& cfg) {
  return preprocess_image(img, cfg.resolution);
}

inline bool is_right_angle(double angle) {
  const double a = std::fmod(std::fmod(angle, 360.0) + 360.0, 360.0);
  return a == 0.0 || a == 90.0 || a == 180.0 || a == 270.0;
}

/// Rotates counter-clockwise by `angle` degrees. Right angles are exact pixel
/// permutations (90/270 swap the dimensions). Other angles keep the size and
/// resample bilinearly about the center with reflect padding; they require
/// `allow_arbitrary`.
inline Image rotate_image(const Image& img, double angle, bool allow_arbitrary = false) {
  const double a = std::fmod(std::fmod(angle, 360.0) + 360.0, 360.0);
  const int w = img.width;
  const int h = img.height;
  if (a == 0.0) return img;
  if (a == 90.0 || a == 270.0) {
    Image out(h, w);
    for (int y = 0; y < w; ++y) {
      for (int x = 0; x < h; ++x) {
        const int sx = a == 90.0 ? w - 1 - y : y;
        const int sy = a == 90.0 ? x : h - 1 - x;
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(sx, sy, c);
      }
    }
    return out;
  }
  if (a == 180.0) {
    Image out(w, h);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) out.at(x, y, c) = img.at(w - 1 - x, h - 1 - y, c);
    return out;
  }
  if (!allow_arbitrary) {
    throw InvalidInput("rotation by " + std::to_string(angle) +
                       " degrees needs arbitrary-angle mode");
  }
  const double rad = a * 3.14159265358979323846 / 180.0;
  const double cs = std::cos(rad);
  const double sn = std::sin(rad);
  const double cx = (w - 1) / 2.0;
  const double cy = (h - 1) / 2.0;
  Image out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      // Inverse map: counter-clockwise on screen (y down) is clockwise in
      // the math frame, so sample the source at the opposite rotation.
      const double dx = x - cx;
      const double dy = y - cy;
      const double sxf = cs * dx - sn * dy + cx;
      const double syf = sn * dx + cs * dy + cy;
      const long x0 = static_cast<long>(std::floor(sxf));
      const long y0 = static_cast<long>(std::floor(syf));
      const double fx = sxf - x0;
      const double fy = syf - y0;
      const int xa = detail::reflect_index(x0, w), xb = detail::reflect_index(x0 + 1, w);
      const int ya = detail::reflect_index(y0, h), yb = detail::reflect_index(y0 + 1, h);
      for (int c = 0; c < 3; ++c) {
        const double top = img.at(xa, ya, c) * (1 - fx) + img.at(xb, ya, c) * fx;
        const double bot = img.at(xa, yb, c) * (1 - fx) + img.at(xb, yb, c) * fx;
        out.at(x, y, c) = detail::to_u8(top * (1 - fy) + bot * fy);
      }
    }
  }
  return out;
}

}  // namespace patchbank
