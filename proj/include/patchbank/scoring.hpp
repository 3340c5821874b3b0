#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <string>
#include <vector>

#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/grid_types.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"

namespace patchbank {

enum class Aggregation { kMeanTopFraction, kMaxPatch, kMaxMap };

struct ScoreConfig {
  Aggregation aggregation = Aggregation::kMeanTopFraction;
  double fraction = 0.01;
  double sigma = 4.0;

  int kernel_radius() const { return static_cast<int>(std::ceil(4.0 * sigma)); }

  void validate() const {
    if (!(fraction > 0.0 && fraction <= 1.0)) {
      throw InvalidInput("aggregation fraction must lie in (0, 1], got " + std::to_string(fraction));
    }
    if (!(sigma > 0.0)) throw InvalidInput("sigma must be positive");
  }
};

/// "mean-top:<fraction>" | "max-patch" | "max-map"
inline ScoreConfig parse_aggregation(const std::string& spec, ScoreConfig base = {}) {
  if (spec == "max-patch") {
    base.aggregation = Aggregation::kMaxPatch;
  } else if (spec == "max-map") {
    base.aggregation = Aggregation::kMaxMap;
  } else if (spec == "mean-top") {
    base.aggregation = Aggregation::kMeanTopFraction;
  } else if (spec.rfind("mean-top:", 0) == 0) {
    base.aggregation = Aggregation::kMeanTopFraction;
    try {
      std::size_t used = 0;
      base.fraction = std::stod(spec.substr(9), &used);
      if (used != spec.size() - 9) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw InvalidInput("bad aggregation fraction in '" + spec + "'");
    }
  } else {
    throw InvalidInput("unknown aggregation '" + spec + "' (expected mean-top[:f] | max-patch | max-map)");
  }
  base.validate();
  return base;
}

inline std::string to_string(const ScoreConfig& cfg) {
  switch (cfg.aggregation) {
    case Aggregation::kMaxPatch: return "max-patch";
    case Aggregation::kMaxMap: return "max-map";
    case Aggregation::kMeanTopFraction: break;
  }
  char buf[48];
  std::snprintf(buf, sizeof buf, "mean-top:%.17g", cfg.fraction);
  return buf;
}

/// Per-pixel anomaly scores at the preprocessed image resolution.
struct AnomalyMap {
  int height = 0;
  int width = 0;
  std::vector<double> values;

  AnomalyMap() = default;
  AnomalyMap(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0.0) {}
  double at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }
  double max() const { return *std::max_element(values.begin(), values.end()); }
};

/// Number of values in the upper tail: ceil(fraction * n), at least 1. The
/// 1e-9 slack keeps products such as 0.07 * 100 from rounding up a slot.
inline std::size_t tail_count(double fraction, std::size_t n) {
  const double m = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::clamp<std::size_t>(static_cast<std::size_t>(std::max(m, 1.0)), 1, std::max<std::size_t>(n, 1));
}

/// Mean of the m largest values. Clamped into [min, max] of the selected
/// values so rounding cannot push it outside the mathematical bounds.
inline double mean_of_largest(std::vector<double> values, std::size_t m) {
  if (values.empty()) throw EmptyInput("mean_of_largest: no values");
  m = std::clamp<std::size_t>(m, 1, values.size());
  std::nth_element(values.begin(), values.begin() + (m - 1), values.end(), std::greater<>());
  std::sort(values.begin(), values.begin() + m, std::greater<>());
  double sum = 0;
  for (std::size_t i = m; i-- > 0;) sum += values[i];  // smallest first
  return std::clamp(sum / static_cast<double>(m), values[m - 1], values[0]);
}

namespace detail {

inline std::vector<double> gaussian_kernel(double sigma, int radius) {
  std::vector<double> k(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i) k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  const double total = std::accumulate(k.begin(), k.end(), 0.0);
  for (double& v : k) v /= total;
  return k;
}

}  // namespace detail

/// Patch values anchored at cell centers, bilinearly upsampled to
/// out_h x out_w (half-pixel convention, edge clamp), then smoothed with a
/// normalized Gaussian truncated at ceil(4 sigma) with reflect boundaries.
inline AnomalyMap make_map(const PatchDistances& d, int out_h, int out_w, const ScoreConfig& cfg) {
  if (out_h <= 0 || out_w <= 0) throw InvalidInput("make_map: zero-size output");
  if (d.grid_h <= 0 || d.grid_w <= 0 || d.values.size() != d.cells()) {
    throw InvalidInput("make_map: empty patch grid");
  }
  cfg.validate();
  const int gh = d.grid_h;
  const int gw = d.grid_w;
  std::vector<int> x0(out_w), x1(out_w);
  std::vector<double> fx(out_w);
  for (int x = 0; x < out_w; ++x) {
    const double g = std::clamp((x + 0.5) * gw / out_w - 0.5, 0.0, gw - 1.0);
    x0[x] = static_cast<int>(std::floor(g));
    x1[x] = std::min(x0[x] + 1, gw - 1);
    fx[x] = g - x0[x];
  }
  AnomalyMap up(out_h, out_w);
  for (int y = 0; y < out_h; ++y) {
    const double g = std::clamp((y + 0.5) * gh / out_h - 0.5, 0.0, gh - 1.0);
    const int y0 = static_cast<int>(std::floor(g));
    const int y1 = std::min(y0 + 1, gh - 1);
    const double fy = g - y0;
    for (int x = 0; x < out_w; ++x) {
      const double top = d.at(y0, x0[x]) * (1 - fx[x]) + d.at(y0, x1[x]) * fx[x];
      const double bot = d.at(y1, x0[x]) * (1 - fx[x]) + d.at(y1, x1[x]) * fx[x];
      up.values[static_cast<std::size_t>(y) * out_w + x] = top * (1 - fy) + bot * fy;
    }
  }
  const int r = cfg.kernel_radius();
  const std::vector<double> k = detail::gaussian_kernel(cfg.sigma, r);
  AnomalyMap tmp(out_h, out_w);
  std::vector<double> padded(out_w + 2 * r);
  std::vector<int> src_col(out_w + 2 * r);
  for (int x = -r; x < out_w + r; ++x) src_col[x + r] = detail::reflect_index(x, out_w);
  for (int y = 0; y < out_h; ++y) {
    const double* row = up.values.data() + static_cast<std::size_t>(y) * out_w;
    for (std::size_t i = 0; i < padded.size(); ++i) padded[i] = row[src_col[i]];
    double* dst = tmp.values.data() + static_cast<std::size_t>(y) * out_w;
    for (int i = 0; i <= 2 * r; ++i) {
      const double w = k[i];
      const double* src = padded.data() + i;
      for (int x = 0; x < out_w; ++x) dst[x] += w * src[x];
    }
  }
  AnomalyMap out(out_h, out_w);
  std::vector<int> rows(2 * r + 1);
  for (int y = 0; y < out_h; ++y) {
    for (int i = -r; i <= r; ++i) rows[i + r] = detail::reflect_index(y + i, out_h);
    double* dst = out.values.data() + static_cast<std::size_t>(y) * out_w;
    for (int i = 0; i <= 2 * r; ++i) {
      const double* src = tmp.values.data() + static_cast<std::size_t>(rows[i]) * out_w;
      const double w = k[i];
      for (int x = 0; x < out_w; ++x) dst[x] += w * src[x];
    }
  }
  return out;
}

/// Image-level score from patch distances.
inline double aggregate(const PatchDistances& d, const ScoreConfig& cfg) {
  cfg.validate();
  std::vector<double> inc = d.included();
  if (inc.empty()) throw EmptyInput("aggregate: every patch is excluded");
  switch (cfg.aggregation) {
    case Aggregation::kMeanTopFraction: {
      const std::size_t m = tail_count(cfg.fraction, inc.size());
      return mean_of_largest(std::move(inc), m);
    }
    case Aggregation::kMaxPatch:
      return *std::max_element(inc.begin(), inc.end());
    case Aggregation::kMaxMap:
      return make_map(d, d.grid_h * kPatchPx, d.grid_w * kPatchPx, cfg).max();
  }
  return 0.0;
}

// ---------------------------------------------------------------------------
// Heatmap rendering

/// Color index of v: round-half-up of 255 * clamp(v / normalizer, 0, 1), so
/// normalizer/2 lands on 128.
inline int colormap_index(double v, double normalizer) {
  const double t = std::clamp(v / normalizer, 0.0, 1.0);
  return static_cast<int>(std::floor(t * 255.0 + 0.5));
}

/// Fixed 256-entry jet-style colormap (dark blue -> cyan -> yellow -> dark red).
inline const std::array<std::array<std::uint8_t, 3>, 256>& heat_colormap() {
  static const auto table = [] {
    std::array<std::array<std::uint8_t, 3>, 256> t{};
    for (int i = 0; i < 256; ++i) {
      const double x = i / 255.0;
      auto ch = [x](double center) {
        return static_cast<std::uint8_t>(
            std::lround(255.0 * std::clamp(1.5 - std::abs(4.0 * x - center), 0.0, 1.0)));
      };
      t[i] = {ch(3.0), ch(2.0), ch(1.0)};
    }
    return t;
  }();
  return table;
}

inline Image render_heatmap(const AnomalyMap& map, double normalizer) {
  if (!(normalizer > 0.0)) throw InvalidInput("heatmap normalizer must be positive");
  Image img(map.width, map.height);
  const auto& cm = heat_colormap();
  for (int y = 0; y < map.height; ++y)
    for (int x = 0; x < map.width; ++x) {
      const auto& c = cm[colormap_index(map.at(y, x), normalizer)];
      for (int k = 0; k < 3; ++k) img.at(x, y, k) = c[k];
    }
  return img;
}

/// Writes the PNG heatmap and, when `raw_path` is non-empty, the raw float
/// map in the .pfv layout (grid = pixel dimensions, dim = 1).
inline void export_heatmap(const AnomalyMap& map, double normalizer,
                           const std::filesystem::path& png_path,
                           const std::filesystem::path& raw_path = {}) {
  write_rgb_png(png_path, render_heatmap(map, normalizer));
  if (!raw_path.empty()) {
    PatchFeatureGrid raw(map.height, map.width, 1);
    for (std::size_t i = 0; i < map.values.size(); ++i) raw.features[i] = static_cast<float>(map.values[i]);
    raw.source_id = png_path.stem().string();
    raw.backbone = "anomaly-map";
    write_feature_file(raw, raw_path);
  }
}

}  // namespace patchbank
