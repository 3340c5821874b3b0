#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/grid_types.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"

namespace patchbank {

struct MaskPolicy {
  double center_fraction = 0.5;  // side fraction of the central crop
  double center_fg_min = 0.7;
  double global_fg_max = 0.8;
  int dilation_size = 3;
  int closing_size = 3;

  void validate() const {
    for (double f : {center_fraction, center_fg_min, global_fg_max}) {
      if (!(f > 0.0 && f <= 1.0)) throw InvalidInput("mask policy fractions must lie in (0, 1]");
    }
    if (dilation_size < 1 || dilation_size % 2 == 0 || closing_size < 1 || closing_size % 2 == 0) {
      throw InvalidInput("structuring elements must have odd positive size");
    }
  }
};

/// Central crop window in cells: side round(n * fraction), at least 1, centered
/// with integer division.
struct CellWindow {
  int row0 = 0, col0 = 0, rows = 0, cols = 0;
  bool contains(int r, int c) const {
    return r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols;
  }
};

inline CellWindow central_window(int grid_h, int grid_w, double fraction) {
  CellWindow w;
  w.rows = std::clamp(static_cast<int>(std::lround(grid_h * fraction)), 1, grid_h);
  w.cols = std::clamp(static_cast<int>(std::lround(grid_w * fraction)), 1, grid_w);
  w.row0 = (grid_h - w.rows) / 2;
  w.col0 = (grid_w - w.cols) / 2;
  return w;
}

/// First principal direction of mean-centered patch features.
struct PcaDirection {
  std::vector<double> axis;  // unit norm
  std::vector<double> mean;
  int iterations = 0;
};

namespace detail {

inline constexpr int kJacobiMaxDim = 32;

// Cyclic Jacobi on a symmetric dim x dim matrix (row-major copy); returns the
// eigenvector of the largest eigenvalue. `sweeps` reports the sweep count.
inline std::vector<double> jacobi_top_eigenvector(std::vector<double> a, int n, int& sweeps) {
  std::vector<double> v(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (sweeps = 1; sweeps <= 100; ++sweeps) {
    double off = 0, diag = 0;
    for (int i = 0; i < n; ++i) {
      diag += a[i * n + i] * a[i * n + i];
      for (int j = i + 1; j < n; ++j) off += a[i * n + j] * a[i * n + j];
    }
    if (off <= 1e-30 * diag) break;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (apq == 0.0) continue;
        const double theta = (a[q * n + q] - a[p * n + p]) / (2 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1));
        const double c = 1 / std::sqrt(t * t + 1), s = t * c;
        for (int k = 0; k < n; ++k) {  // A <- A J
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {  // A <- J^T A
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (int k = 0; k < n; ++k) {  // V <- V J
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
  int top = 0;
  for (int i = 1; i < n; ++i)
    if (a[i * n + i] > a[top * n + top]) top = i;
  std::vector<double> out(n);
  for (int k = 0; k < n; ++k) out[k] = v[k * n + top];
  return out;
}

inline std::vector<double> power_top_eigenvector(const std::vector<double>& cov, int dim, int& iterations) {
  // Fixed pseudo-random start keeps the result deterministic.
  std::mt19937 rng(0x5eed);
  std::uniform_real_distribution<double> u(0.5, 1.5);
  std::vector<double> v(dim), next(dim);
  for (double& e : v) e = u(rng);
  auto normalize = [](std::vector<double>& a) {
    double s = 0;
    for (double e : a) s += e * e;
    s = std::sqrt(s);
    if (s == 0.0) return false;
    for (double& e : a) e /= s;
    return true;
  };
  normalize(v);
  constexpr int kMaxIter = 1000;
  constexpr double kTol = 1e-7;
  for (iterations = 1; iterations <= kMaxIter; ++iterations) {
    for (int i = 0; i < dim; ++i) {
      double s = 0;
      for (int j = 0; j < dim; ++j) s += cov[i * dim + j] * v[j];
      next[i] = s;
    }
    if (!normalize(next)) throw DegenerateInput("fit_pca_direction: power iteration collapsed");
    double change = 0;
    for (int i = 0; i < dim; ++i) change += (next[i] - v[i]) * (next[i] - v[i]);
    v.swap(next);
    if (std::sqrt(change) < kTol) break;
  }
  iterations = std::min(iterations, kMaxIter);
  return v;
}

}  // namespace detail

/// Top eigenvector of the feature covariance: cyclic Jacobi rotations up to
/// dimension 32 (exact even for nearly tied eigenvalues), power iteration
/// above that (at most 1000 steps, stop when the direction moves less than
/// 1e-7). The sign is chosen so that the mean
/// centered projection over the central crop of the first grid is positive.
inline PcaDirection fit_pca_direction(std::span<const PatchFeatureGrid> grids,
                                      double center_fraction = 0.5) {
  if (grids.empty()) throw InvalidInput("fit_pca_direction: no grids");
  const int dim = grids.front().dim;
  std::size_t n = 0;
  for (const auto& g : grids) {
    if (g.dim != dim) throw InvalidInput("fit_pca_direction: dimension mismatch");
    n += g.cells();
  }
  if (n < 2) throw InvalidInput("fit_pca_direction: need at least two patches");

  PcaDirection out;
  out.mean.assign(dim, 0.0);
  for (const auto& g : grids)
    for (std::size_t c = 0; c < g.cells(); ++c) {
      auto p = g.patch(c);
      for (int d = 0; d < dim; ++d) out.mean[d] += p[d];
    }
  for (double& m : out.mean) m /= static_cast<double>(n);

  std::vector<double> cov(static_cast<std::size_t>(dim) * dim, 0.0);
  std::vector<double> x(dim);
  for (const auto& g : grids)
    for (std::size_t c = 0; c < g.cells(); ++c) {
      auto p = g.patch(c);
      for (int d = 0; d < dim; ++d) x[d] = p[d] - out.mean[d];
      for (int i = 0; i < dim; ++i)
        for (int j = i; j < dim; ++j) cov[i * dim + j] += x[i] * x[j];
    }
  for (int i = 0; i < dim; ++i)
    for (int j = i; j < dim; ++j) {
      cov[i * dim + j] /= static_cast<double>(n);
      cov[j * dim + i] = cov[i * dim + j];
    }
  double trace = 0;
  double max_abs = 0;
  for (int i = 0; i < dim; ++i) trace += cov[i * dim + i];
  for (double v : out.mean) max_abs = std::max(max_abs, std::abs(v));
  if (!(trace > 1e-24 * std::max(1.0, max_abs * max_abs))) {
    throw DegenerateInput("fit_pca_direction: features have zero variance");
  }

  std::vector<double> v = dim <= detail::kJacobiMaxDim ? detail::jacobi_top_eigenvector(cov, dim, out.iterations)
                                                       : detail::power_top_eigenvector(cov, dim, out.iterations);

  const auto& first = grids.front();
  const CellWindow win = central_window(first.grid_h, first.grid_w, center_fraction);
  double center_proj = 0;
  for (int r = win.row0; r < win.row0 + win.rows; ++r)
    for (int c = win.col0; c < win.col0 + win.cols; ++c) {
      auto p = first.patch(r, c);
      for (int d = 0; d < dim; ++d) center_proj += (p[d] - out.mean[d]) * v[d];
    }
  if (center_proj < 0) {
    for (double& e : v) e = -e;
  }
  out.axis = std::move(v);
  return out;
}

inline PcaDirection fit_pca_direction(const PatchFeatureGrid& grid, double center_fraction = 0.5) {
  return fit_pca_direction(std::span<const PatchFeatureGrid>(&grid, 1), center_fraction);
}

/// Foreground iff the projection of the patch, centered on the grid's own
/// mean, onto `axis` is positive.
inline PatchMask patch_mask(const PatchFeatureGrid& grid, std::span<const double> axis) {
  if (static_cast<int>(axis.size()) != grid.dim) throw InvalidInput("patch_mask: dimension mismatch");
  const std::size_t n = grid.cells();
  std::vector<double> mean(grid.dim, 0.0);
  for (std::size_t c = 0; c < n; ++c) {
    auto p = grid.patch(c);
    for (int d = 0; d < grid.dim; ++d) mean[d] += p[d];
  }
  for (double& m : mean) m /= static_cast<double>(n);
  double offset = 0;
  for (int d = 0; d < grid.dim; ++d) offset += mean[d] * axis[d];
  PatchMask mask(grid.grid_h, grid.grid_w);
  for (std::size_t c = 0; c < n; ++c) {
    auto p = grid.patch(c);
    double proj = 0;
    for (int d = 0; d < grid.dim; ++d) proj += p[d] * axis[d];
    mask.bits[c] = proj - offset > 0.0;
  }
  return mask;
}

// Binary morphology with a square element. Cells outside the grid are
// ignored by both operators, which keeps dilation/erosion adjoint.
inline PatchMask dilate(const PatchMask& m, int size = 3) {
  const int r = size / 2;
  PatchMask out(m.grid_h, m.grid_w);
  for (int y = 0; y < m.grid_h; ++y)
    for (int x = 0; x < m.grid_w; ++x) {
      bool any = false;
      for (int dy = -r; dy <= r && !any; ++dy)
        for (int dx = -r; dx <= r && !any; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.grid_h && xx >= 0 && xx < m.grid_w) any = m.at(yy, xx);
        }
      out.set(y, x, any);
    }
  return out;
}

inline PatchMask erode(const PatchMask& m, int size = 3) {
  const int r = size / 2;
  PatchMask out(m.grid_h, m.grid_w);
  for (int y = 0; y < m.grid_h; ++y)
    for (int x = 0; x < m.grid_w; ++x) {
      bool all = true;
      for (int dy = -r; dy <= r && all; ++dy)
        for (int dx = -r; dx <= r && all; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < m.grid_h && xx >= 0 && xx < m.grid_w) all = m.at(yy, xx);
        }
      out.set(y, x, all);
    }
  return out;
}

inline PatchMask close_mask(const PatchMask& m, int size = 3) { return erode(dilate(m, size), size); }

/// One dilation pass followed by a morphological closing.
inline PatchMask refine_mask(const PatchMask& mask, const MaskPolicy& policy = {}) {
  policy.validate();
  return close_mask(dilate(mask, policy.dilation_size), policy.closing_size);
}

struct MaskTestResult {
  bool passed = false;
  double center_fraction = 0;  // foreground share inside the central crop
  double global_fraction = 0;  // foreground share of the whole grid

  nlohmann::json to_json() const {
    return {{"passed", passed}, {"center_fg_fraction", center_fraction},
            {"global_fg_fraction", global_fraction}};
  }
};

/// Passes when the central crop is mostly foreground and the mask does not
/// cover (nearly) everything.
inline MaskTestResult masking_test(const PatchMask& mask, const MaskPolicy& policy = {}) {
  policy.validate();
  MaskTestResult res;
  if (mask.cells() == 0) return res;
  const CellWindow win = central_window(mask.grid_h, mask.grid_w, policy.center_fraction);
  std::size_t center_fg = 0;
  for (int r = win.row0; r < win.row0 + win.rows; ++r)
    for (int c = win.col0; c < win.col0 + win.cols; ++c) center_fg += mask.at(r, c);
  res.center_fraction = static_cast<double>(center_fg) / (static_cast<double>(win.rows) * win.cols);
  res.global_fraction = static_cast<double>(mask.count()) / static_cast<double>(mask.cells());
  res.passed = res.center_fraction >= policy.center_fg_min && res.global_fraction <= policy.global_fg_max;
  return res;
}

/// Effective masking switch for a category.
inline bool resolve_mask_mode(const PreprocessConfig& cfg, bool test_passed) {
  if (cfg.texture_flag) return false;
  switch (cfg.masking_mode) {
    case MaskingMode::kOff: return false;
    case MaskingMode::kOn: return true;
    case MaskingMode::kAuto: return test_passed;
  }
  return false;
}

/// PCA mask of one grid fit on its own features, then refined. Falls back to
/// all-foreground when the grid has no feature variance.
inline PatchMask zero_shot_mask(const PatchFeatureGrid& grid, const MaskPolicy& policy = {}) {
  try {
    const PcaDirection pca = fit_pca_direction(grid, policy.center_fraction);
    return refine_mask(patch_mask(grid, pca.axis), policy);
  } catch (const DegenerateInput&) {
    return PatchMask(grid.grid_h, grid.grid_w, true);
  }
}

/// Upsamples a patch mask to pixels (one 14x14 block per cell), 0/255.
inline GrayImage mask_to_image(const PatchMask& mask) {
  GrayImage img(mask.grid_w * kPatchPx, mask.grid_h * kPatchPx);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) img.at(x, y) = mask.at(y / kPatchPx, x / kPatchPx) ? 255 : 0;
  return img;
}

}  // namespace patchbank
