#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "patchbank/error.hpp"

namespace patchbank {

/// Foreground indicator per patch cell (true = foreground).
struct PatchMask {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<bool> bits;

  PatchMask() = default;
  PatchMask(int h, int w, bool fill = false)
      : grid_h(h), grid_w(w), bits(static_cast<std::size_t>(h) * w, fill) {}

  std::size_t cells() const { return bits.size(); }
  bool at(int r, int c) const { return bits[static_cast<std::size_t>(r) * grid_w + c]; }
  void set(int r, int c, bool v) { bits[static_cast<std::size_t>(r) * grid_w + c] = v; }
  std::size_t count() const {
    std::size_t n = 0;
    for (bool b : bits) n += b;
    return n;
  }

  friend bool operator==(const PatchMask&, const PatchMask&) = default;
};

/// Per-patch anomaly values of one image. Excluded (background) cells carry 0
/// and never enter aggregation.
struct PatchDistances {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<double> values;
  std::vector<bool> excluded;

  PatchDistances() = default;
  PatchDistances(int h, int w)
      : grid_h(h),
        grid_w(w),
        values(static_cast<std::size_t>(h) * w, 0.0),
        excluded(static_cast<std::size_t>(h) * w, false) {}

  std::size_t cells() const { return values.size(); }
  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * grid_w + c]; }

  std::vector<double> included() const {
    std::vector<double> out;
    out.reserve(values.size());
    for (std::size_t i = 0; i < values.size(); ++i)
      if (!excluded[i]) out.push_back(values[i]);
    return out;
  }
};

inline void check_mask_shape(const PatchMask& mask, int grid_h, int grid_w) {
  if (mask.grid_h != grid_h || mask.grid_w != grid_w) {
    throw InvalidInput("mask shape " + std::to_string(mask.grid_h) + "x" +
                       std::to_string(mask.grid_w) + " does not match grid " +
                       std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
}

}  // namespace patchbank
