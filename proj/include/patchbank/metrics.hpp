#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "patchbank/error.hpp"
#include "patchbank/scoring.hpp"

namespace patchbank {

namespace detail {

inline void check_pairs(std::span<const double> scores, std::span<const int> labels, const char* what) {
  if (scores.size() != labels.size()) {
    throw InvalidInput(std::string(what) + ": scores and labels differ in length");
  }
  for (int l : labels) {
    if (l != 0 && l != 1) throw InvalidInput(std::string(what) + ": labels must be 0 or 1");
  }
}

inline std::size_t count_positive(std::span<const int> labels) {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), 1));
}

}  // namespace detail

/// Scores split by class and sorted ascending.
struct SortedClasses {
  std::vector<double> negatives;
  std::vector<double> positives;
};

inline SortedClasses split_sorted(std::span<const double> scores, std::span<const int> labels) {
  SortedClasses s;
  const std::size_t pos = detail::count_positive(labels);
  s.positives.reserve(pos);
  s.negatives.reserve(scores.size() - pos);
  for (std::size_t i = 0; i < scores.size(); ++i) (labels[i] ? s.positives : s.negatives).push_back(scores[i]);
  std::sort(s.positives.begin(), s.positives.end());
  std::sort(s.negatives.begin(), s.negatives.end());
  return s;
}

/// AUROC from class-sorted scores: the share of (positive, negative) pairs
/// ordered correctly, ties counting 1/2. Pair counts are accumulated as
/// integers, so the result is exact up to one final division.
inline double auroc(const SortedClasses& s) {
  const auto& neg = s.negatives;
  const auto& pos = s.positives;
  if (pos.empty() || neg.empty()) throw UndefinedMetric("auroc needs both classes");
  double twice_u = 0;
  std::size_t i = 0, j = 0;
  while (j < pos.size()) {
    const double v = pos[j];
    while (i < neg.size() && neg[i] < v) ++i;
    std::size_t neg_eq = 0;
    while (i + neg_eq < neg.size() && neg[i + neg_eq] == v) ++neg_eq;
    std::size_t pos_eq = 0;
    while (j < pos.size() && pos[j] == v) ++pos_eq, ++j;
    twice_u += static_cast<double>(pos_eq) * static_cast<double>(2 * i + neg_eq);
  }
  return twice_u / (2.0 * static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
}

/// Rank-based AUROC (Mann-Whitney U / (P N)); tied pairs count 1/2.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  detail::check_pairs(scores, labels, "auroc");
  return auroc(split_sorted(scores, labels));
}

/// Maximum F1 over thresholds at every distinct score (positive iff >= t).
inline double f1_max(const SortedClasses& s) {
  const auto& neg = s.negatives;
  const auto& pos = s.positives;
  if (pos.empty()) throw UndefinedMetric("f1_max needs at least one positive");
  const double p = static_cast<double>(pos.size());
  double best = 0;
  // Walk thresholds from the top; counts are of scores >= threshold.
  std::size_t i = neg.size(), j = pos.size();
  while (i > 0 || j > 0) {
    const double t = std::max(i ? neg[i - 1] : -HUGE_VAL, j ? pos[j - 1] : -HUGE_VAL);
    while (i > 0 && neg[i - 1] == t) --i;
    while (j > 0 && pos[j - 1] == t) --j;
    const double tp = static_cast<double>(pos.size() - j);
    const double fp = static_cast<double>(neg.size() - i);
    best = std::max(best, 2.0 * tp / (tp + fp + p));
  }
  return best;
}

inline double f1_max(std::span<const double> scores, std::span<const int> labels) {
  detail::check_pairs(scores, labels, "f1_max");
  return f1_max(split_sorted(scores, labels));
}

/// Step-interpolated average precision: sum over positives of precision at
/// their rank, divided by the number of positives. Ranking is by descending
/// score; ties keep input order.
inline double average_precision(std::span<const double> scores, std::span<const int> labels) {
  detail::check_pairs(scores, labels, "average_precision");
  const std::size_t pos = detail::count_positive(labels);
  if (pos == 0) throw UndefinedMetric("average_precision needs at least one positive");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  double ap = 0;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    if (!labels[order[k]]) continue;
    ++tp;
    ap += static_cast<double>(tp) / static_cast<double>(k + 1);
  }
  return ap / static_cast<double>(pos);
}

/// Binary ground truth at map resolution (nonzero = anomalous).
struct BinaryMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> bits;

  BinaryMask() = default;
  BinaryMask(int h, int w) : height(h), width(w), bits(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t at(int y, int x) const { return bits[static_cast<std::size_t>(y) * width + x]; }
};

struct PixelMetrics {
  double auroc = 0;
  double f1max = 0;
  double nominal_fraction = 0;  // share of nominal pixels (class imbalance)
};

namespace detail {

inline void check_maps(std::span<const AnomalyMap> maps, std::span<const BinaryMask> gts) {
  if (maps.size() != gts.size()) throw InvalidInput("pixel metrics: one ground truth per map required");
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != gts[i].height || maps[i].width != gts[i].width) {
      throw InvalidInput("pixel metrics: map " + std::to_string(i) + " is " +
                         std::to_string(maps[i].width) + "x" + std::to_string(maps[i].height) +
                         " but its ground truth is " + std::to_string(gts[i].width) + "x" +
                         std::to_string(gts[i].height));
    }
  }
}

}  // namespace detail

/// Pixel AUROC and F1-max over all pixels of all maps.
inline PixelMetrics pixel_metrics(std::span<const AnomalyMap> maps, std::span<const BinaryMask> gts) {
  detail::check_maps(maps, gts);
  SortedClasses s;
  for (std::size_t i = 0; i < maps.size(); ++i)
    for (std::size_t p = 0; p < maps[i].values.size(); ++p)
      (gts[i].bits[p] ? s.positives : s.negatives).push_back(maps[i].values[p]);
  std::sort(s.positives.begin(), s.positives.end());
  std::sort(s.negatives.begin(), s.negatives.end());
  PixelMetrics out;
  out.auroc = auroc(s);
  out.f1max = f1_max(s);
  out.nominal_fraction = static_cast<double>(s.negatives.size()) /
                         static_cast<double>(s.negatives.size() + s.positives.size());
  return out;
}

/// 8-connected components of a binary mask; 0 = background, 1..n = regions.
inline std::vector<int> label_regions(const BinaryMask& gt, int* count = nullptr) {
  std::vector<int> labels(gt.bits.size(), 0);
  int next = 0;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < gt.bits.size(); ++start) {
    if (!gt.bits[start] || labels[start]) continue;
    labels[start] = ++next;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t idx = stack.back();
      stack.pop_back();
      const int y = static_cast<int>(idx / gt.width);
      const int x = static_cast<int>(idx % gt.width);
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          const int yy = y + dy, xx = x + dx;
          if (yy < 0 || yy >= gt.height || xx < 0 || xx >= gt.width) continue;
          const std::size_t nb = static_cast<std::size_t>(yy) * gt.width + xx;
          if (gt.bits[nb] && !labels[nb]) {
            labels[nb] = next;
            stack.push_back(nb);
          }
        }
    }
  }
  if (count) *count = next;
  return labels;
}

/// Area under (FPR, x) curve points from x = 0 to `limit`, linear between
/// points, interpolating at the limit. Points must be sorted by FPR.
inline double trapezoid_to(std::span<const double> fpr, std::span<const double> value, double limit) {
  double area = 0;
  for (std::size_t i = 1; i < fpr.size(); ++i) {
    const double x0 = fpr[i - 1], x1 = fpr[i];
    if (x0 >= limit) break;
    const double y0 = value[i - 1], y1 = value[i];
    if (x1 <= limit) {
      area += (x1 - x0) * (y0 + y1) / 2.0;
    } else {
      const double y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0);
      area += (limit - x0) * (y0 + y_lim) / 2.0;
      break;
    }
  }
  return area;
}

/// Thresholds for the PRO sweep, descending: `count` equally spaced values
/// from hi to lo, both ends exact.
inline std::vector<double> pro_thresholds(double lo, double hi, std::size_t count) {
  if (count == 0) throw InvalidInput("pro_thresholds: count must be positive");
  if (hi == lo || count == 1) return {hi};
  std::vector<double> t(count);
  const double step = (hi - lo) / static_cast<double>(count - 1);
  for (std::size_t i = 0; i < count; ++i) t[i] = hi - step * static_cast<double>(i);
  t.front() = hi;
  t.back() = lo;
  return t;
}

/// Per-region overlap: for each threshold, the mean over ground-truth regions
/// (8-connected) of the fraction of region pixels at or above it, plotted
/// against the false-positive rate over nominal pixels. The curve runs from
/// (0,0) through the threshold points to (1,1); the area up to `fpr_limit`
/// is normalized by `fpr_limit`. thresholds == 0 uses every distinct score.
inline double pro(std::span<const AnomalyMap> maps, std::span<const BinaryMask> gts,
                  double fpr_limit = 0.3, std::size_t thresholds = 200) {
  detail::check_maps(maps, gts);
  if (!(fpr_limit > 0.0 && fpr_limit <= 1.0)) throw InvalidInput("pro: fpr_limit must lie in (0, 1]");
  std::vector<double> nominal;
  std::vector<std::vector<double>> regions;
  for (std::size_t i = 0; i < maps.size(); ++i) {
    int n = 0;
    const std::vector<int> lab = label_regions(gts[i], &n);
    const std::size_t base = regions.size();
    regions.resize(base + n);
    for (std::size_t p = 0; p < lab.size(); ++p) {
      const double s = maps[i].values[p];
      if (lab[p]) {
        regions[base + lab[p] - 1].push_back(s);
      } else {
        nominal.push_back(s);
      }
    }
  }
  if (regions.empty()) throw UndefinedMetric("pro needs at least one anomalous region");
  if (nominal.empty()) throw UndefinedMetric("pro needs nominal pixels for the false-positive rate");
  std::sort(nominal.begin(), nominal.end());
  for (auto& r : regions) std::sort(r.begin(), r.end());
  std::vector<double> ts;
  if (thresholds == 0) {
    ts = nominal;
    for (const auto& r : regions) ts.insert(ts.end(), r.begin(), r.end());
    std::sort(ts.begin(), ts.end(), std::greater<>());
    ts.erase(std::unique(ts.begin(), ts.end()), ts.end());
  } else {
    double lo = nominal.front(), hi = nominal.back();
    for (const auto& r : regions) {
      lo = std::min(lo, r.front());
      hi = std::max(hi, r.back());
    }
    ts = pro_thresholds(lo, hi, thresholds);
  }

  auto at_or_above = [](const std::vector<double>& sorted, double t) {
    return static_cast<double>(sorted.end() - std::lower_bound(sorted.begin(), sorted.end(), t));
  };
  std::vector<double> fprs{0.0};
  std::vector<double> pros{0.0};
  for (double t : ts) {
    const double fpr = at_or_above(nominal, t) / static_cast<double>(nominal.size());
    double overlap = 0;
    for (const auto& r : regions) overlap += at_or_above(r, t) / static_cast<double>(r.size());
    fprs.push_back(fpr);
    pros.push_back(overlap / static_cast<double>(regions.size()));
  }
  fprs.push_back(1.0);
  pros.push_back(1.0);
  return trapezoid_to(fprs, pros, fpr_limit) / fpr_limit;
}

}  // namespace patchbank
