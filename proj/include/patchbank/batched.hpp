#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/grid_types.hpp"
#include "patchbank/memory_bank.hpp"
#include "patchbank/parallel.hpp"
#include "patchbank/scoring.hpp"

namespace patchbank {

struct BatchedConfig {
  double alpha = 0.001;
  ScoreConfig aggregation;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) {
      throw InvalidInput("alpha must lie in (0, 1), got " + std::to_string(alpha));
    }
    aggregation.validate();
  }
};

/// Lower-tail count max(1, floor(alpha * n)).
inline std::size_t lower_tail_count(double alpha, std::size_t n) {
  const double m = std::floor(alpha * static_cast<double>(n));
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::max(m, 0.0)));
}

/// Mutual scoring over a batch: every image is scored against the patches of
/// all other images. Each image's foreground patches are normalized and packed
/// once; scoring image j never touches image j's own rows.
class MutualScorer {
 public:
  MutualScorer(std::span<const PatchFeatureGrid> grids, BatchedConfig cfg,
               std::span<const PatchMask> masks = {})
      : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (grids.size() < 2) throw InvalidInput("batched scoring needs at least 2 images");
    if (!masks.empty() && masks.size() != grids.size()) {
      throw InvalidInput("batched scoring: one mask per image required");
    }
    dim_ = grids.front().dim;
    for (std::size_t i = 0; i < grids.size(); ++i) {
      const auto& g = grids[i];
      g.validate();
      if (g.dim != dim_) throw InvalidInput("batched scoring: dimension mismatch");
      if (!masks.empty()) check_mask_shape(masks[i], g.grid_h, g.grid_w);
      Entry e;
      e.grid_h = g.grid_h;
      e.grid_w = g.grid_w;
      std::vector<double> rows;
      for (std::size_t c = 0; c < g.cells(); ++c) {
        if (!masks.empty() && !masks[i].bits[c]) continue;
        e.cells.push_back(c);
        auto p = g.patch(c);
        rows.insert(rows.end(), p.begin(), p.end());
      }
      if (!rows.empty()) e.bank.emplace(dim_, std::move(rows), BankMeta{});
      total_ += e.cells.size();
      entries_.push_back(std::move(e));
    }
  }

  std::size_t size() const { return entries_.size(); }

  /// |M_j|: foreground patches of all images other than j.
  std::size_t reference_count(std::size_t j) const { return total_ - entries_.at(j).cells.size(); }

  /// Per patch of image j: mean of the m = max(1, floor(alpha |M_j|))
  /// smallest cosine distances to M_j.
  PatchDistances score(std::size_t j) const {
    const Entry& self = entries_.at(j);
    PatchDistances out(self.grid_h, self.grid_w);
    std::fill(out.excluded.begin(), out.excluded.end(), true);
    if (self.cells.empty()) return out;
    const std::size_t others = reference_count(j);
    if (others == 0) throw EmptyInput("batched scoring: no foreground patches in other images");
    const std::size_t m = lower_tail_count(cfg_.alpha, others);
    std::vector<double> heap;  // min-heap of the m largest dot products
    heap.reserve(m + 1);
    for (std::size_t k = 0; k < self.cells.size(); ++k) {
      const auto q = self.bank->row(k);
      heap.clear();
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (i == j || !entries_[i].bank) continue;
        entries_[i].bank->for_each_block(q.data(), [&](const double* dots, int valid) {
          for (int l = 0; l < valid; ++l) {
            if (heap.size() < m) {
              heap.push_back(dots[l]);
              std::push_heap(heap.begin(), heap.end(), std::greater<>());
            } else if (dots[l] > heap.front()) {
              std::pop_heap(heap.begin(), heap.end(), std::greater<>());
              heap.back() = dots[l];
              std::push_heap(heap.begin(), heap.end(), std::greater<>());
            }
          }
        });
      }
      // Distances ascending, summed smallest first.
      std::sort(heap.begin(), heap.end(), std::greater<>());
      double sum = 0;
      for (double dot : heap) sum += std::clamp(1.0 - dot, 0.0, 2.0);
      const double lo = std::clamp(1.0 - heap.front(), 0.0, 2.0);
      const double hi = std::clamp(1.0 - heap.back(), 0.0, 2.0);
      const std::size_t cell = self.cells[k];
      out.values[cell] = std::clamp(sum / static_cast<double>(heap.size()), lo, hi);
      out.excluded[cell] = false;
    }
    return out;
  }

 private:
  struct Entry {
    int grid_h = 0;
    int grid_w = 0;
    std::vector<std::size_t> cells;  // foreground cell indices, bank row order
    std::optional<MemoryBank> bank;
  };

  BatchedConfig cfg_;
  int dim_ = 0;
  std::size_t total_ = 0;
  std::vector<Entry> entries_;
};

inline PatchDistances mutual_patch_scores(std::span<const PatchFeatureGrid> grids, std::size_t j,
                                          const BatchedConfig& cfg,
                                          std::span<const PatchMask> masks = {}) {
  if (j >= grids.size()) throw InvalidInput("mutual_patch_scores: index out of range");
  return MutualScorer(grids, cfg, masks).score(j);
}

struct BatchedResult {
  std::vector<double> scores;
  std::vector<PatchDistances> distances;
  std::vector<AnomalyMap> maps;
};

/// Mutual scoring for every image, then image-level aggregation and anomaly
/// maps at grid*14 pixels. Output order matches input order.
inline BatchedResult batched_run(std::span<const PatchFeatureGrid> grids, const BatchedConfig& cfg,
                                 std::span<const PatchMask> masks = {}, unsigned threads = 1,
                                 bool with_maps = true) {
  const MutualScorer scorer(grids, cfg, masks);
  BatchedResult res;
  res.scores.resize(grids.size());
  res.distances.resize(grids.size());
  if (with_maps) res.maps.resize(grids.size());
  parallel_for(grids.size(), threads, [&](std::size_t j) {
    res.distances[j] = scorer.score(j);
    res.scores[j] = aggregate(res.distances[j], cfg.aggregation);
    if (with_maps) {
      res.maps[j] = make_map(res.distances[j], grids[j].grid_h * kPatchPx,
                             grids[j].grid_w * kPatchPx, cfg.aggregation);
    }
  });
  return res;
}

}  // namespace patchbank
