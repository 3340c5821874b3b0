#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/grid_types.hpp"
#include "patchbank/parallel.hpp"

namespace patchbank {

struct BankMeta {
  std::string category;
  int shots = 0;
  std::vector<double> rotation_angles{0};
  std::string backbone;
  int resolution = 0;
  // Masking-test diagnostics, coreset record, config echo.
  nlohmann::json extra = nlohmann::json::object();

  nlohmann::json to_json() const {
    nlohmann::json j = extra;
    j["category"] = category;
    j["shots"] = shots;
    j["rotation_angles"] = rotation_angles;
    j["backbone"] = backbone;
    j["resolution"] = resolution;
    return j;
  }

  static BankMeta from_json(const nlohmann::json& j) {
    BankMeta m;
    m.category = j.value("category", std::string{});
    m.shots = j.value("shots", 0);
    m.rotation_angles = j.value("rotation_angles", std::vector<double>{0});
    m.backbone = j.value("backbone", std::string{});
    m.resolution = j.value("resolution", 0);
    m.extra = j;
    for (const char* k : {"category", "shots", "rotation_angles", "backbone", "resolution"})
      m.extra.erase(k);
    return m;
  }
};

/// Cosine distance 1 - <a,b>/(|a||b|), in [0, 2].
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidInput("cosine_distance: dimension mismatch");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw InvalidInput("cosine_distance: zero vector");
  return std::clamp(1.0 - dot / (std::sqrt(na) * std::sqrt(nb)), 0.0, 2.0);
}

namespace detail {

template <typename T>
std::vector<double> unit_copy(std::span<const T> v, const char* what) {
  double n2 = 0;
  for (T x : v) n2 += static_cast<double>(x) * static_cast<double>(x);
  if (n2 == 0.0) throw InvalidInput(std::string(what) + ": zero vector");
  const double inv = 1.0 / std::sqrt(n2);
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<double>(v[i]) * inv;
  return out;
}

}  // namespace detail

/// Unit-normalized nominal patch vectors. Immutable after construction; safe
/// for any number of concurrent readers.
class MemoryBank {
 public:
  static constexpr int kLanes = 8;

  /// Rows are normalized here; zero rows become e_0 and are tallied.
  MemoryBank(int dim, std::vector<double> rows, BankMeta meta)
      : dim_(dim), meta_(std::move(meta)) {
    if (dim < 1) throw InvalidInput("memory bank dimension must be positive");
    if (rows.empty() || rows.size() % dim != 0) {
      throw InvalidInput("memory bank needs at least one row of dimension " + std::to_string(dim));
    }
    count_ = rows.size() / dim;
    rows_ = std::move(rows);
    for (std::size_t r = 0; r < count_; ++r) {
      double* row = rows_.data() + r * dim_;
      double n2 = 0;
      for (int d = 0; d < dim_; ++d) n2 += row[d] * row[d];
      if (n2 == 0.0 || !std::isfinite(n2)) {
        std::fill(row, row + dim_, 0.0);
        row[0] = 1.0;
        ++zero_rows_;
        continue;
      }
      const double inv = 1.0 / std::sqrt(n2);
      for (int d = 0; d < dim_; ++d) row[d] *= inv;
    }
    pack();
  }

  int dim() const { return dim_; }
  std::size_t count() const { return count_; }
  const BankMeta& meta() const { return meta_; }
  /// Number of zero vectors replaced by the fixed basis vector.
  std::size_t zero_rows() const { return zero_rows_; }
  std::span<const double> row(std::size_t r) const {
    return {rows_.data() + r * dim_, static_cast<std::size_t>(dim_)};
  }
  const std::vector<double>& rows() const { return rows_; }

  /// Calls fn(dots, valid) for every block of kLanes rows, where dots[l] is
  /// the dot product of the unit query `q` with row block*kLanes + l.
  template <typename Fn>
  void for_each_block(const double* q, Fn&& fn) const {
    const std::size_t blocks = packed_.size() / (static_cast<std::size_t>(dim_) * kLanes);
    for (std::size_t b = 0; b < blocks; ++b) {
      const double* blk = packed_.data() + b * dim_ * kLanes;
      double acc[kLanes] = {};
      for (int d = 0; d < dim_; ++d) {
        const double qv = q[d];
        for (int l = 0; l < kLanes; ++l) acc[l] += qv * blk[d * kLanes + l];
      }
      fn(static_cast<const double*>(acc),
         static_cast<int>(std::min<std::size_t>(kLanes, count_ - b * kLanes)));
    }
  }

  /// Largest dot product of each unit query (contiguous, `n` x dim) against
  /// all rows. Exact brute force over blocks of kLanes rows.
  void max_dots(const double* queries, std::size_t n, double* out) const {
    constexpr std::size_t kTile = 8;
    std::size_t q = 0;
    for (; q + kTile <= n; q += kTile) scan_tile<kTile>(queries + q * dim_, out + q);
    for (; q < n; ++q) scan_tile<1>(queries + q * dim_, out + q);
  }

 private:
  // Padding lanes of the last block repeat the last row, so a plain max over
  // all lanes is exact and the inner loops have fixed trip counts.
  template <std::size_t Tile>
  void scan_tile(const double* queries, double* out) const {
    using Lanes = double __attribute__((vector_size(kLanes * sizeof(double))));
    Lanes best[Tile];
    for (auto& v : best)
      for (int l = 0; l < kLanes; ++l) v[l] = -std::numeric_limits<double>::infinity();
    const std::size_t blocks = packed_.size() / (static_cast<std::size_t>(dim_) * kLanes);
    const double* blk = packed_.data();
    for (std::size_t b = 0; b < blocks; ++b, blk += dim_ * kLanes) {
      Lanes acc[Tile] = {};
      for (int d = 0; d < dim_; ++d) {
        Lanes col;
        std::memcpy(&col, blk + d * kLanes, sizeof col);
        for (std::size_t t = 0; t < Tile; ++t) acc[t] += queries[t * dim_ + d] * col;
      }
      for (std::size_t t = 0; t < Tile; ++t) best[t] = best[t] > acc[t] ? best[t] : acc[t];
    }
    for (std::size_t t = 0; t < Tile; ++t) {
      double m = best[t][0];
      for (int l = 1; l < kLanes; ++l) m = std::max(m, best[t][l]);
      out[t] = m;
    }
  }

  void pack() {
    const std::size_t blocks = (count_ + kLanes - 1) / kLanes;
    packed_.assign(blocks * dim_ * kLanes, 0.0);
    for (std::size_t slot = 0; slot < blocks * kLanes; ++slot) {
      const std::size_t r = std::min(slot, count_ - 1);
      const std::size_t b = slot / kLanes;
      const std::size_t l = slot % kLanes;
      for (int d = 0; d < dim_; ++d) packed_[(b * dim_ + d) * kLanes + l] = rows_[r * dim_ + d];
    }
  }

  int dim_ = 0;
  std::size_t count_ = 0;
  std::vector<double> rows_;
  std::vector<double> packed_;  // [block][dim][lane]
  BankMeta meta_;
  std::size_t zero_rows_ = 0;
};

/// Collects every patch of every grid into one bank (no deduplication).
inline MemoryBank build_bank(std::span<const PatchFeatureGrid> grids, BankMeta meta) {
  if (grids.empty()) throw InvalidInput("build_bank: no reference grids");
  const int dim = grids.front().dim;
  std::size_t total = 0;
  for (const auto& g : grids) {
    g.validate();
    if (g.dim != dim) {
      throw InvalidInput("build_bank: dimension mismatch (" + std::to_string(g.dim) + " vs " +
                         std::to_string(dim) + ")");
    }
    total += g.features.size();
  }
  std::vector<double> rows;
  rows.reserve(total);
  for (const auto& g : grids) rows.insert(rows.end(), g.features.begin(), g.features.end());
  return MemoryBank(dim, std::move(rows), std::move(meta));
}

/// min over bank rows of the cosine distance, computed as 1 - max dot.
inline double nn_distance(std::span<const double> p, const MemoryBank& bank) {
  if (static_cast<int>(p.size()) != bank.dim()) {
    throw InvalidInput("nn_distance: query dim " + std::to_string(p.size()) + " vs bank dim " +
                       std::to_string(bank.dim()));
  }
  const std::vector<double> q = detail::unit_copy(p, "nn_distance");
  double best = 0;
  bank.max_dots(q.data(), 1, &best);
  return std::clamp(1.0 - best, 0.0, 2.0);
}

inline double nn_distance(std::span<const float> p, const MemoryBank& bank) {
  std::vector<double> v(p.begin(), p.end());
  return nn_distance(std::span<const double>(v), bank);
}

/// Nearest-neighbor distance of every foreground patch. Masked-out cells get
/// 0 and are flagged excluded. Output is independent of `threads`.
inline PatchDistances score_grid(const PatchFeatureGrid& grid, const MemoryBank& bank,
                                 const PatchMask* mask = nullptr, unsigned threads = 1) {
  if (grid.dim != bank.dim()) {
    throw InvalidInput("score_grid: grid dim " + std::to_string(grid.dim) + " vs bank dim " +
                       std::to_string(bank.dim()));
  }
  if (mask) check_mask_shape(*mask, grid.grid_h, grid.grid_w);
  PatchDistances out(grid.grid_h, grid.grid_w);
  std::vector<std::size_t> cells;
  cells.reserve(grid.cells());
  for (std::size_t c = 0; c < grid.cells(); ++c) {
    if (mask && !mask->bits[c]) {
      out.excluded[c] = true;
    } else {
      cells.push_back(c);
    }
  }
  const std::size_t dim = static_cast<std::size_t>(grid.dim);
  std::vector<double> queries(cells.size() * dim);
  for (std::size_t i = 0; i < cells.size(); ++i) {
    auto u = detail::unit_copy(grid.patch(cells[i]), "score_grid");
    std::copy(u.begin(), u.end(), queries.begin() + i * dim);
  }
  std::vector<double> best(cells.size());
  constexpr std::size_t kChunk = 64;
  const std::size_t chunks = (cells.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, threads, [&](std::size_t k) {
    const std::size_t begin = k * kChunk;
    const std::size_t n = std::min(kChunk, cells.size() - begin);
    bank.max_dots(queries.data() + begin * dim, n, best.data() + begin);
  });
  for (std::size_t i = 0; i < cells.size(); ++i)
    out.values[cells[i]] = std::clamp(1.0 - best[i], 0.0, 2.0);
  return out;
}

/// Greedy k-center (farthest point) selection in cosine distance, starting
/// from a row drawn with `seed`. Rows come back in selection order.
inline MemoryBank coreset_reduce(const MemoryBank& bank, std::size_t target, std::uint64_t seed) {
  if (target < 1 || target > bank.count()) {
    throw InvalidInput("coreset target " + std::to_string(target) + " outside [1, " +
                       std::to_string(bank.count()) + "]");
  }
  const std::size_t n = bank.count();
  const int dim = bank.dim();
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  std::size_t next = pick(rng);
  const std::size_t start = next;
  std::vector<double> min_dist(n, std::numeric_limits<double>::infinity());
  std::vector<bool> taken(n, false);
  std::vector<double> rows;
  rows.reserve(target * dim);
  for (std::size_t k = 0; k < target; ++k) {
    taken[next] = true;
    const auto c = bank.row(next);
    rows.insert(rows.end(), c.begin(), c.end());
    std::size_t arg = n;
    double far = -1.0;
    for (std::size_t r = 0; r < n; ++r) {
      if (taken[r]) continue;
      const auto v = bank.row(r);
      double dot = 0;
      for (int d = 0; d < dim; ++d) dot += v[d] * c[d];
      min_dist[r] = std::min(min_dist[r], 1.0 - dot);
      if (min_dist[r] > far) {
        far = min_dist[r];
        arg = r;
      }
    }
    next = arg;
  }
  BankMeta meta = bank.meta();
  meta.extra["coreset"] = {{"source_count", n}, {"target", target}, {"seed", seed}, {"start_row", start}};
  return MemoryBank(dim, std::move(rows), std::move(meta));
}

// ---------------------------------------------------------------------------
// .amb bank files

inline std::string encode_bank_file(const MemoryBank& bank) {
  std::string out = "AMB1";
  detail::put_u32(out, static_cast<std::uint32_t>(bank.dim()));
  detail::put_u64(out, bank.count());
  detail::put_u32(out, kFlagUnitNormalized);
  out.reserve(out.size() + bank.rows().size() * 4 + 256);
  for (double v : bank.rows()) detail::put_f32(out, static_cast<float>(v));
  nlohmann::json meta = bank.meta().to_json();
  meta["zero_rows_replaced"] = bank.zero_rows();
  const std::string text = meta.dump();
  detail::put_u32(out, static_cast<std::uint32_t>(text.size()));
  out += text;
  return out;
}

/// Rows are re-normalized in double precision after reading.
inline MemoryBank decode_bank_file(std::span<const std::uint8_t> bytes,
                                   const std::string& what = "amb") {
  detail::ByteReader in(bytes, what);
  in.magic("AMB1");
  const std::uint32_t dim = in.u32("dim");
  const std::uint64_t count = in.u64("count");
  in.u32("flags");
  if (dim == 0 || count == 0) throw FormatError(what + ": zero dim or count in header at offset 4");
  if (count > in.remaining() / 4 / dim) {
    in.need(static_cast<std::size_t>(count * dim * 4), "bank payload");
  }
  std::vector<double> rows(static_cast<std::size_t>(count * dim));
  for (auto& v : rows) v = in.f32("bank payload");
  const std::uint32_t meta_len = in.u32("metadata length");
  const std::size_t meta_at = in.offset();
  const std::string text = in.bytes(meta_len, "metadata");
  in.finish();
  nlohmann::json j = nlohmann::json::object();
  if (!text.empty()) {
    try {
      j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(what + ": invalid metadata JSON at offset " + std::to_string(meta_at) +
                        ": " + e.what());
    }
  }
  j.erase("zero_rows_replaced");
  return MemoryBank(static_cast<int>(dim), std::move(rows), BankMeta::from_json(j));
}

inline void write_bank_file(const MemoryBank& bank, const std::filesystem::path& path) {
  detail::spit(path, encode_bank_file(bank));
}

inline MemoryBank read_bank_file(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  return decode_bank_file(bytes, path.string());
}

}  // namespace patchbank
