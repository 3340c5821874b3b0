#pragma once

#include <atomic>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchbank/error.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"

namespace patchbank {

/// grid_h x grid_w patch feature vectors of one preprocessed image, stored
/// row-major as (row, column, channel).
struct PatchFeatureGrid {
  int grid_h = 0;
  int grid_w = 0;
  int dim = 0;
  std::vector<float> features;
  std::string source_id;
  std::string backbone;
  int resolution = 0;
  bool unit_normalized = false;

  PatchFeatureGrid() = default;
  PatchFeatureGrid(int h, int w, int d)
      : grid_h(h), grid_w(w), dim(d), features(static_cast<std::size_t>(h) * w * d, 0.0f) {}

  std::size_t cells() const { return static_cast<std::size_t>(grid_h) * grid_w; }

  std::span<float> patch(std::size_t cell) {
    return {features.data() + cell * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const float> patch(std::size_t cell) const {
    return {features.data() + cell * dim, static_cast<std::size_t>(dim)};
  }
  std::span<const float> patch(int row, int col) const {
    return patch(static_cast<std::size_t>(row) * grid_w + col);
  }

  void validate() const {
    if (grid_h < 1 || grid_w < 1 || dim < 1) throw InvalidInput("feature grid has empty shape");
    if (features.size() != cells() * dim) throw InvalidInput("feature grid payload size mismatch");
    for (float v : features) {
      if (!std::isfinite(v)) throw InvalidInput("feature grid contains non-finite values");
    }
  }

  friend bool operator==(const PatchFeatureGrid&, const PatchFeatureGrid&) = default;
};

// ---------------------------------------------------------------------------
// Toy backbone

inline constexpr int kToyDim = 14;
inline constexpr int kOrientationBins = 8;

/// Octant of atan2(gy, gx) taken in [0, 2pi): bin k covers [k pi/4, (k+1) pi/4).
/// Decided by sign and magnitude comparisons, so directions on a boundary
/// land exactly in the upper bin. (gx, gy) must not both be zero.
inline int orientation_bin(double gx, double gy) {
  if (gx > 0 && gy >= 0) return gy < gx ? 0 : 1;
  if (gx <= 0 && gy > 0) return -gx < gy ? 2 : 3;
  if (gx < 0 && gy <= 0) return -gy < -gx ? 4 : 5;
  return gx < -gy ? 6 : 7;
}

/// Deterministic 14-d patch descriptor: per-channel mean and standard
/// deviation (scaled to [0,1]) followed by a magnitude-weighted 8-bin
/// gradient-orientation histogram of the luminance, normalized to sum 1.
/// Gradients are central differences clamped to the patch, so every patch
/// depends only on its own pixels. Flat patches get the uniform histogram.
inline PatchFeatureGrid toy_extract(const Image& img) {
  if (img.empty() || img.width % kPatchPx != 0 || img.height % kPatchPx != 0) {
    throw InvalidInput("toy backbone needs dimensions that are multiples of 14, got " +
                       std::to_string(img.width) + "x" + std::to_string(img.height));
  }
  PatchFeatureGrid grid(img.height / kPatchPx, img.width / kPatchPx, kToyDim);
  grid.backbone = "toy";
  constexpr int n = kPatchPx * kPatchPx;
  // Luminance in integer thousandths (299 r + 587 g + 114 b), so gradient
  // ties and octant boundaries are decided exactly.
  int lum[kPatchPx][kPatchPx];
  for (int gr = 0; gr < grid.grid_h; ++gr) {
    for (int gc = 0; gc < grid.grid_w; ++gc) {
      double sum[3] = {0, 0, 0};
      double sq[3] = {0, 0, 0};
      for (int y = 0; y < kPatchPx; ++y) {
        for (int x = 0; x < kPatchPx; ++x) {
          const int px = gc * kPatchPx + x;
          const int py = gr * kPatchPx + y;
          for (int c = 0; c < 3; ++c) {
            const double v = img.at(px, py, c) / 255.0;
            sum[c] += v;
            sq[c] += v * v;
          }
          lum[y][x] = 299 * img.at(px, py, 0) + 587 * img.at(px, py, 1) + 114 * img.at(px, py, 2);
        }
      }
      double hist[kOrientationBins] = {};
      double total = 0.0;
      for (int y = 0; y < kPatchPx; ++y) {
        for (int x = 0; x < kPatchPx; ++x) {
          const int gx = lum[y][std::min(x + 1, kPatchPx - 1)] - lum[y][std::max(x - 1, 0)];
          const int gy = lum[std::min(y + 1, kPatchPx - 1)][x] - lum[std::max(y - 1, 0)][x];
          if (gx == 0 && gy == 0) continue;
          const double mag = std::sqrt(static_cast<double>(gx) * gx + static_cast<double>(gy) * gy);
          hist[orientation_bin(gx, gy)] += mag;
          total += mag;
        }
      }
      auto out = grid.patch(static_cast<std::size_t>(gr) * grid.grid_w + gc);
      for (int c = 0; c < 3; ++c) {
        const double mean = sum[c] / n;
        out[c] = static_cast<float>(mean);
        out[3 + c] = static_cast<float>(std::sqrt(std::max(0.0, sq[c] / n - mean * mean)));
      }
      for (int b = 0; b < kOrientationBins; ++b) {
        out[6 + b] = static_cast<float>(total > 0.0 ? hist[b] / total : 1.0 / kOrientationBins);
      }
    }
  }
  return grid;
}

// ---------------------------------------------------------------------------
// .pfv feature files

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}
inline void put_f32(std::string& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

/// Bounds-checked little-endian reader; errors name the byte offset.
class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* field) const {
    if (remaining() < n) {
      throw FormatError(what_ + ": truncated at offset " + std::to_string(pos_) + " reading " +
                        field + " (need " + std::to_string(n) + " bytes, have " +
                        std::to_string(remaining()) + ")");
    }
  }
  std::uint32_t u32(const char* field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(const char* field) {
    const std::size_t at = pos_;
    const float v = std::bit_cast<float>(u32(field));
    if (!std::isfinite(v)) {
      throw FormatError(what_ + ": non-finite value at offset " + std::to_string(at));
    }
    return v;
  }
  std::string bytes(std::size_t n, const char* field) {
    need(n, field);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  void magic(const char (&expected)[5]) {
    need(4, "magic");
    if (std::memcmp(bytes_.data(), expected, 4) != 0) {
      throw FormatError(what_ + ": bad magic at offset 0 (expected \"" + expected + "\")");
    }
    pos_ += 4;
  }
  void finish() const {
    if (remaining() != 0) {
      throw FormatError(what_ + ": " + std::to_string(remaining()) +
                        " trailing bytes at offset " + std::to_string(pos_));
    }
  }

 private:
  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

inline constexpr std::uint32_t kFlagUnitNormalized = 1u;

inline std::string encode_feature_file(const PatchFeatureGrid& grid) {
  grid.validate();
  std::string out = "PFV1";
  detail::put_u32(out, static_cast<std::uint32_t>(grid.grid_h));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.grid_w));
  detail::put_u32(out, static_cast<std::uint32_t>(grid.dim));
  detail::put_u32(out, grid.unit_normalized ? kFlagUnitNormalized : 0u);
  out.reserve(out.size() + grid.features.size() * 4 + 128);
  for (float v : grid.features) detail::put_f32(out, v);
  const std::string meta = nlohmann::json{{"source_id", grid.source_id},
                                          {"backbone", grid.backbone},
                                          {"resolution", grid.resolution}}
                               .dump();
  detail::put_u32(out, static_cast<std::uint32_t>(meta.size()));
  out += meta;
  return out;
}

inline PatchFeatureGrid decode_feature_file(std::span<const std::uint8_t> bytes,
                                            const std::string& what = "pfv") {
  detail::ByteReader in(bytes, what);
  in.magic("PFV1");
  const std::uint32_t h = in.u32("grid_h");
  const std::uint32_t w = in.u32("grid_w");
  const std::uint32_t d = in.u32("dim");
  const std::uint32_t flags = in.u32("flags");
  if (h == 0 || w == 0 || d == 0) {
    throw FormatError(what + ": zero grid_h/grid_w/dim in header at offset 4");
  }
  const std::uint64_t n = static_cast<std::uint64_t>(h) * w * d;
  if (n * 4 > in.remaining()) in.need(static_cast<std::size_t>(n * 4), "feature payload");
  PatchFeatureGrid grid;
  grid.grid_h = static_cast<int>(h);
  grid.grid_w = static_cast<int>(w);
  grid.dim = static_cast<int>(d);
  grid.unit_normalized = (flags & kFlagUnitNormalized) != 0;
  grid.features.resize(static_cast<std::size_t>(n));
  for (auto& v : grid.features) v = in.f32("feature payload");
  const std::uint32_t meta_len = in.u32("metadata length");
  const std::size_t meta_at = in.offset();
  const std::string meta = in.bytes(meta_len, "metadata");
  in.finish();
  if (!meta.empty()) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(meta);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(what + ": invalid metadata JSON at offset " + std::to_string(meta_at) +
                        ": " + e.what());
    }
    grid.source_id = j.value("source_id", std::string{});
    grid.backbone = j.value("backbone", std::string{});
    grid.resolution = j.value("resolution", 0);
  }
  return grid;
}

inline void write_feature_file(const PatchFeatureGrid& grid, const std::filesystem::path& path) {
  detail::spit(path, encode_feature_file(grid));
}

inline PatchFeatureGrid read_feature_file(const std::filesystem::path& path) {
  const auto bytes = detail::slurp(path);
  return decode_feature_file(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Backbones

/// Patch feature extractor. Implementations are deterministic and keep a
/// constant output dimension.
class Backbone {
 public:
  virtual ~Backbone() = default;
  virtual std::string name() const = 0;
  /// Output dimension, or 0 when only known after the first extraction.
  virtual int dim() const = 0;
  /// `img` is already preprocessed (and rotated); `source_id` names it for
  /// backbones that look features up rather than compute them.
  virtual PatchFeatureGrid extract(const Image& img, const std::string& source_id) const = 0;
};

class ToyBackbone final : public Backbone {
 public:
  std::string name() const override { return "toy"; }
  int dim() const override { return kToyDim; }
  PatchFeatureGrid extract(const Image& img, const std::string& source_id) const override {
    PatchFeatureGrid g = toy_extract(img);
    g.source_id = source_id;
    return g;
  }
};

namespace detail {

inline void check_grid_geometry(const PatchFeatureGrid& g, const Image& img,
                                const std::string& origin) {
  if (g.grid_h * kPatchPx != img.height || g.grid_w * kPatchPx != img.width) {
    throw InvalidInput(origin + ": grid " + std::to_string(g.grid_h) + "x" +
                       std::to_string(g.grid_w) + " does not match preprocessed image " +
                       std::to_string(img.width) + "x" + std::to_string(img.height));
  }
}

class DimLatch {
 public:
  void check(int d, const std::string& origin) const {
    int expected = 0;
    if (!dim_.compare_exchange_strong(expected, d) && expected != d) {
      throw InvalidInput(origin + ": dimension changed from " + std::to_string(expected) +
                         " to " + std::to_string(d));
    }
  }
  int get() const { return dim_.load(); }

 private:
  mutable std::atomic<int> dim_{0};
};

}  // namespace detail

/// Precomputed features: `<dir>/<source_id>.pfv`.
class FileBackbone final : public Backbone {
 public:
  explicit FileBackbone(std::filesystem::path dir) : dir_(std::move(dir)) {
    if (!std::filesystem::is_directory(dir_)) {
      throw IoError("feature directory '" + dir_.string() + "' does not exist");
    }
  }
  std::string name() const override { return "file:" + dir_.string(); }
  int dim() const override { return dim_.get(); }
  PatchFeatureGrid extract(const Image& img, const std::string& source_id) const override {
    const auto path = dir_ / (source_id + ".pfv");
    if (!std::filesystem::exists(path)) throw IoError("missing feature file '" + path.string() + "'");
    PatchFeatureGrid g = read_feature_file(path);
    detail::check_grid_geometry(g, img, path.string());
    dim_.check(g.dim, path.string());
    if (g.source_id.empty()) g.source_id = source_id;
    return g;
  }

 private:
  std::filesystem::path dir_;
  detail::DimLatch dim_;
};

/// Runs `<command> <image.png>` and parses a .pfv stream from its stdout.
class ExternBackbone final : public Backbone {
 public:
  explicit ExternBackbone(std::string command) : command_(std::move(command)) {
    if (command_.empty()) throw InvalidInput("extern backbone needs a command");
  }
  std::string name() const override { return "extern:" + command_; }
  int dim() const override { return dim_.get(); }
  PatchFeatureGrid extract(const Image& img, const std::string& source_id) const override {
    const auto tmp = std::filesystem::temp_directory_path() /
                     ("patchbank_" + std::to_string(counter_.fetch_add(1)) + "_" +
                      std::to_string(reinterpret_cast<std::uintptr_t>(this)) + ".png");
    write_rgb_png(tmp, img);
    std::vector<std::uint8_t> bytes;
    const std::string cmd = command_ + " '" + tmp.string() + "'";
    FILE* pipe = popen(cmd.c_str(), "r");
    if (!pipe) {
      std::filesystem::remove(tmp);
      throw IoError("cannot spawn '" + cmd + "'");
    }
    char buf[1 << 16];
    std::size_t got = 0;
    while ((got = std::fread(buf, 1, sizeof buf, pipe)) > 0) bytes.insert(bytes.end(), buf, buf + got);
    const int status = pclose(pipe);
    std::filesystem::remove(tmp);
    if (status != 0) throw IoError("'" + cmd + "' exited with status " + std::to_string(status));
    PatchFeatureGrid g = decode_feature_file(bytes, "stdout of '" + command_ + "'");
    detail::check_grid_geometry(g, img, command_);
    dim_.check(g.dim, command_);
    g.source_id = source_id;
    return g;
  }

 private:
  std::string command_;
  detail::DimLatch dim_;
  inline static std::atomic<unsigned long> counter_{0};
};

/// "toy" | "file:<dir>" | "extern:<command>"
inline std::unique_ptr<Backbone> make_backbone(const std::string& selector) {
  if (selector == "toy") return std::make_unique<ToyBackbone>();
  if (selector.rfind("file:", 0) == 0) return std::make_unique<FileBackbone>(selector.substr(5));
  if (selector.rfind("extern:", 0) == 0) return std::make_unique<ExternBackbone>(selector.substr(7));
  throw InvalidInput("unknown backbone selector '" + selector +
                     "' (expected toy | file:<dir> | extern:<command>)");
}

/// Source id of a rotated reference: "<stem>" at 0 degrees, "<stem>_rot<a>" otherwise.
inline std::string rotated_source_id(const std::string& stem, double angle) {
  if (angle == 0.0) return stem;
  const long whole = std::lround(angle);
  if (static_cast<double>(whole) == angle) return stem + "_rot" + std::to_string(whole);
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", angle);
  return stem + "_rot" + buf;
}

}  // namespace patchbank
