#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchbank/error.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"

namespace patchbank::synthetic {

namespace fs = std::filesystem;

// Defect colors, far from both the object and the background palettes.
inline constexpr std::array<std::array<int, 3>, 4> kDefectColors{{
    {40, 80, 230}, {30, 200, 70}, {230, 40, 210}, {20, 210, 220}}};

struct Sample {
  Image image;
  GrayImage truth;  // 255 on defect pixels
  int label = 0;
};

namespace detail {

inline std::uint8_t noisy(int base, double noise) {
  return static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::lround(base + noise)), 0, 255));
}

inline void paint_defect(Sample& s, std::mt19937_64& rng, int cx, int cy, int reach) {
  std::uniform_int_distribution<int> side(24, 36);
  std::uniform_int_distribution<int> off(-reach, reach);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(kDefectColors.size()) - 1);
  std::normal_distribution<double> n(0.0, 6.0);
  const int a = side(rng);
  const int x0 = std::clamp(cx + off(rng) - a / 2, 0, s.image.width - a);
  const int y0 = std::clamp(cy + off(rng) - a / 2, 0, s.image.height - a);
  const auto& col = kDefectColors[pick(rng)];
  for (int y = y0; y < y0 + a; ++y)
    for (int x = x0; x < x0 + a; ++x) {
      for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = noisy(col[c], n(rng));
      s.truth.at(x, y) = 255;
    }
  s.label = 1;
}

}  // namespace detail

/// A disc-shaped object on a noisy gray background; the disc position
/// jitters a little between samples. Defects are colored squares inside
/// the disc.
inline Sample widget(std::mt19937_64& rng, int size, bool anomalous) {
  Sample s{Image(size, size), GrayImage(size, size), 0};
  std::normal_distribution<double> bg(0.0, 14.0);
  std::normal_distribution<double> fg(0.0, 6.0);
  std::uniform_int_distribution<int> jitter(-size / 40, size / 40);
  const int cx = size / 2 + jitter(rng);
  const int cy = size / 2 + jitter(rng);
  const double r = 0.34 * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double d = std::hypot(x - cx, y - cy);
      if (d <= r) {
        const double shade = 20.0 * (1.0 - d / r);
        s.image.at(x, y, 0) = detail::noisy(static_cast<int>(200 + shade), fg(rng));
        s.image.at(x, y, 1) = detail::noisy(static_cast<int>(150 + shade), fg(rng));
        s.image.at(x, y, 2) = detail::noisy(60, fg(rng));
      } else {
        const double g = bg(rng);
        for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = detail::noisy(90, g + bg(rng) * 0.2);
      }
    }
  if (anomalous) detail::paint_defect(s, rng, cx, cy, static_cast<int>(0.18 * size));
  return s;
}

/// A diagonally striped texture with a random phase. Defects are colored
/// squares anywhere away from the border.
inline Sample fabric(std::mt19937_64& rng, int size, bool anomalous) {
  Sample s{Image(size, size), GrayImage(size, size), 0};
  std::normal_distribution<double> n(0.0, 8.0);
  std::uniform_int_distribution<int> phase(0, 15);
  const int p = phase(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool band = ((x + y + p) / 8) % 2 == 0;
      const std::array<int, 3> base = band ? std::array<int, 3>{150, 128, 100} : std::array<int, 3>{115, 98, 78};
      const double g = n(rng);
      for (int c = 0; c < 3; ++c) s.image.at(x, y, c) = detail::noisy(base[c], g);
    }
  if (anomalous) detail::paint_defect(s, rng, size / 2, size / 2, size / 2 - 40);
  return s;
}

struct FixtureSpec {
  std::uint64_t seed = 7;
  int size = 448;
  int train = 8;
  int test_good = 20;
  int test_bad = 20;
};

inline std::string numbered(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", i);
  return buf;
}

/// Writes an MVTec-style tree with the categories "widget" (object) and
/// "fabric" (texture) plus a config.json that marks fabric as a texture.
inline void write_fixture(const fs::path& root, const FixtureSpec& spec = {}) {
  if (spec.size < 28 || spec.train < 1 || spec.test_good < 1 || spec.test_bad < 1) {
    throw InvalidInput("fixture: size >= 28 and positive image counts required");
  }
  using Maker = Sample (*)(std::mt19937_64&, int, bool);
  const std::array<std::pair<const char*, Maker>, 2> cats{{{"widget", &widget}, {"fabric", &fabric}}};
  std::uint64_t stream = 0;
  for (const auto& [name, make] : cats) {
    std::mt19937_64 rng(spec.seed * 1000003ULL + stream++);
    const fs::path cat = root / name;
    fs::create_directories(cat / "train" / "good");
    fs::create_directories(cat / "test" / "good");
    fs::create_directories(cat / "test" / "color");
    fs::create_directories(cat / "ground_truth" / "color");
    for (int i = 0; i < spec.train; ++i)
      write_rgb_png(cat / "train" / "good" / (numbered(i) + ".png"), make(rng, spec.size, false).image);
    for (int i = 0; i < spec.test_good; ++i)
      write_rgb_png(cat / "test" / "good" / (numbered(i) + ".png"), make(rng, spec.size, false).image);
    for (int i = 0; i < spec.test_bad; ++i) {
      const Sample s = make(rng, spec.size, true);
      write_rgb_png(cat / "test" / "color" / (numbered(i) + ".png"), s.image);
      write_gray_png(cat / "ground_truth" / "color" / (numbered(i) + "_mask.png"), s.truth);
    }
  }
  std::ofstream cfg(root / "config.json");
  cfg << nlohmann::json{{"overrides", {{"fabric", {{"texture", true}}}}}}.dump(2) << "\n";
  if (!cfg) throw IoError("cannot write '" + (root / "config.json").string() + "'");
}

/// In-memory batch for mutual scoring: `count` widgets, every `stride`-th one
/// anomalous (starting at index 0).
inline std::vector<Sample> widget_batch(std::uint64_t seed, int count, int stride, int size) {
  std::mt19937_64 rng(seed);
  std::vector<Sample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(widget(rng, size, stride > 0 && i % stride == 0));
  return out;
}

}  // namespace patchbank::synthetic
