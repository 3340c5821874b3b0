#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "patchbank/features.hpp"
#include "patchbank/image.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Small hand-rolled generators for the property tests. Every case derives its
// own engine from (suite seed, case index) so failures are reproducible.
class Gen {
 public:
  explicit Gen(std::uint64_t seed) : rng_(seed) {}

  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng_); }
  int integer(int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng_); }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(rng_); }
  double normal() { return std::normal_distribution<double>(0.0, 1.0)(rng_); }

  std::vector<double> vec(std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = uniform(lo, hi);
    return v;
  }

  std::vector<double> nonzero_vec(std::size_t n) {
    for (;;) {
      auto v = vec(n);
      double n2 = 0;
      for (double x : v) n2 += x * x;
      if (n2 > 1e-6) return v;
    }
  }

  patchbank::Image image(int w, int h) {
    patchbank::Image img(w, h);
    for (auto& p : img.pixels) p = static_cast<std::uint8_t>(integer(0, 255));
    return img;
  }

  patchbank::PatchFeatureGrid grid(int h, int w, int dim, double lo = -1.0, double hi = 1.0) {
    patchbank::PatchFeatureGrid g(h, w, dim);
    for (auto& f : g.features) f = static_cast<float>(uniform(lo, hi));
    return g;
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

inline Gen case_gen(std::uint64_t suite, int i) { return Gen(suite * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i)); }

/// Fresh, empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = fs::temp_directory_path() /
            ("patchbank_test_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& s) const { return path_ / s; }

 private:
  fs::path path_;
};

inline std::vector<double> to_double(std::span<const float> v) { return {v.begin(), v.end()}; }

}  // namespace testutil
