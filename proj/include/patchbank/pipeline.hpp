#pragma once

#include <algorithm>
#include <array>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "patchbank/batched.hpp"
#include "patchbank/dataset.hpp"
#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"
#include "patchbank/masking.hpp"
#include "patchbank/memory_bank.hpp"
#include "patchbank/metrics.hpp"
#include "patchbank/parallel.hpp"
#include "patchbank/scoring.hpp"

namespace patchbank {

enum class RotationMode { kAgnostic, kInformed, kOff };

inline std::string to_string(RotationMode m) {
  switch (m) {
    case RotationMode::kAgnostic: return "agnostic";
    case RotationMode::kInformed: return "informed";
    case RotationMode::kOff: return "off";
  }
  return "agnostic";
}

inline RotationMode parse_rotation_mode(const std::string& s) {
  if (s == "agnostic") return RotationMode::kAgnostic;
  if (s == "informed") return RotationMode::kInformed;
  if (s == "off") return RotationMode::kOff;
  throw InvalidInput("unknown rotation mode '" + s + "' (expected agnostic|informed|off)");
}

/// Per-category preprocessing knowledge: texture categories are never masked;
/// `informed_rotation` says whether rotations are kept in informed mode.
struct CategoryPolicy {
  bool texture = false;
  bool informed_rotation = false;
};

inline std::string canonical_category(std::string name) {
  std::string out;
  for (unsigned char c : name)
    if (std::isalnum(c)) out += static_cast<char>(std::tolower(c));
  return out;
}

/// Built-in defaults for the MVTec-AD and VisA categories. Unknown names are
/// treated as non-texture objects without known rotations.
inline CategoryPolicy builtin_policy(const std::string& category) {
  const std::string c = canonical_category(category);
  for (const char* t : {"carpet", "grid", "leather", "tile", "wood"})
    if (c == t) return {true, false};
  if (c == "hazelnut" || c == "screw") return {false, true};
  return {};
}

struct CategoryOverride {
  std::optional<bool> texture;
  std::optional<bool> informed_rotation;
  std::optional<MaskingMode> masking;
};

struct RunConfig {
  std::string backbone = "toy";
  PreprocessConfig preprocess;
  RotationMode rotation = RotationMode::kAgnostic;
  ScoreConfig score;
  BatchedConfig batched;
  MaskPolicy mask_policy;
  bool mask_references = false;  // reference patches are unmasked by default
  bool shared_pca = false;       // fit the mask direction on the references
  std::size_t coreset = 0;       // 0 = keep every patch
  std::uint64_t coreset_seed = 0;
  std::map<std::string, CategoryOverride> overrides;
  unsigned threads = 0;  // 0 = default_threads()
  std::vector<int> shots{1};
  int seeds = 3;
  double pro_fpr_limit = 0.3;
  std::size_t pro_thresholds = 200;

  unsigned thread_count() const { return threads ? threads : default_threads(); }

  void validate() const {
    preprocess.validate();
    score.validate();
    batched.validate();
    mask_policy.validate();
    if (shots.empty()) throw InvalidInput("shots must not be empty");
    for (int k : shots)
      if (k < 1) throw InvalidInput("shots must be positive");
    if (seeds < 1) throw InvalidInput("seeds must be positive");
    if (!(pro_fpr_limit > 0.0 && pro_fpr_limit <= 1.0)) throw InvalidInput("pro_fpr_limit must lie in (0, 1]");
  }

  nlohmann::json to_json() const {
    nlohmann::json ov = nlohmann::json::object();
    for (const auto& [name, o] : overrides) {
      nlohmann::json e = nlohmann::json::object();
      if (o.texture) e["texture"] = *o.texture;
      if (o.informed_rotation) e["informed_rotation"] = *o.informed_rotation;
      if (o.masking) e["masking"] = to_string(*o.masking);
      ov[name] = e;
    }
    return {
        {"backbone", backbone},
        {"resolution", preprocess.resolution},
        {"rotation_angles", preprocess.rotation_angles},
        {"arbitrary_angles", preprocess.arbitrary_angles},
        {"masking", to_string(preprocess.masking_mode)},
        {"texture", preprocess.texture_flag},
        {"rotation", to_string(rotation)},
        {"aggregation", to_string(score)},
        {"sigma", score.sigma},
        {"alpha", batched.alpha},
        {"mask_policy",
         {{"center_fraction", mask_policy.center_fraction},
          {"center_fg_min", mask_policy.center_fg_min},
          {"global_fg_max", mask_policy.global_fg_max},
          {"dilation_size", mask_policy.dilation_size},
          {"closing_size", mask_policy.closing_size}}},
        {"mask_references", mask_references},
        {"shared_pca", shared_pca},
        {"coreset", coreset},
        {"coreset_seed", coreset_seed},
        {"overrides", ov},
        {"shots", shots},
        {"seeds", seeds},
        {"pro_fpr_limit", pro_fpr_limit},
        {"pro_thresholds", pro_thresholds},
    };
  }

  // Written into output echoes to describe the run; ignored when an echo is
  // fed back in as a config.
  inline static const std::set<std::string> kEchoOnlyKeys{"bank", "mode", "masking_effective", "masking_test"};

  /// Applies the keys present in `j` on top of this config. Unknown keys are
  /// rejected so that typos do not silently fall back to defaults.
  void merge_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InvalidInput("config must be a JSON object");
    try {
      for (const auto& [key, v] : j.items()) {
        if (key == "backbone") backbone = v.get<std::string>();
        else if (key == "resolution") preprocess.resolution = v.get<int>();
        else if (key == "rotation_angles") preprocess.rotation_angles = v.get<std::vector<double>>();
        else if (key == "arbitrary_angles") preprocess.arbitrary_angles = v.get<bool>();
        else if (key == "masking") preprocess.masking_mode = parse_masking_mode(v.get<std::string>());
        else if (key == "texture") preprocess.texture_flag = v.get<bool>();
        else if (key == "rotation") rotation = parse_rotation_mode(v.get<std::string>());
        else if (key == "aggregation") score = parse_aggregation(v.get<std::string>(), score);
        else if (key == "sigma") score.sigma = v.get<double>();
        else if (key == "alpha") batched.alpha = v.get<double>();
        else if (key == "mask_policy") {
          for (const auto& [pk, pv] : v.items()) {
            if (pk == "center_fraction") mask_policy.center_fraction = pv.get<double>();
            else if (pk == "center_fg_min") mask_policy.center_fg_min = pv.get<double>();
            else if (pk == "global_fg_max") mask_policy.global_fg_max = pv.get<double>();
            else if (pk == "dilation_size") mask_policy.dilation_size = pv.get<int>();
            else if (pk == "closing_size") mask_policy.closing_size = pv.get<int>();
            else throw InvalidInput("unknown mask_policy key '" + pk + "'");
          }
        } else if (key == "mask_references") mask_references = v.get<bool>();
        else if (key == "shared_pca") shared_pca = v.get<bool>();
        else if (key == "coreset") coreset = v.get<std::size_t>();
        else if (key == "coreset_seed") coreset_seed = v.get<std::uint64_t>();
        else if (key == "overrides") {
          for (const auto& [name, ov] : v.items()) {
            CategoryOverride o;
            for (const auto& [ok, oval] : ov.items()) {
              if (ok == "texture") o.texture = oval.get<bool>();
              else if (ok == "informed_rotation") o.informed_rotation = oval.get<bool>();
              else if (ok == "masking") o.masking = parse_masking_mode(oval.get<std::string>());
              else throw InvalidInput("unknown override key '" + ok + "' for category '" + name + "'");
            }
            overrides[name] = o;
          }
        } else if (key == "threads") threads = v.get<unsigned>();
        else if (key == "shots") shots = v.get<std::vector<int>>();
        else if (key == "seeds") seeds = v.get<int>();
        else if (key == "pro_fpr_limit") pro_fpr_limit = v.get<double>();
        else if (key == "pro_thresholds") pro_thresholds = v.get<std::size_t>();
        else if (kEchoOnlyKeys.count(key)) continue;
        else throw InvalidInput("unknown config key '" + key + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw InvalidInput(std::string("bad config value: ") + e.what());
    }
    sync_aggregation();
  }

  // The batched scorer aggregates with the same statistic as few-shot mode.
  void sync_aggregation() { batched.aggregation = score; }
};

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  RunConfig cfg;
  try {
    cfg.merge_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidInput("config '" + path.string() + "' is not valid JSON: " + e.what());
  }
  return cfg;
}

/// Effective preprocessing for one category.
struct CategorySettings {
  PreprocessConfig preprocess;  // angles already reduced per rotation mode
  bool informed_rotation = false;
};

inline CategorySettings resolve_category(const RunConfig& cfg, const std::string& category) {
  CategoryPolicy policy = builtin_policy(category);
  CategorySettings s;
  s.preprocess = cfg.preprocess;
  if (auto it = cfg.overrides.find(category); it != cfg.overrides.end()) {
    if (it->second.texture) policy.texture = *it->second.texture;
    if (it->second.informed_rotation) policy.informed_rotation = *it->second.informed_rotation;
    if (it->second.masking) s.preprocess.masking_mode = *it->second.masking;
  }
  s.preprocess.texture_flag = s.preprocess.texture_flag || policy.texture;
  s.informed_rotation = policy.informed_rotation;
  const bool rotate = cfg.rotation == RotationMode::kAgnostic ||
                      (cfg.rotation == RotationMode::kInformed && policy.informed_rotation);
  if (!rotate) s.preprocess.rotation_angles = {0};
  return s;
}

// ---------------------------------------------------------------------------
// Reference banks

struct NamedImage {
  Image image;  // as loaded, before preprocessing
  std::string source_id;
};

inline NamedImage load_named(const std::filesystem::path& path, const std::filesystem::path& base) {
  return {read_image(path), source_id_for(path, base)};
}

struct ReferenceBank {
  MemoryBank bank;
  PreprocessConfig preprocess;
  bool masking = false;
  std::optional<MaskTestResult> mask_test;  // empty when skipped for a texture
  std::optional<PcaDirection> shared_axis;
  PatchMask first_mask;  // mask of the first reference (debug output)
};

/// Foreground mask of a test grid under the bank's policy.
inline PatchMask foreground_mask(const PatchFeatureGrid& grid, const std::optional<PcaDirection>& shared,
                                 const MaskPolicy& policy) {
  if (!shared) return zero_shot_mask(grid, policy);
  PatchMask m(grid.grid_h, grid.grid_w);
  for (std::size_t c = 0; c < grid.cells(); ++c) {
    double proj = 0;
    const auto p = grid.patch(c);
    for (int d = 0; d < grid.dim; ++d) proj += (p[d] - shared->mean[d]) * shared->axis[d];
    m.bits[c] = proj > 0;
  }
  return refine_mask(m, policy);
}

/// Builds M from k reference images: preprocess, rotate by every configured
/// angle, extract, and collect. The masking test runs once, on the first
/// reference at 0 degrees.
inline ReferenceBank build_reference_bank(std::span<const NamedImage> refs, const Backbone& backbone,
                                          const RunConfig& cfg, const std::string& category) {
  if (refs.empty()) throw EmptyInput("no reference images for '" + category + "'");
  cfg.validate();
  const CategorySettings settings = resolve_category(cfg, category);
  const PreprocessConfig& pp = settings.preprocess;
  const auto& angles = pp.rotation_angles;

  std::vector<Image> pre(refs.size());
  parallel_for(refs.size(), cfg.thread_count(),
               [&](std::size_t i) { pre[i] = preprocess_image(refs[i].image, pp); });
  std::vector<PatchFeatureGrid> grids(refs.size() * angles.size());
  parallel_for(grids.size(), cfg.thread_count(), [&](std::size_t t) {
    const std::size_t i = t / angles.size();
    const double a = angles[t % angles.size()];
    grids[t] = backbone.extract(rotate_image(pre[i], a, pp.arbitrary_angles),
                                rotated_source_id(refs[i].source_id, a));
  });
  // Unrotated grid of reference i.
  auto upright = [&](std::size_t i) -> const PatchFeatureGrid& {
    const std::size_t a = static_cast<std::size_t>(std::find(angles.begin(), angles.end(), 0.0) - angles.begin());
    return grids[i * angles.size() + a];
  };

  PatchMask first_mask = zero_shot_mask(upright(0), cfg.mask_policy);
  std::optional<MaskTestResult> mask_test;
  std::optional<PcaDirection> shared_axis;
  bool passed = false;
  if (!pp.texture_flag) {
    mask_test = masking_test(first_mask, cfg.mask_policy);
    passed = mask_test->passed;
  }
  const bool masking = resolve_mask_mode(pp, passed);
  if (masking && cfg.shared_pca) {
    std::vector<PatchFeatureGrid> ups;
    for (std::size_t i = 0; i < refs.size(); ++i) ups.push_back(upright(i));
    shared_axis = fit_pca_direction(ups, cfg.mask_policy.center_fraction);
  }

  BankMeta meta;
  meta.category = category;
  meta.shots = static_cast<int>(refs.size());
  meta.rotation_angles = angles;
  meta.backbone = backbone.name();
  meta.resolution = pp.resolution;
  meta.extra["masking_effective"] = masking;
  meta.extra["texture"] = pp.texture_flag;
  meta.extra["masking_mode"] = to_string(pp.masking_mode);
  meta.extra["masking_test"] =
      mask_test ? mask_test->to_json() : nlohmann::json{{"skipped", "texture"}};
  meta.extra["mask_policy"] = cfg.to_json()["mask_policy"];
  meta.extra["references"] = [&] {
    nlohmann::json ids = nlohmann::json::array();
    for (const auto& r : refs) ids.push_back(r.source_id);
    return ids;
  }();
  if (shared_axis) {
    meta.extra["shared_pca"] = {{"axis", shared_axis->axis}, {"mean", shared_axis->mean}};
  }
  meta.extra["config"] = cfg.to_json();

  std::optional<MemoryBank> bank;
  if (masking && cfg.mask_references) {
    const int dim = grids.front().dim;
    std::vector<double> rows;
    for (const auto& g : grids) {
      const PatchMask m = foreground_mask(g, shared_axis, cfg.mask_policy);
      for (std::size_t c = 0; c < g.cells(); ++c) {
        if (!m.bits[c]) continue;
        auto p = g.patch(c);
        rows.insert(rows.end(), p.begin(), p.end());
      }
    }
    if (rows.empty()) throw DegenerateInput("reference masks of '" + category + "' are empty");
    bank.emplace(dim, std::move(rows), std::move(meta));
  } else {
    bank.emplace(build_bank(grids, std::move(meta)));
  }
  if (cfg.coreset > 0 && cfg.coreset < bank->count()) {
    bank.emplace(coreset_reduce(*bank, cfg.coreset, cfg.coreset_seed));
  }
  return ReferenceBank{std::move(*bank), pp, masking, mask_test, shared_axis, std::move(first_mask)};
}

/// Restores the scoring-relevant parts of a ReferenceBank from a bank file.
inline ReferenceBank reference_from_bank(MemoryBank bank) {
  ReferenceBank out{std::move(bank), {}, false, std::nullopt, std::nullopt, {}};
  const BankMeta& meta = out.bank.meta();
  out.preprocess.resolution = meta.resolution;
  out.preprocess.rotation_angles = meta.rotation_angles;
  out.masking = meta.extra.value("masking_effective", false);
  if (meta.extra.contains("shared_pca")) {
    PcaDirection d;
    d.axis = meta.extra.at("shared_pca").at("axis").get<std::vector<double>>();
    d.mean = meta.extra.at("shared_pca").at("mean").get<std::vector<double>>();
    out.shared_axis = d;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-image scoring

struct ImageResult {
  double score = 0;
  PatchDistances distances;
  AnomalyMap map;
  bool mask_fallback = false;  // mask was empty, scored unmasked
};

inline ImageResult score_features(const PatchFeatureGrid& grid, const ReferenceBank& ref,
                                  const ScoreConfig& score_cfg, const MaskPolicy& policy,
                                  const PatchMask* precomputed_mask = nullptr, bool with_map = true) {
  ImageResult r;
  std::optional<PatchMask> mask;
  if (ref.masking) {
    mask = precomputed_mask ? *precomputed_mask : foreground_mask(grid, ref.shared_axis, policy);
    if (mask->count() == 0) {
      mask.reset();
      r.mask_fallback = true;
    }
  }
  r.distances = score_grid(grid, ref.bank, mask ? &*mask : nullptr, 1);
  r.score = aggregate(r.distances, score_cfg);
  if (with_map) r.map = make_map(r.distances, grid.grid_h * kPatchPx, grid.grid_w * kPatchPx, score_cfg);
  return r;
}

inline PatchFeatureGrid extract_test(const NamedImage& img, const Backbone& backbone,
                                     const PreprocessConfig& pp) {
  return backbone.extract(preprocess_image(img.image, pp), img.source_id);
}

inline ImageResult score_image(const NamedImage& img, const ReferenceBank& ref, const Backbone& backbone,
                               const ScoreConfig& score_cfg, const MaskPolicy& policy, bool with_map = true) {
  const PatchFeatureGrid grid = extract_test(img, backbone, ref.preprocess);
  if (grid.dim != ref.bank.dim()) {
    throw InvalidInput("backbone dim " + std::to_string(grid.dim) + " does not match bank dim " +
                       std::to_string(ref.bank.dim()));
  }
  return score_features(grid, ref, score_cfg, policy, nullptr, with_map);
}

// ---------------------------------------------------------------------------
// Few-shot evaluation

struct MetricSet {
  double image_auroc = 0, image_f1max = 0, image_ap = 0;
  double pixel_auroc = 0, pixel_f1max = 0, pixel_pro = 0;

  static constexpr const char* kNames[6] = {"image_auroc", "image_f1max", "image_ap",
                                            "pixel_auroc", "pixel_f1max", "pixel_pro"};
  std::array<double, 6> values() const {
    return {image_auroc, image_f1max, image_ap, pixel_auroc, pixel_f1max, pixel_pro};
  }
};

struct Stat {
  double mean = 0;
  double std = 0;  // sample standard deviation; 0 for a single value
};

inline Stat summarize(const std::vector<double>& v) {
  Stat s;
  if (v.empty()) return s;
  double sum = 0;
  for (double x : v) sum += x;
  s.mean = sum / static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

struct CategoryResult {
  std::string category;
  int shots = 0;
  std::vector<MetricSet> per_seed;
  std::vector<std::vector<std::string>> references;  // per seed
  std::vector<double> image_scores_seed0;
  bool masking = false;
  std::size_t mask_fallbacks = 0;
  double nominal_pixel_fraction = 0;
  std::vector<double> bank_seconds;     // per seed
  std::vector<double> per_image_seconds;  // per seed

  std::array<Stat, 6> stats() const {
    std::array<Stat, 6> out;
    for (std::size_t m = 0; m < 6; ++m) {
      std::vector<double> v;
      for (const auto& s : per_seed) v.push_back(s.values()[m]);
      out[m] = summarize(v);
    }
    return out;
  }
};

struct EvalReport {
  nlohmann::json config;
  std::string dataset;
  std::vector<CategoryResult> results;
  std::vector<std::string> warnings;

  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j;
    j["config"] = config;
    j["dataset"] = dataset;
    nlohmann::json rows = nlohmann::json::array();
    std::map<int, std::vector<const CategoryResult*>> by_shots;
    for (const auto& r : results) {
      by_shots[r.shots].push_back(&r);
      nlohmann::json row;
      row["category"] = r.category;
      row["shots"] = r.shots;
      row["seeds"] = r.per_seed.size();
      row["masking"] = r.masking;
      row["mask_fallbacks"] = r.mask_fallbacks;
      row["nominal_pixel_fraction"] = r.nominal_pixel_fraction;
      row["references"] = r.references;
      const auto st = r.stats();
      for (std::size_t m = 0; m < 6; ++m) {
        row[MetricSet::kNames[m]] = {{"mean", st[m].mean}, {"std", st[m].std}};
      }
      rows.push_back(row);
    }
    j["results"] = rows;
    nlohmann::json means = nlohmann::json::array();
    for (const auto& [k, rs] : by_shots) {
      nlohmann::json row{{"shots", k}, {"categories", rs.size()}};
      for (std::size_t m = 0; m < 6; ++m) {
        double sum = 0;
        for (const auto* r : rs) sum += r->stats()[m].mean;
        row[MetricSet::kNames[m]] = sum / static_cast<double>(rs.size());
      }
      means.push_back(row);
    }
    j["mean"] = means;
    j["warnings"] = warnings;
    if (with_timing) {
      nlohmann::json t = nlohmann::json::array();
      for (const auto& r : results) {
        const Stat b = summarize(r.bank_seconds);
        const Stat p = summarize(r.per_image_seconds);
        t.push_back({{"category", r.category},
                     {"shots", r.shots},
                     {"bank_build_seconds", {{"mean", b.mean}, {"std", b.std}}},
                     {"per_image_seconds", {{"mean", p.mean}, {"std", p.std}}}});
      }
      j["timing"] = t;
    }
    return j;
  }

  /// One row per category and shot count plus a mean row per shot count.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "# config: " << config.dump() << "\n";
    os << "shots,category";
    for (const char* n : MetricSet::kNames) os << ',' << n << "_mean," << n << "_std";
    os << '\n';
    std::map<int, std::vector<const CategoryResult*>> by_shots;
    for (const auto& r : results) by_shots[r.shots].push_back(&r);
    for (const auto& [k, rs] : by_shots) {
      std::array<double, 6> sum{};
      for (const auto* r : rs) {
        const auto st = r->stats();
        os << k << ',' << r->category;
        for (std::size_t m = 0; m < 6; ++m) {
          os << ',' << st[m].mean << ',' << st[m].std;
          sum[m] += st[m].mean;
        }
        os << '\n';
      }
      os << k << ",mean";
      for (std::size_t m = 0; m < 6; ++m) os << ',' << sum[m] / static_cast<double>(rs.size()) << ',';
      os << '\n';
    }
    return os.str();
  }
};

using LogFn = std::function<void(const std::string&)>;

/// k-shot protocol: for seed i (1-based) the references are train images
/// [(i-1)k, ik) in filename order. Test features are extracted once per
/// category and reused across seeds and shot counts.
inline EvalReport run_fewshot_eval(const DatasetIndex& index, const RunConfig& cfg, const Backbone& backbone,
                                   const std::vector<std::string>& only_categories = {},
                                   const LogFn& log = {}) {
  using clock = std::chrono::steady_clock;
  cfg.validate();
  for (const auto& [name, ov] : cfg.overrides) {
    if (!index.find(name)) throw InvalidInput("override for unknown category '" + name + "'");
  }
  for (const auto& name : only_categories) {
    if (!index.find(name)) throw InvalidInput("unknown category '" + name + "'");
  }
  EvalReport report;
  report.config = cfg.to_json();
  report.dataset = to_string(index.layout);
  auto warn = [&](const std::string& msg) {
    report.warnings.push_back(msg);
    if (log) log("warning: " + msg);
  };
  const unsigned threads = cfg.thread_count();

  for (const auto& cat : index.categories) {
    if (!only_categories.empty() &&
        std::find(only_categories.begin(), only_categories.end(), cat.name) == only_categories.end())
      continue;
    const CategorySettings settings = resolve_category(cfg, cat.name);
    const PreprocessConfig& pp = settings.preprocess;
    if (log) log("category " + cat.name + ": " + std::to_string(cat.test.size()) + " test images");

    const std::size_t n = cat.test.size();
    std::vector<PatchFeatureGrid> grids(n);
    std::vector<BinaryMask> gts(n);
    std::vector<int> labels(n);
    std::vector<double> extract_seconds(n);
    parallel_for(n, threads, [&](std::size_t i) {
      const auto t0 = clock::now();
      const NamedImage img = load_named(cat.test[i].image, index.root);
      grids[i] = extract_test(img, backbone, pp);
      extract_seconds[i] = std::chrono::duration<double>(clock::now() - t0).count();
      gts[i] = load_ground_truth(cat.test[i].mask, img.image.width, img.image.height, pp.resolution);
      labels[i] = cat.test[i].label;
    });
    std::vector<PatchMask> masks;  // filled on first use
    double extract_mean = 0;
    for (double s : extract_seconds) extract_mean += s / static_cast<double>(n);

    for (int k : cfg.shots) {
      const std::size_t need = static_cast<std::size_t>(k) * static_cast<std::size_t>(cfg.seeds);
      if (cat.train.size() < need) {
        warn("skipping " + cat.name + " at k=" + std::to_string(k) + ": " +
             std::to_string(cat.train.size()) + " train images < " + std::to_string(need));
        continue;
      }
      CategoryResult res;
      res.category = cat.name;
      res.shots = k;
      for (int seed = 1; seed <= cfg.seeds; ++seed) {
        std::vector<NamedImage> refs;
        std::vector<std::string> ids;
        for (std::size_t i = static_cast<std::size_t>(seed - 1) * k; i < static_cast<std::size_t>(seed) * k; ++i) {
          refs.push_back(load_named(cat.train[i], index.root));
          ids.push_back(refs.back().source_id);
        }
        const auto b0 = clock::now();
        const ReferenceBank ref = build_reference_bank(refs, backbone, cfg, cat.name);
        res.bank_seconds.push_back(std::chrono::duration<double>(clock::now() - b0).count());
        res.references.push_back(ids);
        res.masking = res.masking || ref.masking;
        if (ref.masking && !ref.shared_axis && masks.empty()) {
          masks.resize(n);
          parallel_for(n, threads, [&](std::size_t i) { masks[i] = zero_shot_mask(grids[i], cfg.mask_policy); });
        }
        std::vector<ImageResult> out(n);
        const auto s0 = clock::now();
        parallel_for(n, threads, [&](std::size_t i) {
          const PatchMask* m = (ref.masking && !ref.shared_axis) ? &masks[i] : nullptr;
          out[i] = score_features(grids[i], ref, cfg.score, cfg.mask_policy, m);
        });
        const double score_seconds = std::chrono::duration<double>(clock::now() - s0).count();
        res.per_image_seconds.push_back(extract_mean + score_seconds / static_cast<double>(n));

        std::vector<double> scores(n);
        std::vector<AnomalyMap> maps(n);
        for (std::size_t i = 0; i < n; ++i) {
          scores[i] = out[i].score;
          maps[i] = std::move(out[i].map);
          if (seed == 1) res.mask_fallbacks += out[i].mask_fallback;
        }
        if (seed == 1) res.image_scores_seed0 = scores;
        MetricSet ms;
        ms.image_auroc = auroc(scores, labels);
        ms.image_f1max = f1_max(scores, labels);
        ms.image_ap = average_precision(scores, labels);
        const PixelMetrics px = pixel_metrics(maps, gts);
        ms.pixel_auroc = px.auroc;
        ms.pixel_f1max = px.f1max;
        ms.pixel_pro = pro(maps, gts, cfg.pro_fpr_limit, cfg.pro_thresholds);
        res.nominal_pixel_fraction = px.nominal_fraction;
        res.per_seed.push_back(ms);
        if (log) {
          std::ostringstream os;
          os << "  k=" << k << " seed " << seed << ": image AUROC " << ms.image_auroc << ", pixel AUROC "
             << ms.pixel_auroc << ", PRO " << ms.pixel_pro;
          log(os.str());
        }
      }
      if (res.mask_fallbacks) {
        warn(cat.name + ": " + std::to_string(res.mask_fallbacks) +
             " test image(s) had an empty foreground mask and were scored unmasked");
      }
      report.results.push_back(std::move(res));
    }
  }
  return report;
}

}  // namespace patchbank
