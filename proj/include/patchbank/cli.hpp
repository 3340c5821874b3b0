#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "patchbank/batched.hpp"
#include "patchbank/dataset.hpp"
#include "patchbank/error.hpp"
#include "patchbank/features.hpp"
#include "patchbank/masking.hpp"
#include "patchbank/memory_bank.hpp"
#include "patchbank/pipeline.hpp"
#include "patchbank/scoring.hpp"
#include "patchbank/synthetic.hpp"

namespace patchbank::cli {

namespace fs = std::filesystem;

// Options shared by most commands. Anything left unset keeps the value from
// --config (or the built-in default).
struct CommonOptions {
  std::string config;
  std::string backbone;
  int resolution = 0;
  std::string rotations;
  std::vector<double> angles;
  std::string masking;
  std::string agg;
  double sigma = 0;
  bool texture = false;
  bool arbitrary_angles = false;
  unsigned threads = 0;

  void add(CLI::App& app, bool scoring_only = false) {
    app.add_option("--config", config, "JSON run config; flags override its values");
    app.add_option("--backbone", backbone, "toy | file:<dir> | extern:<command>");
    app.add_option("--agg", agg, "mean-top[:fraction] | max-patch | max-map");
    app.add_option("--sigma", sigma, "map smoothing sigma in pixels");
    app.add_option("--threads", threads, "worker threads (default: PATCHBANK_THREADS or all cores)");
    if (scoring_only) return;
    app.add_option("--resolution", resolution, "smaller edge after resizing (multiple of 14)");
    app.add_option("--rotations", rotations, "agnostic | informed | off");
    app.add_option("--angles", angles, "rotation angles for augmentation")->delimiter(',');
    app.add_option("--masking", masking, "auto | on | off");
    app.add_flag("--texture", texture, "treat the category as a texture (never masked)");
    app.add_flag("--arbitrary-angles", arbitrary_angles, "allow non-right rotation angles");
  }

  RunConfig resolve() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_run_config(config);
    if (!backbone.empty()) cfg.backbone = backbone;
    if (resolution) cfg.preprocess.resolution = resolution;
    if (!rotations.empty()) cfg.rotation = parse_rotation_mode(rotations);
    if (!angles.empty()) cfg.preprocess.rotation_angles = angles;
    if (!masking.empty()) cfg.preprocess.masking_mode = parse_masking_mode(masking);
    if (!agg.empty()) cfg.score = parse_aggregation(agg, cfg.score);
    if (sigma > 0) cfg.score.sigma = sigma;
    if (texture) cfg.preprocess.texture_flag = true;
    if (arbitrary_angles) cfg.preprocess.arbitrary_angles = true;
    if (threads) cfg.threads = threads;
    cfg.sync_aggregation();
    cfg.validate();
    return cfg;
  }
};

/// Image paths from a mix of files and directories (directory contents sorted).
inline std::vector<fs::path> collect_images(const std::vector<std::string>& inputs, fs::path* base = nullptr) {
  std::vector<fs::path> out;
  for (const auto& in : inputs) {
    const fs::path p(in);
    if (fs::is_directory(p)) {
      if (base && base->empty()) *base = p;
      auto imgs = list_images(p);
      out.insert(out.end(), imgs.begin(), imgs.end());
    } else if (fs::is_regular_file(p)) {
      out.push_back(p);
    } else {
      throw IoError("input '" + in + "' does not exist");
    }
  }
  return out;
}

inline std::string map_file_stem(const std::string& source_id) {
  std::string s = source_id;
  for (char& c : s)
    if (c == '/' || c == '\\') c = '_';
  return s;
}

inline std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

class OutputSink {
 public:
  OutputSink(const std::string& path, std::ostream& fallback) : out_(&fallback) {
    if (!path.empty()) {
      file_ = std::make_unique<std::ofstream>(path);
      if (!*file_) throw IoError("cannot write '" + path + "'");
      out_ = file_.get();
    }
  }
  std::ostream& operator*() { return *out_; }

 private:
  std::unique_ptr<std::ofstream> file_;
  std::ostream* out_;
};

struct ScoredItem {
  std::string path;
  std::string source_id;
  ImageResult result;
};

/// The shared output of score and batched: a config echo, then one line per
/// image in input order.
inline void write_scores(std::ostream& os, const nlohmann::json& echo, std::vector<ScoredItem>& items,
                         const std::string& heatmap_dir, bool raw_maps, double normalizer) {
  if (!heatmap_dir.empty()) {
    fs::create_directories(heatmap_dir);
    if (!(normalizer > 0)) {
      normalizer = 0;
      for (const auto& it : items) normalizer = std::max(normalizer, it.result.map.max());
      if (!(normalizer > 0)) normalizer = 1.0;
    }
  }
  os << "# config: " << echo.dump() << "\n";
  os << "path,score,map\n";
  for (auto& it : items) {
    std::string map_path;
    if (!heatmap_dir.empty()) {
      const fs::path png = fs::path(heatmap_dir) / (map_file_stem(it.source_id) + ".png");
      const fs::path raw = raw_maps ? fs::path(heatmap_dir) / (map_file_stem(it.source_id) + ".pfv") : fs::path{};
      export_heatmap(it.result.map, normalizer, png, raw);
      map_path = png.string();
    }
    os << it.path << ',' << fmt(it.result.score) << ',' << map_path << '\n';
  }
}

// ---------------------------------------------------------------------------

inline int cmd_build_bank(const CommonOptions& common, const std::vector<std::string>& refs_in,
                          const std::string& out_path, std::string category, int shots,
                          std::size_t coreset, std::uint64_t coreset_seed, bool mask_refs,
                          const std::string& mask_debug, std::ostream& out, std::ostream& err) {
  RunConfig cfg = common.resolve();
  if (coreset) cfg.coreset = coreset;
  if (coreset_seed) cfg.coreset_seed = coreset_seed;
  if (mask_refs) cfg.mask_references = true;
  fs::path base;
  std::vector<fs::path> paths = collect_images(refs_in, &base);
  if (paths.empty()) throw IoError("no reference images found in '" + refs_in.front() + "'");
  if (shots > 0) {
    if (static_cast<std::size_t>(shots) > paths.size()) {
      throw InvalidInput("--shots " + std::to_string(shots) + " but only " + std::to_string(paths.size()) +
                         " reference images");
    }
    paths.resize(shots);
  }
  if (category.empty()) {
    fs::path dir = base.empty() ? fs::path(refs_in.front()).parent_path() : base;
    dir = fs::absolute(dir).lexically_normal();
    if (dir.filename().empty()) dir = dir.parent_path();
    if (dir.filename() == "good" && dir.parent_path().filename() == "train") {
      category = dir.parent_path().parent_path().filename().string();
    } else {
      category = dir.filename().string();
    }
  }
  const auto backbone = make_backbone(cfg.backbone);
  std::vector<NamedImage> refs;
  for (const auto& p : paths) refs.push_back(load_named(p, base));
  const ReferenceBank ref = build_reference_bank(refs, *backbone, cfg, category);
  write_bank_file(ref.bank, out_path);
  if (!mask_debug.empty()) write_gray_png(mask_debug, mask_to_image(ref.first_mask));
  nlohmann::json summary{{"bank", out_path},
                         {"category", category},
                         {"count", ref.bank.count()},
                         {"dim", ref.bank.dim()},
                         {"zero_rows_replaced", ref.bank.zero_rows()},
                         {"meta", ref.bank.meta().to_json()}};
  out << summary.dump(2) << "\n";
  if (ref.bank.zero_rows()) {
    err << "warning: " << ref.bank.zero_rows() << " zero feature vectors replaced by a unit basis vector\n";
  }
  return 0;
}

inline int cmd_score(const CommonOptions& common, const std::string& bank_path,
                     const std::vector<std::string>& inputs, const std::string& out_path,
                     const std::string& heatmaps, bool raw_maps, double normalizer, const std::string& masking,
                     std::ostream& out, std::ostream& err) {
  RunConfig cfg = common.resolve();
  ReferenceBank ref = reference_from_bank(read_bank_file(bank_path));
  if (!masking.empty()) {
    const MaskingMode m = parse_masking_mode(masking);
    if (m == MaskingMode::kOff) ref.masking = false;
    if (m == MaskingMode::kOn) ref.masking = true;
  }
  if (ref.preprocess.resolution <= 0) throw FormatError("bank '" + bank_path + "' records no resolution");
  const auto backbone = make_backbone(common.backbone.empty() ? ref.bank.meta().backbone : cfg.backbone);
  fs::path base;
  const std::vector<fs::path> paths = collect_images(inputs, &base);
  nlohmann::json echo = cfg.to_json();
  echo["bank"] = bank_path;
  echo["resolution"] = ref.preprocess.resolution;
  echo["backbone"] = backbone->name();
  echo["masking_effective"] = ref.masking;
  if (paths.empty()) err << "warning: no input images\n";
  std::vector<ScoredItem> items(paths.size());
  parallel_for(paths.size(), cfg.thread_count(), [&](std::size_t i) {
    const NamedImage img = load_named(paths[i], base);
    items[i] = {paths[i].string(), img.source_id,
                score_image(img, ref, *backbone, cfg.score, cfg.mask_policy, !heatmaps.empty())};
  });
  OutputSink sink(out_path, out);
  write_scores(*sink, echo, items, heatmaps, raw_maps, normalizer);
  return 0;
}

inline int cmd_eval(const CommonOptions& common, const std::string& root, const std::string& layout,
                    const std::vector<int>& shots, int seeds, const std::vector<std::string>& categories,
                    const std::string& out_json, const std::string& out_csv, bool no_timing, bool quiet,
                    std::ostream& out, std::ostream& err) {
  RunConfig cfg = common.resolve();
  if (!shots.empty()) cfg.shots = shots;
  if (seeds > 0) cfg.seeds = seeds;
  cfg.validate();
  const DatasetIndex index = load_dataset(root, parse_layout(layout));
  const auto backbone = make_backbone(cfg.backbone);
  const EvalReport report = run_fewshot_eval(index, cfg, *backbone, categories, [&](const std::string& m) {
    if (!quiet) err << m << "\n";
  });
  if (!out_json.empty()) {
    std::ofstream f(out_json);
    f << report.to_json(!no_timing).dump(2) << "\n";
    if (!f) throw IoError("cannot write '" + out_json + "'");
  }
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    f << report.to_csv();
    if (!f) throw IoError("cannot write '" + out_csv + "'");
  }
  out << report.to_csv();
  if (report.results.empty()) {
    err << "error: every category was skipped\n";
    return static_cast<int>(ExitCode::kFailure);
  }
  return 0;
}

inline int cmd_batched(const CommonOptions& common, const std::vector<std::string>& inputs, double alpha,
                       const std::string& out_path, const std::string& heatmaps, bool raw_maps,
                       double normalizer, std::ostream& out, std::ostream& err) {
  RunConfig cfg = common.resolve();
  if (alpha > 0) cfg.batched.alpha = alpha;
  cfg.validate();
  fs::path base;
  const std::vector<fs::path> paths = collect_images(inputs, &base);
  if (paths.size() < 2) {
    throw InvalidInput("batched mode scores images against each other and needs at least 2, got " +
                       std::to_string(paths.size()));
  }
  const auto backbone = make_backbone(cfg.backbone);
  const PreprocessConfig& pp = cfg.preprocess;
  std::vector<PatchFeatureGrid> grids(paths.size());
  std::vector<std::string> ids(paths.size());
  parallel_for(paths.size(), cfg.thread_count(), [&](std::size_t i) {
    const NamedImage img = load_named(paths[i], base);
    ids[i] = img.source_id;
    grids[i] = extract_test(img, *backbone, pp);
  });
  // No references exist: the first test image stands in for the masking test.
  const PatchMask first = zero_shot_mask(grids.front(), cfg.mask_policy);
  std::optional<MaskTestResult> test;
  if (!pp.texture_flag) test = masking_test(first, cfg.mask_policy);
  const bool masking = resolve_mask_mode(pp, test && test->passed);
  std::vector<PatchMask> masks;
  std::size_t fallbacks = 0;
  if (masking) {
    masks.resize(grids.size());
    parallel_for(grids.size(), cfg.thread_count(),
                 [&](std::size_t i) { masks[i] = zero_shot_mask(grids[i], cfg.mask_policy); });
    for (std::size_t i = 0; i < masks.size(); ++i) {
      if (masks[i].count() == 0) {
        masks[i] = PatchMask(grids[i].grid_h, grids[i].grid_w, true);
        ++fallbacks;
      }
    }
  }
  const BatchedResult res = batched_run(grids, cfg.batched, masks, cfg.thread_count(), true);
  std::vector<ScoredItem> items(paths.size());
  for (std::size_t i = 0; i < paths.size(); ++i) {
    items[i].path = paths[i].string();
    items[i].source_id = ids[i];
    items[i].result.score = res.scores[i];
    items[i].result.map = res.maps[i];
  }
  nlohmann::json echo = cfg.to_json();
  echo["mode"] = "batched";
  echo["masking_effective"] = masking;
  echo["masking_test"] = test ? test->to_json() : nlohmann::json{{"skipped", "texture"}};
  if (fallbacks) err << "warning: " << fallbacks << " image(s) had an empty mask and were scored unmasked\n";
  OutputSink sink(out_path, out);
  write_scores(*sink, echo, items, heatmaps, raw_maps, normalizer);
  return 0;
}

struct BenchAxes {
  std::vector<int> shots;
  std::vector<int> resolutions;
  std::vector<std::string> preprocessing;
};

inline BenchAxes parse_axes(const std::vector<std::string>& specs, const RunConfig& cfg) {
  BenchAxes ax{cfg.shots, {cfg.preprocess.resolution}, {"config"}};
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw InvalidInput("--axis expects name=v1,v2,..., got '" + s + "'");
    const std::string name = s.substr(0, eq);
    std::vector<std::string> vals;
    std::stringstream ss(s.substr(eq + 1));
    for (std::string v; std::getline(ss, v, ',');)
      if (!v.empty()) vals.push_back(v);
    if (vals.empty()) throw InvalidInput("--axis " + name + " has no values");
    try {
      if (name == "shots") {
        ax.shots.clear();
        for (const auto& v : vals) ax.shots.push_back(std::stoi(v));
      } else if (name == "resolution") {
        ax.resolutions.clear();
        for (const auto& v : vals) ax.resolutions.push_back(std::stoi(v));
      } else if (name == "preprocessing") {
        for (const auto& v : vals)
          if (v != "none" && v != "mask" && v != "rot" && v != "mask+rot" && v != "config")
            throw InvalidInput("unknown preprocessing '" + v + "' (none|mask|rot|mask+rot)");
        ax.preprocessing = vals;
      } else {
        throw InvalidInput("unknown bench axis '" + name + "' (shots|resolution|preprocessing)");
      }
    } catch (const std::logic_error&) {
      throw InvalidInput("bad value in --axis " + s);
    }
  }
  return ax;
}

inline int cmd_bench(const CommonOptions& common, const std::vector<std::string>& refs_in,
                     const std::vector<std::string>& inputs, const std::vector<std::string>& axis_specs,
                     int warmup, int iters, int build_iters, const std::string& out_path, std::ostream& out,
                     std::ostream& err) {
  using clock = std::chrono::steady_clock;
  const RunConfig base_cfg = common.resolve();
  if (warmup < 0 || iters < 1 || build_iters < 1) throw InvalidInput("--iters and --build-iters must be positive");
  const BenchAxes axes = parse_axes(axis_specs, base_cfg);
  fs::path ref_base, in_base;
  const auto ref_paths = collect_images(refs_in, &ref_base);
  const auto in_paths = collect_images(inputs, &in_base);
  if (in_paths.empty()) throw IoError("no benchmark input images");
  const int max_shots = *std::max_element(axes.shots.begin(), axes.shots.end());
  if (ref_paths.size() < static_cast<std::size_t>(max_shots)) {
    throw InvalidInput("bench needs " + std::to_string(max_shots) + " reference images, found " +
                       std::to_string(ref_paths.size()));
  }
  std::vector<NamedImage> refs, tests;
  for (int i = 0; i < max_shots; ++i) refs.push_back(load_named(ref_paths[i], ref_base));
  for (const auto& p : in_paths) tests.push_back(load_named(p, in_base));
  const auto backbone = make_backbone(base_cfg.backbone);

  nlohmann::json rows = nlohmann::json::array();
  for (int res : axes.resolutions) {
    for (const auto& prep : axes.preprocessing) {
      for (int k : axes.shots) {
        RunConfig cfg = base_cfg;
        cfg.preprocess.resolution = res;
        if (prep != "config") {
          const bool mask = prep == "mask" || prep == "mask+rot";
          const bool rot = prep == "rot" || prep == "mask+rot";
          cfg.preprocess.masking_mode = mask ? MaskingMode::kOn : MaskingMode::kOff;
          cfg.rotation = rot ? RotationMode::kAgnostic : RotationMode::kOff;
        }
        cfg.threads = base_cfg.thread_count();
        cfg.validate();
        std::span<const NamedImage> slice(refs.data(), static_cast<std::size_t>(k));
        std::vector<double> build;
        std::optional<ReferenceBank> ref;
        for (int b = 0; b < build_iters; ++b) {
          const auto t0 = clock::now();
          ref.emplace(build_reference_bank(slice, *backbone, cfg, "bench"));
          build.push_back(std::chrono::duration<double>(clock::now() - t0).count());
        }
        std::vector<double> lat;
        for (int i = 0; i < warmup + iters; ++i) {
          const NamedImage& img = tests[static_cast<std::size_t>(i) % tests.size()];
          const auto t0 = clock::now();
          const ImageResult r = score_image(img, *ref, *backbone, cfg.score, cfg.mask_policy, true);
          const double dt = std::chrono::duration<double>(clock::now() - t0).count();
          if (!(r.score >= 0)) throw DegenerateInput("bench produced a non-finite score");
          if (i >= warmup) lat.push_back(dt);
        }
        const Stat l = summarize(lat);
        const Stat b = summarize(build);
        rows.push_back({{"shots", k},
                        {"resolution", res},
                        {"preprocessing", prep},
                        {"masking_effective", ref->masking},
                        {"bank_count", ref->bank.count()},
                        {"latency_seconds", {{"mean", l.mean}, {"std", l.std}}},
                        {"bank_build_seconds", {{"mean", b.mean}, {"std", b.std}}},
                        {"images_per_second", l.mean > 0 ? 1.0 / l.mean : 0.0}});
        err << "resolution " << res << ", " << prep << ", k=" << k << ": " << l.mean * 1e3 << " +- "
            << l.std * 1e3 << " ms/image, |M| = " << ref->bank.count() << "\n";
      }
    }
  }
  nlohmann::json report{{"config", base_cfg.to_json()},
                        {"warmup", warmup},
                        {"iters", iters},
                        {"build_iters", build_iters},
                        {"threads", base_cfg.thread_count()},
                        {"rows", rows}};
  OutputSink sink(out_path, out);
  *sink << report.dump(2) << "\n";
  return 0;
}

inline int cmd_mask_test(const CommonOptions& common, const std::string& ref_path, const std::string& category,
                         const std::string& out_mask, std::ostream& out) {
  RunConfig cfg = common.resolve();
  const CategorySettings settings = resolve_category(cfg, category);
  if (settings.preprocess.texture_flag) {
    out << "skipped (texture)\n";
    return 0;
  }
  const auto backbone = make_backbone(cfg.backbone);
  const NamedImage img = load_named(ref_path, fs::path(ref_path).parent_path());
  const PatchFeatureGrid grid = extract_test(img, *backbone, settings.preprocess);
  const PatchMask mask = zero_shot_mask(grid, cfg.mask_policy);
  const MaskTestResult r = masking_test(mask, cfg.mask_policy);
  if (!out_mask.empty()) write_gray_png(out_mask, mask_to_image(mask));
  out << (r.passed ? "PASS" : "FAIL") << " center_fg=" << fmt(r.center_fraction)
      << " global_fg=" << fmt(r.global_fraction) << " (center_fg_min " << cfg.mask_policy.center_fg_min
      << ", global_fg_max " << cfg.mask_policy.global_fg_max << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

/// Runs the command line in-process; returns the exit code.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout,
               std::ostream& err = std::cerr) {
  CLI::App app{"patch-level nearest-neighbor anomaly detection"};
  app.require_subcommand(1);
  int code = 0;

  CommonOptions bb_common;
  std::vector<std::string> bb_refs;
  std::string bb_out, bb_category, bb_mask_debug;
  int bb_shots = 0;
  std::size_t bb_coreset = 0;
  std::uint64_t bb_coreset_seed = 0;
  bool bb_mask_refs = false;
  auto* bb = app.add_subcommand("build-bank", "build a memory bank from reference images");
  bb_common.add(*bb);
  bb->add_option("--refs", bb_refs, "reference image directory or files")->required();
  bb->add_option("--out", bb_out, "output .amb file")->required();
  bb->add_option("--category", bb_category, "category name (default: from the refs path)");
  bb->add_option("--shots", bb_shots, "use only the first k references");
  bb->add_option("--coreset", bb_coreset, "reduce the bank to this many rows");
  bb->add_option("--coreset-seed", bb_coreset_seed, "seed of the coreset start row");
  bb->add_flag("--mask-references", bb_mask_refs, "mask reference patches as well");
  bb->add_option("--mask-debug", bb_mask_debug, "write the first reference's mask as PNG");
  bb->callback([&] {
    code = cmd_build_bank(bb_common, bb_refs, bb_out, bb_category, bb_shots, bb_coreset, bb_coreset_seed,
                          bb_mask_refs, bb_mask_debug, out, err);
  });

  CommonOptions sc_common;
  std::string sc_bank, sc_out, sc_heatmaps, sc_masking;
  std::vector<std::string> sc_inputs;
  bool sc_raw = false;
  double sc_norm = 0;
  auto* sc = app.add_subcommand("score", "score images against a bank");
  sc_common.add(*sc, true);
  sc->add_option("--bank", sc_bank, ".amb bank file")->required();
  sc->add_option("--inputs", sc_inputs, "image directory or files")->required();
  sc->add_option("--out", sc_out, "CSV output (default: stdout)");
  sc->add_option("--heatmaps", sc_heatmaps, "directory for PNG heatmaps");
  sc->add_flag("--raw-maps", sc_raw, "also dump raw float maps (.pfv, dim 1)");
  sc->add_option("--normalizer", sc_norm, "heatmap color scale maximum (default: run maximum)");
  sc->add_option("--masking", sc_masking, "override the bank's masking decision (on|off)");
  sc->callback([&] {
    code = cmd_score(sc_common, sc_bank, sc_inputs, sc_out, sc_heatmaps, sc_raw, sc_norm, sc_masking, out, err);
  });

  CommonOptions ev_common;
  std::string ev_root, ev_layout = "mvtec", ev_json, ev_csv;
  std::vector<int> ev_shots;
  std::vector<std::string> ev_categories;
  int ev_seeds = 0;
  bool ev_no_timing = false, ev_quiet = false;
  auto* ev = app.add_subcommand("eval", "k-shot evaluation on an MVTec-AD or VisA tree");
  ev_common.add(*ev);
  ev->add_option("--data", ev_root, "dataset root")->required();
  ev->add_option("--layout", ev_layout, "mvtec | visa");
  ev->add_option("--shots", ev_shots, "shot counts, e.g. 1,2,4")->delimiter(',');
  ev->add_option("--seeds", ev_seeds, "reference slices per shot count (default 3)");
  ev->add_option("--categories", ev_categories, "restrict to these categories")->delimiter(',');
  ev->add_option("--out-json", ev_json, "JSON report");
  ev->add_option("--out-csv", ev_csv, "CSV table");
  ev->add_flag("--no-timing", ev_no_timing, "omit runtimes from the JSON report");
  ev->add_flag("--quiet", ev_quiet, "no progress output");
  ev->callback([&] {
    code = cmd_eval(ev_common, ev_root, ev_layout, ev_shots, ev_seeds, ev_categories, ev_json, ev_csv,
                    ev_no_timing, ev_quiet, out, err);
  });

  CommonOptions bt_common;
  std::vector<std::string> bt_inputs;
  std::string bt_out, bt_heatmaps;
  double bt_alpha = 0, bt_norm = 0;
  bool bt_raw = false;
  auto* bt = app.add_subcommand("batched", "zero-shot mutual scoring of a test batch");
  bt_common.add(*bt);
  bt->add_option("--inputs", bt_inputs, "image directory or files")->required();
  bt->add_option("--alpha", bt_alpha, "lower-tail fraction (default 0.001)");
  bt->add_option("--out", bt_out, "CSV output (default: stdout)");
  bt->add_option("--heatmaps", bt_heatmaps, "directory for PNG heatmaps");
  bt->add_flag("--raw-maps", bt_raw, "also dump raw float maps");
  bt->add_option("--normalizer", bt_norm, "heatmap color scale maximum");
  bt->callback([&] {
    code = cmd_batched(bt_common, bt_inputs, bt_alpha, bt_out, bt_heatmaps, bt_raw, bt_norm, out, err);
  });

  CommonOptions bn_common;
  std::vector<std::string> bn_refs, bn_inputs, bn_axes;
  std::string bn_out;
  int bn_warmup = 10, bn_iters = 100, bn_build_iters = 3;
  auto* bn = app.add_subcommand("bench", "latency benchmark over shots, resolution and preprocessing");
  bn_common.add(*bn);
  bn->add_option("--refs", bn_refs, "reference image directory or files")->required();
  bn->add_option("--inputs", bn_inputs, "test image directory or files")->required();
  bn->add_option("--axis", bn_axes, "shots=1,2,4 | resolution=448,672 | preprocessing=none,mask,rot,mask+rot");
  bn->add_option("--warmup", bn_warmup, "unmeasured iterations (default 10)");
  bn->add_option("--iters", bn_iters, "measured iterations (default 100)");
  bn->add_option("--build-iters", bn_build_iters, "bank builds per configuration (default 3)");
  bn->add_option("--out", bn_out, "JSON output (default: stdout)");
  bn->callback([&] {
    code = cmd_bench(bn_common, bn_refs, bn_inputs, bn_axes, bn_warmup, bn_iters, bn_build_iters, bn_out, out, err);
  });

  CommonOptions mt_common;
  std::string mt_ref, mt_category, mt_mask;
  auto* mt = app.add_subcommand("mask-test", "run the masking test on one reference image");
  mt_common.add(*mt);
  mt->add_option("--ref", mt_ref, "reference image")->required();
  mt->add_option("--category", mt_category, "category name (texture rules)");
  mt->add_option("--out-mask", mt_mask, "debug mask PNG");
  mt->callback([&] { code = cmd_mask_test(mt_common, mt_ref, mt_category, mt_mask, out); });

  std::string fx_out;
  synthetic::FixtureSpec fx;
  auto* mf = app.add_subcommand("make-fixture", "write the synthetic MVTec-style fixture");
  mf->add_option("--out", fx_out, "output root")->required();
  mf->add_option("--seed", fx.seed, "generator seed");
  mf->add_option("--size", fx.size, "image side in pixels");
  mf->add_option("--train", fx.train, "nominal train images per category");
  mf->add_option("--good", fx.test_good, "nominal test images per category");
  mf->add_option("--bad", fx.test_bad, "anomalous test images per category");
  mf->callback([&] {
    synthetic::write_fixture(fx_out, fx);
    out << "fixture written to " << fx_out << "\n";
  });

  std::vector<std::string> argv = args;
  std::reverse(argv.begin(), argv.end());
  try {
    app.parse(argv);
  } catch (const CLI::Success& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kUsage);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kIo);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return static_cast<int>(ExitCode::kFailure);
  }
  return code;
}

}  // namespace patchbank::cli
