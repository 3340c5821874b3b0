// Acceptance run: one PASS/FAIL/SKIP line per criterion. Exit status is 0
// only when nothing failed.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "patchbank/cli.hpp"

using namespace patchbank;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(const std::string& status, const std::string& name, const std::string& detail) {
  if (status == "FAIL") ++failures;
  std::cout << status << "  " << name << ": " << detail << std::endl;
}

void verdict(bool ok, const std::string& name, const std::string& detail) {
  report(ok ? "PASS" : "FAIL", name, detail);
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

std::map<std::string, std::string> suite_paths() {
  std::map<std::string, std::string> out;
  std::stringstream ss(PATCHBANK_SUITE_PATHS);
  for (std::string item; std::getline(ss, item, '|');) {
    const auto eq = item.find('=');
    out[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return out;
}

struct SuiteRun {
  bool ok = false;
  double seconds = 0;
  int tests = 0;
};

// Runs one test binary single-threaded, optionally filtered; counts the
// tests that ran from its summary line.
SuiteRun run_suite(const std::string& suite, const std::string& filter, const fs::path& logdir) {
  static const auto paths = suite_paths();
  SuiteRun r;
  const auto it = paths.find(suite);
  if (it == paths.end()) return r;
  const fs::path log = logdir / (suite + ".log");
  std::string cmd = "PATCHBANK_THREADS=1 '" + it->second + "'";
  if (!filter.empty()) cmd += " --gtest_filter='" + filter + "'";
  cmd += " > '" + log.string() + "' 2>&1";
  const auto t0 = Clock::now();
  const int status = std::system(cmd.c_str());
  r.seconds = seconds_since(t0);
  r.ok = status == 0;
  std::ifstream in(log);
  for (std::string line; std::getline(in, line);) {
    if (line.rfind("[==========] ", 0) == 0 && line.find(" ran.") != std::string::npos) {
      r.tests = std::atoi(line.c_str() + 13);
    }
  }
  if (!r.ok) {
    std::ifstream again(log);
    std::cout << again.rdbuf();
  }
  return r;
}

void oracle_criterion(const std::string& name, const std::vector<std::pair<std::string, std::string>>& runs,
                      const fs::path& logdir, double max_seconds = 0) {
  bool ok = true;
  double secs = 0;
  int tests = 0;
  for (const auto& [suite, filter] : runs) {
    const SuiteRun r = run_suite(suite, filter, logdir);
    ok = ok && r.ok && r.tests > 0;
    secs += r.seconds;
    tests += r.tests;
  }
  std::string detail = std::to_string(tests) + " oracle test(s), " + num(secs, 3) + " s";
  if (max_seconds > 0) {
    ok = ok && secs < max_seconds;
    detail += " (limit " + num(max_seconds) + " s)";
  }
  verdict(ok, name, detail);
}

double mean_over(const EvalReport& rep, std::size_t metric) {
  double s = 0;
  for (const auto& r : rep.results) s += r.stats()[metric].mean;
  return rep.results.empty() ? 0.0 : s / static_cast<double>(rep.results.size());
}

std::string per_category(const EvalReport& rep, std::size_t metric) {
  std::string out;
  for (const auto& r : rep.results) out += (out.empty() ? "" : ", ") + r.category + " " + num(r.stats()[metric].mean);
  return out;
}

int run_cli(const std::vector<std::string>& args, std::string* out = nullptr) {
  std::ostringstream o, e;
  const int code = cli::run(args, o, e);
  if (out) *out = o.str();
  if (code != 0) std::cout << e.str();
  return code;
}

std::vector<double> csv_scores(const std::string& csv) {
  std::vector<double> v;
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);  // config echo
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto a = line.find(','), b = line.rfind(',');
    v.push_back(std::stod(line.substr(a + 1, b - a - 1)));
  }
  return v;
}

// ---------------------------------------------------------------------------

void oracle_equivalences(const fs::path& logdir) {
  oracle_criterion("oracle: auroc vs pair counting (100 instances, n <= 200, 1e-12)",
                   {{"metrics", "AurocProperty.PairCountingOracle"}}, logdir, 5.0);
  oracle_criterion("oracle: average_precision and f1_max vs full enumeration (n <= 12)",
                   {{"metrics", "RankingMetrics.FullEnumerationUpToTwelve"}}, logdir);
  oracle_criterion("oracle: nn_distance and mutual_patch_scores vs double loops (1e-12)",
                   {{"memory", "Nn.MatchesOracle200x8:NnProperty.MatchesOracleRandomSizes"},
                    {"batched", "BatchedProperty.MatchesDistanceMatrixOracle:Batched.FourTinyGridsAgainstDistanceMatrix"}},
                   logdir);
  oracle_criterion("oracle: make_map vs dense bilinear+convolution (<= 8x8 to <= 112x112, 1e-6)",
                   {{"scoring", "Map.TwoByTwoMatchesDenseOracle:MapProperty.*"}}, logdir);
  oracle_criterion("oracle: fit_pca_direction vs eigendecomposition (dim <= 8, |cos| >= 0.999)",
                   {{"masking", "Pca.*:PcaProperty.MatchesEigenAndMaximizesVariance"}}, logdir);
  oracle_criterion("oracle: pro vs exhaustive per-threshold computation (<= 8x8, 1e-9)",
                   {{"metrics", "Pro.HandComputedTwoRegions:ProProperty.MatchesExhaustiveOracle"}}, logdir);
}

void invariant_suites(const fs::path& logdir) {
  bool ok = true;
  double secs = 0;
  int tests = 0;
  std::string detail;
  for (const char* s : {"features", "memory", "scoring", "masking", "batched", "metrics", "pipeline", "cli"}) {
    const SuiteRun r = run_suite(s, "", logdir);
    ok = ok && r.ok && r.tests > 0;
    secs += r.seconds;
    tests += r.tests;
    detail += std::string(detail.empty() ? "" : ", ") + s + " " + num(r.seconds, 2) + " s";
  }
  ok = ok && secs < 60.0;
  verdict(ok, "invariant and property suites, single-threaded (< 60 s)",
          std::to_string(tests) + " tests in " + num(secs, 3) + " s [" + detail + "]");
}

struct E2e {
  EvalReport mean_top;
  double seconds = 0;
};

E2e synthetic_end_to_end(const fs::path& root) {
  E2e out;
  const DatasetIndex index = load_dataset(root, DatasetLayout::kMvtec);
  const RunConfig cfg = load_run_config(root / "config.json");
  ToyBackbone toy;
  auto t0 = Clock::now();
  out.mean_top = run_fewshot_eval(index, cfg, toy);
  out.seconds = seconds_since(t0);
  const EvalReport again = run_fewshot_eval(index, cfg, toy);
  const bool same = again.to_json(false).dump() == out.mean_top.to_json(false).dump();

  const double img = mean_over(out.mean_top, 0), px = mean_over(out.mean_top, 3);
  const std::size_t cats = out.mean_top.results.size();
  verdict(cats == 2 && img >= 0.95 && px >= 0.90,
          "synthetic end-to-end: 1-shot, 3 seeds, image AUROC >= 0.95 and pixel AUROC >= 0.90",
          "image AUROC " + num(img) + " (" + per_category(out.mean_top, 0) + "), pixel AUROC " + num(px) + " (" +
              per_category(out.mean_top, 3) + "), PRO " + num(mean_over(out.mean_top, 5)));
  verdict(same, "synthetic end-to-end: deterministic", same ? "two runs give bit-identical reports" : "reports differ");
  verdict(out.seconds < 120.0, "synthetic end-to-end: runtime < 2 min",
          num(out.seconds, 3) + " s on " + std::to_string(cfg.thread_count()) + " thread(s)");
  return out;
}

void aggregation_ablation(const fs::path& root, const EvalReport& mean_top) {
  const DatasetIndex index = load_dataset(root, DatasetLayout::kMvtec);
  ToyBackbone toy;
  std::map<std::string, double> auroc{{"mean-top:0.01", mean_over(mean_top, 0)}};
  bool ran = true;
  for (const char* agg : {"max-map", "max-patch"}) {
    RunConfig cfg = load_run_config(root / "config.json");
    cfg.merge_json({{"aggregation", agg}});
    try {
      auroc[agg] = mean_over(run_fewshot_eval(index, cfg, toy), 0);
    } catch (const std::exception& e) {
      ran = false;
      std::cout << agg << ": " << e.what() << "\n";
    }
  }
  const bool ok = ran && auroc["mean-top:0.01"] >= auroc["max-map"] - 0.02;
  verdict(ok, "aggregation ablation: mean-top AUROC >= max-map AUROC - 0.02, all three runnable",
          "mean-top " + num(auroc["mean-top:0.01"]) + ", max-map " + num(auroc["max-map"]) + ", max-patch " +
              num(auroc["max-patch"]));
}

void batched_zero_shot(const fs::path& dir) {
  // 40 widgets at 224 px, every 10th one defective.
  const auto batch = synthetic::widget_batch(2024, 40, 10, 224);
  fs::create_directories(dir);
  std::vector<int> labels;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    write_rgb_png(dir / (synthetic::numbered(static_cast<int>(i)) + ".png"), batch[i].image);
    labels.push_back(batch[i].label);
  }
  std::string csv;
  const int code = run_cli({"batched", "--inputs", dir.string(), "--resolution", "224", "--threads", "1"}, &csv);
  const auto scores = csv_scores(csv);
  const double a = code == 0 && scores.size() == labels.size() ? auroc(scores, labels) : 0.0;
  verdict(a >= 0.90, "batched zero-shot: image AUROC >= 0.90 at 10% anomalous",
          "AUROC " + num(a) + " over " + std::to_string(scores.size()) + " images, " +
              std::to_string(std::count(labels.begin(), labels.end(), 1)) + " anomalous");

  ToyBackbone toy;
  std::vector<PatchFeatureGrid> grids;
  for (const auto& s : batch) grids.push_back(toy.extract(preprocess_image(s.image, 224), ""));
  BatchedConfig cfg;
  const BatchedResult base = batched_run(grids, cfg, {}, 1, false);
  std::mt19937_64 rng(5);
  bool exact = true;
  for (int trial = 0; trial < 3; ++trial) {
    std::vector<std::size_t> perm(grids.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<PatchFeatureGrid> shuffled;
    for (std::size_t p : perm) shuffled.push_back(grids[p]);
    const BatchedResult r = batched_run(shuffled, cfg, {}, 1, false);
    for (std::size_t i = 0; i < perm.size(); ++i) exact = exact && r.scores[i] == base.scores[perm[i]];
  }
  verdict(exact, "batched zero-shot: permutation equivariance is exact",
          exact ? "3 random permutations reproduce every score bitwise" : "scores moved under permutation");
}

void throughput(const fs::path& fixture, const fs::path& dir) {
  const std::string refs = (fixture / "widget" / "train" / "good").string();
  const std::string bank = (dir / "k4.amb").string();
  fs::create_directories(dir);
  if (run_cli({"build-bank", "--refs", refs, "--out", bank, "--shots", "4", "--resolution", "448", "--threads", "1"}) != 0) {
    verdict(false, "throughput: score at 448 with |M| = 16384, 1 thread, >= 20 img/s", "bank build failed");
    return;
  }
  const MemoryBank m = read_bank_file(bank);
  const std::vector<std::string> inputs{(fixture / "widget" / "test" / "good").string(),
                                        (fixture / "widget" / "test" / "color").string()};
  std::map<std::string, double> rate;
  std::size_t images = 0;
  for (const char* masking : {"auto", "off"}) {
    std::vector<std::string> args{"score", "--bank", bank, "--threads", "1", "--inputs"};
    args.insert(args.end(), inputs.begin(), inputs.end());
    if (std::string(masking) == "off") args.insert(args.end(), {"--masking", "off"});
    std::string csv;
    const auto t0 = Clock::now();
    run_cli(args, &csv);
    const double secs = seconds_since(t0);
    images = csv_scores(csv).size();
    rate[masking] = static_cast<double>(images) / secs;
  }
  verdict(m.count() == 16384 && rate["auto"] >= 20.0,
          "throughput: score at 448 with |M| = 16384, 1 thread, >= 20 img/s",
          num(rate["auto"], 3) + " img/s over " + std::to_string(images) + " images with the bank's masking (" +
              num(rate["off"], 3) + " img/s masking off), |M| = " + std::to_string(m.count()) +
              ", including PNG decode and bank load");

  std::string json;
  const int code = run_cli({"bench", "--refs", refs, "--inputs", inputs[0], "--threads", "1", "--axis", "shots=1,2",
                            "--axis", "resolution=224,448", "--axis", "preprocessing=none,mask+rot", "--warmup", "1",
                            "--iters", "3", "--build-iters", "1"},
                           &json);
  bool axes = code == 0;
  std::size_t rows = 0;
  if (axes) {
    const auto j = nlohmann::json::parse(json);
    rows = j["rows"].size();
    for (const auto& r : j["rows"])
      axes = axes && r.contains("shots") && r.contains("resolution") && r.contains("preprocessing") &&
             r["latency_seconds"]["mean"].get<double>() > 0 && r["bank_build_seconds"]["mean"].get<double>() > 0;
  }
  verdict(axes && rows == 8, "bench reports the shots, preprocessing and resolution axes",
          std::to_string(rows) + " rows for 2 shots x 2 resolutions x 2 preprocessing settings");
}

// Needs real backbone features (.pfv per image, keyed by source id) and the
// public datasets; skipped otherwise.
void paper_track() {
  struct Track {
    const char* name;
    const char* root_env;
    const char* feat_env;
    const char* layout;
    double auroc, auroc_tol, pro, pro_tol;
  };
  const Track tracks[] = {{"MVTec-AD", "PATCHBANK_MVTEC_ROOT", "PATCHBANK_MVTEC_FEATURES", "mvtec", 0.966, 0.015, 0.927, 0.015},
                          {"VisA", "PATCHBANK_VISA_ROOT", "PATCHBANK_VISA_FEATURES", "visa", 0.874, 0.020, -1, 0}};
  for (const auto& t : tracks) {
    const std::string name = std::string("paper track (") + t.name + ", k=1, 672 px, agnostic)";
    const char* root = std::getenv(t.root_env);
    const char* feats = std::getenv(t.feat_env);
    if (!root || !feats || !fs::is_directory(root) || !fs::is_directory(feats)) {
      report("SKIP", name, std::string("set ") + t.root_env + " and " + t.feat_env + " to run");
      continue;
    }
    try {
      RunConfig cfg;
      cfg.backbone = std::string("file:") + feats;
      cfg.preprocess.resolution = 672;
      cfg.rotation = RotationMode::kAgnostic;
      const auto backbone = make_backbone(cfg.backbone);
      const EvalReport rep = run_fewshot_eval(load_dataset(root, parse_layout(t.layout)), cfg, *backbone);
      const double a = mean_over(rep, 0), p = mean_over(rep, 5);
      bool ok = std::abs(a - t.auroc) <= t.auroc_tol + 1e-12;
      std::string detail = "image AUROC " + num(a) + " (target " + num(t.auroc) + " +- " + num(t.auroc_tol) + ")";
      if (t.pro >= 0) {
        ok = ok && std::abs(p - t.pro) <= t.pro_tol + 1e-12;
        detail += ", PRO " + num(p) + " (target " + num(t.pro) + " +- " + num(t.pro_tol) + ")";
      }
      verdict(ok, name, detail);
    } catch (const std::exception& e) {
      verdict(false, name, e.what());
    }
  }
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / ("patchbank_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(work / "logs");
  const auto t0 = Clock::now();

  oracle_equivalences(work / "logs");
  invariant_suites(work / "logs");

  // Default fixture: 448 px, 8 train, 20 good + 20 defective test images per category.
  const fs::path fixture = work / "fixture";
  synthetic::write_fixture(fixture);
  const E2e e2e = synthetic_end_to_end(fixture);
  aggregation_ablation(fixture, e2e.mean_top);
  batched_zero_shot(work / "batch");
  throughput(fixture, work / "throughput");
  paper_track();

  std::cout << (failures ? "FAILED" : "ALL PASSED") << " (" << failures << " failing, " << num(seconds_since(t0), 3)
            << " s)" << std::endl;
  std::error_code ec;
  fs::remove_all(work, ec);
  return failures ? 1 : 0;
}
