#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "patchbank/error.hpp"
#include "patchbank/image.hpp"
#include "patchbank/image_io.hpp"
#include "patchbank/metrics.hpp"

namespace patchbank {

namespace fs = std::filesystem;

enum class DatasetLayout { kMvtec, kVisa };

inline DatasetLayout parse_layout(const std::string& s) {
  if (s == "mvtec") return DatasetLayout::kMvtec;
  if (s == "visa") return DatasetLayout::kVisa;
  throw InvalidInput("unknown dataset layout '" + s + "' (expected mvtec|visa)");
}

inline std::string to_string(DatasetLayout l) { return l == DatasetLayout::kMvtec ? "mvtec" : "visa"; }

struct TestItem {
  fs::path image;
  int label = 0;          // 1 = anomalous
  std::string type;       // "good" or the anomaly type
  fs::path mask;          // empty for nominal images
};

struct CategoryIndex {
  std::string name;
  std::vector<fs::path> train;  // nominal reference pool, sorted by filename
  std::vector<TestItem> test;

  std::size_t anomalous() const {
    return static_cast<std::size_t>(
        std::count_if(test.begin(), test.end(), [](const TestItem& t) { return t.label == 1; }));
  }
};

struct DatasetIndex {
  fs::path root;
  DatasetLayout layout = DatasetLayout::kMvtec;
  std::vector<CategoryIndex> categories;

  const CategoryIndex* find(const std::string& name) const {
    for (const auto& c : categories)
      if (c.name == name) return &c;
    return nullptr;
  }
};

inline bool is_image_path(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg";
}

/// Image files directly inside `dir`, sorted by filename.
inline std::vector<fs::path> list_images(const fs::path& dir) {
  std::vector<fs::path> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && is_image_path(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end(),
            [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
  return out;
}

namespace detail {

inline std::vector<fs::path> sorted_subdirs(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_directory()) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

inline void require_pool(const CategoryIndex& c, const fs::path& where) {
  if (c.train.empty()) {
    throw FormatError("category '" + c.name + "': no reference pool (no nominal train images in '" +
                      where.string() + "')");
  }
}

inline void report_missing_masks(const std::vector<std::string>& missing) {
  if (missing.empty()) return;
  std::string msg = "missing ground-truth masks for " + std::to_string(missing.size()) +
                    " anomalous image(s):";
  for (const auto& m : missing) msg += "\n  " + m;
  throw FormatError(msg);
}

inline DatasetIndex load_mvtec(const fs::path& root) {
  DatasetIndex index;
  index.root = root;
  index.layout = DatasetLayout::kMvtec;
  std::vector<std::string> missing;
  for (const auto& cat_dir : sorted_subdirs(root)) {
    const fs::path train = cat_dir / "train" / "good";
    const fs::path test = cat_dir / "test";
    if (!fs::is_directory(cat_dir / "train") && !fs::is_directory(test)) continue;  // not a category
    if (!fs::is_directory(train)) throw FormatError("malformed layout: missing '" + train.string() + "'");
    if (!fs::is_directory(test)) throw FormatError("malformed layout: missing '" + test.string() + "'");
    CategoryIndex cat;
    cat.name = cat_dir.filename().string();
    cat.train = list_images(train);
    require_pool(cat, train);
    for (const auto& type_dir : sorted_subdirs(test)) {
      const std::string type = type_dir.filename().string();
      for (const auto& img : list_images(type_dir)) {
        TestItem item{img, type == "good" ? 0 : 1, type, {}};
        if (item.label) {
          const fs::path gt_dir = cat_dir / "ground_truth" / type;
          const std::string stem = img.stem().string();
          for (const char* ext : {".png", ".jpg", ".jpeg"}) {
            const fs::path candidate = gt_dir / (stem + "_mask" + ext);
            if (fs::exists(candidate)) {
              item.mask = candidate;
              break;
            }
          }
          if (item.mask.empty()) missing.push_back((gt_dir / (stem + "_mask.png")).string());
        }
        cat.test.push_back(std::move(item));
      }
    }
    if (cat.test.empty()) throw FormatError("malformed layout: no test images under '" + test.string() + "'");
    index.categories.push_back(std::move(cat));
  }
  report_missing_masks(missing);
  if (index.categories.empty()) {
    throw FormatError("malformed layout: no category directories with train/ and test/ under '" +
                      root.string() + "'");
  }
  return index;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (char c : line) {
    if (c == '"') {
      quoted = !quoted;
    } else if (c == ',' && !quoted) {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

// VisA ships split_csv/1cls.csv with columns object,split,label,image,mask;
// paths are relative to the dataset root.
inline DatasetIndex load_visa(const fs::path& root) {
  const fs::path csv = root / "split_csv" / "1cls.csv";
  std::ifstream in(csv);
  if (!in) throw FormatError("malformed layout: missing '" + csv.string() + "'");
  DatasetIndex index;
  index.root = root;
  index.layout = DatasetLayout::kVisa;
  std::string line;
  if (!std::getline(in, line)) throw FormatError("'" + csv.string() + "' is empty");
  const auto header = split_csv_line(line);
  std::map<std::string, std::size_t> col;
  for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
  for (const char* need : {"object", "split", "label", "image", "mask"}) {
    if (!col.count(need)) throw FormatError("'" + csv.string() + "' lacks column '" + need + "'");
  }
  std::map<std::string, CategoryIndex> cats;
  std::vector<std::string> missing;
  std::size_t row = 1;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    const auto f = split_csv_line(line);
    if (f.size() < header.size()) {
      throw FormatError("'" + csv.string() + "' line " + std::to_string(row) + " has too few fields");
    }
    CategoryIndex& cat = cats[f[col["object"]]];
    cat.name = f[col["object"]];
    const std::string& split = f[col["split"]];
    const bool anomalous = f[col["label"]] == "anomaly";
    const fs::path image = root / f[col["image"]];
    if (!fs::exists(image)) missing.push_back(image.string() + " (image)");
    if (split == "train") {
      if (!anomalous) cat.train.push_back(image);
    } else if (split == "test") {
      TestItem item{image, anomalous ? 1 : 0, anomalous ? "anomaly" : "good", {}};
      if (anomalous) {
        const std::string& m = f[col["mask"]];
        if (m.empty() || !fs::exists(root / m)) {
          missing.push_back((m.empty() ? image.string() : (root / m).string()));
        } else {
          item.mask = root / m;
        }
      }
      cat.test.push_back(std::move(item));
    } else {
      throw FormatError("'" + csv.string() + "' line " + std::to_string(row) + ": unknown split '" +
                        split + "'");
    }
  }
  report_missing_masks(missing);
  for (auto& [name, cat] : cats) {
    std::sort(cat.train.begin(), cat.train.end(),
              [](const fs::path& a, const fs::path& b) { return a.filename() < b.filename(); });
    require_pool(cat, csv);
    index.categories.push_back(std::move(cat));
  }
  if (index.categories.empty()) throw FormatError("'" + csv.string() + "' lists no images");
  return index;
}

}  // namespace detail

inline DatasetIndex load_dataset(const fs::path& root, DatasetLayout layout) {
  if (!fs::is_directory(root)) throw IoError("dataset root '" + root.string() + "' does not exist");
  return layout == DatasetLayout::kMvtec ? detail::load_mvtec(root) : detail::load_visa(root);
}

/// Ground-truth mask brought to the preprocessed geometry of a
/// width x height image (same resize and crop), thresholded at 128.
inline BinaryMask load_ground_truth(const fs::path& path, int width, int height, int resolution) {
  const PreprocessGeometry g = preprocess_geometry(width, height, resolution);
  if (path.empty()) return BinaryMask(g.output.height, g.output.width);
  const GrayImage gray = read_gray_image(path);
  if (gray.width != width || gray.height != height) {
    throw FormatError("mask '" + path.string() + "' is " + std::to_string(gray.width) + "x" +
                      std::to_string(gray.height) + " but its image is " + std::to_string(width) +
                      "x" + std::to_string(height));
  }
  Image rgb(width, height);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i)
    for (int c = 0; c < 3; ++c) rgb.pixels[i * 3 + c] = gray.pixels[i];
  const Image pre = preprocess_image(rgb, resolution);
  BinaryMask out(pre.height, pre.width);
  for (std::size_t i = 0; i < out.bits.size(); ++i) out.bits[i] = pre.pixels[i * 3] >= 128 ? 1 : 0;
  return out;
}

/// Feature-lookup id of an image: its path relative to `base` without the
/// extension, so "<base>/test/crack/000.png" becomes "test/crack/000".
inline std::string source_id_for(const fs::path& image, const fs::path& base) {
  fs::path rel = base.empty() ? image.filename() : fs::relative(image, base);
  if (rel.empty() || rel.native().starts_with("..")) rel = image.filename();
  rel.replace_extension();
  return rel.generic_string();
}

}  // namespace patchbank
