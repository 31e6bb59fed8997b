#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "allspark/dataset.hpp"
#include "allspark/serialize.hpp"

namespace allspark {

struct DatasetMeta {
  std::size_t count = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_classes = 0;
  std::uint64_t seed = 0;
  double ratio = 0.0;
};

/// Writes a dataset directory: dataset.txt (meta), manifest.txt (split
/// sections), and one ASTF image/mask pair per sample under samples/.
inline void write_dataset_dir(const std::string& dir,
                              const std::vector<Sample>& samples,
                              const SplitManifest& manifest,
                              const DatasetMeta& meta) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "samples");
  {
    std::ofstream out(fs::path(dir) / "dataset.txt");
    out << "count=" << meta.count << "\n";
    out << "height=" << meta.height << "\n";
    out << "width=" << meta.width << "\n";
    out << "classes=" << meta.num_classes << "\n";
    out << "seed=" << meta.seed << "\n";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.9f", meta.ratio);
    out << "ratio=" << buf << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "manifest.txt");
    out << "[labeled]\n";
    for (const auto& id : manifest.labeled) out << id << "\n";
    out << "[unlabeled]\n";
    for (const auto& id : manifest.unlabeled) out << id << "\n";
  }
  for (const auto& s : samples) {
    const auto base = fs::path(dir) / "samples" / s.id;
    save_tensor(base.string() + "_image.astf", s.image);
    save_tensor(base.string() + "_mask.astf",
                raw_from_u8(Shape{s.image.shape()[1], s.image.shape()[2]},
                            s.mask));
  }
}

struct LoadedDataset {
  std::vector<Sample> samples;  // all samples, id-sorted
  SplitManifest manifest;
  DatasetMeta meta;

  const Sample& by_id(const std::string& id) const {
    for (const auto& s : samples) {
      if (s.id == id) return s;
    }
    throw contract_error("sample id '" + id + "' not present in dataset");
  }

  std::vector<Sample> labeled_pool() const { return select(manifest.labeled); }
  std::vector<Sample> unlabeled_pool() const {
    return select(manifest.unlabeled);
  }

 private:
  std::vector<Sample> select(const std::vector<std::string>& ids) const {
    std::vector<Sample> out;
    out.reserve(ids.size());
    for (const auto& id : ids) out.push_back(by_id(id));
    return out;
  }
};

inline LoadedDataset load_dataset_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) {
    throw config_error("dataset directory " + dir + " does not exist");
  }
  LoadedDataset ds;
  {
    std::ifstream in(fs::path(dir) / "dataset.txt");
    if (!in) throw config_error("missing dataset.txt in " + dir);
    std::string line;
    while (std::getline(in, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) continue;
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "count") ds.meta.count = std::stoull(value);
      else if (key == "height") ds.meta.height = std::stoull(value);
      else if (key == "width") ds.meta.width = std::stoull(value);
      else if (key == "classes") ds.meta.num_classes = std::stoull(value);
      else if (key == "seed") ds.meta.seed = std::stoull(value);
      else if (key == "ratio") ds.meta.ratio = std::stod(value);
    }
  }
  {
    std::ifstream in(fs::path(dir) / "manifest.txt");
    if (!in) throw config_error("missing manifest.txt in " + dir);
    std::string line;
    std::vector<std::string>* section = nullptr;
    while (std::getline(in, line)) {
      if (line == "[labeled]") {
        section = &ds.manifest.labeled;
      } else if (line == "[unlabeled]") {
        section = &ds.manifest.unlabeled;
      } else if (!line.empty()) {
        if (!section) {
          throw format_error("manifest line outside any section: " + line);
        }
        section->push_back(line);
      }
    }
  }
  std::vector<std::string> ids;
  ids.insert(ids.end(), ds.manifest.labeled.begin(), ds.manifest.labeled.end());
  ids.insert(ids.end(), ds.manifest.unlabeled.begin(),
             ds.manifest.unlabeled.end());
  std::sort(ids.begin(), ids.end());
  for (const auto& id : ids) {
    const auto base = fs::path(dir) / "samples" / id;
    Sample s;
    s.id = id;
    s.image = load_tensor_as<float>(base.string() + "_image.astf");
    s.mask = u8_from_raw(load_tensor(base.string() + "_mask.astf"));
    if (s.image.rank() != 3 || s.image.shape()[0] != 3) {
      throw format_error("sample " + id + " image has shape " +
                         shape_str(s.image.shape()));
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace allspark
