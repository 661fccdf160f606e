#pragma once

// Labeled image sets on disk: a manifest.json next to one CSV file per split.
// Each CSV row is `label,p0,p1,...` in row-major C,H,W order; pixels are divided
// by the manifest's pixel_max to land in [0,1].

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "dda/model_contracts.hpp"

namespace dda {

inline constexpr const char* kDataRootEnv = "DDA_DATA_ROOT";

struct DatasetManifest {
  std::string name;
  ImageShape shape;
  std::size_t classes = 0;
  double pixel_max = 1.0;
  std::map<std::string, std::string> splits;  // split name -> file relative to the manifest
  std::filesystem::path dir;
};

inline std::string dataset_layout_help(const std::filesystem::path& dir) {
  return "expected layout: " + (dir / "manifest.json").string() +
         " with {name, channels, height, width, classes, pixel_max, splits: {train: train.csv, test: test.csv}}, "
         "each CSV row being `label,pixel...`; set " +
         std::string(kDataRootEnv) + " or the [data] root key to the directory holding the dataset folders";
}

/// `configured` unless the environment override is set.
inline std::filesystem::path resolve_data_root(const std::filesystem::path& configured) {
  if (const char* env = std::getenv(kDataRootEnv); env && *env) return env;
  return configured;
}

/// Accepts the manifest file or the directory holding it.
inline DatasetManifest read_manifest(std::filesystem::path manifest_path) {
  if (std::filesystem::is_directory(manifest_path)) manifest_path /= "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw Error("dataset manifest not found: " + manifest_path.string() + "; " +
                       dataset_layout_help(manifest_path.parent_path()));
  nlohmann::json j;
  try {
    in >> j;
    DatasetManifest m;
    m.dir = manifest_path.parent_path();
    m.name = j.value("name", manifest_path.parent_path().filename().string());
    m.shape = {j.at("channels").get<std::size_t>(), j.at("height").get<std::size_t>(), j.at("width").get<std::size_t>()};
    m.classes = j.at("classes").get<std::size_t>();
    m.pixel_max = j.value("pixel_max", 1.0);
    for (const auto& [k, v] : j.at("splits").items()) m.splits[k] = v.get<std::string>();
    if (m.shape.numel() == 0 || m.classes == 0 || !(m.pixel_max > 0)) throw Error("degenerate manifest values");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset manifest " + manifest_path.string() + ": " + e.what() + "; " +
                      dataset_layout_help(manifest_path.parent_path()));
  }
}

inline ImageBatch load_split(const DatasetManifest& m, const std::string& split) {
  auto it = m.splits.find(split);
  if (it == m.splits.end()) throw Error("dataset '" + m.name + "' has no split '" + split + "'; " + dataset_layout_help(m.dir));
  const auto path = m.dir / it->second;
  std::ifstream in(path);
  if (!in) throw Error("dataset split file missing: " + path.string() + "; " + dataset_layout_help(m.dir));
  std::vector<double> pixels;
  std::vector<std::size_t> labels;
  std::string line;
  std::size_t row = 0;
  const std::size_t per = m.shape.numel();
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ss, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw FormatError(path.string() + ":" + std::to_string(row) + ": not a number: '" + cell + "'");
      }
    }
    if (vals.size() != per + 1) {
      throw FormatError(path.string() + ":" + std::to_string(row) + ": expected " + std::to_string(per + 1) +
                        " values, got " + std::to_string(vals.size()));
    }
    const double l = vals[0];
    if (l < 0 || l != std::floor(l) || l >= static_cast<double>(m.classes)) {
      throw FormatError(path.string() + ":" + std::to_string(row) + ": bad label");
    }
    labels.push_back(static_cast<std::size_t>(l));
    for (std::size_t i = 1; i <= per; ++i) pixels.push_back(std::clamp(vals[i] / m.pixel_max, 0.0, 1.0));
  }
  if (labels.empty()) throw Error("dataset split is empty: " + path.string());
  const std::size_t n = labels.size();
  return ImageBatch(Tensor(m.shape.batch(n), std::move(pixels)), std::move(labels));
}

/// Writes images with pixels in [0,1] as a one-split dataset (pixel_max 1).
inline void write_dataset(const std::filesystem::path& dir, const std::string& name, const ImageBatch& batch,
                          std::size_t classes, const std::string& split = "all",
                          const nlohmann::json& extra = nlohmann::json::object()) {
  std::filesystem::create_directories(dir);
  const auto s = batch.image_shape();
  const std::size_t per = s.numel();
  {
    std::ofstream out(dir / (split + ".csv"));
    out.precision(17);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      out << (batch.labels.empty() ? 0 : batch.labels[i]);
      for (std::size_t p = 0; p < per; ++p) out << ',' << batch.images[i * per + p];
      out << '\n';
    }
    if (!out) throw Error("failed to write " + (dir / (split + ".csv")).string());
  }
  nlohmann::json j = {{"name", name},     {"channels", s.channels}, {"height", s.height},
                      {"width", s.width}, {"classes", classes},     {"pixel_max", 1.0},
                      {"splits", {{split, split + ".csv"}}}};
  for (const auto& [k, v] : extra.items()) j[k] = v;
  std::ofstream out(dir / "manifest.json");
  out << j.dump(2) << '\n';
}

}  // namespace dda
