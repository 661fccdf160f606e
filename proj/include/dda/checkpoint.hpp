#pragma once

// Model checkpoints: a directory holding weights.bin (versioned binary of named
// tensors) and metadata.json. Files are written to a temporary name and renamed.

#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "dda/model_contracts.hpp"

namespace dda {

inline constexpr char kWeightsMagic[8] = {'D', 'D', 'A', 'W', 'G', 'T', '\0', '\0'};
inline constexpr std::uint64_t kWeightsVersion = 1;

namespace detail {

inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error("failed to write " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void put_u64(std::string& s, std::uint64_t v) { s.append(reinterpret_cast<const char*>(&v), 8); }

class Reader {
 public:
  Reader(std::string bytes, std::string where) : bytes_(std::move(bytes)), where_(std::move(where)) {}
  std::uint64_t u64() {
    std::uint64_t v;
    take(&v, 8);
    return v;
  }
  void take(void* dst, std::size_t n) {
    if (pos_ + n > bytes_.size()) throw FormatError(where_ + ": truncated checkpoint");
    std::memcpy(dst, bytes_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  std::string bytes_;
  std::string where_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/// Writes `model`'s named tensors and metadata into `dir` (created if needed).
template <typename Model>
void save_checkpoint(const std::filesystem::path& dir, Model& model, const nlohmann::json& extra = {}) {
  std::filesystem::create_directories(dir);
  std::string bytes(kWeightsMagic, 8);
  detail::put_u64(bytes, kWeightsVersion);
  const auto named = model.named_tensors();
  detail::put_u64(bytes, named.size());
  for (const auto& [name, t] : named) {
    detail::put_u64(bytes, name.size());
    bytes += name;
    detail::put_u64(bytes, t->rank());
    for (auto d : t->shape()) detail::put_u64(bytes, d);
    bytes.append(reinterpret_cast<const char*>(t->ptr()), t->size() * sizeof(double));
  }
  nlohmann::json meta = model.metadata();
  meta["format_version"] = kWeightsVersion;
  meta["checksum"] = checksum(model);
  if (extra.is_object())
    for (const auto& [k, v] : extra.items()) meta[k] = v;
  detail::write_atomic(dir / "weights.bin", bytes);
  detail::write_atomic(dir / "metadata.json", meta.dump(2) + "\n");
}

inline nlohmann::json read_checkpoint_metadata(const std::filesystem::path& dir) {
  const auto path = dir / "metadata.json";
  if (!std::filesystem::exists(path)) throw Error("checkpoint metadata missing: " + path.string());
  try {
    auto meta = nlohmann::json::parse(detail::read_file(path));
    if (meta.value("format_version", std::uint64_t{0}) != kWeightsVersion) {
      throw FormatError(path.string() + ": unsupported checkpoint format version " +
                        meta.value("format_version", nlohmann::json(nullptr)).dump());
    }
    return meta;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": malformed metadata: " + e.what());
  }
}

/// Loads weights into an already-constructed model of the same layout.
template <typename Model>
void load_weights(const std::filesystem::path& dir, Model& model) {
  const auto path = dir / "weights.bin";
  detail::Reader in(detail::read_file(path), path.string());
  char magic[8];
  in.take(magic, 8);
  if (std::memcmp(magic, kWeightsMagic, 8) != 0) throw FormatError(path.string() + ": not a weights file");
  if (const auto v = in.u64(); v != kWeightsVersion) {
    throw FormatError(path.string() + ": unsupported weights version " + std::to_string(v));
  }
  const auto named = model.named_tensors();
  if (in.u64() != named.size()) throw FormatError(path.string() + ": tensor count does not match the model");
  for (const auto& [name, t] : named) {
    const auto len = in.u64();
    if (len > 4096) throw FormatError(path.string() + ": corrupt tensor name");
    std::string got(len, '\0');
    in.take(got.data(), len);
    if (got != name) throw FormatError(path.string() + ": expected tensor '" + name + "', found '" + got + "'");
    Shape shape(in.u64());
    if (shape.size() > 8) throw FormatError(path.string() + ": corrupt tensor rank");
    for (auto& d : shape) d = in.u64();
    if (shape != t->shape()) {
      throw FormatError(path.string() + ": tensor '" + name + "' has shape " + to_string(shape) + ", model expects " +
                        to_string(t->shape()));
    }
    in.take(t->ptr(), t->size() * sizeof(double));
  }
  if (!in.done()) throw FormatError(path.string() + ": trailing bytes");
}

inline ConvClassifierConfig conv_config_from(const nlohmann::json& meta) {
  ConvClassifierConfig cfg;
  const auto in = meta.at("input");
  cfg.input = {in.at(0).get<std::size_t>(), in.at(1).get<std::size_t>(), in.at(2).get<std::size_t>()};
  cfg.labels = meta.at("label_count").get<std::size_t>();
  cfg.widths = meta.at("widths").get<std::vector<std::size_t>>();
  cfg.input_mean = meta.at("input_mean").get<std::vector<double>>();
  cfg.input_std = meta.at("input_std").get<std::vector<double>>();
  return cfg;
}

/// Reconstructs a classifier from its metadata and loads the weights.
inline std::unique_ptr<Classifier> load_classifier(const std::filesystem::path& dir) {
  const auto meta = read_checkpoint_metadata(dir);
  try {
    const auto arch = meta.at("architecture").get<std::string>();
    Rng rng(0);
    std::unique_ptr<Classifier> model;
    if (arch == "bn-cnn") {
      model = std::make_unique<ConvClassifier>(conv_config_from(meta), rng);
      load_weights(dir, static_cast<ConvClassifier&>(*model));
    } else if (arch == "linear") {
      const auto in = meta.at("input");
      auto lin = std::make_unique<LinearClassifier>(
          ImageShape{in.at(0).get<std::size_t>(), in.at(1).get<std::size_t>(), in.at(2).get<std::size_t>()},
          meta.at("label_count").get<std::size_t>(), rng);
      load_weights(dir, *lin);
      model = std::move(lin);
    } else {
      throw FormatError(dir.string() + ": unknown architecture '" + arch + "'");
    }
    if (meta.contains("checksum") && meta["checksum"].get<std::uint64_t>() != checksum(*model)) {
      throw FormatError(dir.string() + ": weights do not match the recorded checksum");
    }
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + ": malformed metadata: " + e.what());
  }
}

}  // namespace dda
