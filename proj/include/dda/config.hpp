#pragma once

// Run configuration: an INI-style file with one section per module. Every key
// is typed; unknown sections or keys are errors. `to_ini` writes the normalized
// form (fixed key order, canonical number formatting) that is echoed into each
// run directory and parses back to the same configuration.

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dda/distillation.hpp"
#include "dda/trainer.hpp"

namespace dda {

enum class Ablation { none, no_diffusion, no_filter, both };

inline std::string to_string(Ablation a) {
  switch (a) {
    case Ablation::none: return "none";
    case Ablation::no_diffusion: return "no-diffusion";
    case Ablation::no_filter: return "no-filter";
    case Ablation::both: return "both";
  }
  return "none";
}

inline Ablation parse_ablation(const std::string& s) {
  if (s == "none") return Ablation::none;
  if (s == "no-diffusion") return Ablation::no_diffusion;
  if (s == "no-filter") return Ablation::no_filter;
  if (s == "both") return Ablation::both;
  throw Error("unknown ablation '" + s + "' (expected none, no-diffusion, no-filter or both)");
}

struct RunConfig {
  // [run]
  std::uint64_t seed = 0;
  std::string out = "runs";
  std::string ablate = "none";
  // [data]
  std::string data_root = "data";
  std::string dataset = "digits";
  // [teacher]
  std::vector<std::size_t> teacher_widths{16, 32, 64, 64};
  std::string teacher_checkpoint = "runs/teacher";
  SupervisedConfig teacher_train;
  // [student]
  std::vector<std::size_t> student_widths{8, 16, 32, 32};
  StudentOptimConfig student;
  // [generator] / [discriminator]
  GeneratorConfig generator;
  DiscriminatorConfig discriminator;
  // [synthesis]
  DistillSchedule schedule;
  std::size_t bank_capacity = 1000;
  ContrastiveOptions contrastive;
  // [augmentation]
  SurrogateDiffusionConfig surrogate;
  bool adaptive_intensity = true;
  std::string embedding = "teacher";
  std::string backend = "surrogate";
  std::string endpoint;
  std::size_t timeout_ms = 30000;
  std::size_t max_in_flight = 4;
  // losses
  HyperParams hp;

  // Desk preset: 8x8 digits, small BN-CNN teacher, half-width student.
  RunConfig() {
    teacher_train.epochs = 30;
    hp.beta = 2.0;
    schedule.synth_lr = 0.005;
    schedule.latent_lr = 0.2;
    schedule.disc_lr = 0.005;
    contrastive.policy.crop_pad = 1;
    contrastive.policy.flip_prob = 0.0;
  }

  Ablation ablation() const { return parse_ablation(ablate); }
  DistillOptions distill_options() const {
    DistillOptions o;
    const auto a = ablation();
    o.use_diffusion = a == Ablation::none || a == Ablation::no_filter;
    o.use_filter = a == Ablation::none || a == Ablation::no_diffusion;
    o.adaptive_intensity = adaptive_intensity;
    o.embedding = embedding == "discriminator" ? EmbeddingSpace::discriminator : EmbeddingSpace::teacher;
    o.seed = seed;
    o.contrastive = contrastive;
    o.contrastive.temperature = hp.contrastive_temperature;
    return o;
  }
  SurrogateDiffusionConfig diffusion_config() const {
    auto d = surrogate;
    d.steps = hp.diffusion_steps;
    d.guidance_scale = hp.guidance_scale;
    return d;
  }
  void validate() const {
    hp.validate();
    (void)ablation();
    if (embedding != "teacher" && embedding != "discriminator") throw Error("augmentation.embedding must be teacher or discriminator");
    if (backend != "surrogate" && backend != "remote") throw Error("augmentation.backend must be surrogate or remote");
    if (backend == "remote" && endpoint.empty()) throw Error("remote backend needs augmentation.endpoint");
    if (teacher_widths.empty() || student_widths.empty()) throw Error("classifier widths must be non-empty");
    if (schedule.synth_batch < 2) throw Error("synthesis.batch must be >= 2");
    if (schedule.synth_steps < 1) throw Error("synthesis.steps must be >= 1");
    if (bank_capacity < 1) throw Error("synthesis.bank_capacity must be >= 1");
    if (student.batch_size < 2 || teacher_train.batch_size < 2) throw Error("batch sizes must be >= 2");
  }
};

namespace config_detail {

inline std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}
inline std::string fmt(std::uint64_t v) { return std::to_string(v); }
inline std::string fmt(bool v) { return v ? "true" : "false"; }
inline std::string fmt(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline double parse_double(const std::string& key, const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) throw Error("config " + key + ": expected a number, got '" + s + "'");
  return v;
}
inline std::uint64_t parse_uint(const std::string& key, const std::string& s) {
  std::uint64_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw Error("config " + key + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}
inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1" || s == "yes" || s == "on") return true;
  if (s == "false" || s == "0" || s == "no" || s == "off") return false;
  throw Error("config " + key + ": expected true/false, got '" + s + "'");
}
inline std::vector<std::size_t> parse_list(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_uint(key, item));
  if (out.empty()) throw Error("config " + key + ": empty list");
  return out;
}

struct Field {
  std::string section, key;
  bool numeric;  // sweepable
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
  std::string name() const { return section + "." + key; }
};

#define DDA_F_DOUBLE(sec, k, member)                                                        \
  Field{sec, k, true, [](const RunConfig& c) { return fmt(static_cast<double>(c.member)); }, \
        [](RunConfig& c, const std::string& s) { c.member = parse_double(sec "." k, s); }}
#define DDA_F_UINT(sec, k, member)                                                                 \
  Field{sec, k, true, [](const RunConfig& c) { return fmt(static_cast<std::uint64_t>(c.member)); }, \
        [](RunConfig& c, const std::string& s) { c.member = parse_uint(sec "." k, s); }}
#define DDA_F_BOOL(sec, k, member)                                  \
  Field{sec, k, false, [](const RunConfig& c) { return fmt(c.member); }, \
        [](RunConfig& c, const std::string& s) { c.member = parse_bool(sec "." k, s); }}
#define DDA_F_STR(sec, k, member)                               \
  Field{sec, k, false, [](const RunConfig& c) { return c.member; }, \
        [](RunConfig& c, const std::string& s) { c.member = s; }}
#define DDA_F_LIST(sec, k, member)                                  \
  Field{sec, k, false, [](const RunConfig& c) { return fmt(c.member); }, \
        [](RunConfig& c, const std::string& s) { c.member = parse_list(sec "." k, s); }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      DDA_F_UINT("run", "seed", seed),
      DDA_F_STR("run", "out", out),
      DDA_F_STR("run", "ablate", ablate),
      DDA_F_STR("data", "root", data_root),
      DDA_F_STR("data", "dataset", dataset),
      DDA_F_LIST("teacher", "widths", teacher_widths),
      DDA_F_STR("teacher", "checkpoint", teacher_checkpoint),
      DDA_F_UINT("teacher", "epochs", teacher_train.epochs),
      DDA_F_UINT("teacher", "batch", teacher_train.batch_size),
      DDA_F_DOUBLE("teacher", "lr", teacher_train.lr),
      DDA_F_DOUBLE("teacher", "momentum", teacher_train.momentum),
      DDA_F_DOUBLE("teacher", "weight_decay", teacher_train.weight_decay),
      DDA_F_UINT("teacher", "max_shift", teacher_train.max_shift),
      DDA_F_LIST("student", "widths", student_widths),
      DDA_F_DOUBLE("student", "lr", student.lr),
      DDA_F_DOUBLE("student", "momentum", student.momentum),
      DDA_F_DOUBLE("student", "weight_decay", student.weight_decay),
      DDA_F_UINT("student", "batch", student.batch_size),
      DDA_F_UINT("generator", "latent_dim", generator.latent_dim),
      DDA_F_UINT("generator", "channels", generator.channels),
      DDA_F_DOUBLE("generator", "lr", schedule.synth_lr),
      DDA_F_DOUBLE("generator", "latent_lr", schedule.latent_lr),
      DDA_F_UINT("discriminator", "hidden", discriminator.hidden),
      DDA_F_UINT("discriminator", "projection", discriminator.projection),
      DDA_F_DOUBLE("discriminator", "lr", schedule.disc_lr),
      DDA_F_UINT("synthesis", "rounds", schedule.rounds),
      DDA_F_UINT("synthesis", "batch", schedule.synth_batch),
      DDA_F_UINT("synthesis", "steps", schedule.synth_steps),
      DDA_F_DOUBLE("synthesis", "alpha", hp.alpha),
      DDA_F_DOUBLE("synthesis", "beta", hp.beta),
      DDA_F_DOUBLE("synthesis", "alpha_prime", hp.alpha_prime),
      DDA_F_DOUBLE("synthesis", "beta_prime", hp.beta_prime),
      DDA_F_DOUBLE("synthesis", "contrastive_temperature", hp.contrastive_temperature),
      DDA_F_UINT("synthesis", "bank_capacity", bank_capacity),
      DDA_F_UINT("synthesis", "negatives", contrastive.max_negatives),
      DDA_F_BOOL("synthesis", "infonce_positive", contrastive.positive_in_denominator),
      DDA_F_DOUBLE("synthesis", "view_flip_prob", contrastive.policy.flip_prob),
      DDA_F_UINT("synthesis", "view_crop_pad", contrastive.policy.crop_pad),
      DDA_F_DOUBLE("synthesis", "view_brightness", contrastive.policy.brightness),
      DDA_F_DOUBLE("augmentation", "omega", hp.omega),
      DDA_F_UINT("augmentation", "k", hp.augmentations),
      DDA_F_UINT("augmentation", "steps", hp.diffusion_steps),
      DDA_F_DOUBLE("augmentation", "guidance_scale", hp.guidance_scale),
      DDA_F_DOUBLE("augmentation", "intensity", surrogate.intensity),
      DDA_F_DOUBLE("augmentation", "latent_noise", surrogate.latent_noise),
      DDA_F_DOUBLE("augmentation", "high_freq_shrink", surrogate.high_freq_shrink),
      DDA_F_DOUBLE("augmentation", "warp", surrogate.warp),
      DDA_F_DOUBLE("augmentation", "jitter", surrogate.jitter),
      DDA_F_DOUBLE("augmentation", "outlier_prob", surrogate.outlier_prob),
      DDA_F_DOUBLE("augmentation", "outlier_scale", surrogate.outlier_scale),
      DDA_F_BOOL("augmentation", "adaptive", adaptive_intensity),
      DDA_F_STR("augmentation", "embedding", embedding),
      DDA_F_STR("augmentation", "backend", backend),
      DDA_F_STR("augmentation", "endpoint", endpoint),
      DDA_F_UINT("augmentation", "timeout_ms", timeout_ms),
      DDA_F_UINT("augmentation", "max_in_flight", max_in_flight),
      DDA_F_UINT("distill", "epochs_per_round", schedule.epochs_per_round),
      DDA_F_UINT("distill", "pool_capacity", schedule.pool_capacity),
      DDA_F_DOUBLE("distill", "eta_kl", hp.eta_kl),
      DDA_F_DOUBLE("distill", "eta_synth", hp.eta_synth),
      DDA_F_DOUBLE("distill", "eta_self", hp.eta_self),
      DDA_F_DOUBLE("distill", "kd_temperature", hp.kd_temperature),
  };
  return f;
}

#undef DDA_F_DOUBLE
#undef DDA_F_UINT
#undef DDA_F_BOOL
#undef DDA_F_STR
#undef DDA_F_LIST

inline const Field* find(const std::string& name) {
  for (const auto& f : fields())
    if (f.name() == name) return &f;
  return nullptr;
}

}  // namespace config_detail

/// Sets one `section.key` value; unknown names are errors.
inline void set_config_value(RunConfig& cfg, const std::string& name, const std::string& value) {
  const auto* f = config_detail::find(name);
  if (!f) throw Error("unknown config key '" + name + "'");
  f->set(cfg, value);
}

inline std::string get_config_value(const RunConfig& cfg, const std::string& name) {
  const auto* f = config_detail::find(name);
  if (!f) throw Error("unknown config key '" + name + "'");
  return f->get(cfg);
}

inline bool is_sweepable(const std::string& name) {
  const auto* f = config_detail::find(name);
  return f && f->numeric;
}

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& f : config_detail::fields()) out.push_back(f.name());
  return out;
}

inline void apply_ini(RunConfig& cfg, std::istream& in, const std::string& where = "config") {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw Error(where + ": " + e.what());
  }
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw Error(where + ": key '" + section + "' outside any section");
    for (const auto& [key, value] : body) {
      const std::string name = section + "." + key;
      if (!config_detail::find(name)) throw Error(where + ": unknown config key '" + name + "'");
      set_config_value(cfg, name, value.data());
    }
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  apply_ini(cfg, in);
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config file " + path.string());
  RunConfig cfg;
  apply_ini(cfg, in, path.string());
  return cfg;
}

/// Normalized text form; parse_config(to_ini(c)) reproduces c.
inline std::string to_ini(const RunConfig& cfg) {
  std::ostringstream out;
  std::string section;
  for (const auto& f : config_detail::fields()) {
    if (f.section != section) {
      if (!section.empty()) out << '\n';
      section = f.section;
      out << '[' << section << "]\n";
    }
    out << f.key << " = " << f.get(cfg) << '\n';
  }
  return out.str();
}

}  // namespace dda
