#pragma once

// Command implementations behind the `dda` executable. Each command gets a
// fresh run directory:
//
//   <out>/<UTC timestamp>-<command>[-n]/
//     config.ini          effective configuration (re-runs to identical results)
//     checkpoints/        last/ and best/ snapshots
//     synth_cache/        round-NN/ synthesized sources
//     aug_cache/          round-NN/ retained variants + per-variant manifest
//     metrics.records     JSON lines
//     report.txt, report.json
//     plots/              SVG charts

#include <sys/wait.h>
#include <unistd.h>

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>

#include "dda/checkpoint.hpp"
#include "dda/config.hpp"
#include "dda/dataset.hpp"
#include "dda/plot.hpp"
#include "dda/remote_diffusion.hpp"

namespace dda::harness {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Run directories and records

inline std::string utc_stamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream o;
  o << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return o.str();
}

/// Creates `<base>/<stamp>-<label>`, adding a numeric suffix instead of reusing
/// an existing directory.
inline fs::path make_run_dir(const fs::path& base, const std::string& label) {
  fs::create_directories(base);
  const std::string stem = utc_stamp() + "-" + label;
  for (int n = 1;; ++n) {
    const fs::path p = base / (n == 1 ? stem : stem + "-" + std::to_string(n));
    if (fs::create_directory(p)) return p;
  }
}

inline void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  out << text;
  if (!out) throw Error("failed to write " + path.string());
}

class RecordWriter {
 public:
  explicit RecordWriter(fs::path path) : path_(std::move(path)) {}
  void write(const json& rec) {
    std::ofstream out(path_, std::ios::app);
    out << rec.dump() << '\n';
    if (!out) throw Error("failed to append to " + path_.string());
  }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

inline std::vector<json> read_records(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("no metrics records at " + path.string());
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw FormatError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

inline json nan_to_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
inline json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// ---------------------------------------------------------------------------
// Shared setup

inline fs::path manifest_path(const RunConfig& cfg) {
  return resolve_data_root(cfg.data_root) / cfg.dataset / "manifest.json";
}

/// Applies the environment data-root override so the echoed config records
/// the directory actually read.
inline RunConfig effective(RunConfig cfg) {
  cfg.data_root = resolve_data_root(cfg.data_root).string();
  cfg.validate();
  return cfg;
}

inline std::unique_ptr<DiffusionBackend> make_backend(const RunConfig& cfg) {
  if (cfg.backend == "remote") {
    RemoteDiffusionConfig r;
    r.endpoint = cfg.endpoint;
    r.steps = cfg.hp.diffusion_steps;
    r.guidance_scale = cfg.hp.guidance_scale;
    r.timeout_ms = cfg.timeout_ms;
    r.max_in_flight = cfg.max_in_flight;
    return std::make_unique<RemoteDiffusion>(r);
  }
  return std::make_unique<SurrogateDiffusion>(cfg.diffusion_config());
}

inline std::vector<fs::path> write_plots(const fs::path& run_dir);

/// Plots are a convenience; a rendering problem never fails the command.
inline void try_plots(const fs::path& run_dir) {
  try {
    write_plots(run_dir);
  } catch (const std::exception& e) {
    log::warn(std::string("plots skipped: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// train-teacher

struct TeacherResult {
  fs::path run_dir;
  fs::path checkpoint;
  double test_accuracy = 0.0;
  std::vector<SupervisedEpoch> epochs;
};

inline TeacherResult train_teacher(const RunConfig& input) {
  const RunConfig cfg = effective(input);
  const auto manifest = read_manifest(manifest_path(cfg));
  const auto train = load_split(manifest, "train");
  const auto test = load_split(manifest, "test");

  TeacherResult res;
  res.run_dir = make_run_dir(cfg.out, "train-teacher");
  write_text(res.run_dir / "config.ini", to_ini(cfg));
  RecordWriter records(res.run_dir / "metrics.records");

  ConvClassifierConfig mc;
  mc.input = manifest.shape;
  mc.labels = manifest.classes;
  mc.widths = cfg.teacher_widths;
  mc.input_mean.assign(manifest.shape.channels, 0.5);
  mc.input_std.assign(manifest.shape.channels, 0.5);
  Rng init(derive_seed(cfg.seed, 7));
  ConvClassifier teacher(mc, init);

  SupervisedConfig sc = cfg.teacher_train;
  sc.seed = derive_seed(cfg.seed, 8);
  log::info("training teacher on " + manifest.name + " (" + std::to_string(train.size()) + " images)");
  res.epochs = train_supervised(teacher, train, sc, &test);
  for (const auto& e : res.epochs) {
    records.write({{"kind", "teacher-epoch"}, {"epoch", e.epoch}, {"loss", e.loss},
                   {"train_accuracy", e.train_accuracy}, {"test_accuracy", opt_json(e.test_accuracy)},
                   {"seconds", e.seconds}});
  }
  res.test_accuracy = accuracy(teacher, test);
  const json extra = {{"dataset", manifest.name}, {"test_accuracy", res.test_accuracy}, {"seed", cfg.seed}};
  save_checkpoint(res.run_dir / "checkpoints" / "teacher", teacher, extra);
  res.checkpoint = cfg.teacher_checkpoint;
  save_checkpoint(res.checkpoint, teacher, extra);

  std::ostringstream rep;
  rep << "command: train-teacher\n"
      << "dataset: " << manifest.name << " (" << train.size() << " train / " << test.size() << " test)\n"
      << "architecture: bn-cnn widths " << config_detail::fmt(cfg.teacher_widths) << "\n"
      << "epochs: " << sc.epochs << "\n"
      << std::setprecision(6) << "test accuracy: " << res.test_accuracy << "\n"
      << "checksum: " << checksum(teacher) << "\n"
      << "checkpoint: " << res.checkpoint.string() << "\n";
  write_text(res.run_dir / "report.txt", rep.str());
  write_text(res.run_dir / "report.json",
             json{{"command", "train-teacher"}, {"test_accuracy", res.test_accuracy},
                  {"checkpoint", res.checkpoint.string()}, {"checksum", checksum(teacher)}}
                     .dump(2) + "\n");
  try_plots(res.run_dir);
  return res;
}

// ---------------------------------------------------------------------------
// distill

struct DistillResult {
  fs::path run_dir;
  RunReport report;
  std::optional<double> teacher_accuracy;
  std::optional<std::array<double, 3>> fid_sources, fid_augmented;
  std::optional<SimilarityProfile> similarity;
  double mean_similarity = std::numeric_limits<double>::quiet_NaN();
};

namespace detail {

inline json round_json(const RoundReport& r) {
  json epochs = json::array();
  for (const auto& e : r.epochs) {
    epochs.push_back({{"epoch", e.epoch}, {"steps", e.steps}, {"kd", e.kd}, {"self_sup", e.self_sup},
                      {"total", e.total}, {"seconds", e.seconds}, {"images_per_second", e.images_per_second}});
  }
  return {{"round", r.round},
          {"synthesis",
           {{"total", r.synthesis.total}, {"cls", r.synthesis.cls}, {"bn", r.synthesis.bn},
            {"contrastive", r.synthesis.contrastive}, {"step", r.synthesis.step}}},
          {"label_agreement", r.label_agreement},
          {"sources", r.sources},
          {"variants", r.variants},
          {"retained", r.retained},
          {"fallback_sources", r.fallback_sources},
          {"retained_fraction", r.retained_fraction},
          {"mean_similarity", nan_to_null(r.mean_similarity)},
          {"augmentation_degraded", r.augmentation_degraded},
          {"pool_size", r.pool_size},
          {"student_accuracy", opt_json(r.student_accuracy)},
          {"seconds", r.seconds},
          {"epochs", epochs}};
}

inline std::string round_dir(std::size_t r) {
  std::ostringstream o;
  o << "round-" << std::setw(2) << std::setfill('0') << r;
  return o.str();
}

inline json fid_json(const std::optional<std::array<double, 3>>& f) {
  if (!f) return nullptr;
  json j;
  for (std::size_t d = 0; d < 3; ++d) j[kFidDepths[d]] = (*f)[d];
  return j;
}

}  // namespace detail

/// Runs the full loop for one configuration. Pipeline faults do not throw:
/// the returned report names the failing stage. Setup problems (missing
/// teacher, bad backend address) throw.
inline DistillResult distill(const RunConfig& input, const fs::path& run_dir_override = {}) {
  const RunConfig cfg = effective(input);
  const DistillOptions dopt = cfg.distill_options();

  if (!fs::exists(fs::path(cfg.teacher_checkpoint) / "metadata.json")) {
    throw Error("teacher checkpoint not found at " + cfg.teacher_checkpoint + "; run `dda train-teacher` first");
  }
  auto teacher_ptr = load_classifier(cfg.teacher_checkpoint);
  auto* teacher = dynamic_cast<ConvClassifier*>(teacher_ptr.get());
  if (!teacher) throw Error("distillation needs a bn-cnn teacher, got '" + teacher_ptr->architecture() + "'");

  std::optional<ImageBatch> test;
  std::string dataset_name = cfg.dataset;
  try {
    const auto manifest = read_manifest(manifest_path(cfg));
    test = load_split(manifest, "test");
    dataset_name = manifest.name;
  } catch (const Error& e) {
    log::warn(std::string("no evaluation data, accuracy will not be reported: ") + e.what());
  }

  DistillResult res;
  if (run_dir_override.empty()) {
    res.run_dir = make_run_dir(cfg.out, "distill");
  } else {
    res.run_dir = run_dir_override;
    fs::create_directories(res.run_dir);
  }
  const fs::path dir = res.run_dir;
  write_text(dir / "config.ini", to_ini(cfg));
  RecordWriter records(dir / "metrics.records");

  const ImageShape shape = teacher->input_shape();
  const std::size_t classes = teacher->label_count();
  Rng init(derive_seed(cfg.seed, 3));
  ConvClassifierConfig sc = teacher->config();
  sc.widths = cfg.student_widths;
  ConvClassifier student(sc, init);
  GeneratorConfig gc = cfg.generator;
  gc.output = shape;
  Generator generator(gc, init);
  DiscriminatorConfig dc = cfg.discriminator;
  dc.input_dim = discriminator_input_dim(*teacher);
  Discriminator discriminator(dc, init);
  MemoryBank bank(cfg.bank_capacity, shape);
  std::unique_ptr<DiffusionBackend> backend;
  if (dopt.use_diffusion) backend = make_backend(cfg);

  if (test) res.teacher_accuracy = accuracy(*teacher, *test);

  std::vector<Tensor> all_sources, all_retained;
  std::vector<double> all_sims;
  std::optional<double> best;
  auto hook = [&](const RoundReport& rr, const ImageBatch& synth, const std::vector<AugmentationRecord>& recs) {
    const std::string rd = detail::round_dir(rr.round);
    write_dataset(dir / "synth_cache" / rd, "synth-" + rd, synth, classes, "all", {{"round", rr.round}});
    for (std::size_t i = 0; i < synth.size(); ++i) all_sources.push_back(synth.image(i));
    if (!recs.empty()) {
      json entries = json::array();
      std::vector<Tensor> kept;
      std::vector<std::size_t> kept_labels;
      for (const auto& rec : recs) {
        for (std::size_t k = 0; k < rec.variants.size(); ++k) {
          entries.push_back({{"source_id", rec.source_id}, {"variant", k}, {"seed", rec.seeds[k]},
                             {"similarity", rec.similarities[k]}, {"retained", static_cast<bool>(rec.mask[k])},
                             {"self_loss", rec.self_losses[k]}, {"intensity", rec.intensity}, {"label", rec.label}});
          if (rec.mask[k]) {
            kept.push_back(rec.variants[k]);
            kept_labels.push_back(rec.label);
          }
        }
        all_sims.insert(all_sims.end(), rec.similarities.begin(), rec.similarities.end());
      }
      const json extra = {{"round", rr.round}, {"omega", cfg.hp.omega}, {"filter", dopt.use_filter},
                          {"backend", backend ? backend->version() : ""}, {"variants", entries}};
      ImageBatch kept_batch;
      if (!kept.empty()) kept_batch = ImageBatch(stack_images(kept), kept_labels);
      if (kept.empty()) {
        fs::create_directories(dir / "aug_cache" / rd);
        write_text(dir / "aug_cache" / rd / "manifest.json", json(extra).dump(2) + "\n");
      } else {
        write_dataset(dir / "aug_cache" / rd, "aug-" + rd, kept_batch, classes, "all", extra);
      }
      all_retained.insert(all_retained.end(), kept.begin(), kept.end());
    }

    const fs::path ck = dir / "checkpoints";
    const json meta = {{"round", rr.round}, {"student_accuracy", opt_json(rr.student_accuracy)}};
    save_checkpoint(ck / "last" / "student", student, meta);
    save_checkpoint(ck / "last" / "generator", generator, meta);
    save_checkpoint(ck / "last" / "discriminator", discriminator, meta);
    bank.save(ck / "last" / "bank.bin");
    if (rr.student_accuracy && (!best || *rr.student_accuracy > *best)) {
      best = rr.student_accuracy;
      save_checkpoint(ck / "best" / "student", student, meta);
      save_checkpoint(ck / "best" / "generator", generator, meta);
      save_checkpoint(ck / "best" / "discriminator", discriminator, meta);
      bank.save(ck / "best" / "bank.bin");
    }

    json rj = detail::round_json(rr);
    rj["kind"] = "round";
    records.write(rj);
  };

  DistillComponents comps{teacher, &student, &generator, &discriminator, &bank, backend.get()};
  log::info("distilling: " + std::to_string(cfg.schedule.rounds) + " rounds, ablation " + cfg.ablate + ", seed " +
            std::to_string(cfg.seed));
  res.report = run_dda(comps, cfg.hp, cfg.schedule, dopt, test ? &*test : nullptr, hook);
  const RunReport& rep = res.report;

  for (const auto& h : rep.history) {
    records.write({{"kind", "step"}, {"round", h.round}, {"epoch", h.epoch}, {"step", h.step}, {"kd", h.kd},
                   {"synth", h.synth}, {"self_sup", h.self_sup}, {"total", h.total}, {"lr", h.lr}});
  }

  if (!all_sims.empty()) {
    res.similarity = similarity_profile(all_sims);
    res.mean_similarity = res.similarity->mean;
  }
  if (test && rep.ok()) {
    try {
      const auto real = depth_summaries(*teacher, test->images);
      if (all_sources.size() >= 2) res.fid_sources = fid_block(depth_summaries(*teacher, stack_images(all_sources)), real);
      if (all_retained.size() >= 2) {
        res.fid_augmented = fid_block(depth_summaries(*teacher, stack_images(all_retained)), real);
      }
    } catch (const Error& e) {
      log::warn(std::string("FID skipped: ") + e.what());
    }
  }

  json rounds = json::array();
  for (const auto& r : rep.rounds) rounds.push_back(detail::round_json(r));
  json sim = nullptr;
  if (res.similarity) {
    sim = {{"count", res.similarity->count}, {"mean", res.similarity->mean},
           {"quantile_levels", res.similarity->quantile_levels}, {"quantiles", res.similarity->quantiles},
           {"omega_grid", res.similarity->omega_grid}, {"retained_fraction", res.similarity->retained_fraction}};
  }
  const json summary = {{"command", "distill"},
                        {"dataset", dataset_name},
                        {"seed", cfg.seed},
                        {"ablation", cfg.ablate},
                        {"omega", cfg.hp.omega},
                        {"backend", backend ? backend->version() : "none"},
                        {"teacher_accuracy", opt_json(res.teacher_accuracy)},
                        {"initial_accuracy", opt_json(rep.initial_accuracy)},
                        {"final_accuracy", opt_json(rep.final_accuracy)},
                        {"best_accuracy", opt_json(rep.best_accuracy)},
                        {"best_round", rep.best_round},
                        {"mean_similarity", nan_to_null(res.mean_similarity)},
                        {"similarity_profile", sim},
                        {"fid_sources", detail::fid_json(res.fid_sources)},
                        {"fid_augmented", detail::fid_json(res.fid_augmented)},
                        {"teacher_checksum_before", rep.teacher_checksum_before},
                        {"teacher_checksum_after", rep.teacher_checksum_after},
                        {"teacher_frozen", rep.teacher_checksum_before == rep.teacher_checksum_after},
                        {"ok", rep.ok()},
                        {"failed_stage", rep.failed_stage},
                        {"failure", rep.failure},
                        {"seconds", rep.seconds},
                        {"rounds", rounds}};
  json srec = summary;
  srec.erase("rounds");
  srec["kind"] = "summary";
  records.write(srec);
  write_text(dir / "report.json", summary.dump(2) + "\n");

  std::ostringstream t;
  t << std::fixed << std::setprecision(4);
  t << "command: distill\n"
    << "dataset: " << dataset_name << "\n"
    << "seed: " << cfg.seed << "  ablation: " << cfg.ablate << "  omega: " << cfg.hp.omega
    << "  backend: " << (backend ? backend->version() : "none") << "\n";
  if (res.teacher_accuracy) t << "teacher accuracy: " << *res.teacher_accuracy << "\n";
  t << "\nround  agree   sources variants retained fallback  mean_sim  pool   acc      sec\n";
  for (const auto& r : rep.rounds) {
    t << std::setw(5) << r.round << "  " << r.label_agreement << "  " << std::setw(7) << r.sources << ' '
      << std::setw(8) << r.variants << ' ' << std::setw(8) << r.retained << ' ' << std::setw(8)
      << r.fallback_sources << "  " << std::setw(8) << r.mean_similarity << ' ' << std::setw(5) << r.pool_size
      << "  " << (r.student_accuracy ? *r.student_accuracy : std::nan("")) << "  " << std::setw(7) << r.seconds
      << "\n";
  }
  t << "\n";
  if (rep.final_accuracy) t << "final student accuracy: " << *rep.final_accuracy << "\n";
  if (rep.best_accuracy) t << "best student accuracy: " << *rep.best_accuracy << " (round " << rep.best_round << ")\n";
  if (res.teacher_accuracy && rep.final_accuracy && *res.teacher_accuracy > 0) {
    t << "student / teacher: " << *rep.final_accuracy / *res.teacher_accuracy << "\n";
  }
  if (res.similarity) t << "mean variant similarity: " << res.similarity->mean << "\n";
  if (res.fid_sources || res.fid_augmented) {
    t << "\nFID vs test set      first-pool  second-pool  final-pool\n";
    auto row = [&](const char* name, const std::optional<std::array<double, 3>>& f) {
      if (!f) return;
      t << std::setw(20) << std::left << name << std::right;
      for (double v : *f) t << std::setw(12) << v;
      t << "\n";
    };
    row("synthesized", res.fid_sources);
    row("augmented", res.fid_augmented);
  }
  t << "\nteacher checksum: " << rep.teacher_checksum_before << " -> " << rep.teacher_checksum_after
    << (rep.teacher_checksum_before == rep.teacher_checksum_after ? " (unchanged)" : " (CHANGED)") << "\n"
    << "wall time: " << rep.seconds << " s\n"
    << "status: " << (rep.ok() ? "ok" : "failed in " + rep.failed_stage + ": " + rep.failure) << "\n";
  write_text(dir / "report.txt", t.str());
  try_plots(dir);
  return res;
}

// ---------------------------------------------------------------------------
// sweep

struct SweepPlan {
  std::string parameter;            // canonical section.key
  std::vector<std::string> values;  // as given
  std::vector<std::uint64_t> seeds;
};

/// Accepts a full `section.key` or an unambiguous bare key.
inline std::string resolve_parameter(const std::string& name) {
  if (config_detail::find(name)) {
    if (!is_sweepable(name)) throw Error("sweep parameter '" + name + "' is not numeric");
    return name;
  }
  std::vector<std::string> hits;
  for (const auto& k : config_keys())
    if (k.substr(k.find('.') + 1) == name) hits.push_back(k);
  if (hits.empty()) throw Error("unknown sweep parameter '" + name + "'");
  if (hits.size() > 1) throw Error("ambiguous sweep parameter '" + name + "'; use section.key");
  return resolve_parameter(hits.front());
}

/// Validates the whole plan before any run starts.
inline SweepPlan plan_sweep(const RunConfig& cfg, const std::string& parameter, std::vector<std::string> values,
                            std::vector<std::uint64_t> seeds) {
  SweepPlan p;
  p.parameter = resolve_parameter(parameter);
  std::erase_if(values, [](const std::string& v) { return v.empty(); });
  for (const auto& v : values) {
    RunConfig probe = cfg;
    set_config_value(probe, p.parameter, v);
    probe.validate();
  }
  p.values = std::move(values);
  p.seeds = seeds.empty() ? std::vector<std::uint64_t>{cfg.seed} : std::move(seeds);
  return p;
}

struct SweepRun {
  std::string value;
  std::uint64_t seed = 0;
  fs::path run_dir;
  bool ok = false;
  std::string failure;
  std::optional<double> accuracy;
  double mean_similarity = std::numeric_limits<double>::quiet_NaN();
};

struct SweepRow {
  std::string value;
  std::optional<double> accuracy;  // mean over seeds
  double mean_similarity = std::numeric_limits<double>::quiet_NaN();
  std::size_t failures = 0;
};

struct SweepResult {
  fs::path run_dir;
  SweepPlan plan;
  std::vector<SweepRun> runs;
  std::vector<SweepRow> rows;
  bool ok() const {
    for (const auto& r : runs)
      if (!r.ok) return false;
    return true;
  }
};

namespace detail {
inline SweepRun read_sweep_run(SweepRun run) {
  try {
    const auto j = json::parse(::dda::detail::read_file(run.run_dir / "report.json"));
    run.ok = j.at("ok").get<bool>();
    run.failure = j.value("failure", "");
    if (!j.at("final_accuracy").is_null()) run.accuracy = j["final_accuracy"].get<double>();
    if (!j.at("mean_similarity").is_null()) run.mean_similarity = j["mean_similarity"].get<double>();
  } catch (const std::exception& e) {
    run.ok = false;
    run.failure = std::string("no usable report: ") + e.what();
  }
  return run;
}
}  // namespace detail

/// One run per (value, seed). `jobs > 1` forks that many worker processes,
/// each owning its run directory.
inline SweepResult sweep(const RunConfig& input, const SweepPlan& plan, std::size_t jobs = 1) {
  const RunConfig cfg = effective(input);
  SweepResult res;
  res.plan = plan;
  std::string tag = plan.parameter;
  std::replace(tag.begin(), tag.end(), '.', '-');
  res.run_dir = make_run_dir(cfg.out, "sweep-" + tag);
  write_text(res.run_dir / "config.ini", to_ini(cfg));

  std::vector<std::pair<RunConfig, SweepRun>> work;
  for (const auto& v : plan.values)
    for (auto s : plan.seeds) {
      RunConfig c = cfg;
      set_config_value(c, plan.parameter, v);
      c.seed = s;
      SweepRun r;
      r.value = v;
      r.seed = s;
      r.run_dir = res.run_dir / "runs" / (tag + "=" + v + "-seed" + std::to_string(s));
      work.emplace_back(std::move(c), std::move(r));
    }

  if (jobs <= 1) {
    for (auto& [c, r] : work) {
      try {
        distill(c, r.run_dir);
      } catch (const std::exception& e) {
        write_text(r.run_dir / "report.json", json{{"ok", false}, {"failure", e.what()}}.dump() + "\n");
      }
      res.runs.push_back(detail::read_sweep_run(r));
    }
  } else {
    std::size_t next = 0, running = 0;
    auto reap = [&] {
      int status = 0;
      if (::wait(&status) > 0) --running;
    };
    for (; next < work.size(); ++next) {
      while (running >= jobs) reap();
      std::cout.flush();
      std::cerr.flush();
      const pid_t pid = ::fork();
      if (pid < 0) throw Error("fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          code = distill(work[next].first, work[next].second.run_dir).report.ok() ? 0 : 2;
        } catch (const std::exception& e) {
          write_text(work[next].second.run_dir / "report.json",
                     json{{"ok", false}, {"failure", e.what()}}.dump() + "\n");
          code = 2;
        }
        std::cout.flush();
        std::cerr.flush();
        ::_exit(code);
      }
      ++running;
    }
    while (running > 0) reap();
    for (auto& [c, r] : work) res.runs.push_back(detail::read_sweep_run(r));
  }

  for (const auto& v : plan.values) {
    SweepRow row;
    row.value = v;
    double acc = 0, sim = 0;
    std::size_t na = 0, ns = 0;
    for (const auto& r : res.runs) {
      if (r.value != v) continue;
      if (!r.ok) ++row.failures;
      if (r.accuracy) acc += *r.accuracy, ++na;
      if (std::isfinite(r.mean_similarity)) sim += r.mean_similarity, ++ns;
    }
    if (na) row.accuracy = acc / static_cast<double>(na);
    if (ns) row.mean_similarity = sim / static_cast<double>(ns);
    res.rows.push_back(row);
  }

  std::ostringstream tsv;
  tsv << "value\taccuracy\tmean_similarity\truns\tfailures\n";
  json jrows = json::array(), jruns = json::array();
  for (const auto& row : res.rows) {
    tsv << row.value << '\t' << (row.accuracy ? std::to_string(*row.accuracy) : "NA") << '\t'
        << (std::isfinite(row.mean_similarity) ? std::to_string(row.mean_similarity) : "NA") << '\t'
        << plan.seeds.size() << '\t' << row.failures << '\n';
    jrows.push_back({{"value", row.value}, {"accuracy", opt_json(row.accuracy)},
                     {"mean_similarity", nan_to_null(row.mean_similarity)}, {"failures", row.failures}});
  }
  for (const auto& r : res.runs) {
    jruns.push_back({{"value", r.value}, {"seed", r.seed}, {"run_dir", r.run_dir.string()}, {"ok", r.ok},
                     {"failure", r.failure}, {"accuracy", opt_json(r.accuracy)},
                     {"mean_similarity", nan_to_null(r.mean_similarity)}});
  }
  write_text(res.run_dir / "results.tsv", tsv.str());
  write_text(res.run_dir / "sweep.json",
             json{{"command", "sweep"}, {"parameter", plan.parameter}, {"seeds", plan.seeds}, {"rows", jrows},
                  {"runs", jruns}}
                     .dump(2) + "\n");
  RecordWriter(res.run_dir / "metrics.records").write({{"kind", "sweep"}, {"parameter", plan.parameter}, {"rows", jrows}});
  std::ostringstream rep;
  rep << "command: sweep\nparameter: " << plan.parameter << "\nseeds: " << plan.seeds.size() << "\n\n" << tsv.str();
  write_text(res.run_dir / "report.txt", rep.str());
  try_plots(res.run_dir);
  return res;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateResult {
  fs::path run_dir;
  double accuracy = 0.0;
  std::size_t images = 0;
  std::optional<std::array<double, 3>> fid;
};

inline std::string pick_split(const DatasetManifest& m, const std::string& preferred) {
  if (m.splits.count(preferred)) return preferred;
  if (m.splits.empty()) throw Error("dataset '" + m.name + "' lists no splits");
  return m.splits.begin()->first;
}

/// Accuracy of `checkpoint` on `dataset_manifest`'s split; with
/// `fid_manifest`, the three-depth FID between the two image sets in the
/// checkpoint's feature space.
inline EvaluateResult evaluate(const RunConfig& input, const fs::path& checkpoint, fs::path dataset_manifest,
                               const std::string& split, const fs::path& fid_manifest = {}) {
  const RunConfig cfg = effective(input);
  if (dataset_manifest.empty()) dataset_manifest = manifest_path(cfg);
  auto model = load_classifier(checkpoint);
  const auto m = read_manifest(dataset_manifest);
  const auto data = load_split(m, pick_split(m, split));

  EvaluateResult res;
  res.run_dir = make_run_dir(cfg.out, "evaluate");
  res.images = data.size();
  res.accuracy = accuracy(*model, data);
  if (!fid_manifest.empty()) {
    const auto fm = read_manifest(fid_manifest);
    const auto other = load_split(fm, pick_split(fm, split));
    res.fid = fid_block(depth_summaries(*model, data.images), depth_summaries(*model, other.images));
  }

  std::ostringstream t;
  t << std::fixed << std::setprecision(6) << "command: evaluate\n"
    << "checkpoint: " << checkpoint.string() << "\n"
    << "dataset: " << dataset_manifest.string() << " (" << data.size() << " images)\n"
    << "accuracy: " << res.accuracy << "\n";
  if (res.fid) {
    t << "fid against: " << fid_manifest.string() << "\n"
      << "first-pool  second-pool  final-pool\n"
      << (*res.fid)[0] << "  " << (*res.fid)[1] << "  " << (*res.fid)[2] << "\n";
  }
  write_text(res.run_dir / "report.txt", t.str());
  const json j = {{"kind", "evaluation"}, {"checkpoint", checkpoint.string()}, {"dataset", dataset_manifest.string()},
                  {"images", data.size()}, {"accuracy", res.accuracy}, {"fid", detail::fid_json(res.fid)}};
  write_text(res.run_dir / "report.json", j.dump(2) + "\n");
  RecordWriter(res.run_dir / "metrics.records").write(j);
  return res;
}

// ---------------------------------------------------------------------------
// plot

/// Renders SVG charts for whatever records `run_dir` holds; returns the files written.
inline std::vector<fs::path> write_plots(const fs::path& run_dir) {
  using plot::Series;
  const auto recs = read_records(run_dir / "metrics.records");
  const fs::path out = run_dir / "plots";
  std::vector<fs::path> written;
  auto emit = [&](const std::string& name, const std::string& svg) {
    write_text(out / name, svg);
    written.push_back(out / name);
  };
  auto num = [](const json& v) { return v.is_number() ? v.get<double>() : std::nan(""); };

  Series acc{"student"}, agree{"label agreement"}, frac{"retained fraction"}, sim{"mean similarity"};
  Series s_tot{"total"}, s_cls{"class prior"}, s_bn{"bn"}, s_ctr{"contrastive"};
  Series kd{"kd"}, self{"self-supervised"}, total{"total"};
  Series t_loss{"loss"}, t_train{"train"}, t_test{"test"};
  std::optional<double> teacher_acc;
  const json* sweep_rec = nullptr;
  for (const auto& r : recs) {
    const auto kind = r.value("kind", "");
    if (kind == "round") {
      const double x = r.at("round").get<double>();
      acc.x.push_back(x), acc.y.push_back(num(r["student_accuracy"]));
      agree.x.push_back(x), agree.y.push_back(num(r["label_agreement"]));
      frac.x.push_back(x), frac.y.push_back(num(r["retained_fraction"]));
      sim.x.push_back(x), sim.y.push_back(num(r["mean_similarity"]));
      const auto& sy = r["synthesis"];
      for (auto* s : {&s_tot, &s_cls, &s_bn, &s_ctr}) s->x.push_back(x);
      s_tot.y.push_back(num(sy["total"])), s_cls.y.push_back(num(sy["cls"]));
      s_bn.y.push_back(num(sy["bn"])), s_ctr.y.push_back(num(sy["contrastive"]));
    } else if (kind == "step") {
      const double x = r.at("step").get<double>();
      for (auto* s : {&kd, &self, &total}) s->x.push_back(x);
      kd.y.push_back(num(r["kd"])), self.y.push_back(num(r["self_sup"])), total.y.push_back(num(r["total"]));
    } else if (kind == "summary") {
      if (r.contains("teacher_accuracy") && r["teacher_accuracy"].is_number()) teacher_acc = r["teacher_accuracy"];
    } else if (kind == "teacher-epoch") {
      const double x = r.at("epoch").get<double>();
      for (auto* s : {&t_loss, &t_train, &t_test}) s->x.push_back(x);
      t_loss.y.push_back(num(r["loss"])), t_train.y.push_back(num(r["train_accuracy"]));
      t_test.y.push_back(num(r["test_accuracy"]));
    } else if (kind == "sweep") {
      sweep_rec = &r;
    }
  }
  if (!acc.x.empty()) {
    std::vector<Series> s{acc, agree};
    if (teacher_acc) s.push_back({"teacher", {acc.x.front(), acc.x.back()}, {*teacher_acc, *teacher_acc}});
    emit("accuracy.svg", plot::line_chart("Student accuracy per round", "round", "accuracy", s));
    emit("filtering.svg", plot::line_chart("Augmentation filtering", "round", "value", {frac, sim}));
    emit("synthesis.svg", plot::line_chart("Synthesis objective (best step)", "round", "loss", {s_tot, s_cls, s_bn, s_ctr}));
  }
  if (!kd.x.empty()) emit("losses.svg", plot::line_chart("Student losses", "step", "loss", {kd, self, total}));
  if (!t_loss.x.empty()) {
    emit("teacher_loss.svg", plot::line_chart("Teacher training loss", "epoch", "loss", {t_loss}));
    emit("teacher_accuracy.svg", plot::line_chart("Teacher accuracy", "epoch", "accuracy", {t_train, t_test}));
  }
  if (sweep_rec) {
    const std::string param = sweep_rec->value("parameter", "value");
    Series a{"accuracy"}, m{"mean similarity"};
    for (const auto& row : sweep_rec->at("rows")) {
      double x;
      try {
        x = std::stod(row.at("value").get<std::string>());
      } catch (const std::exception&) {
        continue;
      }
      a.x.push_back(x), a.y.push_back(num(row["accuracy"]));
      m.x.push_back(x), m.y.push_back(num(row["mean_similarity"]));
    }
    emit("sweep_accuracy.svg", plot::line_chart("Accuracy vs " + param, param, "accuracy", {a}));
    emit("sweep_similarity.svg", plot::line_chart("Mean similarity vs " + param, param, "cosine", {m}));
  }
  return written;
}

}  // namespace dda::harness
