// dda: command-line front end.
//
//   dda train-teacher --config desk.cfg
//   dda distill --config desk.cfg --seed 1 --omega 0.75
//   dda sweep --config desk.cfg --param omega --values=-1,0.5,0.75,0.95 --seeds 0,1,2
//   dda evaluate --checkpoint runs/teacher --fid against runs/.../aug_cache/round-09/manifest.json
//   dda plot --run runs/20260101-120000-distill
//
// Exit codes: 0 success, 1 usage error, 2 pipeline fault.

#include "dda/harness.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

using namespace dda;

constexpr int kOk = 0, kUsage = 1, kFault = 2;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> omega;
  std::optional<std::string> ablate, backend, endpoint, out;
  std::vector<std::string> sets;

  void attach(CLI::App& cmd) {
    cmd.add_option("--config", config, "configuration file (INI sections per module)")->check(CLI::ExistingFile);
    cmd.add_option("--seed", seed, "run seed");
    cmd.add_option("--omega", omega, "cosine-similarity threshold for retained variants");
    cmd.add_option("--ablate", ablate, "disable components")
        ->check(CLI::IsMember({"none", "no-diffusion", "no-filter", "both"}));
    cmd.add_option("--backend", backend, "diffusion backend")->check(CLI::IsMember({"surrogate", "remote"}));
    cmd.add_option("--endpoint", endpoint, "remote diffusion endpoint, http://host:port/path");
    cmd.add_option("--out", out, "directory receiving run directories");
    cmd.add_option("--set", sets, "override any key, section.key=value (repeatable)");
  }

  /// File values first, then flags.
  RunConfig build() const {
    RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw Error("--set expects section.key=value, got '" + s + "'");
      set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (omega) cfg.hp.omega = *omega;
    if (ablate) cfg.ablate = *ablate;
    if (backend) cfg.backend = *backend;
    if (endpoint) cfg.endpoint = *endpoint;
    if (out) cfg.out = *out;
    cfg.validate();
    return cfg;
  }
};

void print_fid(const std::array<double, 3>& f, const char* label) {
  std::cout << "fid " << label << ":";
  for (std::size_t d = 0; d < 3; ++d) std::cout << ' ' << kFidDepths[d] << '=' << f[d];
  std::cout << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-free distillation with diffusion augmentation"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string level = "info";
  app.add_option("--log-level", level, "debug, info, warn or error")
      ->check(CLI::IsMember({"debug", "info", "warn", "error"}));

  CommonFlags teacher_flags, distill_flags, sweep_flags, eval_flags;

  auto* teacher = app.add_subcommand("train-teacher", "train the teacher on labeled data");
  teacher_flags.attach(*teacher);

  auto* distill = app.add_subcommand("distill", "run data-free distillation into a student");
  distill_flags.attach(*distill);

  auto* sweep = app.add_subcommand("sweep", "one distillation run per parameter value");
  sweep_flags.attach(*sweep);
  std::string param;
  std::vector<std::string> values;
  std::vector<std::uint64_t> seeds;
  std::size_t jobs = 1;
  sweep->add_option("--param", param, "config key to vary (section.key or bare key)")->required();
  sweep->add_option("--values", values, "comma-separated values")->delimiter(',')->expected(0, -1)->required();
  sweep->add_option("--seeds", seeds, "seeds to average over (default: the run seed)")->delimiter(',');
  sweep->add_option("--jobs", jobs, "parallel worker processes")->check(CLI::PositiveNumber);

  auto* evaluate = app.add_subcommand("evaluate", "accuracy of a checkpoint, optionally with a FID block");
  eval_flags.attach(*evaluate);
  std::string checkpoint, dataset, split = "test";
  std::vector<std::string> fid_args;
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
  evaluate->add_option("--dataset", dataset, "dataset manifest (default: the configured dataset)");
  evaluate->add_option("--split", split, "split to evaluate");
  evaluate->add_option("--fid", fid_args, "[against] MANIFEST: three-depth FID against another image set")
      ->expected(1, 2);

  auto* plot = app.add_subcommand("plot", "render SVG charts for a run directory");
  std::string run_dir;
  plot->add_option("--run", run_dir, "run directory")->required()->check(CLI::ExistingDirectory);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (level == "debug") log::set_level(log::Level::debug);
  if (level == "warn") log::set_level(log::Level::warn);
  if (level == "error") log::set_level(log::Level::error);

  // Usage phase: configuration and arguments.
  RunConfig cfg;
  std::optional<harness::SweepPlan> plan;
  std::string fid_manifest;
  try {
    if (teacher->parsed()) cfg = teacher_flags.build();
    if (distill->parsed()) cfg = distill_flags.build();
    if (evaluate->parsed()) {
      cfg = eval_flags.build();
      if (!fid_args.empty()) {
        if (fid_args.size() == 2 && fid_args[0] != "against") throw Error("use --fid [against] MANIFEST");
        fid_manifest = fid_args.back();
      }
    }
    if (sweep->parsed()) {
      cfg = sweep_flags.build();
      plan = harness::plan_sweep(cfg, param, values, seeds);
    }
  } catch (const std::exception& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kUsage;
  }

  // Execution phase.
  try {
    if (teacher->parsed()) {
      const auto r = harness::train_teacher(cfg);
      std::cout << "teacher test accuracy: " << r.test_accuracy << '\n'
                << "checkpoint: " << r.checkpoint.string() << '\n'
                << "run directory: " << r.run_dir.string() << '\n';
      return kOk;
    }
    if (distill->parsed()) {
      const auto r = harness::distill(cfg);
      const auto& rep = r.report;
      if (rep.final_accuracy) std::cout << "student accuracy: " << *rep.final_accuracy << '\n';
      if (r.teacher_accuracy) std::cout << "teacher accuracy: " << *r.teacher_accuracy << '\n';
      if (r.fid_augmented) print_fid(*r.fid_augmented, "augmented");
      std::cout << "run directory: " << r.run_dir.string() << '\n';
      if (!rep.ok()) {
        std::cerr << "pipeline fault [" << rep.failed_stage << "]: " << rep.failure << '\n';
        return kFault;
      }
      if (rep.teacher_checksum_before != rep.teacher_checksum_after) {
        std::cerr << "pipeline fault [distillation]: teacher parameters changed\n";
        return kFault;
      }
      return kOk;
    }
    if (sweep->parsed()) {
      const auto r = harness::sweep(cfg, *plan, jobs);
      std::cout << plan->parameter << "\taccuracy\tmean_similarity\n";
      for (const auto& row : r.rows) {
        std::cout << row.value << '\t' << (row.accuracy ? std::to_string(*row.accuracy) : "NA") << '\t'
                  << (std::isfinite(row.mean_similarity) ? std::to_string(row.mean_similarity) : "NA") << '\n';
      }
      std::cout << "run directory: " << r.run_dir.string() << '\n';
      for (const auto& run : r.runs)
        if (!run.ok) std::cerr << "run " << run.run_dir.string() << " failed: " << run.failure << '\n';
      return r.ok() ? kOk : kFault;
    }
    if (evaluate->parsed()) {
      const auto r = harness::evaluate(cfg, checkpoint, dataset, split, fid_manifest);
      std::cout << "accuracy: " << r.accuracy << " (" << r.images << " images)\n";
      if (r.fid) print_fid(*r.fid, "against");
      std::cout << "run directory: " << r.run_dir.string() << '\n';
      return kOk;
    }
    if (plot->parsed()) {
      for (const auto& p : harness::write_plots(run_dir)) std::cout << p.string() << '\n';
      return kOk;
    }
  } catch (const PipelineFault& e) {
    std::cerr << "pipeline fault [" << e.stage() << "]: " << e.what() << '\n';
    return kFault;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFault;
  }
  return kUsage;
}
