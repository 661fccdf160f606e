#pragma once

// Model-inversion data synthesis: class prior, batch-norm statistic matching,
// the combined inversion loss, and the per-round joint optimisation of the
// generator weights and its input latents.

#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <sstream>
#include <vector>

#include "dda/hyperparams.hpp"
#include "dda/memory_bank.hpp"
#include "dda/optim.hpp"

namespace dda {

/// Marks parameters as constants (or trainable again) for graph recording.
inline void set_requires_grad(const std::vector<Var>& params, bool on) {
  for (const auto& p : params) p.node()->requires_grad = on;
}

inline void check_labels(const std::vector<std::size_t>& labels, std::size_t classes) {
  for (auto l : labels)
    if (l >= classes) {
      throw Error("invalid label " + std::to_string(l) + " for " + std::to_string(classes) + " classes");
    }
}

/// Mean cross-entropy of [B,C] logits against integer labels.
inline Var cross_entropy(const Var& logits, const std::vector<std::size_t>& labels) {
  if (logits.value().rank() != 2) throw ShapeError("cross_entropy expects [B,C] logits");
  if (labels.size() != logits.shape()[0]) throw ShapeError("cross_entropy: one label per row required");
  check_labels(labels, logits.shape()[1]);
  return ops::scale(ops::mean(ops::pick(ops::log_softmax(logits), labels)), -1.0);
}

/// Cross-entropy of the teacher's predictions against the predefined labels.
inline Var class_prior_loss(const Var& teacher_logits, const std::vector<std::size_t>& targets) {
  return cross_entropy(teacher_logits, targets);
}

/// sum_l ( |mu_l(x) - mu_l|_2 + |var_l(x) - var_l|_2 ) with unsquared norms.
inline Var bn_regularization_loss(const std::vector<BatchMoments>& batch, const BNStats& running) {
  if (batch.size() != running.size()) {
    throw ShapeError("bn regularization: " + std::to_string(batch.size()) + " batch layers vs " +
                     std::to_string(running.size()) + " running layers");
  }
  if (batch.empty()) return Var(Tensor::scalar(0.0));
  std::vector<Var> terms;
  for (std::size_t l = 0; l < batch.size(); ++l) {
    if (batch[l].mean.size() != running[l].mean.size() || batch[l].var.size() != running[l].var.size()) {
      throw ShapeError("bn regularization: channel width mismatch at layer " + std::to_string(l));
    }
    terms.push_back(ops::norm2(ops::sub(batch[l].mean, Var(running[l].mean))));
    terms.push_back(ops::norm2(ops::sub(batch[l].var, Var(running[l].var))));
  }
  return ops::weighted_sum(terms, std::vector<double>(terms.size(), 1.0));
}

inline double bn_regularization_loss(const BNStats& batch, const BNStats& running) {
  NoGradGuard guard;
  std::vector<BatchMoments> moments;
  for (const auto& s : batch) moments.push_back({Var(s.mean), Var(s.var)});
  return bn_regularization_loss(moments, running).item();
}

inline Var inversion_loss(const Var& cls, const Var& bn, const HyperParams& hp) {
  return ops::weighted_sum({cls, bn}, {hp.alpha, hp.beta});
}

inline double inversion_loss(double cls, double bn, const HyperParams& hp) { return hp.alpha * cls + hp.beta * bn; }

struct SynthesisTerms {
  Var total;
  Var inversion;
  Var cls;
  Var bn;
  Var contrastive;
};

/// alpha' * L_in(generated) + beta' * L_c(generated with bank negatives).
/// The contrastive term is skipped (reported as 0) when beta' is 0.
inline SynthesisTerms synthesis_objective(const Var& generated, const std::vector<std::size_t>& targets,
                                          const MemoryBank& bank, const Classifier& teacher, const Discriminator& disc,
                                          const HyperParams& hp, const ContrastiveOptions& copt, Rng& rng) {
  if (generated.value().rank() != 4 || generated.shape()[0] == 0) throw Error("synthesis objective: empty generated batch");
  SynthesisTerms t;
  const bool capture = teacher.bn_layer_count() > 0;
  if (capture && generated.shape()[0] < 2) throw ShapeError("synthesis objective: BN statistics need >= 2 images");
  auto out = teacher.evaluate(generated, capture);
  t.cls = class_prior_loss(out.logits, targets);
  t.bn = bn_regularization_loss(out.bn_moments, teacher.running_bn_statistics());
  t.inversion = inversion_loss(t.cls, t.bn, hp);
  if (hp.beta_prime > 0.0) {
    t.contrastive = contrastive_loss(generated, out, bank, teacher, disc, copt, rng);
    t.total = ops::weighted_sum({t.inversion, t.contrastive}, {hp.alpha_prime, hp.beta_prime});
  } else {
    t.contrastive = Var(Tensor::scalar(0.0));
    t.total = ops::scale(t.inversion, hp.alpha_prime);
  }
  return t;
}

/// Labels where every class appears floor(B/C) or ceil(B/C) times, shuffled.
inline std::vector<std::size_t> balanced_labels(std::size_t batch, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> labels;
  labels.reserve(batch);
  for (std::size_t i = 0; i < batch - batch % classes; ++i) labels.push_back(i % classes);
  std::vector<std::size_t> extra(classes);
  std::iota(extra.begin(), extra.end(), 0);
  std::shuffle(extra.begin(), extra.end(), rng);
  for (std::size_t i = 0; i < batch % classes; ++i) labels.push_back(extra[i]);
  std::shuffle(labels.begin(), labels.end(), rng);
  return labels;
}

struct SynthesisRound {
  std::size_t round = 0;
  std::size_t batch_size = 200;
  std::size_t steps = 500;
  double learning_rate = 1e-3;
  std::optional<double> latent_learning_rate;  // defaults to learning_rate
  std::optional<std::vector<std::size_t>> targets;  // sampled with balanced_labels when unset
};

struct SynthesisStepLog {
  std::size_t step = 0;
  double total = 0, cls = 0, bn = 0, contrastive = 0;
};

struct SynthesisResult {
  ImageBatch batch;                  // lowest-objective batch over the round
  std::vector<SynthesisStepLog> log;  // one entry per evaluated step
  SynthesisStepLog best;
};

/// One round of generator-based inversion. Fresh latents are drawn from N(0, I);
/// generator weights persist across rounds. Each step evaluates the objective,
/// then updates (latents, generator) with Adam and the discriminator with
/// `disc_opt` (when given). After `steps` updates the objective is evaluated once
/// more, and the lowest-objective batch seen is returned.
inline SynthesisResult run_synthesis_round(Generator& gen, const Classifier& teacher, Discriminator& disc,
                                           optim::Adam* disc_opt, const MemoryBank& bank, const HyperParams& hp,
                                           const SynthesisRound& cfg, const ContrastiveOptions& copt, Rng& rng) {
  if (cfg.steps < 1) throw Error("synthesis round needs at least one step");
  if (cfg.batch_size < 1) throw Error("synthesis round needs a positive batch size");
  auto targets = cfg.targets ? *cfg.targets : balanced_labels(cfg.batch_size, teacher.label_count(), rng);
  if (targets.size() != cfg.batch_size) throw ShapeError("synthesis round: target count != batch size");
  check_labels(targets, teacher.label_count());

  Var latent(nn::normal_tensor({cfg.batch_size, gen.latent_dim()}, 1.0, rng), true);
  optim::Adam opt(gen.parameters(), cfg.learning_rate, 0.5, 0.999);
  optim::Adam latent_opt({latent}, cfg.latent_learning_rate.value_or(cfg.learning_rate), 0.5, 0.999);
  std::vector<Var> disc_params = disc.parameters();

  SynthesisResult result;
  result.best.total = std::numeric_limits<double>::infinity();
  for (std::size_t step = 0; step <= cfg.steps; ++step) {
    opt.zero_grad();
    latent_opt.zero_grad();
    optim::zero_grad(disc_params);
    Var images = gen(latent);
    auto terms = synthesis_objective(images, targets, bank, teacher, disc, hp, copt, rng);
    SynthesisStepLog entry{step, terms.total.item(), terms.cls.item(), terms.bn.item(), terms.contrastive.item()};
    if (!std::isfinite(entry.total)) {
      std::ostringstream msg;
      msg << "non-finite objective at round " << cfg.round << " step " << step << " (cls=" << entry.cls
          << ", bn=" << entry.bn << ", contrastive=" << entry.contrastive << ")";
      throw PipelineFault("synthesis", msg.str());
    }
    result.log.push_back(entry);
    if (entry.total < result.best.total) {
      result.best = entry;
      result.batch = ImageBatch(images.value(), targets);
    }
    if (step == cfg.steps) break;
    terms.total.backward();
    opt.step();
    latent_opt.step();
    if (disc_opt) disc_opt->step();
  }
  return result;
}

}  // namespace dda
