#pragma once

// Knowledge-distillation objective and the alternating loop: synthesize,
// augment and filter, then train the student on everything retained so far.

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "dda/augmentation.hpp"
#include "dda/evaluation.hpp"

namespace dda {

/// tau^2 * mean_i KL(softmax(t_i / tau) || softmax(s_i / tau)).
inline Var kd_loss(const Var& teacher_logits, const Var& student_logits, double tau) {
  if (!(tau > 0.0)) throw Error("kd_loss: temperature must be > 0");
  if (teacher_logits.shape() != student_logits.shape() || teacher_logits.value().rank() != 2) {
    throw ShapeError("kd_loss: logits must share a [B,C] shape");
  }
  const double b = static_cast<double>(teacher_logits.shape()[0]);
  Var lt = ops::log_softmax(ops::scale(teacher_logits, 1.0 / tau));
  Var ls = ops::log_softmax(ops::scale(student_logits, 1.0 / tau));
  Var pt = ops::softmax(ops::scale(teacher_logits, 1.0 / tau));
  return ops::scale(ops::sum(ops::mul(pt, ops::sub(lt, ls))), tau * tau / b);
}

inline double kd_loss(const Tensor& teacher_logits, const Tensor& student_logits, double tau) {
  NoGradGuard guard;
  return kd_loss(Var(teacher_logits), Var(student_logits), tau).item();
}

inline double total_loss(double kd, double synth, double self_sup, const HyperParams& hp) {
  return hp.eta_kl * kd + hp.eta_synth * synth + hp.eta_self * self_sup;
}

inline Var total_loss(const Var& kd, const Var& synth, const Var& self_sup, const HyperParams& hp) {
  return ops::weighted_sum({kd, synth, self_sup}, {hp.eta_kl, hp.eta_synth, hp.eta_self});
}

// ---------------------------------------------------------------------------
// Distillation data

/// Images the student trains on, with teacher logits cached at insertion.
/// Variants carry the self-supervised term; fallback sources do not.
class DistillPool {
 public:
  DistillPool(ImageShape shape, std::size_t labels, std::size_t capacity = 0)
      : shape_(shape), labels_count_(labels), capacity_(capacity) {}

  std::size_t size() const { return labels_.size(); }
  bool empty() const { return labels_.empty(); }
  ImageShape image_shape() const { return shape_; }
  std::size_t variant_count() const { return static_cast<std::size_t>(std::count(variant_.begin(), variant_.end(), 1)); }

  /// Appends images [N,C,H,W]; teacher logits are computed in eval mode.
  void add(const Tensor& images, const std::vector<std::size_t>& labels, const std::vector<char>& is_variant,
           const Classifier& teacher) {
    if (images.rank() != 4 || images.dim(0) != labels.size() || labels.size() != is_variant.size()) {
      throw ShapeError("distill pool: images, labels and flags disagree");
    }
    if (labels.empty()) return;
    if (!(ImageShape{images.dim(1), images.dim(2), images.dim(3)} == shape_)) {
      throw ShapeError("distill pool: image shape mismatch");
    }
    check_labels(labels, labels_count_);
    NoGradGuard guard;
    const Tensor logits =
        evaluate_chunked(images, 256, [&](const Tensor& x) { return forward_logits(teacher, Var(x)).value(); });
    pixels_.insert(pixels_.end(), images.data().begin(), images.data().end());
    logits_.insert(logits_.end(), logits.data().begin(), logits.data().end());
    labels_.insert(labels_.end(), labels.begin(), labels.end());
    variant_.insert(variant_.end(), is_variant.begin(), is_variant.end());
    if (capacity_ > 0 && size() > capacity_) {
      const std::size_t drop = size() - capacity_;
      pixels_.erase(pixels_.begin(), pixels_.begin() + static_cast<long>(drop * shape_.numel()));
      logits_.erase(logits_.begin(), logits_.begin() + static_cast<long>(drop * labels_count_));
      labels_.erase(labels_.begin(), labels_.begin() + static_cast<long>(drop));
      variant_.erase(variant_.begin(), variant_.begin() + static_cast<long>(drop));
    }
  }

  struct Batch {
    Tensor images;
    Tensor teacher_logits;
    std::vector<std::size_t> labels;
    std::vector<std::size_t> variant_rows;
  };

  Batch gather(const std::vector<std::size_t>& idx) const {
    Batch b{Tensor(shape_.batch(idx.size())), Tensor(Shape{idx.size(), labels_count_}), {}, {}};
    const std::size_t per = shape_.numel();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const std::size_t i = idx.at(r);
      if (i >= size()) throw Error("distill pool: index out of range");
      std::copy_n(pixels_.begin() + static_cast<long>(i * per), per, b.images.ptr() + r * per);
      std::copy_n(logits_.begin() + static_cast<long>(i * labels_count_), labels_count_,
                  b.teacher_logits.ptr() + r * labels_count_);
      b.labels.push_back(labels_[i]);
      if (variant_[i]) b.variant_rows.push_back(r);
    }
    return b;
  }

  ImageBatch images() const {
    if (empty()) return {};
    return ImageBatch(Tensor(shape_.batch(size()), pixels_), labels_);
  }

 private:
  ImageShape shape_;
  std::size_t labels_count_;
  std::size_t capacity_;
  std::vector<double> pixels_;
  std::vector<double> logits_;
  std::vector<std::size_t> labels_;
  std::vector<char> variant_;
};

// ---------------------------------------------------------------------------
// Student training

struct LossRecord {
  std::size_t round = 0, epoch = 0, step = 0;
  double kd = 0, synth = 0, self_sup = 0, total = 0;
  double lr = 0;
  friend bool operator==(const LossRecord&, const LossRecord&) = default;
};

struct StudentOptimConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t batch_size = 64;
  std::size_t total_epochs = 0;  // cosine horizon; 0 keeps the rate constant
  bool bn_train_mode = true;     // batch statistics in student BN layers during training
};

struct DistillState {
  DistillState(Classifier& student, StudentOptimConfig cfg)
      : student(&student), cfg(cfg), opt(student.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay) {}

  Classifier* student;
  StudentOptimConfig cfg;
  optim::Sgd opt;
  std::size_t epoch = 0;  // epochs completed
  std::size_t step = 0;   // optimizer steps completed
  std::vector<LossRecord> history;
};

struct EpochMetrics {
  std::size_t round = 0, epoch = 0, steps = 0, images = 0;
  double kd = 0, self_sup = 0, total = 0;  // means over steps
  double seconds = 0, images_per_second = 0;
};

namespace detail {
inline std::vector<Tensor> snapshot(Classifier& model) {
  std::vector<Tensor> out;
  for (auto& [name, t] : model.named_tensors()) out.push_back(*t);
  return out;
}
inline void restore(Classifier& model, const std::vector<Tensor>& saved) {
  std::size_t i = 0;
  for (auto& [name, t] : model.named_tensors()) *t = saved.at(i++);
}
}  // namespace detail

/// One shuffled pass over the pool. The student minimizes
/// eta_kl * KD + eta_self * CE(variants); `synth_obj` is logged into the total only.
/// A non-finite loss restores the weights from the start of the epoch and throws.
inline EpochMetrics train_student_epoch(DistillState& state, const DistillPool& pool, const HyperParams& hp,
                                        double synth_obj, std::size_t round, Rng& rng) {
  if (pool.empty()) throw Error("train_student_epoch: no training data");
  const auto t0 = std::chrono::steady_clock::now();
  Classifier& student = *state.student;
  const auto saved = detail::snapshot(student);
  const double lr = state.cfg.total_epochs > 0 ? optim::cosine_lr(state.cfg.lr, state.epoch, state.cfg.total_epochs)
                                               : state.cfg.lr;
  state.opt.set_lr(lr);

  std::vector<std::size_t> order(pool.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t bs = std::max<std::size_t>(1, state.cfg.batch_size);

  EpochMetrics m;
  m.round = round;
  m.epoch = state.epoch;
  for (std::size_t s = 0; s < order.size(); s += bs) {
    std::vector<std::size_t> idx(order.begin() + static_cast<long>(s),
                                 order.begin() + static_cast<long>(std::min(order.size(), s + bs)));
    // BN batch statistics need two samples; fold a trailing singleton into the previous step
    if (state.cfg.bn_train_mode && idx.size() < 2 && s > 0) break;
    auto batch = pool.gather(idx);
    state.opt.zero_grad();
    Var images(batch.images);
    Var logits = state.cfg.bn_train_mode ? student.train_forward(images).logits : student.evaluate(images).logits;
    Var kd = kd_loss(Var(batch.teacher_logits), logits, hp.kd_temperature);
    Var self_sup(Tensor::scalar(0.0));
    if (!batch.variant_rows.empty()) {
      std::vector<std::size_t> lbl;
      for (auto r : batch.variant_rows) lbl.push_back(batch.labels[r]);
      self_sup = cross_entropy(ops::take_rows(logits, batch.variant_rows), lbl);
    }
    Var objective = ops::weighted_sum({kd, self_sup}, {hp.eta_kl, hp.eta_self});
    LossRecord rec{round, state.epoch, state.step, kd.item(), synth_obj, self_sup.item(), 0.0, lr};
    rec.total = total_loss(rec.kd, rec.synth, rec.self_sup, hp);
    if (!std::isfinite(objective.item())) {
      detail::restore(student, saved);
      throw PipelineFault("distillation", "non-finite student loss at round " + std::to_string(round) + " epoch " +
                                              std::to_string(state.epoch) + " step " + std::to_string(state.step));
    }
    objective.backward();
    state.opt.step();
    state.history.push_back(rec);
    ++state.step;
    ++m.steps;
    m.images += idx.size();
    m.kd += rec.kd;
    m.self_sup += rec.self_sup;
    m.total += rec.total;
  }
  if (m.steps > 0) {
    const double n = static_cast<double>(m.steps);
    m.kd /= n;
    m.self_sup /= n;
    m.total /= n;
  }
  ++state.epoch;
  m.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  m.images_per_second = m.seconds > 0 ? static_cast<double>(m.images) / m.seconds : 0.0;
  return m;
}

// ---------------------------------------------------------------------------
// Orchestration

struct DistillSchedule {
  std::size_t rounds = 10;
  std::size_t synth_batch = 100;
  std::size_t synth_steps = 20;
  double synth_lr = 1e-3;
  double latent_lr = 1e-3;
  double disc_lr = 1e-3;
  std::size_t epochs_per_round = 5;
  StudentOptimConfig student;
  std::size_t pool_capacity = 0;  // 0 keeps every retained image
};

struct DistillOptions {
  bool use_diffusion = true;
  bool use_filter = true;
  bool adaptive_intensity = true;
  EmbeddingSpace embedding = EmbeddingSpace::teacher;
  std::uint64_t seed = 0;
  ContrastiveOptions contrastive;
};

struct RoundReport {
  std::size_t round = 0;
  SynthesisStepLog synthesis;
  double label_agreement = 0.0;  // fraction of sources the teacher assigns to their target label
  std::size_t sources = 0, variants = 0, retained = 0, fallback_sources = 0;
  double retained_fraction = 0.0;
  double mean_similarity = std::numeric_limits<double>::quiet_NaN();
  bool augmentation_degraded = false;
  std::size_t pool_size = 0;
  std::vector<EpochMetrics> epochs;
  std::optional<double> student_accuracy;
  double seconds = 0.0;
};

struct RunReport {
  std::optional<double> initial_accuracy;
  std::optional<double> final_accuracy;
  std::optional<double> best_accuracy;
  std::size_t best_round = 0;
  std::vector<RoundReport> rounds;
  std::vector<LossRecord> history;
  std::uint64_t teacher_checksum_before = 0, teacher_checksum_after = 0;
  std::string failed_stage;  // empty on success
  std::string failure;
  double seconds = 0.0;

  bool ok() const { return failed_stage.empty(); }
};

/// Everything the loop touches. The teacher and backend are only read.
struct DistillComponents {
  Classifier* teacher = nullptr;
  Classifier* student = nullptr;
  Generator* generator = nullptr;
  Discriminator* discriminator = nullptr;
  MemoryBank* bank = nullptr;
  const DiffusionBackend* backend = nullptr;  // may be null when diffusion is off
};

/// Per-round hook for persistence: receives the round report, the synthesized
/// batch and the augmentation records (empty when diffusion is off).
using RoundHook = std::function<void(const RoundReport&, const ImageBatch&, const std::vector<AugmentationRecord>&)>;

namespace detail {
class FreezeGuard {
 public:
  explicit FreezeGuard(Classifier& model) : params_(model.parameters()) {
    for (const auto& p : params_) flags_.push_back(p.requires_grad());
    set_requires_grad(params_, false);
  }
  ~FreezeGuard() {
    for (std::size_t i = 0; i < params_.size(); ++i) params_[i].node()->requires_grad = flags_[i];
  }
  FreezeGuard(const FreezeGuard&) = delete;
  FreezeGuard& operator=(const FreezeGuard&) = delete;

 private:
  std::vector<Var> params_;
  std::vector<bool> flags_;
};
}  // namespace detail

/// Alternates synthesis, augmentation/filtering and student epochs for
/// `schedule.rounds` rounds. Stage faults stop the loop; the report then names
/// the failing stage and keeps everything completed before it.
inline RunReport run_dda(const DistillComponents& c, const HyperParams& hp, const DistillSchedule& schedule,
                         const DistillOptions& opt, const ImageBatch* eval_set = nullptr, const RoundHook& hook = {}) {
  if (!c.teacher || !c.student || !c.generator || !c.discriminator || !c.bank) throw Error("run_dda: missing component");
  if (opt.use_diffusion && !c.backend) throw Error("run_dda: diffusion enabled without a backend");
  hp.validate();
  if (!(c.teacher->input_shape() == c.student->input_shape()) ||
      !(c.generator->output_shape() == c.teacher->input_shape()) ||
      c.teacher->label_count() != c.student->label_count()) {
    throw ShapeError("run_dda: teacher, student and generator shapes disagree");
  }

  const auto t0 = std::chrono::steady_clock::now();
  Classifier& teacher = *c.teacher;
  Classifier& student = *c.student;
  RunReport report;
  report.teacher_checksum_before = checksum(teacher);
  detail::FreezeGuard freeze(teacher);

  // Separate streams: synthesized sources do not depend on how the student is trained.
  Rng synth_rng(derive_seed(opt.seed, 1)), train_rng(derive_seed(opt.seed, 2));
  optim::Adam disc_opt(c.discriminator->parameters(), schedule.disc_lr, 0.5, 0.999);
  StudentOptimConfig scfg = schedule.student;
  if (scfg.total_epochs == 0) scfg.total_epochs = schedule.rounds * schedule.epochs_per_round;
  DistillState state(student, scfg);
  DistillPool pool(teacher.input_shape(), teacher.label_count(), schedule.pool_capacity);
  AdaptiveIntensityPolicy policy(opt.adaptive_intensity);
  const EmbedFn embed = opt.embedding == EmbeddingSpace::teacher ? teacher_embedder(teacher)
                                                                 : discriminator_embedder(teacher, *c.discriminator);
  ContrastiveOptions copt = opt.contrastive;
  copt.temperature = hp.contrastive_temperature;

  if (eval_set && schedule.rounds > 0) report.initial_accuracy = accuracy(student, *eval_set);
  std::size_t source_id = 0;
  std::string stage;
  try {
    for (std::size_t r = 0; r < schedule.rounds; ++r) {
      const auto rt = std::chrono::steady_clock::now();
      RoundReport rr;
      rr.round = r;

      stage = "synthesis";
      SynthesisRound sr;
      sr.round = r;
      sr.batch_size = schedule.synth_batch;
      sr.steps = schedule.synth_steps;
      sr.learning_rate = schedule.synth_lr;
      sr.latent_learning_rate = schedule.latent_lr;
      auto synth = run_synthesis_round(*c.generator, teacher, *c.discriminator, &disc_opt, *c.bank, hp, sr, copt, synth_rng);
      rr.synthesis = synth.best;
      rr.sources = synth.batch.size();
      {
        const auto pred = predict(teacher, synth.batch.images);
        std::size_t agree = 0;
        for (std::size_t i = 0; i < pred.size(); ++i) agree += pred[i] == synth.batch.labels[i];
        rr.label_agreement = static_cast<double>(agree) / static_cast<double>(pred.size());
      }
      c.bank->push(synth.batch, r);

      stage = "augmentation";
      std::vector<AugmentationRecord> records;
      std::vector<Tensor> add_images;
      std::vector<std::size_t> add_labels;
      std::vector<char> add_variant;
      if (opt.use_diffusion) {
        AugmentOptions ao{opt.use_filter, opt.seed, r, source_id};
        auto aug = augment_pipeline(synth.batch, student, *c.backend, embed, hp, ao, policy);
        rr.augmentation_degraded = aug.degraded;
        double sim_sum = 0.0;
        std::size_t sim_n = 0;
        for (const auto& rec : aug.records) {
          rr.variants += rec.variants.size();
          for (double s : rec.similarities) {
            sim_sum += s;
            ++sim_n;
          }
          const auto kept = rec.retained();
          rr.retained += kept.size();
          for (auto k : kept) {
            add_images.push_back(rec.variants[k]);
            add_labels.push_back(rec.label);
            add_variant.push_back(1);
          }
          if (kept.empty()) {
            add_images.push_back(rec.source);
            add_labels.push_back(rec.label);
            add_variant.push_back(0);
            ++rr.fallback_sources;
          }
        }
        if (sim_n > 0) rr.mean_similarity = sim_sum / static_cast<double>(sim_n);
        rr.retained_fraction = rr.variants ? static_cast<double>(rr.retained) / static_cast<double>(rr.variants) : 0.0;
        policy.update(aug.records);
        records = std::move(aug.records);
      } else {
        for (std::size_t i = 0; i < synth.batch.size(); ++i) {
          add_images.push_back(synth.batch.image(i));
          add_labels.push_back(synth.batch.labels[i]);
          add_variant.push_back(0);
        }
      }
      source_id += synth.batch.size();

      stage = "distillation";
      pool.add(stack_images(add_images), add_labels, add_variant, teacher);
      rr.pool_size = pool.size();
      for (std::size_t e = 0; e < schedule.epochs_per_round; ++e) {
        rr.epochs.push_back(train_student_epoch(state, pool, hp, synth.best.total, r, train_rng));
      }

      stage = "evaluation";
      if (eval_set) {
        rr.student_accuracy = accuracy(student, *eval_set);
        if (!report.best_accuracy || *rr.student_accuracy > *report.best_accuracy) {
          report.best_accuracy = rr.student_accuracy;
          report.best_round = r;
        }
        report.final_accuracy = rr.student_accuracy;
      }
      rr.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - rt).count();
      report.rounds.push_back(rr);
      stage = "persistence";
      if (hook) hook(report.rounds.back(), synth.batch, records);
      log::info("round " + std::to_string(r) + ": pool " + std::to_string(rr.pool_size) + ", retained " +
                std::to_string(rr.retained) + "/" + std::to_string(rr.variants) +
                (rr.student_accuracy ? ", student acc " + std::to_string(*rr.student_accuracy) : std::string()));
    }
  } catch (const PipelineFault& e) {
    report.failed_stage = e.stage();
    report.failure = e.what();
  } catch (const std::exception& e) {
    report.failed_stage = stage;
    report.failure = e.what();
  }
  report.history = state.history;
  report.teacher_checksum_after = checksum(teacher);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace dda
