#pragma once

// Diffusion-based expansion of synthetic images: encode, draw K seeded
// variants, score them with the student, and keep the ones whose teacher
// embedding stays close to the source.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <vector>

#include "dda/diffusion.hpp"
#include "dda/hyperparams.hpp"
#include "dda/log.hpp"
#include "dda/synthesis.hpp"

namespace dda {

inline Latent encode_latent(const DiffusionBackend& backend, const Tensor& image) {
  if (image.rank() != 4 || image.dim(0) != 1) {
    throw ShapeError("encode_latent expects a [1,C,H,W] image, got " + to_string(image.shape()));
  }
  for (double v : image.data())
    if (!(v >= 0.0 && v <= 1.0)) throw Error("encode_latent: pixel outside [0,1]");
  return backend.encode(image);
}

inline std::vector<Tensor> diffuse_augment(const DiffusionBackend& backend, const Latent& latent, std::size_t k,
                                           const std::vector<std::uint64_t>& seeds, double intensity_scale = 1.0) {
  if (k < 1) throw Error("diffuse_augment: K must be >= 1");
  if (seeds.size() != k) throw Error("diffuse_augment: need exactly K seeds");
  std::vector<DiffusionBackend::Request> reqs;
  for (auto s : seeds) reqs.push_back({&latent, s, intensity_scale});
  auto out = backend.generate_batch(reqs);
  for (const auto& img : out)
    if (img.shape() != latent.shape.batch(1)) throw ShapeError("diffusion backend returned " + to_string(img.shape()));
  return out;
}

/// Cross-entropy of the student's prediction on one variant against the source label.
inline Var self_supervised_loss(const Classifier& student, const Var& variant, std::size_t source_label) {
  check_labels({source_label}, student.label_count());
  return cross_entropy(forward_logits(student, variant), {source_label});
}

/// Row-wise cross-entropy values, computed without recording a graph.
inline std::vector<double> row_cross_entropy(const Tensor& logits, const std::vector<std::size_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw ShapeError("row_cross_entropy: shape mismatch");
  check_labels(labels, logits.dim(1));
  const std::size_t c = logits.dim(1);
  std::vector<double> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const double* row = logits.ptr() + i * c;
    const double m = *std::max_element(row, row + c);
    double z = 0.0;
    for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    out[i] = m + std::log(z) - row[labels[i]];
  }
  return out;
}

/// Maps a [N,C,H,W] batch to [N,D] embeddings.
using EmbedFn = std::function<Tensor(const Tensor&)>;

inline Tensor evaluate_chunked(const Tensor& images, std::size_t chunk,
                               const std::function<Tensor(const Tensor&)>& fn) {
  const std::size_t n = images.dim(0), per = images.row_size();
  std::vector<Tensor> parts;
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    Shape shape = images.shape();
    shape[0] = e - s;
    parts.push_back(fn(Tensor(shape, std::vector<double>(images.ptr() + s * per, images.ptr() + e * per))));
  }
  return stack_images(parts);
}

inline EmbedFn teacher_embedder(const Classifier& teacher) {
  return [&teacher](const Tensor& images) {
    NoGradGuard guard;
    return evaluate_chunked(images, 256, [&](const Tensor& x) { return penultimate_embedding(teacher, Var(x)).value(); });
  };
}

inline EmbedFn discriminator_embedder(const Classifier& teacher, const Discriminator& disc) {
  return [&teacher, &disc](const Tensor& images) {
    NoGradGuard guard;
    return evaluate_chunked(images, 256, [&](const Tensor& x) {
      return disc(Discriminator::features_of(teacher.evaluate(Var(x)))).value();
    });
  };
}

/// Cosine of two vectors, clamped to [-1,1]. A zero-norm side yields 0 and a warning.
inline double cosine(const double* a, const double* b, std::size_t n) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    log::warn("degenerate embedding (zero norm); similarity set to 0");
    return 0.0;
  }
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

inline double similarity(const EmbedFn& embed, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("similarity: shape mismatch");
  const Tensor ea = embed(a), eb = embed(b);
  if (ea.size() != eb.size()) throw ShapeError("similarity: embedding size mismatch");
  return cosine(ea.ptr(), eb.ptr(), ea.size());
}

inline std::vector<bool> filter_mask(const std::vector<double>& similarities, double omega) {
  if (!(omega >= -1.0 && omega <= 1.0)) throw Error("filter threshold must lie in [-1,1]");
  std::vector<bool> mask(similarities.size());
  for (std::size_t k = 0; k < similarities.size(); ++k) mask[k] = similarities[k] > omega;
  return mask;
}

struct AugmentationRecord {
  std::size_t source_id = 0;
  Tensor source;  // [1,C,H,W]
  std::size_t label = 0;
  Latent latent;
  double intensity = 1.0;
  std::vector<Tensor> variants;
  std::vector<std::uint64_t> seeds;
  std::vector<double> similarities;
  std::vector<bool> mask;
  std::vector<double> self_losses;

  std::vector<std::size_t> retained() const {
    std::vector<std::size_t> idx;
    for (std::size_t k = 0; k < mask.size(); ++k)
      if (mask[k]) idx.push_back(k);
    return idx;
  }
  std::size_t retained_count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), true)); }
};

/// Per-class intensity multipliers driven by the student's self-supervised loss:
/// classes the student finds harder get stronger variations next round.
class AdaptiveIntensityPolicy {
 public:
  explicit AdaptiveIntensityPolicy(bool enabled = true, double lo = 0.5, double hi = 2.0)
      : enabled_(enabled), lo_(lo), hi_(hi) {}

  double scale(std::size_t label) const {
    auto it = scale_.find(label);
    return it == scale_.end() ? 1.0 : it->second;
  }

  const std::map<std::size_t, double>& scales() const { return scale_; }

  void update(const std::vector<AugmentationRecord>& records) {
    if (!enabled_) return;
    std::map<std::size_t, std::pair<double, std::size_t>> acc;
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& r : records)
      for (auto k : r.retained()) {
        auto& a = acc[r.label];
        a.first += r.self_losses[k];
        ++a.second;
        total += r.self_losses[k];
        ++count;
      }
    if (count == 0 || total <= 0.0) return;
    const double overall = total / static_cast<double>(count);
    for (const auto& [label, a] : acc) scale_[label] = std::clamp(a.first / static_cast<double>(a.second) / overall, lo_, hi_);
  }

 private:
  bool enabled_;
  double lo_, hi_;
  std::map<std::size_t, double> scale_;
};

enum class EmbeddingSpace { teacher, discriminator };

struct AugmentOptions {
  bool use_filter = true;
  std::uint64_t seed = 0;
  std::size_t round = 0;
  std::size_t first_source_id = 0;
};

struct AugmentResult {
  std::vector<AugmentationRecord> records;
  bool degraded = false;  // backend failed; no variants this round
  std::string message;

  std::size_t variant_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.variants.size();
    return n;
  }
  std::size_t retained_count() const {
    std::size_t n = 0;
    for (const auto& r : records) n += r.retained_count();
    return n;
  }
};

inline std::uint64_t variant_seed(std::uint64_t run_seed, std::size_t round, std::size_t source, std::size_t k) {
  return derive_seed(run_seed, round + 1, source + 1, k + 1);
}

/// Expands every source into hp.augmentations variants, scores and filters them.
/// A backend outage degrades the round to sources only rather than failing it.
inline AugmentResult augment_pipeline(const ImageBatch& synth, const Classifier& student, const DiffusionBackend& backend,
                                      const EmbedFn& embed, const HyperParams& hp, const AugmentOptions& opt,
                                      const AdaptiveIntensityPolicy& policy = AdaptiveIntensityPolicy(false)) {
  if (synth.empty()) throw Error("augment_pipeline: empty batch");
  if (synth.labels.size() != synth.size()) throw Error("augment_pipeline: batch is unlabeled");
  const std::size_t n = synth.size(), k = static_cast<std::size_t>(hp.augmentations);
  if (k < 1) throw Error("augment_pipeline: K must be >= 1");

  AugmentResult result;
  result.records.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = result.records[i];
    r.source_id = opt.first_source_id + i;
    r.source = synth.image(i);
    r.label = synth.labels[i];
    r.latent = encode_latent(backend, r.source);
    r.intensity = policy.scale(r.label);
    for (std::size_t j = 0; j < k; ++j) r.seeds.push_back(variant_seed(opt.seed, opt.round, r.source_id, j));
  }

  std::vector<DiffusionBackend::Request> reqs;
  for (const auto& r : result.records)
    for (auto s : r.seeds) reqs.push_back({&r.latent, s, r.intensity});
  std::vector<Tensor> images;
  try {
    images = backend.generate_batch(reqs);
  } catch (const BackendUnavailable& e) {
    result.degraded = true;
    result.message = e.what();
    log::warn(std::string("diffusion backend unavailable, round ") + std::to_string(opt.round) +
              " continues without augmentation: " + e.what());
    for (auto& r : result.records) r.seeds.clear();
    return result;
  }
  if (images.size() != reqs.size()) throw PipelineFault("augmentation", "backend returned wrong variant count");
  for (const auto& img : images)
    if (img.shape() != synth.image_shape().batch(1) || !img.all_finite()) {
      throw PipelineFault("augmentation", "backend returned a malformed variant " + to_string(img.shape()));
    }

  const Tensor variants = stack_images(images);
  const Tensor src_emb = embed(synth.images), var_emb = embed(variants);
  const std::size_t d = src_emb.row_size();
  if (var_emb.row_size() != d) throw ShapeError("augment_pipeline: embedding width mismatch");

  std::vector<std::size_t> var_labels;
  for (const auto& r : result.records) var_labels.insert(var_labels.end(), k, r.label);
  std::vector<double> losses;
  {
    NoGradGuard guard;
    const Tensor logits = evaluate_chunked(variants, 256, [&](const Tensor& x) { return forward_logits(student, Var(x)).value(); });
    losses = row_cross_entropy(logits, var_labels);
  }

  for (std::size_t i = 0; i < n; ++i) {
    auto& r = result.records[i];
    for (std::size_t j = 0; j < k; ++j) {
      const std::size_t v = i * k + j;
      r.variants.push_back(std::move(images[v]));
      r.similarities.push_back(cosine(src_emb.ptr() + i * d, var_emb.ptr() + v * d, d));
      r.self_losses.push_back(losses[v]);
    }
    r.mask = opt.use_filter ? filter_mask(r.similarities, hp.omega) : std::vector<bool>(k, true);
  }
  return result;
}

}  // namespace dda
