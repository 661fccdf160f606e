#pragma once

// Bounded FIFO store of synthetic samples, the random augmentation used to
// build positive views, and the contrastive instance-discrimination loss that
// consumes both.

#include <algorithm>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dda/model_contracts.hpp"

namespace dda {

struct BankEntry {
  std::vector<double> pixels;  // C*H*W, detached copy
  std::size_t label = 0;
  std::size_t round = 0;
};

class MemoryBank {
 public:
  static constexpr std::uint32_t kFormatVersion = 1;

  MemoryBank(std::size_t capacity, ImageShape shape) : capacity_(capacity), shape_(shape) {
    if (capacity_ == 0) throw Error("memory bank capacity must be positive");
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  ImageShape image_shape() const { return shape_; }
  const BankEntry& operator[](std::size_t i) const { return entries_.at(i); }
  const std::deque<BankEntry>& entries() const { return entries_; }

  /// Appends every image of `batch`, evicting the oldest entries beyond capacity.
  void push(const ImageBatch& batch, std::size_t round) {
    if (batch.empty()) return;
    if (!(batch.image_shape() == shape_)) {
      throw ShapeError("bank holds " + to_string(shape_) + " images, got " + to_string(batch.image_shape()));
    }
    const std::size_t n = shape_.numel();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      BankEntry e;
      e.pixels.assign(batch.images.ptr() + i * n, batch.images.ptr() + (i + 1) * n);
      e.label = batch.labels.empty() ? 0 : batch.labels[i];
      e.round = round;
      entries_.push_back(std::move(e));
      if (entries_.size() > capacity_) entries_.pop_front();
    }
  }

  /// k distinct indices drawn uniformly (k is clipped to the bank size).
  std::vector<std::size_t> sample(std::size_t k, Rng& rng) const {
    std::vector<std::size_t> idx(entries_.size());
    std::iota(idx.begin(), idx.end(), 0);
    k = std::min(k, idx.size());
    // partial Fisher-Yates
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(k);
    return idx;
  }

  Tensor gather(const std::vector<std::size_t>& indices) const {
    const std::size_t n = shape_.numel();
    Tensor out(shape_.batch(indices.size()));
    for (std::size_t i = 0; i < indices.size(); ++i) std::copy_n(entries_.at(indices[i]).pixels.data(), n, out.ptr() + i * n);
    return out;
  }

  ImageBatch snapshot() const {
    std::vector<std::size_t> all(entries_.size());
    std::iota(all.begin(), all.end(), 0);
    std::vector<std::size_t> labels;
    for (const auto& e : entries_) labels.push_back(e.label);
    return ImageBatch(gather(all), labels);
  }

  void save(const std::filesystem::path& path) const {
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::binary);
      if (!out) throw Error("cannot write memory bank to " + tmp);
      out.write("DDABANK\0", 8);
      write_u64(out, kFormatVersion);
      write_u64(out, capacity_);
      write_u64(out, shape_.channels);
      write_u64(out, shape_.height);
      write_u64(out, shape_.width);
      write_u64(out, entries_.size());
      for (const auto& e : entries_) {
        write_u64(out, e.label);
        write_u64(out, e.round);
        out.write(reinterpret_cast<const char*>(e.pixels.data()), static_cast<std::streamsize>(e.pixels.size() * 8));
      }
      if (!out) throw Error("failed writing memory bank " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  static MemoryBank load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open memory bank " + path.string());
    char magic[8];
    in.read(magic, 8);
    if (!in || std::string(magic, 7) != "DDABANK") throw FormatError(path.string() + " is not a memory bank file");
    const auto version = read_u64(in);
    if (version != kFormatVersion) {
      throw FormatError("memory bank version " + std::to_string(version) + " unsupported (expected " +
                        std::to_string(kFormatVersion) + ")");
    }
    const auto capacity = read_u64(in);
    ImageShape shape{read_u64(in), read_u64(in), read_u64(in)};
    const auto count = read_u64(in);
    if (!in || capacity == 0 || count > capacity) throw FormatError("corrupt memory bank header in " + path.string());
    MemoryBank bank(capacity, shape);
    for (std::uint64_t i = 0; i < count; ++i) {
      BankEntry e;
      e.label = read_u64(in);
      e.round = read_u64(in);
      e.pixels.resize(shape.numel());
      in.read(reinterpret_cast<char*>(e.pixels.data()), static_cast<std::streamsize>(e.pixels.size() * 8));
      if (!in) throw FormatError("truncated memory bank " + path.string());
      bank.entries_.push_back(std::move(e));
    }
    return bank;
  }

 private:
  static void write_u64(std::ofstream& out, std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); }
  static std::uint64_t read_u64(std::ifstream& in) {
    std::uint64_t v = 0;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  }

  std::size_t capacity_;
  ImageShape shape_;
  std::deque<BankEntry> entries_;
};

// ---------------------------------------------------------------------------
// Positive views

/// Random augmentation applied to anchors: horizontal flip, zero-pad-and-crop
/// and a brightness shift, clamped back into [0,1].
struct AugmentPolicy {
  double flip_prob = 0.5;
  std::size_t crop_pad = 4;
  double brightness = 0.1;

  static AugmentPolicy identity() { return {0.0, 0, 0.0}; }
};

/// Differentiable positive views of a [N,C,H,W] batch. Draws are made per image
/// in order, so a fixed rng state reproduces the same views.
inline Var make_positive_view(const Var& images, const AugmentPolicy& policy, Rng& rng) {
  if (images.value().rank() != 4) throw ShapeError("make_positive_view expects [N,C,H,W]");
  const std::size_t n = images.shape()[0], c = images.shape()[1], h = images.shape()[2], w = images.shape()[3];
  const long pad = static_cast<long>(policy.crop_pad);
  std::vector<long> src(images.size());
  std::vector<double> offset(images.size());
  std::bernoulli_distribution flip(policy.flip_prob);
  std::uniform_int_distribution<long> shift(0, 2 * pad);
  std::uniform_real_distribution<double> jitter(-policy.brightness, policy.brightness);
  for (std::size_t b = 0; b < n; ++b) {
    const bool flipped = policy.flip_prob > 0.0 && flip(rng);
    const long oy = pad > 0 ? shift(rng) - pad : 0;
    const long ox = pad > 0 ? shift(rng) - pad : 0;
    const double delta = policy.brightness > 0.0 ? jitter(rng) : 0.0;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) {
          const std::size_t j = ((b * c + ch) * h + y) * w + x;
          const long sy = static_cast<long>(y) + oy;
          long sx = static_cast<long>(x) + ox;
          offset[j] = delta;
          if (sy < 0 || sy >= static_cast<long>(h) || sx < 0 || sx >= static_cast<long>(w)) {
            src[j] = -1;
            continue;
          }
          if (flipped) sx = static_cast<long>(w) - 1 - sx;
          src[j] = static_cast<long>(((b * c + ch) * h) * w) + sy * static_cast<long>(w) + sx;
        }
  }
  return ops::remap(images, std::move(src), std::move(offset), 0.0, 1.0);
}

inline Tensor make_positive_view(const Tensor& images, const AugmentPolicy& policy, Rng& rng) {
  NoGradGuard guard;
  return make_positive_view(Var(images), policy, rng).value();
}

// ---------------------------------------------------------------------------
// Contrastive loss

struct ContrastiveOptions {
  double temperature = 0.07;
  /// false: denominator sums over negatives only. true: the positive term joins
  /// the denominator (InfoNCE).
  bool positive_in_denominator = false;
  std::size_t max_negatives = 64;
  double eps = 1e-8;
  AugmentPolicy policy;
};

/// Contrastive loss on projections.
///   anchors, positives: [N,p]; negatives: [M,p];
///   negative_mask (optional, N*M): 0 excludes negative j for anchor i.
/// loss = mean_i [ -cos(a_i, a_i+)/tp + log sum_j exp(cos(a_i, n_j)/tp) ]
inline Var contrastive_loss(const Var& anchors, const Var& positives, const Var& negatives, const ContrastiveOptions& opt,
                            const std::vector<char>& negative_mask = {}) {
  if (!(opt.temperature > 0.0)) throw Error("contrastive temperature must be > 0");
  if (negatives.value().rank() != 2 || negatives.shape()[0] == 0) throw Error("contrastive loss needs at least one negative");
  const std::size_t n = anchors.shape().at(0), m = negatives.shape()[0];
  if (n == 0) throw Error("contrastive loss needs at least one anchor");
  Var pos = ops::scale(ops::cosine_rows(anchors, positives, opt.eps), 1.0 / opt.temperature);  // [N]
  Var neg = ops::scale(ops::cosine_matrix(anchors, negatives, opt.eps), 1.0 / opt.temperature);  // [N,M]
  Var denom;
  if (opt.positive_in_denominator) {
    std::vector<char> mask;
    if (!negative_mask.empty()) {
      mask.assign(n * (m + 1), 1);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) mask[i * (m + 1) + 1 + j] = negative_mask[i * m + j];
    }
    denom = ops::logsumexp_rows(ops::concat_features({ops::reshape(pos, {n, 1}), neg}), mask);
  } else {
    denom = ops::logsumexp_rows(neg, negative_mask);
  }
  return ops::mean(ops::sub(denom, pos));
}

/// Contrastive loss for a batch of anchor images whose teacher forward pass is
/// already available. Positive views are built with `opt.policy`; negatives are
/// a uniform sample of min(max_negatives, bank size) bank entries shared by all
/// anchors, or the other anchors of the batch when the bank is empty.
inline Var contrastive_loss(const Var& anchor_images, const ClassifierOutput& anchor_out, const MemoryBank& bank,
                            const Classifier& teacher, const Discriminator& disc, const ContrastiveOptions& opt,
                            Rng& rng) {
  const std::size_t n = anchor_images.shape().at(0);
  Var z_anchor = disc(Discriminator::features_of(anchor_out));
  Var positives = make_positive_view(anchor_images, opt.policy, rng);
  Var z_pos = disc(Discriminator::features_of(teacher.evaluate(positives)));

  if (bank.empty()) {
    if (n < 2) throw Error("contrastive loss: empty bank and a single anchor leaves no negatives");
    std::vector<char> mask(n * n, 1);
    for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 0;
    return contrastive_loss(z_anchor, z_pos, z_anchor, opt, mask);
  }
  Tensor neg_images = bank.gather(bank.sample(opt.max_negatives, rng));
  Var neg_features;
  {
    NoGradGuard guard;
    neg_features = Discriminator::features_of(teacher.evaluate(Var(neg_images)));
  }
  Var z_neg = disc(neg_features.detach());
  return contrastive_loss(z_anchor, z_pos, z_neg, opt);
}

inline Var contrastive_loss(const Var& anchor_images, const MemoryBank& bank, const Classifier& teacher,
                            const Discriminator& disc, const ContrastiveOptions& opt, Rng& rng) {
  return contrastive_loss(anchor_images, teacher.evaluate(anchor_images), bank, teacher, disc, opt, rng);
}

}  // namespace dda
