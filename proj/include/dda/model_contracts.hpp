#pragma once

// Behavioural contracts for the networks the pipeline touches (classifiers,
// generator, discriminator) plus the concrete desk-scale architectures.

#include <nlohmann/json.hpp>

#include <cstdint>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "dda/nn.hpp"

namespace dda {

struct ImageShape {
  std::size_t channels = 1;
  std::size_t height = 8;
  std::size_t width = 8;

  std::size_t numel() const { return channels * height * width; }
  Shape batch(std::size_t n) const { return {n, channels, height, width}; }
  friend bool operator==(const ImageShape&, const ImageShape&) = default;
};

inline std::string to_string(const ImageShape& s) {
  return std::to_string(s.channels) + "x" + std::to_string(s.height) + "x" + std::to_string(s.width);
}

/// A batch of images in [N,C,H,W] layout with optional per-image labels.
struct ImageBatch {
  Tensor images;
  std::vector<std::size_t> labels;

  ImageBatch() = default;
  ImageBatch(Tensor imgs, std::vector<std::size_t> lbls) : images(std::move(imgs)), labels(std::move(lbls)) {
    if (images.rank() != 4) throw ShapeError("ImageBatch expects [N,C,H,W], got " + dda::to_string(images.shape()));
    if (!labels.empty() && labels.size() != images.dim(0)) throw ShapeError("ImageBatch: label count != image count");
  }

  std::size_t size() const { return images.rank() == 4 ? images.dim(0) : 0; }
  bool empty() const { return size() == 0; }
  ImageShape image_shape() const { return {images.dim(1), images.dim(2), images.dim(3)}; }

  /// Copy of image i as a [1,C,H,W] tensor.
  Tensor image(std::size_t i) const {
    const std::size_t n = images.row_size();
    std::vector<double> v(images.ptr() + i * n, images.ptr() + (i + 1) * n);
    auto s = image_shape();
    return Tensor(s.batch(1), std::move(v));
  }
};

/// Stacks [1,C,H,W] (or [n,C,H,W]) tensors into one batch.
inline Tensor stack_images(const std::vector<Tensor>& images) {
  if (images.empty()) throw ShapeError("stack_images: empty input");
  Shape shape = images[0].shape();
  std::size_t n = 0;
  for (const auto& t : images) n += t.dim(0);
  shape[0] = n;
  Tensor out(shape);
  std::size_t offset = 0;
  for (const auto& t : images) {
    if (t.row_size() != images[0].row_size()) throw ShapeError("stack_images: mixed image shapes");
    std::copy(t.data().begin(), t.data().end(), out.ptr() + offset);
    offset += t.size();
  }
  return out;
}

struct BNLayerStats {
  Tensor mean;
  Tensor var;
  friend bool operator==(const BNLayerStats&, const BNLayerStats&) = default;
};
using BNStats = std::vector<BNLayerStats>;

/// Differentiable per-channel mean and (biased) variance of a BN layer's input.
struct BatchMoments {
  Var mean;
  Var var;
};

struct ClassifierOutput {
  Var logits;                            // [B, label_count]
  Var embedding;                         // [B, d], penultimate representation
  std::vector<Var> pooled;               // global-average of each intermediate pooling stage
  std::vector<BatchMoments> bn_moments;  // filled when capture_bn is requested
};

/// Image classifier contract shared by teacher and student.
class Classifier {
 public:
  virtual ~Classifier() = default;

  virtual std::string architecture() const = 0;
  virtual std::size_t label_count() const = 0;
  virtual std::size_t feature_dim() const = 0;
  virtual std::size_t bn_layer_count() const = 0;
  virtual ImageShape input_shape() const = 0;

  /// Inference-mode forward. BN layers use running statistics; the model is not modified.
  virtual ClassifierOutput evaluate(const Var& images, bool capture_bn = false) const = 0;
  /// Training-mode forward. BN layers use batch statistics and update their running estimates.
  virtual ClassifierOutput train_forward(const Var& images) = 0;
  /// Classifier head psi applied to penultimate embeddings.
  virtual Var head(const Var& embedding) const = 0;

  virtual BNStats running_bn_statistics() const = 0;
  virtual std::vector<Var> parameters() = 0;
  virtual NamedTensors named_tensors() = 0;
  virtual nlohmann::json metadata() const = 0;
};

/// 64-bit FNV-1a over every parameter and buffer.
template <typename Model>
std::uint64_t checksum(const Model& model) {
  std::uint64_t h = 1469598103934665603ULL;
  for (const auto& [name, t] : const_cast<Model&>(model).named_tensors()) {
    for (char ch : name) h = (h ^ static_cast<unsigned char>(ch)) * 1099511628211ULL;
    for (double v : t->data()) {
      std::uint64_t bits;
      std::memcpy(&bits, &v, sizeof bits);
      for (int k = 0; k < 8; ++k) h = (h ^ ((bits >> (8 * k)) & 0xffU)) * 1099511628211ULL;
    }
  }
  return h;
}

namespace detail {
inline void check_input(const Classifier& model, const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) {
    throw ShapeError("classifier input must be a non-empty [N,C,H,W] batch, got " + to_string(images.shape()));
  }
  const ImageShape got{images.dim(1), images.dim(2), images.dim(3)};
  if (!(got == model.input_shape())) {
    throw ShapeError("image shape " + to_string(got) + " does not match model input " + to_string(model.input_shape()));
  }
}

inline void check_finite(const Var& v, const char* what) {
  if (!v.value().all_finite()) throw PipelineFault("forward", std::string("non-finite ") + what);
}
}  // namespace detail

/// Logits of an inference-mode forward. Differentiable w.r.t. `images` when gradients are enabled.
inline Var forward_logits(const Classifier& model, const Var& images) {
  detail::check_input(model, images.value());
  auto out = model.evaluate(images);
  detail::check_finite(out.logits, "logits");
  return out.logits;
}

inline Tensor forward_logits(const Classifier& model, const ImageBatch& batch) {
  NoGradGuard guard;
  return forward_logits(model, Var(batch.images)).value();
}

inline Var penultimate_embedding(const Classifier& model, const Var& images) {
  detail::check_input(model, images.value());
  auto out = model.evaluate(images);
  detail::check_finite(out.embedding, "embedding");
  return out.embedding;
}

inline Tensor penultimate_embedding(const Classifier& model, const ImageBatch& batch) {
  NoGradGuard guard;
  return penultimate_embedding(model, Var(batch.images)).value();
}

/// Differentiable per-layer statistics of the pre-normalization activations.
inline std::vector<BatchMoments> batch_bn_moments(const Classifier& model, const Var& images) {
  detail::check_input(model, images.value());
  if (images.shape()[0] < 2) throw ShapeError("batch statistics need at least 2 images");
  return model.evaluate(images, true).bn_moments;
}

inline BNStats batch_bn_statistics(const Classifier& model, const ImageBatch& batch) {
  NoGradGuard guard;
  BNStats out;
  for (const auto& m : batch_bn_moments(model, Var(batch.images))) out.push_back({m.mean.value(), m.var.value()});
  return out;
}

inline BNStats running_bn_statistics(const Classifier& model) { return model.running_bn_statistics(); }

// ---------------------------------------------------------------------------
// Concrete classifiers

/// Flatten + single linear layer. The embedding is the flattened input itself,
/// so it has no BN layers and feature_dim = C*H*W.
class LinearClassifier final : public Classifier {
 public:
  LinearClassifier(ImageShape input, std::size_t labels, Rng& rng) : input_(input), fc_(input.numel(), labels, rng) {}

  std::string architecture() const override { return "linear"; }
  std::size_t label_count() const override { return fc_.out_features(); }
  std::size_t feature_dim() const override { return input_.numel(); }
  std::size_t bn_layer_count() const override { return 0; }
  ImageShape input_shape() const override { return input_; }

  ClassifierOutput evaluate(const Var& images, bool /*capture_bn*/ = false) const override {
    ClassifierOutput out;
    out.embedding = ops::reshape(images, {images.shape()[0], input_.numel()});
    out.logits = fc_(out.embedding);
    return out;
  }
  ClassifierOutput train_forward(const Var& images) override { return evaluate(images); }
  Var head(const Var& embedding) const override { return fc_(embedding); }
  BNStats running_bn_statistics() const override { return {}; }

  std::vector<Var> parameters() override {
    std::vector<Var> p;
    fc_.collect("fc", p, nullptr);
    return p;
  }
  NamedTensors named_tensors() override {
    std::vector<Var> p;
    NamedTensors named;
    fc_.collect("fc", p, &named);
    return named;
  }
  nlohmann::json metadata() const override {
    return {{"architecture", architecture()}, {"label_count", label_count()}, {"feature_dim", feature_dim()},
            {"bn_layer_count", 0},           {"input", {input_.channels, input_.height, input_.width}}};
  }

  nn::Linear& fc() { return fc_; }

 private:
  ImageShape input_;
  nn::Linear fc_;
};

struct ConvClassifierConfig {
  ImageShape input;
  std::size_t labels = 10;
  std::vector<std::size_t> widths{16, 32, 64, 64};
  std::vector<double> input_mean{0.5};
  std::vector<double> input_std{0.5};
};

/// Stack of conv3x3 -> BN -> ReLU blocks. Every block after the first halves the
/// spatial size with 2x2 average pooling while the map is at least 2x2 before
/// the last block; the head is global average pooling followed by a linear layer.
class ConvClassifier final : public Classifier {
 public:
  ConvClassifier(ConvClassifierConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    if (cfg_.widths.empty()) throw ShapeError("ConvClassifier needs at least one block");
    if (cfg_.input_mean.size() != cfg_.input.channels || cfg_.input_std.size() != cfg_.input.channels) {
      throw ShapeError("ConvClassifier: normalization constants must have one entry per channel");
    }
    std::size_t in = cfg_.input.channels;
    std::size_t h = cfg_.input.height, w = cfg_.input.width;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      convs_.emplace_back(in, cfg_.widths[i], 3, 1, rng);
      bns_.emplace_back(cfg_.widths[i]);
      const bool pool = i > 0 && i + 1 < cfg_.widths.size() && h >= 2 && w >= 2;
      pool_.push_back(pool);
      if (pool) {
        h /= 2;
        w /= 2;
      }
      in = cfg_.widths[i];
    }
    fc_ = nn::Linear(in, cfg_.labels, rng);
  }

  std::string architecture() const override { return "bn-cnn"; }
  std::size_t label_count() const override { return cfg_.labels; }
  std::size_t feature_dim() const override { return cfg_.widths.back(); }
  std::size_t bn_layer_count() const override { return bns_.size(); }
  ImageShape input_shape() const override { return cfg_.input; }
  const ConvClassifierConfig& config() const { return cfg_; }

  ClassifierOutput evaluate(const Var& images, bool capture_bn = false) const override {
    return run(images, capture_bn, [this](std::size_t i, const Var& x) { return bns_[i].eval(x); });
  }

  ClassifierOutput train_forward(const Var& images) override {
    return run(images, false, [this](std::size_t i, const Var& x) { return bns_[i].train(x); });
  }

  Var head(const Var& embedding) const override { return fc_(embedding); }

  BNStats running_bn_statistics() const override {
    BNStats out;
    for (const auto& bn : bns_) out.push_back({bn.running_mean, bn.running_var});
    return out;
  }

  std::vector<Var> parameters() override {
    std::vector<Var> p;
    collect(p, nullptr);
    return p;
  }
  NamedTensors named_tensors() override {
    std::vector<Var> p;
    NamedTensors named;
    collect(p, &named);
    return named;
  }

  nlohmann::json metadata() const override {
    return {{"architecture", architecture()},
            {"label_count", label_count()},
            {"feature_dim", feature_dim()},
            {"bn_layer_count", bn_layer_count()},
            {"input", {cfg_.input.channels, cfg_.input.height, cfg_.input.width}},
            {"widths", cfg_.widths},
            {"input_mean", cfg_.input_mean},
            {"input_std", cfg_.input_std},
            {"pixel_range", "[0,1]"}};
  }

  /// Widths of the intermediate pooled features (the first entries of `pooled`).
  std::vector<std::size_t> pooled_widths() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < pool_.size(); ++i)
      if (pool_[i]) out.push_back(cfg_.widths[i]);
    return out;
  }

 private:
  template <typename Norm>
  ClassifierOutput run(const Var& images, bool capture_bn, Norm&& norm) const {
    detail::check_input(*this, images.value());
    std::vector<double> mul, add;
    for (std::size_t c = 0; c < cfg_.input.channels; ++c) {
      mul.push_back(1.0 / cfg_.input_std[c]);
      add.push_back(-cfg_.input_mean[c] / cfg_.input_std[c]);
    }
    ClassifierOutput out;
    Var h = ops::affine_channels(images, mul, add);
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      h = convs_[i](h);
      if (capture_bn) out.bn_moments.push_back({ops::channel_mean(h), ops::channel_var(h)});
      h = ops::relu(norm(i, h));
      if (pool_[i]) {
        h = ops::avg_pool2(h);
        out.pooled.push_back(ops::global_avg_pool(h));
      }
    }
    out.embedding = ops::global_avg_pool(h);
    out.logits = fc_(out.embedding);
    return out;
  }

  void collect(std::vector<Var>& p, NamedTensors* named) {
    for (std::size_t i = 0; i < convs_.size(); ++i) {
      convs_[i].collect("conv" + std::to_string(i), p, named);
      bns_[i].collect("bn" + std::to_string(i), p, named);
    }
    fc_.collect("fc", p, named);
  }

  ConvClassifierConfig cfg_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm> bns_;
  std::vector<bool> pool_;
  nn::Linear fc_;
};

/// Half-width variant of a classifier configuration (student sizing).
inline ConvClassifierConfig half_width(ConvClassifierConfig cfg) {
  for (auto& w : cfg.widths) w = std::max<std::size_t>(1, w / 2);
  return cfg;
}

// ---------------------------------------------------------------------------
// Generator

struct GeneratorConfig {
  std::size_t latent_dim = 64;
  std::size_t channels = 32;
  ImageShape output;
};

/// latent -> linear -> [ch, H/4, W/4] -> BN -> up2 -> conv -> BN -> LReLU -> up2
/// -> conv -> BN -> LReLU -> conv -> sigmoid. Output pixels lie in [0,1].
class Generator {
 public:
  Generator(GeneratorConfig cfg, Rng& rng) : cfg_(cfg) {
    if (cfg_.output.height % 4 || cfg_.output.width % 4) throw ShapeError("generator output must be divisible by 4");
    base_h_ = cfg_.output.height / 4;
    base_w_ = cfg_.output.width / 4;
    const std::size_t ch = cfg_.channels;
    fc_ = nn::Linear(cfg_.latent_dim, ch * base_h_ * base_w_, rng);
    bn0_ = nn::BatchNorm(ch);
    conv1_ = nn::Conv2d(ch, ch, 3, 1, rng);
    bn1_ = nn::BatchNorm(ch);
    conv2_ = nn::Conv2d(ch, ch / 2, 3, 1, rng);
    bn2_ = nn::BatchNorm(ch / 2);
    conv3_ = nn::Conv2d(ch / 2, cfg_.output.channels, 3, 1, rng);
  }

  const GeneratorConfig& config() const { return cfg_; }
  std::size_t latent_dim() const { return cfg_.latent_dim; }
  ImageShape output_shape() const { return cfg_.output; }

  Var operator()(const Var& latent) {
    if (latent.value().rank() != 2 || latent.shape()[1] != cfg_.latent_dim) {
      throw ShapeError("generator latent must be [B," + std::to_string(cfg_.latent_dim) + "], got " +
                       dda::to_string(latent.shape()));
    }
    const std::size_t n = latent.shape()[0];
    Var h = ops::reshape(fc_(latent), {n, cfg_.channels, base_h_, base_w_});
    h = bn0_.train(h);
    h = ops::upsample2(h);
    h = ops::leaky_relu(bn1_.train(conv1_(h)), 0.2);
    h = ops::upsample2(h);
    h = ops::leaky_relu(bn2_.train(conv2_(h)), 0.2);
    return ops::sigmoid(conv3_(h));
  }

  std::vector<Var> parameters() {
    std::vector<Var> p;
    collect(p, nullptr);
    return p;
  }
  NamedTensors named_tensors() {
    std::vector<Var> p;
    NamedTensors named;
    collect(p, &named);
    return named;
  }
  nlohmann::json metadata() const {
    return {{"architecture", "latent-deconv"},
            {"latent_dim", cfg_.latent_dim},
            {"channels", cfg_.channels},
            {"output", {cfg_.output.channels, cfg_.output.height, cfg_.output.width}},
            {"pixel_range", "[0,1]"}};
  }

 private:
  void collect(std::vector<Var>& p, NamedTensors* named) {
    fc_.collect("fc", p, named);
    bn0_.collect("bn0", p, named);
    conv1_.collect("conv1", p, named);
    bn1_.collect("bn1", p, named);
    conv2_.collect("conv2", p, named);
    bn2_.collect("bn2", p, named);
    conv3_.collect("conv3", p, named);
  }

  GeneratorConfig cfg_;
  std::size_t base_h_ = 0, base_w_ = 0;
  nn::Linear fc_;
  nn::BatchNorm bn0_, bn1_, bn2_;
  nn::Conv2d conv1_, conv2_, conv3_;
};

// ---------------------------------------------------------------------------
// Discriminator

struct DiscriminatorConfig {
  std::size_t input_dim = 160;
  std::size_t hidden = 64;
  std::size_t projection = 32;
};

/// Two-layer perceptron head over (penultimate embedding ++ pooled intermediate
/// features) producing the projection used for contrastive cosine similarities.
class Discriminator {
 public:
  Discriminator(DiscriminatorConfig cfg, Rng& rng)
      : cfg_(cfg), fc1_(cfg.input_dim, cfg.hidden, rng), fc2_(cfg.hidden, cfg.projection, rng) {}

  const DiscriminatorConfig& config() const { return cfg_; }

  Var operator()(const Var& features) const {
    if (features.value().rank() != 2 || features.shape()[1] != cfg_.input_dim) {
      throw ShapeError("discriminator input must be [B," + std::to_string(cfg_.input_dim) + "], got " +
                       dda::to_string(features.shape()));
    }
    return fc2_(ops::relu(fc1_(features)));
  }

  /// Joins a classifier's embedding with its pooled intermediate features.
  static Var features_of(const ClassifierOutput& out) {
    std::vector<Var> parts{out.embedding};
    parts.insert(parts.end(), out.pooled.begin(), out.pooled.end());
    return parts.size() == 1 ? out.embedding : ops::concat_features(parts);
  }

  std::vector<Var> parameters() {
    std::vector<Var> p;
    fc1_.collect("fc1", p, nullptr);
    fc2_.collect("fc2", p, nullptr);
    return p;
  }
  NamedTensors named_tensors() {
    std::vector<Var> p;
    NamedTensors named;
    fc1_.collect("fc1", p, &named);
    fc2_.collect("fc2", p, &named);
    return named;
  }
  nlohmann::json metadata() const {
    return {{"architecture", "mlp-head"},
            {"input_dim", cfg_.input_dim},
            {"hidden", cfg_.hidden},
            {"projection", cfg_.projection}};
  }

 private:
  DiscriminatorConfig cfg_;
  nn::Linear fc1_, fc2_;
};

/// Discriminator input width implied by a classifier's pooled feature layout.
inline std::size_t discriminator_input_dim(const ConvClassifier& model) {
  std::size_t d = model.feature_dim();
  for (auto w : model.pooled_widths()) d += w;
  return d;
}

// ---------------------------------------------------------------------------
// Diffusion backend

/// Latent representation of one image produced by a backend's image encoder.
struct Latent {
  Tensor code;
  ImageShape shape;
};

/// Image-variation backend: encodes an image to a latent and decodes seeded
/// variations of it. Implementations must be safe to call concurrently.
class DiffusionBackend {
 public:
  struct Request {
    const Latent* latent = nullptr;
    std::uint64_t seed = 0;
    double intensity_scale = 1.0;
  };

  virtual ~DiffusionBackend() = default;
  virtual std::string kind() const = 0;
  virtual std::string version() const = 0;
  virtual std::size_t steps() const = 0;
  virtual double guidance_scale() const = 0;
  /// Deterministic encoding of one [1,C,H,W] image.
  virtual Latent encode(const Tensor& image) const = 0;
  /// One variation as a [1,C,H,W] image with pixels in [0,1].
  virtual Tensor generate(const Latent& latent, std::uint64_t seed, double intensity_scale) const = 0;
  /// Outputs are returned in request order.
  virtual std::vector<Tensor> generate_batch(const std::vector<Request>& requests) const {
    std::vector<Tensor> out;
    out.reserve(requests.size());
    for (const auto& r : requests) out.push_back(generate(*r.latent, r.seed, r.intensity_scale));
    return out;
  }
};

}  // namespace dda
