#pragma once

// Supervised training on labeled data (teacher pretraining and the
// scratch-trained student baseline).

#include <chrono>
#include <numeric>
#include <random>
#include <vector>

#include "dda/evaluation.hpp"

namespace dda {

struct SupervisedConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 64;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::size_t max_shift = 1;  // random translation in pixels, zero fill
  std::uint64_t seed = 0;
};

struct SupervisedEpoch {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  double seconds = 0.0;
};

/// Copies images with each one translated by an independent random offset.
inline Tensor random_shift(const Tensor& images, std::size_t max_shift, Rng& rng) {
  if (max_shift == 0) return images;
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  const long m = static_cast<long>(max_shift);
  std::uniform_int_distribution<long> d(-m, m);
  Tensor out(images.shape(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const long dy = d(rng), dx = d(rng);
    for (std::size_t ch = 0; ch < c; ++ch)
      for (long y = 0; y < static_cast<long>(h); ++y)
        for (long x = 0; x < static_cast<long>(w); ++x) {
          const long sy = y - dy, sx = x - dx;
          if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
          out[((i * c + ch) * h + static_cast<std::size_t>(y)) * w + static_cast<std::size_t>(x)] =
              images[((i * c + ch) * h + static_cast<std::size_t>(sy)) * w + static_cast<std::size_t>(sx)];
        }
  }
  return out;
}

inline std::vector<SupervisedEpoch> train_supervised(Classifier& model, const ImageBatch& train,
                                                     const SupervisedConfig& cfg, const ImageBatch* test = nullptr) {
  if (train.empty() || train.labels.size() != train.size()) throw Error("train_supervised: need labeled data");
  Rng rng(cfg.seed);
  optim::Sgd opt(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t per = train.image_shape().numel();
  std::vector<SupervisedEpoch> log;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto t0 = std::chrono::steady_clock::now();
    opt.set_lr(optim::cosine_lr(cfg.lr, e, cfg.epochs));
    std::shuffle(order.begin(), order.end(), rng);
    SupervisedEpoch rec;
    rec.epoch = e;
    std::size_t steps = 0, hits = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      const std::size_t b = std::min(cfg.batch_size, order.size() - s);
      if (b < 2) break;
      Tensor x(train.image_shape().batch(b));
      std::vector<std::size_t> y(b);
      for (std::size_t r = 0; r < b; ++r) {
        const std::size_t i = order[s + r];
        std::copy_n(train.images.ptr() + i * per, per, x.ptr() + r * per);
        y[r] = train.labels[i];
      }
      x = random_shift(x, cfg.max_shift, rng);
      opt.zero_grad();
      auto out = model.train_forward(Var(x));
      Var loss = cross_entropy(out.logits, y);
      if (!std::isfinite(loss.item())) throw PipelineFault("teacher-training", "non-finite loss at epoch " + std::to_string(e));
      loss.backward();
      opt.step();
      rec.loss += loss.item();
      ++steps;
      const auto& lv = out.logits.value();
      const std::size_t c = lv.dim(1);
      for (std::size_t r = 0; r < b; ++r) {
        const double* row = lv.ptr() + r * c;
        hits += static_cast<std::size_t>(std::max_element(row, row + c) - row) == y[r];
      }
    }
    rec.loss /= static_cast<double>(std::max<std::size_t>(1, steps));
    rec.train_accuracy = static_cast<double>(hits) / static_cast<double>(train.size());
    if (test) rec.test_accuracy = accuracy(model, *test);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log.push_back(rec);
  }
  return log;
}

}  // namespace dda
