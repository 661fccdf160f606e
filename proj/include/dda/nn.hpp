#pragma once

#include <cmath>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dda/ops.hpp"

namespace dda {

using Rng = std::mt19937_64;

/// Named view of every tensor that makes up a model's state, in a stable order.
using NamedTensors = std::vector<std::pair<std::string, Tensor*>>;

namespace nn {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::uniform_real_distribution<double> dist(-bound, bound);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

inline Tensor normal_tensor(Shape shape, double stddev, Rng& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = dist(rng);
  return t;
}

struct Linear {
  Var weight;
  Var bias;

  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    weight = Var(uniform_tensor({out, in}, bound, rng), true);
    bias = Var(uniform_tensor({out}, bound, rng), true);
  }

  Var operator()(const Var& x) const { return ops::linear(x, weight, bias); }
  std::size_t in_features() const { return weight.shape()[1]; }
  std::size_t out_features() const { return weight.shape()[0]; }

  void collect(const std::string& prefix, std::vector<Var>& params, NamedTensors* named) {
    params.push_back(weight);
    params.push_back(bias);
    if (named) {
      named->emplace_back(prefix + ".weight", &weight.mutable_value());
      named->emplace_back(prefix + ".bias", &bias.mutable_value());
    }
  }
};

struct Conv2d {
  Var weight;
  Var bias;
  std::size_t pad = 1;

  Conv2d() = default;
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t padding, Rng& rng) : pad(padding) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in * kernel * kernel));
    weight = Var(uniform_tensor({out, in, kernel, kernel}, bound, rng), true);
    bias = Var(uniform_tensor({out}, bound, rng), true);
  }

  Var operator()(const Var& x) const { return ops::conv2d(x, weight, bias, pad); }

  void collect(const std::string& prefix, std::vector<Var>& params, NamedTensors* named) {
    params.push_back(weight);
    params.push_back(bias);
    if (named) {
      named->emplace_back(prefix + ".weight", &weight.mutable_value());
      named->emplace_back(prefix + ".bias", &bias.mutable_value());
    }
  }
};

/// Batch normalization over channels of [N,C] or [N,C,H,W] inputs.
/// Fresh layers start with running mean 0 and running variance 1.
struct BatchNorm {
  Var gamma;
  Var beta;
  Tensor running_mean;
  Tensor running_var;
  double momentum = 0.1;
  double eps = 1e-5;

  BatchNorm() = default;
  explicit BatchNorm(std::size_t channels)
      : gamma(Tensor({channels}, 1.0), true),
        beta(Tensor({channels}, 0.0), true),
        running_mean({channels}, 0.0),
        running_var({channels}, 1.0) {}

  std::size_t channels() const { return running_mean.size(); }

  /// Training mode normalizes with batch statistics and updates the running
  /// estimates (unbiased variance, exponential moving average).
  Var train(const Var& x) {
    Tensor mu, var;
    Var y = ops::batch_norm_train(x, gamma, beta, eps, &mu, &var);
    const auto l = ops::detail::channel_layout(x.value());
    const double m = static_cast<double>(l.n * l.s);
    const double unbias = m > 1 ? m / (m - 1.0) : 1.0;
    for (std::size_t c = 0; c < channels(); ++c) {
      running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mu[c];
      running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c] * unbias;
    }
    return y;
  }

  Var eval(const Var& x) const { return ops::batch_norm_eval(x, gamma, beta, running_mean, running_var, eps); }

  void collect(const std::string& prefix, std::vector<Var>& params, NamedTensors* named) {
    params.push_back(gamma);
    params.push_back(beta);
    if (named) {
      named->emplace_back(prefix + ".gamma", &gamma.mutable_value());
      named->emplace_back(prefix + ".beta", &beta.mutable_value());
      named->emplace_back(prefix + ".running_mean", &running_mean);
      named->emplace_back(prefix + ".running_var", &running_var);
    }
  }
};

}  // namespace nn
}  // namespace dda
