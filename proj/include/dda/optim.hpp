#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

#include "dda/autograd.hpp"

namespace dda::optim {

inline void zero_grad(std::vector<Var>& params) {
  for (auto& p : params) p.zero_grad();
}

class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& p : params_) {
      m_.emplace_back(p.shape());
      v_.emplace_back(p.shape());
    }
  }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& node = *params_[k].node();
      if (!node.has_grad()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const double g = node.grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
        node.value[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }

  void zero_grad() { optim::zero_grad(params_); }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Var> params_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
  std::vector<Tensor> m_, v_;
};

/// SGD with classical momentum and L2 weight decay folded into the gradient.
class Sgd {
 public:
  Sgd(std::vector<Var> params, double lr, double momentum, double weight_decay)
      : params_(std::move(params)), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
    for (const auto& p : params_) buf_.emplace_back(p.shape());
  }

  void step() {
    for (std::size_t k = 0; k < params_.size(); ++k) {
      auto& node = *params_[k].node();
      if (!node.has_grad()) continue;
      auto& b = buf_[k];
      for (std::size_t i = 0; i < node.value.size(); ++i) {
        const double g = node.grad[i] + weight_decay_ * node.value[i];
        b[i] = momentum_ * b[i] + g;
        node.value[i] -= lr_ * b[i];
      }
    }
  }

  void zero_grad() { optim::zero_grad(params_); }
  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Var> params_;
  double lr_, momentum_, weight_decay_;
  std::vector<Tensor> buf_;
};

/// Cosine-annealed learning rate at progress step/total (clamped to [0,1]).
inline double cosine_lr(double base, std::size_t step, std::size_t total) {
  if (total == 0) return base;
  const double t = std::min(1.0, static_cast<double>(step) / static_cast<double>(total));
  return 0.5 * base * (1.0 + std::cos(std::numbers::pi * t));
}

}  // namespace dda::optim
