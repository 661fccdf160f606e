#pragma once

// Reference implementations written as plain scalar loops, independent of the
// library's tensor ops, plus finite-difference helpers.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <vector>

#include "dda/tensor.hpp"

namespace oracle {

using Vec = std::vector<double>;

inline double log_sum_exp(const Vec& v) {
  double m = -std::numeric_limits<double>::infinity();
  for (double x : v) m = std::max(m, x);
  double s = 0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

/// Mean over rows of -log softmax(row)[label].
inline double cross_entropy(const Vec& logits, std::size_t rows, std::size_t cols, const std::vector<std::size_t>& labels) {
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    Vec row(logits.begin() + i * cols, logits.begin() + (i + 1) * cols);
    total += log_sum_exp(row) - row[labels[i]];
  }
  return total / static_cast<double>(rows);
}

/// Per-layer unsquared L2 distances between batch and running moments, summed.
inline double bn_regularization(const std::vector<Vec>& batch_mean, const std::vector<Vec>& batch_var,
                                const std::vector<Vec>& run_mean, const std::vector<Vec>& run_var) {
  double total = 0;
  for (std::size_t l = 0; l < batch_mean.size(); ++l) {
    double dm = 0, dv = 0;
    for (std::size_t c = 0; c < batch_mean[l].size(); ++c) {
      dm += (batch_mean[l][c] - run_mean[l][c]) * (batch_mean[l][c] - run_mean[l][c]);
      dv += (batch_var[l][c] - run_var[l][c]) * (batch_var[l][c] - run_var[l][c]);
    }
    total += std::sqrt(dm) + std::sqrt(dv);
  }
  return total;
}

/// Per-channel mean and biased variance over (N,H,W) of an NCHW buffer.
inline void channel_moments(const Vec& x, std::size_t n, std::size_t c, std::size_t hw, Vec& mean, Vec& var) {
  mean.assign(c, 0.0);
  var.assign(c, 0.0);
  const double count = static_cast<double>(n * hw);
  for (std::size_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) s += x[(i * c + ch) * hw + p];
    mean[ch] = s / count;
    double q = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t p = 0; p < hw; ++p) {
        const double d = x[(i * c + ch) * hw + p] - mean[ch];
        q += d * d;
      }
    var[ch] = q / count;
  }
}

inline double cosine(const double* a, const double* b, std::size_t d, double eps = 1e-8) {
  double dot = 0, na = 0, nb = 0;
  for (std::size_t k = 0; k < d; ++k) {
    dot += a[k] * b[k];
    na += a[k] * a[k];
    nb += b[k] * b[k];
  }
  return dot / (std::sqrt(na) * std::sqrt(nb) + eps);
}

/// mean_i [ -cos(a_i, p_i)/t + log( [exp(cos(a_i,p_i)/t)] + sum_{j allowed} exp(cos(a_i, n_j)/t) ) ]
inline double contrastive(const Vec& anchors, const Vec& positives, const Vec& negatives, std::size_t n, std::size_t m,
                          std::size_t d, double temperature, bool positive_in_denominator,
                          const std::vector<char>& mask = {}) {
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pos = cosine(&anchors[i * d], &positives[i * d], d) / temperature;
    Vec terms;
    if (positive_in_denominator) terms.push_back(pos);
    for (std::size_t j = 0; j < m; ++j) {
      if (!mask.empty() && !mask[i * m + j]) continue;
      terms.push_back(cosine(&anchors[i * d], &negatives[j * d], d) / temperature);
    }
    total += log_sum_exp(terms) - pos;
  }
  return total / static_cast<double>(n);
}

/// tau^2 / B * sum_i KL(softmax(t_i/tau) || softmax(s_i/tau)).
inline double kd_kl(const Vec& teacher, const Vec& student, std::size_t rows, std::size_t cols, double tau) {
  double total = 0;
  for (std::size_t i = 0; i < rows; ++i) {
    Vec t(cols), s(cols);
    for (std::size_t c = 0; c < cols; ++c) {
      t[c] = teacher[i * cols + c] / tau;
      s[c] = student[i * cols + c] / tau;
    }
    const double zt = log_sum_exp(t), zs = log_sum_exp(s);
    for (std::size_t c = 0; c < cols; ++c) {
      const double lp = t[c] - zt, lq = s[c] - zs;
      total += std::exp(lp) * (lp - lq);
    }
  }
  return tau * tau * total / static_cast<double>(rows);
}

/// Closed form for one-dimensional Gaussians: (mu_a - mu_b)^2 + (sigma_a - sigma_b)^2,
/// fitted with the unbiased variance.
inline double fid_univariate(const Vec& a, const Vec& b) {
  auto fit = [](const Vec& x, double& mu, double& var) {
    mu = 0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(x.size());
    var = 0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(x.size() - 1);
  };
  double ma, va, mb, vb;
  fit(a, ma, va);
  fit(b, mb, vb);
  return (ma - mb) * (ma - mb) + (std::sqrt(va) - std::sqrt(vb)) * (std::sqrt(va) - std::sqrt(vb));
}

/// Central differences of f with respect to every entry of x.
inline Vec numeric_gradient(const std::function<double(const Vec&)>& f, Vec x, double h = 1e-4) {
  Vec g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f(x);
    x[i] = keep - h;
    const double down = f(x);
    x[i] = keep;
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

/// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
inline double relative_error(const Vec& a, const Vec& b) {
  double diff = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double scale = std::max(std::sqrt(na), std::sqrt(nb));
  return scale == 0 ? 0.0 : std::sqrt(diff) / scale;
}

inline double relative_diff(double a, double b) {
  const double scale = std::max({std::abs(a), std::abs(b), 1e-12});
  return std::abs(a - b) / scale;
}

inline Vec random_vec(std::size_t n, std::mt19937_64& rng, double lo = -2.0, double hi = 2.0) {
  std::uniform_real_distribution<double> d(lo, hi);
  Vec v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline dda::Tensor tensor(dda::Shape shape, const Vec& v) { return dda::Tensor(std::move(shape), v); }
inline Vec values(const dda::Tensor& t) { return Vec(t.data().begin(), t.data().end()); }

}  // namespace oracle
