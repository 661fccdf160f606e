#pragma once

// Accuracy, Frechet distance between Gaussian fits of feature sets, and
// similarity distributions of augmentation records.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "dda/augmentation.hpp"
#include "dda/log.hpp"

namespace dda {

inline std::vector<std::size_t> predict(const Classifier& model, const Tensor& images, std::size_t chunk = 256) {
  NoGradGuard guard;
  const Tensor logits =
      evaluate_chunked(images, chunk, [&](const Tensor& x) { return forward_logits(model, Var(x)).value(); });
  const std::size_t c = logits.dim(1);
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double* row = logits.ptr() + i * c;
    out[i] = static_cast<std::size_t>(std::max_element(row, row + c) - row);
  }
  return out;
}

inline double accuracy(const Classifier& model, const ImageBatch& data) {
  if (data.empty()) throw Error("accuracy: empty dataset");
  if (data.labels.size() != data.size()) throw Error("accuracy: dataset is unlabeled");
  const auto pred = predict(model, data.images);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == data.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

// ---------------------------------------------------------------------------
// Frechet distance

struct FeatureSetSummary {
  std::string tag;
  Eigen::VectorXd mean;
  Eigen::MatrixXd cov;  // unbiased (N-1)
  std::size_t count = 0;
  bool low_rank = false;  // count <= dimension

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
};

/// Gaussian fit of [N,D] features.
inline FeatureSetSummary summarize(const std::string& tag, const Tensor& features) {
  if (features.rank() != 2) throw ShapeError("summarize expects [N,D] features");
  const std::size_t n = features.dim(0), d = features.dim(1);
  if (n < 2) throw Error("summarize: need at least 2 samples for a covariance");
  using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Eigen::Map<const RowMat> x(features.ptr(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  FeatureSetSummary s;
  s.tag = tag;
  s.count = n;
  s.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - s.mean.transpose();
  s.cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  s.cov = 0.5 * (s.cov + s.cov.transpose());
  s.low_rank = n < d + 1;
  if (s.low_rank) log::warn("feature summary '" + tag + "': " + std::to_string(n) + " samples for dimension " +
                            std::to_string(d) + " gives a low-rank covariance");
  return s;
}

inline FeatureSetSummary summarize(const std::string& tag, const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw Error("summarize: no samples");
  Tensor t(Shape{rows.size(), rows[0].size()});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows[0].size()) throw ShapeError("summarize: ragged rows");
    std::copy(rows[i].begin(), rows[i].end(), t.ptr() + i * rows[0].size());
  }
  return summarize(tag, t);
}

namespace detail {

/// Symmetric PSD square root via eigendecomposition; eigenvalues down to
/// -tol are clipped to zero, anything more negative is an error.
inline Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what, double tol = 1e-6) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
  if (es.info() != Eigen::Success) throw Error(std::string("fid: eigendecomposition of ") + what + " failed");
  Eigen::VectorXd ev = es.eigenvalues();
  const double lo = ev.minCoeff(), hi = ev.maxCoeff();
  if (lo < -tol * std::max(1.0, hi)) {
    std::ostringstream msg;
    msg << "fid: " << what << " is not positive semidefinite (eigenvalues in [" << lo << ", " << hi << "])";
    throw Error(msg.str());
  }
  ev = ev.cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace detail

/// |mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), using the symmetric form
/// (S_a S_b)^{1/2} ~ (S_a^{1/2} S_b S_a^{1/2})^{1/2} for the trace.
inline double fid(const FeatureSetSummary& a, const FeatureSetSummary& b) {
  if (a.dim() != b.dim()) {
    throw ShapeError("fid: dimension mismatch " + std::to_string(a.dim()) + " vs " + std::to_string(b.dim()));
  }
  const Eigen::MatrixXd sa = detail::psd_sqrt(a.cov, "first covariance");
  const Eigen::MatrixXd inner = sa * b.cov * sa;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (inner + inner.transpose()), Eigen::EigenvaluesOnly);
  if (es.info() != Eigen::Success) throw Error("fid: eigendecomposition of the covariance product failed");
  double tr_sqrt = 0.0;
  const double scale = std::max(1.0, es.eigenvalues().cwiseAbs().maxCoeff());
  for (Eigen::Index i = 0; i < es.eigenvalues().size(); ++i) {
    const double ev = es.eigenvalues()[i];
    if (ev < -1e-6 * scale) {
      std::ostringstream msg;
      msg << "fid: covariance product has eigenvalue " << ev << " (scale " << scale << ")";
      throw Error(msg.str());
    }
    tr_sqrt += std::sqrt(std::max(0.0, ev));
  }
  const double value = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
  return std::max(0.0, value);
}

inline constexpr std::array<const char*, 3> kFidDepths = {"first-pool", "second-pool", "final-pool"};

using DepthSummaries = std::array<FeatureSetSummary, 3>;

/// Teacher features at its two intermediate pooling stages and the final pool.
inline DepthSummaries depth_summaries(const Classifier& model, const Tensor& images, std::size_t chunk = 256) {
  NoGradGuard guard;
  std::array<std::vector<Tensor>, 3> parts;
  const std::size_t n = images.dim(0), per = images.row_size();
  for (std::size_t s = 0; s < n; s += chunk) {
    const std::size_t e = std::min(n, s + chunk);
    Shape shape = images.shape();
    shape[0] = e - s;
    Tensor x(shape, std::vector<double>(images.ptr() + s * per, images.ptr() + e * per));
    auto out = model.evaluate(Var(x));
    if (out.pooled.size() < 2) throw Error("depth summaries need a classifier with two intermediate pooling stages");
    parts[0].push_back(out.pooled[0].value());
    parts[1].push_back(out.pooled[1].value());
    parts[2].push_back(out.embedding.value());
  }
  DepthSummaries s;
  for (std::size_t d = 0; d < 3; ++d) s[d] = summarize(kFidDepths[d], stack_images(parts[d]));
  return s;
}

inline std::array<double, 3> fid_block(const DepthSummaries& a, const DepthSummaries& b) {
  return {fid(a[0], b[0]), fid(a[1], b[1]), fid(a[2], b[2])};
}

// ---------------------------------------------------------------------------
// Similarity profile

struct SimilarityProfile {
  std::size_t count = 0;
  double mean = 0.0;
  std::vector<double> quantile_levels;
  std::vector<double> quantiles;
  std::vector<double> omega_grid;
  std::vector<double> retained_fraction;  // fraction with s > omega, per grid value
};

inline std::vector<double> default_omega_grid() {
  return {-1.0, -0.5, 0.0, 0.25, 0.5, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95, 1.0};
}

/// Linear-interpolation quantile of sorted data.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw Error("quantile of empty data");
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(sorted.size() - 1, lo + 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

inline SimilarityProfile similarity_profile(std::vector<double> sims, std::vector<double> grid = default_omega_grid()) {
  if (sims.empty()) throw Error("similarity_profile: no similarities");
  std::sort(sims.begin(), sims.end());
  std::sort(grid.begin(), grid.end());
  SimilarityProfile p;
  p.count = sims.size();
  for (double s : sims) p.mean += s;
  p.mean /= static_cast<double>(sims.size());
  p.quantile_levels = {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0};
  for (double q : p.quantile_levels) p.quantiles.push_back(quantile_sorted(sims, q));
  p.omega_grid = grid;
  for (double w : grid) {
    const auto above = sims.end() - std::upper_bound(sims.begin(), sims.end(), w);
    p.retained_fraction.push_back(static_cast<double>(above) / static_cast<double>(sims.size()));
  }
  return p;
}

inline SimilarityProfile similarity_profile(const std::vector<AugmentationRecord>& records,
                                            std::vector<double> grid = default_omega_grid()) {
  if (records.empty()) throw Error("similarity_profile: no records");
  std::vector<double> sims;
  for (const auto& r : records) sims.insert(sims.end(), r.similarities.begin(), r.similarities.end());
  return similarity_profile(std::move(sims), std::move(grid));
}

}  // namespace dda
