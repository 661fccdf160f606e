#pragma once

// Desk-scale stand-in for a latent diffusion model. Images are encoded with an
// orthonormal 2-D DCT; a variation is produced by an iterated noise-and-shrink
// walk in coefficient space, decoded, then warped by a smooth random
// displacement field and colour-jittered. Everything is driven by one seed.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>

#include "dda/model_contracts.hpp"

namespace dda {

/// splitmix64 step; used to derive independent seeds from structured ids.
inline std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  return mix_seed(mix_seed(mix_seed(mix_seed(base) ^ a) ^ b) ^ c);
}

struct SurrogateDiffusionConfig {
  std::size_t steps = 50;
  double guidance_scale = 0.5;
  /// Base perturbation strength; the guidance scale divides it (higher guidance
  /// stays closer to the source).
  double intensity = 1.0;
  double latent_noise = 0.12;     // coefficient-space noise at intensity 1
  double high_freq_shrink = 0.5;  // total attenuation of the top frequency across all steps
  double warp = 0.6;              // displacement amplitude in pixels at intensity 1
  double jitter = 0.08;           // brightness/contrast jitter at intensity 1
  /// Fraction of variants drawn with an exaggerated intensity; these model the
  /// occasional off-manifold outputs the similarity filter exists to remove.
  double outlier_prob = 0.2;
  double outlier_scale = 4.0;
};

class SurrogateDiffusion final : public DiffusionBackend {
 public:
  explicit SurrogateDiffusion(SurrogateDiffusionConfig cfg = {}) : cfg_(cfg) {
    if (cfg_.steps < 1) throw Error("diffusion steps must be >= 1");
    if (!(cfg_.guidance_scale >= 0.0)) throw Error("guidance scale must be >= 0");
  }

  std::string kind() const override { return "surrogate"; }
  std::string version() const override { return "surrogate-dct-1"; }
  std::size_t steps() const override { return cfg_.steps; }
  double guidance_scale() const override { return cfg_.guidance_scale; }
  const SurrogateDiffusionConfig& config() const { return cfg_; }

  /// Effective strength for a request before outlier inflation.
  double effective_intensity(double intensity_scale) const {
    return cfg_.intensity * intensity_scale / (0.5 + cfg_.guidance_scale);
  }

  Latent encode(const Tensor& image) const override {
    const ImageShape shape = shape_of(image);
    Tensor code(Shape{shape.channels, shape.height, shape.width});
    const auto dh = dct_matrix(shape.height), dw = dct_matrix(shape.width);
    const std::size_t hw = shape.height * shape.width;
    for (std::size_t c = 0; c < shape.channels; ++c) {
      Eigen::Map<const Mat> x(image.ptr() + c * hw, shape.height, shape.width);
      Eigen::Map<Mat> out(code.ptr() + c * hw, shape.height, shape.width);
      out = dh * x * dw.transpose();
    }
    return {std::move(code), shape};
  }

  Tensor decode(const Latent& latent) const {
    const auto& s = latent.shape;
    Tensor image(s.batch(1));
    const auto dh = dct_matrix(s.height), dw = dct_matrix(s.width);
    const std::size_t hw = s.height * s.width;
    for (std::size_t c = 0; c < s.channels; ++c) {
      Eigen::Map<const Mat> z(latent.code.ptr() + c * hw, s.height, s.width);
      Eigen::Map<Mat> out(image.ptr() + c * hw, s.height, s.width);
      out = dh.transpose() * z * dw;
    }
    return image;
  }

  Tensor generate(const Latent& latent, std::uint64_t seed, double intensity_scale) const override {
    const auto& s = latent.shape;
    if (latent.code.size() != s.numel()) throw ShapeError("latent code does not match its declared shape");
    Rng rng(mix_seed(seed));
    std::bernoulli_distribution outlier(cfg_.outlier_prob);
    double strength = effective_intensity(intensity_scale);
    if (cfg_.outlier_prob > 0.0 && outlier(rng)) strength *= cfg_.outlier_scale;

    // Noise-and-shrink walk in coefficient space: each step adds frequency-weighted
    // Gaussian noise, then attenuates high frequencies a little.
    Latent z = latent;
    std::normal_distribution<double> normal(0.0, 1.0);
    const double steps = static_cast<double>(cfg_.steps);
    const double step_noise = cfg_.latent_noise * strength / std::sqrt(steps);
    const double max_freq = static_cast<double>(s.height + s.width - 2);
    for (std::size_t t = 0; t < cfg_.steps; ++t) {
      for (std::size_t c = 0; c < s.channels; ++c)
        for (std::size_t u = 0; u < s.height; ++u)
          for (std::size_t v = 0; v < s.width; ++v) {
            const double f = static_cast<double>(u + v);
            double& coef = z.code[(c * s.height + u) * s.width + v];
            coef += step_noise * normal(rng) / (1.0 + f);
            const double shrink = std::pow(1.0 - cfg_.high_freq_shrink * f / std::max(1.0, max_freq), 1.0 / steps);
            coef = latent.code[(c * s.height + u) * s.width + v] +
                   (coef - latent.code[(c * s.height + u) * s.width + v]) * shrink;
          }
    }
    Tensor image = decode(z);
    image = warp(image, s, strength, rng);

    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    const double contrast = 1.0 + cfg_.jitter * strength * unit(rng);
    const double brightness = cfg_.jitter * strength * unit(rng);
    for (auto& v : image.data()) v = std::clamp((v - 0.5) * contrast + 0.5 + brightness, 0.0, 1.0);
    return image;
  }

 private:
  using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  static ImageShape shape_of(const Tensor& image) {
    if (image.rank() == 4 && image.dim(0) == 1) return {image.dim(1), image.dim(2), image.dim(3)};
    if (image.rank() == 3) return {image.dim(0), image.dim(1), image.dim(2)};
    throw ShapeError("encode expects a single [1,C,H,W] image, got " + to_string(image.shape()));
  }

  /// Orthonormal DCT-II matrix.
  static Mat dct_matrix(std::size_t n) {
    Mat d(n, n);
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < n; ++i) {
        const double a = k == 0 ? std::sqrt(1.0 / static_cast<double>(n)) : std::sqrt(2.0 / static_cast<double>(n));
        d(k, i) = a * std::cos(std::numbers::pi * (static_cast<double>(i) + 0.5) * static_cast<double>(k) /
                               static_cast<double>(n));
      }
    return d;
  }

  /// Bilinear resampling along a smooth displacement field interpolated from a
  /// random 3x3 control grid.
  Tensor warp(const Tensor& image, const ImageShape& s, double strength, Rng& rng) const {
    std::normal_distribution<double> normal(0.0, cfg_.warp * strength);
    double gx[3][3], gy[3][3];
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        gx[i][j] = normal(rng);
        gy[i][j] = normal(rng);
      }
    auto field = [&](double grid[3][3], double y, double x) {
      const double fy = y / std::max<double>(1.0, static_cast<double>(s.height - 1)) * 2.0;
      const double fx = x / std::max<double>(1.0, static_cast<double>(s.width - 1)) * 2.0;
      const int iy = std::min(1, static_cast<int>(fy)), ix = std::min(1, static_cast<int>(fx));
      const double ty = fy - iy, tx = fx - ix;
      return (1 - ty) * ((1 - tx) * grid[iy][ix] + tx * grid[iy][ix + 1]) +
             ty * ((1 - tx) * grid[iy + 1][ix] + tx * grid[iy + 1][ix + 1]);
    };
    Tensor out(image.shape());
    const long h = static_cast<long>(s.height), w = static_cast<long>(s.width);
    for (std::size_t y = 0; y < s.height; ++y)
      for (std::size_t x = 0; x < s.width; ++x) {
        const double sy = static_cast<double>(y) + field(gy, static_cast<double>(y), static_cast<double>(x));
        const double sx = static_cast<double>(x) + field(gx, static_cast<double>(y), static_cast<double>(x));
        const long y0 = static_cast<long>(std::floor(sy)), x0 = static_cast<long>(std::floor(sx));
        const double ty = sy - static_cast<double>(y0), tx = sx - static_cast<double>(x0);
        for (std::size_t c = 0; c < s.channels; ++c) {
          auto px = [&](long yy, long xx) {
            if (yy < 0 || yy >= h || xx < 0 || xx >= w) return 0.0;
            return image[(c * s.height + static_cast<std::size_t>(yy)) * s.width + static_cast<std::size_t>(xx)];
          };
          out[(c * s.height + y) * s.width + x] = (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
                                                  ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
        }
      }
    return out;
  }

  SurrogateDiffusionConfig cfg_;
};

/// Backend whose variants are exact copies of the source (useful as a control).
class IdentityDiffusion final : public DiffusionBackend {
 public:
  std::string kind() const override { return "identity"; }
  std::string version() const override { return "identity-1"; }
  std::size_t steps() const override { return 1; }
  double guidance_scale() const override { return 0.0; }
  Latent encode(const Tensor& image) const override {
    if (image.rank() != 4 || image.dim(0) != 1) throw ShapeError("encode expects a single [1,C,H,W] image");
    return {image, {image.dim(1), image.dim(2), image.dim(3)}};
  }
  Tensor generate(const Latent& latent, std::uint64_t, double) const override { return latent.code; }
};

}  // namespace dda
