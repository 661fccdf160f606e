#pragma once

#include <cstddef>
#include <string>

#include "dda/error.hpp"

namespace dda {

/// Every scalar the losses need. Defaults are the library's chosen values;
/// the desk presets in configs/ override a few of them.
struct HyperParams {
  // inversion loss: alpha * L_cls + beta * L_bn
  double alpha = 1.0;
  double beta = 10.0;
  // synthesis objective: alpha' * L_in + beta' * L_c
  double alpha_prime = 1.0;
  double beta_prime = 0.5;
  // total loss weights
  double eta_kl = 1.0;
  double eta_synth = 1.0;
  double eta_self = 0.5;
  // temperatures
  double kd_temperature = 4.0;
  double contrastive_temperature = 0.07;
  // augmentation
  double omega = 0.75;
  std::size_t augmentations = 3;
  std::size_t diffusion_steps = 50;
  double guidance_scale = 0.5;

  void validate() const {
    auto nonneg = [](double v, const char* name) {
      if (!(v >= 0.0)) throw Error(std::string("hyperparameter ") + name + " must be >= 0");
    };
    nonneg(alpha, "alpha");
    nonneg(beta, "beta");
    nonneg(alpha_prime, "alpha_prime");
    nonneg(beta_prime, "beta_prime");
    nonneg(eta_kl, "eta_kl");
    nonneg(eta_synth, "eta_synth");
    nonneg(eta_self, "eta_self");
    nonneg(guidance_scale, "guidance_scale");
    if (!(kd_temperature > 0.0)) throw Error("kd_temperature must be > 0");
    if (!(contrastive_temperature > 0.0)) throw Error("contrastive_temperature must be > 0");
    if (!(omega >= -1.0 && omega <= 1.0)) throw Error("omega must lie in [-1, 1]");
    if (augmentations < 1) throw Error("augmentations (K) must be >= 1");
    if (diffusion_steps < 1) throw Error("diffusion_steps must be >= 1");
  }
};

}  // namespace dda
