#pragma once

#include "fesvibs/rng.hpp"
#include "fesvibs/tensor.hpp"

namespace fesvibs {

// Gaussian-mechanism noising of smashed representations. The calibration is
// the classical sigma = sqrt(2 ln(1.25/delta)) * C / epsilon with explicit
// per-sample L2 clipping to C; without the clip the sensitivity of the
// representation is unbounded.
struct DpConfig {
  bool enabled = false;
  double epsilon = 1.0;
  double delta = 1e-5;
  double clip_norm = 1.0;

  void validate() const;
  double sigma() const;
};

double sigma_from_epsilon(double epsilon, double delta, double clip_norm);

// Scales each sample (leading axis) so its flattened L2 norm is at most
// clip_norm; norms already inside the ball are untouched.
Tensor clip_per_sample(const Tensor& h, double clip_norm);

// clip_per_sample followed by i.i.d. N(0, sigma^2) per coordinate. Pure
// value transform: the result is a detached tensor and gradients from the
// server pass straight through to the pre-noise representation.
Tensor clip_and_noise(const Tensor& h, const DpConfig& config, Rng& rng);

}  // namespace fesvibs
