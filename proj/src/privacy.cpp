#include "fesvibs/privacy.hpp"

#include <cmath>
#include <random>

#include "fesvibs/error.hpp"

namespace fesvibs {

double sigma_from_epsilon(double epsilon, double delta, double clip_norm) {
  if (!(epsilon > 0))
    throw ValidationError("dp: epsilon must be > 0");
  if (!(delta > 0) || !(delta < 1))
    throw ValidationError("dp: delta must lie in (0,1)");
  if (!(clip_norm > 0))
    throw ValidationError("dp: clip norm must be > 0");
  return std::sqrt(2.0 * std::log(1.25 / delta)) * clip_norm / epsilon;
}

void DpConfig::validate() const {
  if (!enabled) return;
  const double s = sigma_from_epsilon(epsilon, delta, clip_norm);
  if (!(s > 0) || !std::isfinite(s))
    throw ValidationError("dp: derived sigma is not positive and finite");
}

double DpConfig::sigma() const {
  return sigma_from_epsilon(epsilon, delta, clip_norm);
}

Tensor clip_per_sample(const Tensor& h, double clip_norm) {
  if (!(clip_norm > 0))
    throw ValidationError("dp: clip norm must be > 0");
  const std::size_t n = h.rank() >= 1 ? h.dim(0) : 0;
  const std::size_t per = n > 0 ? h.size() / n : 0;
  std::vector<double> out(h.data().begin(), h.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    double norm_sq = 0;
    for (std::size_t j = 0; j < per; ++j) {
      const double v = out[i * per + j];
      norm_sq += v * v;
    }
    const double norm = std::sqrt(norm_sq);
    if (norm > clip_norm) {
      const double s = clip_norm / norm;
      for (std::size_t j = 0; j < per; ++j) out[i * per + j] *= s;
    }
  }
  return Tensor::from_data(h.shape(), std::move(out));
}

Tensor clip_and_noise(const Tensor& h, const DpConfig& config, Rng& rng) {
  if (!config.enabled)
    throw ValidationError("clip_and_noise: dp is not enabled");
  config.validate();
  Tensor clipped = clip_per_sample(h, config.clip_norm);
  const double sigma = config.sigma();
  std::vector<double> out(clipped.data().begin(), clipped.data().end());
  if (sigma > 0) {
    std::normal_distribution<double> noise(0.0, sigma);
    for (auto& v : out) v += noise(rng);
  }
  return Tensor::from_data(h.shape(), std::move(out));
}

}  // namespace fesvibs
