#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "fesvibs/rng.hpp"
#include "fesvibs/tensor.hpp"

namespace testutil {

inline fesvibs::Tensor rand_tensor(std::vector<std::size_t> shape,
                                   fesvibs::Rng& rng, double scale = 1.0,
                                   bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<double> data(fesvibs::shape_product(shape));
  for (auto& v : data) v = dist(rng);
  return fesvibs::Tensor::from_data(std::move(shape), std::move(data),
                                    requires_grad);
}

// Central-difference gradient check, independent of the backward rules:
// gradients of build() (a scalar loss rebuilt from the current leaf values)
// are measured by perturbing each leaf coordinate by +/- h and re-running
// the forward pass with graph recording disabled.
//
// Returns max over coordinates of |analytic - fd| / max(1, |analytic|, |fd|).
inline double grad_check(std::vector<fesvibs::Tensor> leaves,
                         const std::function<fesvibs::Tensor()>& build,
                         double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  fesvibs::Tensor loss = build();
  fesvibs::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves) {
    analytic.push_back(t.has_grad()
                           ? t.grad_copy()
                           : std::vector<double>(t.size(), 0.0));
  }

  double max_rel = 0.0;
  fesvibs::NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li].mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = build().item();
      data[i] = orig - h;
      const double fm = build().item();
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel =
          std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

// As above but only a random subset of coordinates per leaf; for composed
// networks where full fd sweeps are too slow.
inline double grad_check_sampled(std::vector<fesvibs::Tensor> leaves,
                                 const std::function<fesvibs::Tensor()>& build,
                                 fesvibs::Rng& rng,
                                 std::size_t coords_per_leaf = 4,
                                 double h = 1e-5) {
  for (auto& t : leaves) t.zero_grad();
  fesvibs::Tensor loss = build();
  fesvibs::backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& t : leaves) {
    analytic.push_back(t.has_grad()
                           ? t.grad_copy()
                           : std::vector<double>(t.size(), 0.0));
  }

  double max_rel = 0.0;
  fesvibs::NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto data = leaves[li].mutable_data();
    std::uniform_int_distribution<std::size_t> pick(0, data.size() - 1);
    for (std::size_t c = 0; c < std::min(coords_per_leaf, data.size()); ++c) {
      const std::size_t i = pick(rng);
      const double orig = data[i];
      data[i] = orig + h;
      const double fp = build().item();
      data[i] = orig - h;
      const double fm = build().item();
      data[i] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      const double a = analytic[li][i];
      const double rel =
          std::abs(a - fd) / std::max({1.0, std::abs(a), std::abs(fd)});
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

inline bool bitwise_equal(const fesvibs::Tensor& a, const fesvibs::Tensor& b) {
  if (a.shape() != b.shape()) return false;
  auto av = a.data(), bv = b.data();
  return std::equal(av.begin(), av.end(), bv.begin(),
                    [](double x, double y) { return x == y; });
}

inline double max_abs_diff(std::span<const double> a,
                           std::span<const double> b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace testutil
