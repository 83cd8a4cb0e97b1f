#include <doctest.h>

#include <cmath>

#include "fesvibs/privacy.hpp"
#include "test_util.hpp"

using namespace fesvibs;

TEST_CASE("sigma calibration closed form") {
  // sqrt(2 ln(1.25/1e-5)) = 4.8448055...
  CHECK(sigma_from_epsilon(1.0, 1e-5, 1.0) ==
        doctest::Approx(4.8448055).epsilon(1e-6));
  CHECK(sigma_from_epsilon(1.0, 1e-5, 2.0) ==
        doctest::Approx(2.0 * sigma_from_epsilon(1.0, 1e-5, 1.0)));
  CHECK(sigma_from_epsilon(1e9, 1e-5, 1.0) < 1e-8);

  CHECK_THROWS_AS(sigma_from_epsilon(0.0, 1e-5, 1.0), ValidationError);
  CHECK_THROWS_AS(sigma_from_epsilon(1.0, 0.0, 1.0), ValidationError);
  CHECK_THROWS_AS(sigma_from_epsilon(1.0, 1.5, 1.0), ValidationError);
  CHECK_THROWS_AS(sigma_from_epsilon(1.0, 1e-5, -1.0), ValidationError);
}

TEST_CASE("clipping is the identity inside the ball") {
  Rng rng = make_rng(1);
  Tensor h = testutil::rand_tensor({2, 4, 4}, rng, 0.1, false);
  Tensor out = clip_per_sample(h, 100.0);
  CHECK(testutil::bitwise_equal(out, h));

  // The sigma ~ 0 path of the full transform: huge epsilon leaves the
  // clipped input up to vanishing noise.
  DpConfig cfg;
  cfg.enabled = true;
  cfg.epsilon = 1e9;
  cfg.delta = 1e-5;
  cfg.clip_norm = 100.0;
  Tensor noised = clip_and_noise(h, cfg, rng);
  CHECK(testutil::max_abs_diff(noised.data(), h.data()) < 1e-5);
}

TEST_CASE("per-sample norms never exceed the clip bound") {
  Rng rng = make_rng(2);
  Tensor h = testutil::rand_tensor({8, 4, 4}, rng, 3.0, false);
  Tensor out = clip_per_sample(h, 0.5);
  const std::size_t per = 16;
  auto ov = out.data();
  for (std::size_t i = 0; i < 8; ++i) {
    double norm = 0;
    for (std::size_t j = 0; j < per; ++j)
      norm += ov[i * per + j] * ov[i * per + j];
    CHECK(std::sqrt(norm) <= 0.5 + 1e-9);
  }
}

TEST_CASE("noise statistics match the configured sigma") {
  DpConfig cfg;
  cfg.enabled = true;
  cfg.epsilon = 2.0;
  cfg.delta = 1e-5;
  cfg.clip_norm = 1.0;
  const double sigma = cfg.sigma();

  // Noising a zero tensor leaves pure noise: 1e6 draws.
  Rng rng = make_rng(3);
  Tensor zeros = Tensor::zeros({1000, 1000});
  Tensor noise = clip_and_noise(zeros, cfg, rng);
  auto nv = noise.data();

  double mean = 0;
  for (double v : nv) mean += v;
  mean /= static_cast<double>(nv.size());
  double var = 0;
  for (double v : nv) var += (v - mean) * (v - mean);
  var /= static_cast<double>(nv.size());
  const double sd = std::sqrt(var);
  CHECK(std::abs(sd - sigma) / sigma < 0.02);

  // Lag-1 autocorrelation over the draw sequence.
  double num = 0, den = 0;
  for (std::size_t i = 0; i + 1 < nv.size(); ++i)
    num += (nv[i] - mean) * (nv[i + 1] - mean);
  for (double v : nv) den += (v - mean) * (v - mean);
  CHECK(std::abs(num / den) < 0.01);
}

TEST_CASE("noise is deterministic per seeded rng and fresh across calls") {
  DpConfig cfg;
  cfg.enabled = true;
  cfg.epsilon = 1.0;
  cfg.delta = 1e-5;
  cfg.clip_norm = 1.0;
  Tensor zeros = Tensor::zeros({4, 8});

  Rng a = make_rng(7), b = make_rng(7);
  Tensor na = clip_and_noise(zeros, cfg, a);
  Tensor nb = clip_and_noise(zeros, cfg, b);
  CHECK(testutil::bitwise_equal(na, nb));

  Tensor nc = clip_and_noise(zeros, cfg, a);  // same rng, advanced state
  CHECK(!testutil::bitwise_equal(na, nc));
}

TEST_CASE("clip_and_noise requires dp to be enabled") {
  DpConfig cfg;
  Rng rng = make_rng(9);
  CHECK_THROWS_AS(clip_and_noise(Tensor::zeros({1, 2}), cfg, rng),
                  ValidationError);
}
