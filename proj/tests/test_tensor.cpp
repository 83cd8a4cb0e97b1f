#include <doctest.h>

#include <cmath>

#include "fesvibs/ops.hpp"
#include "fesvibs/optim.hpp"
#include "fesvibs/tensor.hpp"
#include "test_util.hpp"

using namespace fesvibs;
using testutil::grad_check;
using testutil::rand_tensor;

TEST_CASE("matmul identity and hand values") {
  Tensor a = Tensor::from_data({2, 2}, {1, 2, 3, 4});
  Tensor eye = Tensor::from_data({2, 2}, {1, 0, 0, 1});
  CHECK(testutil::bitwise_equal(matmul(a, eye), a));

  Tensor b = Tensor::from_data({2, 1}, {5, 6});
  Tensor c = matmul(a, b);
  CHECK(c.data()[0] == doctest::Approx(17));
  CHECK(c.data()[1] == doctest::Approx(39));

  Tensor z = Tensor::zeros({3, 4});
  Rng rng = make_rng(7);
  Tensor any = rand_tensor({4, 2}, rng);
  Tensor out = matmul(z, any);
  CHECK(out.shape() == std::vector<std::size_t>{3, 2});
  for (double v : out.data()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape errors name both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), "matmul: [2,3] vs [4,2]",
                       DimensionError);
}

TEST_CASE("softmax examples") {
  Tensor u = softmax(Tensor::from_data({3}, {0, 0, 0}), 0);
  for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / 3));

  Tensor big = softmax(Tensor::from_data({2}, {1000, 0}), 0);
  CHECK(std::isfinite(big.data()[0]));
  CHECK(big.data()[0] == doctest::Approx(1.0));
  CHECK(big.data()[1] == doctest::Approx(0.0));

  Tensor two = softmax(Tensor::from_data({2}, {1, 2}), 0);
  CHECK(two.data()[0] == doctest::Approx(0.26894).epsilon(1e-4));
  CHECK(two.data()[1] == doctest::Approx(0.73106).epsilon(1e-4));

  CHECK_THROWS_AS(softmax(Tensor::zeros({2, 2}), 2), ValidationError);
}

TEST_CASE("softmax rows sum to one within 1e-12") {
  Rng rng = make_rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = rand_tensor({3, 5, 2}, rng, 30.0, false);
    for (int axis = 0; axis < 3; ++axis) {
      Tensor y = softmax(x, axis);
      // Sum along the axis for every (outer, inner) slice.
      const auto& s = y.shape();
      std::size_t outer = 1, inner = 1, n = s[axis];
      for (int i = 0; i < axis; ++i) outer *= s[i];
      for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
      auto yv = y.data();
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
          double sum = 0;
          for (std::size_t j = 0; j < n; ++j)
            sum += yv[o * n * inner + j * inner + in];
          CHECK(std::abs(sum - 1.0) <= 1e-12);
        }
    }
  }
}

TEST_CASE("layer_norm examples") {
  Tensor gamma = Tensor::from_data({3}, {1, 1, 1});
  Tensor beta = Tensor::zeros({3});
  Tensor constant = layer_norm(Tensor::from_data({1, 3}, {5, 5, 5}), gamma,
                               beta, 1e-5);
  for (double v : constant.data()) CHECK(v == doctest::Approx(0.0));

  Tensor g2 = Tensor::from_data({2}, {1, 1});
  Tensor b2 = Tensor::zeros({2});
  Tensor two = layer_norm(Tensor::from_data({1, 2}, {1, 3}), g2, b2, 1e-12);
  CHECK(two.data()[0] == doctest::Approx(-1.0).epsilon(1e-6));
  CHECK(two.data()[1] == doctest::Approx(1.0).epsilon(1e-6));

  Tensor g0 = Tensor::zeros({2});
  Tensor bb = Tensor::from_data({2}, {4, -2});
  Tensor beta_only = layer_norm(Tensor::from_data({2, 2}, {9, 1, 0, 3}), g0,
                                bb, 1e-5);
  CHECK(beta_only.data()[0] == doctest::Approx(4.0));
  CHECK(beta_only.data()[1] == doctest::Approx(-2.0));
  CHECK(beta_only.data()[2] == doctest::Approx(4.0));

  CHECK_THROWS_AS(
      layer_norm(Tensor::zeros({2, 3}), Tensor::zeros({2}), Tensor::zeros({3}),
                 1e-5),
      DimensionError);
  CHECK_THROWS_AS(layer_norm(Tensor::zeros({2, 2}), g2, b2, 0.0),
                  ValidationError);
}

TEST_CASE("gelu examples") {
  CHECK(gelu(Tensor::scalar(0.0)).item() == 0.0);
  CHECK(gelu(Tensor::scalar(10.0)).item() == doctest::Approx(10.0).epsilon(1e-6));
  CHECK(gelu(Tensor::scalar(1.0)).item() ==
        doctest::Approx(0.841345).epsilon(1e-5));
}

TEST_CASE("conv2d examples") {
  // 1x1 kernel of value 1 reproduces the input.
  Rng rng = make_rng(11);
  Tensor x = rand_tensor({2, 1, 3, 3}, rng, 1.0, false);
  Tensor k1 = Tensor::from_data({1, 1, 1, 1}, {1.0});
  CHECK(testutil::bitwise_equal(conv2d(x, k1, 1, 0), x));

  Tensor patch = Tensor::from_data({1, 1, 2, 2}, {1, 2, 3, 4});
  Tensor ones = Tensor::filled({1, 1, 2, 2}, 1.0);
  Tensor summed = conv2d(patch, ones, 1, 0);
  CHECK(summed.shape() == std::vector<std::size_t>{1, 1, 1, 1});
  CHECK(summed.item() == doctest::Approx(10.0));

  Tensor zk = Tensor::zeros({3, 1, 2, 2});
  Tensor zero_out = conv2d(x, zk, 1, 0);
  for (double v : zero_out.data()) CHECK(v == 0.0);

  Tensor huge = Tensor::zeros({1, 1, 5, 5});
  CHECK_THROWS_AS(conv2d(x, huge, 1, 0), DimensionError);
}

TEST_CASE("conv2d stride and padding arithmetic") {
  Tensor x = Tensor::zeros({1, 2, 7, 5});
  Tensor w = Tensor::zeros({3, 2, 3, 3});
  Tensor y = conv2d(x, w, 2, 1);
  // floor((7+2-3)/2)+1 = 4, floor((5+2-3)/2)+1 = 3
  CHECK(y.shape() == std::vector<std::size_t>{1, 3, 4, 3});
}

TEST_CASE("cross_entropy examples") {
  Tensor uniform = Tensor::zeros({2, 4}, true);
  CHECK(cross_entropy(uniform, {1, 3}).item() ==
        doctest::Approx(std::log(4.0)).epsilon(1e-9));

  Tensor margin = Tensor::from_data({1, 2}, {1000.0, 0.0});
  CHECK(cross_entropy(margin, {0}).item() == doctest::Approx(0.0));

  Tensor pair = Tensor::from_data({1, 2}, {1.0, 2.0});
  CHECK(cross_entropy(pair, {0}).item() ==
        doctest::Approx(1.313262).epsilon(1e-6));

  CHECK_THROWS_AS(cross_entropy(pair, {2}), ValidationError);
  CHECK_THROWS_AS(cross_entropy(pair, {-1}), ValidationError);
}

TEST_CASE("cross_entropy backward is softmax minus onehot over batch") {
  Tensor logits = Tensor::from_data({2, 3}, {0.5, -1, 2, 0, 0, 0}, true);
  Tensor loss = cross_entropy(logits, {2, 0});
  backward(loss);
  auto g = logits.grad();
  // Row softmax minus one-hot, scaled by 1/B.
  Tensor probs = softmax(logits.detached(), 1);
  auto p = probs.data();
  CHECK(g[0] == doctest::Approx(p[0] / 2));
  CHECK(g[2] == doctest::Approx((p[2] - 1.0) / 2));
  CHECK(g[3] == doctest::Approx((p[3] - 1.0) / 2));
}

TEST_CASE("backward: analytic and oracle examples") {
  Tensor x = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
  Tensor loss = sum_all(mul(x, x));
  backward(loss);
  auto g = x.grad();
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(g[i] == doctest::Approx(2.0 * x.data()[i]));

  // loss = sum(a.b) wrt a against the finite-difference oracle.
  Rng rng = make_rng(5);
  Tensor a = rand_tensor({2, 3}, rng);
  Tensor b = rand_tensor({3, 2}, rng, 1.0, false);
  const double err = grad_check({a}, [&] { return sum_all(matmul(a, b)); });
  CHECK(err <= 1e-6);
}

TEST_CASE("backward: detached tensor gets no grad") {
  Tensor x = Tensor::from_data({2}, {1, 2}, false);
  Tensor w = Tensor::from_data({2}, {3, 4}, true);
  Tensor loss = sum_all(mul(x, w));
  backward(loss);
  CHECK(!x.has_grad());
  CHECK(w.has_grad());
}

TEST_CASE("backward: non-scalar loss is a contract error") {
  Tensor x = Tensor::zeros({3}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(backward(y), ValidationError);
}

TEST_CASE("backward accumulates without reset and is linear") {
  Rng rng = make_rng(17);
  Tensor x = rand_tensor({4}, rng);

  Tensor l1 = sum_all(mul(x, x));
  Tensor l2 = sum_all(gelu(x));
  backward(l1);
  backward(l2);
  auto combined = x.grad_copy();

  x.zero_grad();
  backward(add(sum_all(mul(x, x)), sum_all(gelu(x))));
  auto joint = x.grad_copy();
  for (std::size_t i = 0; i < joint.size(); ++i)
    CHECK(combined[i] == doctest::Approx(joint[i]).epsilon(1e-12));
}

TEST_CASE("finite differences across every op") {
  Rng rng = make_rng(23);
  for (int trial = 0; trial < 10; ++trial) {
    {
      Tensor a = rand_tensor({2, 3}, rng);
      Tensor b = rand_tensor({3, 2}, rng);
      Tensor w = rand_tensor({2, 2}, rng, 1.0, false);
      CHECK(grad_check({a, b}, [&] {
              return sum_all(mul(matmul(a, b), w));
            }) <= 1e-4);
    }
    {
      Tensor a = rand_tensor({2, 2, 3}, rng);
      Tensor b = rand_tensor({2, 3, 2}, rng);
      CHECK(grad_check({a, b}, [&] { return sum_all(matmul(a, b)); }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({2, 4}, rng);
      Tensor w = rand_tensor({2, 4}, rng, 1.0, false);
      CHECK(grad_check({x}, [&] {
              return sum_all(mul(softmax(x, 1), w));
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({3, 4}, rng);
      Tensor g = rand_tensor({4}, rng);
      Tensor b = rand_tensor({4}, rng);
      Tensor w = rand_tensor({3, 4}, rng, 1.0, false);
      CHECK(grad_check({x, g, b}, [&] {
              return sum_all(mul(layer_norm(x, g, b, 1e-5), w));
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({6}, rng);
      CHECK(grad_check({x}, [&] { return sum_all(gelu(x)); }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({1, 2, 4, 4}, rng);
      Tensor w = rand_tensor({3, 2, 2, 2}, rng);
      CHECK(grad_check({x, w}, [&] {
              return sum_all(conv2d(x, w, 1, 1));
            }) <= 1e-4);
    }
    {
      Tensor logits = rand_tensor({3, 4}, rng);
      CHECK(grad_check({logits}, [&] {
              return cross_entropy(logits, {0, 2, 3});
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({2, 3, 4}, rng);
      Tensor tok = rand_tensor({4}, rng);
      Tensor pos = rand_tensor({5, 4}, rng);
      CHECK(grad_check({x, tok, pos}, [&] {
              auto t = add_position(prepend_token(x, tok), pos, 0);
              return sum_all(select_token(t, 0));
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({2, 3, 4}, rng);
      CHECK(grad_check({x}, [&] {
              return sum_all(mean_last(permute(x, {0, 2, 1}), 1));
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({2, 5}, rng);
      Tensor b = rand_tensor({5}, rng);
      CHECK(grad_check({x, b}, [&] {
              return sum_all(relu(add_last_bias(x, b)));
            }) <= 1e-4);
    }
    {
      Tensor x = rand_tensor({2, 3, 2, 2}, rng);
      Tensor b = rand_tensor({3}, rng);
      CHECK(grad_check({x, b}, [&] {
              return sum_all(add_channel_bias(x, b));
            }) <= 1e-4);
    }
  }
}

TEST_CASE("composition determinism: same inputs give identical bytes") {
  auto run = [] {
    Rng rng = make_rng(99);
    Tensor x = rand_tensor({2, 3}, rng);
    Tensor w = rand_tensor({3, 3}, rng);
    Tensor y = softmax(matmul(x, w), 1);
    backward(sum_all(gelu(y)));
    auto out = x.grad_copy();
    auto v = y.data();
    out.insert(out.end(), v.begin(), v.end());
    return out;
  };
  auto a = run(), b = run();
  CHECK(a == b);
}

TEST_CASE("no-grad mode skips graph recording") {
  Tensor x = Tensor::from_data({2}, {1, 2}, true);
  NoGradGuard guard;
  Tensor y = sum_all(mul(x, x));
  CHECK(!y.requires_grad());
  CHECK_THROWS_AS(backward(y), ValidationError);
}

TEST_CASE("adam_step closed-form first step and invariants") {
  AdamSettings cfg;
  cfg.lr = 0.01;
  AdamSlot slot;
  std::vector<double> param = {1.0, -1.0};
  std::vector<double> grad = {0.3, -0.7};
  adam_step(param, grad, slot, cfg);
  // First bias-corrected step is -lr * g / (|g| + eps) ~ -lr * sign(g).
  CHECK(param[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
  CHECK(param[1] == doctest::Approx(-1.0 + 0.01).epsilon(1e-6));
  CHECK(slot.step == 1);

  // Zero gradient: parameters and moments stay put.
  AdamSlot zslot;
  std::vector<double> zparam = {2.0};
  std::vector<double> zgrad = {0.0};
  adam_step(zparam, zgrad, zslot, cfg);
  CHECK(zparam[0] == 2.0);
  CHECK(zslot.m[0] == 0.0);
  CHECK(zslot.v[0] == 0.0);

  // Constant gradient: monotone movement against its sign.
  AdamSlot mslot;
  std::vector<double> mparam = {0.0};
  std::vector<double> mgrad = {0.5};
  adam_step(mparam, mgrad, mslot, cfg);
  const double after_one = mparam[0];
  adam_step(mparam, mgrad, mslot, cfg);
  CHECK(after_one < 0.0);
  CHECK(mparam[0] < after_one);

  AdamSettings bad;
  bad.lr = 0.0;
  AdamSlot bslot;
  CHECK_THROWS_AS(adam_step(mparam, mgrad, bslot, bad), ValidationError);
}

TEST_CASE("float32 engine instantiation") {
  using T32 = TensorT<float>;
  T32 x = T32::from_data({2, 2}, {1.f, 2.f, 3.f, 4.f}, true);
  T32 w = T32::from_data({2, 2}, {0.5f, -0.5f, 1.f, 0.25f}, true);
  T32 y = sum_all(gelu(matmul(x, w)));
  backward(y);
  CHECK(x.has_grad());
  CHECK(w.has_grad());

  // Parity with the double path at f32 tolerance.
  Tensor xd = Tensor::from_data({2, 2}, {1, 2, 3, 4}, true);
  Tensor wd = Tensor::from_data({2, 2}, {0.5, -0.5, 1, 0.25}, true);
  Tensor yd = sum_all(gelu(matmul(xd, wd)));
  CHECK(static_cast<double>(y.item()) ==
        doctest::Approx(yd.item()).epsilon(1e-5));
}

TEST_CASE("empty batch keeps trailing dims") {
  Tensor x = Tensor::zeros({0, 2, 4, 4});
  Tensor w = Tensor::zeros({3, 2, 3, 3});
  Tensor y = conv2d(x, w, 1, 1);
  CHECK(y.shape() == std::vector<std::size_t>{0, 3, 4, 4});
  CHECK(y.size() == 0);
}
