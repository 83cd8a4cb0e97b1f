#include <doctest.h>

#include <cmath>

#include "fesvibs/model.hpp"
#include "fesvibs/ops.hpp"
#include "test_util.hpp"

using namespace fesvibs;
using testutil::rand_tensor;

namespace {

ModelConfig desk_config() {
  ModelConfig cfg;  // defaults are the desk scale: L=4, D=32, heads=4, M=16
  cfg.validate();
  return cfg;
}

Tensor rand_images(const ModelConfig& cfg, std::size_t batch, Rng& rng,
                   bool requires_grad = false) {
  return rand_tensor(
      {batch, cfg.image_channels, cfg.image_height, cfg.image_width}, rng, 0.5,
      requires_grad);
}

void fill_zero(Tensor& t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}

}  // namespace

TEST_CASE("config invariants are enforced") {
  ModelConfig bad = desk_config();
  bad.dim = 30;  // not divisible by heads=4
  CHECK(!bad.check().empty());
  bad = desk_config();
  bad.sample_limit = 9;
  CHECK(!bad.check().empty());
  bad = desk_config();
  bad.patch = 5;  // 16 % 5 != 0
  CHECK(!bad.check().empty());
}

TEST_CASE("head_forward produces D x M tokens at desk scale") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(1);
  HeadParams head = init_head(cfg, 42);
  Tensor x = rand_images(cfg, 3, rng);
  Tensor h = head_forward(head, x, cfg);
  CHECK(h.shape() == std::vector<std::size_t>{3, 32, 16});

  Tensor empty = head_forward(head, Tensor::zeros({0, 1, 16, 16}), cfg);
  CHECK(empty.shape() == std::vector<std::size_t>{0, 32, 16});

  CHECK_THROWS_AS(head_forward(head, Tensor::zeros({2, 1, 8, 8}), cfg),
                  DimensionError);
}

TEST_CASE("head_forward matches the paper-scale geometry") {
  // ViT-B/16 hybrid numbers: 3x224x224 in, 768 x 196 smashed tokens out.
  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.patch = 16;
  cfg.image_channels = 3;
  cfg.image_height = 224;
  cfg.image_width = 224;
  cfg.classes = 7;
  cfg.sample_limit = 1;
  cfg.validate();
  CHECK(cfg.tokens() == 196);
  HeadParams head = init_head(cfg, 0);
  Tensor h = head_forward(head, Tensor::zeros({1, 3, 224, 224}), cfg);
  CHECK(h.shape() == std::vector<std::size_t>{1, 768, 196});
}

TEST_CASE("block_forward preserves shape for M and M+1 tokens") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(2);
  BodyParams body = init_body(cfg, 7);
  for (std::size_t t : {cfg.tokens(), cfg.tokens() + 1}) {
    Tensor tokens = rand_tensor({2, t, cfg.dim}, rng, 0.3, false);
    Tensor out = block_forward(body.blocks[0], tokens, cfg);
    CHECK(out.shape() == tokens.shape());
  }
  CHECK_THROWS_AS(
      block_forward(body.blocks[0], Tensor::zeros({2, 5, cfg.dim}), cfg),
      DimensionError);
}

TEST_CASE("zeroed output projections reduce a block to the identity") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(3);
  BodyParams body = init_body(cfg, 9);
  BlockParams& blk = body.blocks[0];
  fill_zero(blk.wo);
  fill_zero(blk.bo);
  fill_zero(blk.mlp2_w);
  fill_zero(blk.mlp2_b);
  Tensor tokens = rand_tensor({2, cfg.tokens(), cfg.dim}, rng, 0.4, false);
  Tensor out = block_forward(blk, tokens, cfg);
  CHECK(testutil::bitwise_equal(out, tokens));
}

TEST_CASE("block gradients match finite differences") {
  ModelConfig cfg = desk_config();
  cfg.dim = 8;
  cfg.heads = 2;
  cfg.image_height = cfg.image_width = 8;  // tokens = 4
  cfg.validate();
  Rng rng = make_rng(4);
  BodyParams body = init_body(cfg, 11);
  Tensor tokens = rand_tensor({2, cfg.tokens(), cfg.dim}, rng, 0.4, false);
  auto leaves = body.blocks[0].tensors();
  const double err = testutil::grad_check_sampled(
      leaves,
      [&] { return sum_all(block_forward(body.blocks[0], tokens, cfg)); },
      rng, 3);
  CHECK(err <= 1e-4);
}

TEST_CASE("body_prefix_forward: prefix of length 1 equals one block") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(5);
  BodyParams body = init_body(cfg, 13);
  Tensor h = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.3, false);
  Tensor z1 = body_prefix_forward(body, h, 1, cfg);

  Tensor manual = transpose_last2(block_forward(
      body.blocks[0], add_position(transpose_last2(h), body.pos, 1), cfg));
  CHECK(testutil::bitwise_equal(z1, manual));

  CHECK_THROWS_AS(body_prefix_forward(body, h, 0, cfg), ValidationError);
  CHECK_THROWS_AS(body_prefix_forward(body, h, cfg.blocks + 1, cfg),
                  ValidationError);
}

TEST_CASE("prefix(l) then remaining blocks equals prefix(L)") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(6);
  BodyParams body = init_body(cfg, 17);
  Tensor h = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.3, false);
  Tensor full = body_prefix_forward(body, h, cfg.blocks, cfg);
  for (std::size_t l = 1; l < cfg.blocks; ++l) {
    Tensor tokens = transpose_last2(body_prefix_forward(body, h, l, cfg));
    for (std::size_t j = l; j < cfg.blocks; ++j)
      tokens = block_forward(body.blocks[j], tokens, cfg);
    Tensor composed = transpose_last2(tokens);
    CHECK(testutil::max_abs_diff(composed.data(), full.data()) <= 1e-12);
  }
}

TEST_CASE("body_prefix_forward never reads deeper blocks") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(7);
  BodyParams body = init_body(cfg, 19);
  const double nan = std::nan("");
  for (std::size_t j = 2; j < cfg.blocks; ++j) {
    for (auto& t : body.blocks[j].tensors()) {
      auto d = t.mutable_data();
      std::fill(d.begin(), d.end(), nan);
    }
  }
  Tensor h = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.3, false);
  Tensor z = body_prefix_forward(body, h, 2, cfg);
  for (double v : z.data()) CHECK(std::isfinite(v));
}

TEST_CASE("body_full_cls_forward shape, gradient flow, position sensitivity") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(8);
  BodyParams body = init_body(cfg, 23);
  Tensor h = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.3, false);
  Tensor b = body_full_cls_forward(body, h, cfg);
  CHECK(b.shape() == std::vector<std::size_t>{2, cfg.dim});

  backward(sum_all(b));
  CHECK(body.cls.has_grad());
  double cls_norm = 0;
  for (double v : body.cls.grad()) cls_norm += v * v;
  CHECK(cls_norm > 0);

  // Permuting the patch axis must change the cls output: positional
  // embeddings are active.
  std::vector<double> permuted(h.size());
  auto hv = h.data();
  const std::size_t d = cfg.dim, m = cfg.tokens();
  for (std::size_t bi = 0; bi < 2; ++bi)
    for (std::size_t di = 0; di < d; ++di)
      for (std::size_t mi = 0; mi < m; ++mi)
        permuted[(bi * d + di) * m + mi] =
            hv[(bi * d + di) * m + (m - 1 - mi)];
  Tensor hp = Tensor::from_data(h.shape(), std::move(permuted));
  Tensor bp = body_full_cls_forward(body, hp, cfg);
  CHECK(testutil::max_abs_diff(b.data(), bp.data()) > 1e-8);
}

TEST_CASE("projection_forward reduces D x M to D") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(9);
  ProjectionParams proj = init_projection(cfg, 29);
  Tensor z = rand_tensor({3, cfg.dim, cfg.tokens()}, rng, 0.4, false);
  Tensor b = projection_forward(proj, z, cfg);
  CHECK(b.shape() == std::vector<std::size_t>{3, cfg.dim});

  CHECK_THROWS_AS(
      projection_forward(proj, Tensor::zeros({3, cfg.dim, 5}), cfg),
      DimensionError);
}

TEST_CASE("projection at paper scale maps 768x196 to 768") {
  ModelConfig cfg;
  cfg.blocks = 1;
  cfg.dim = 768;
  cfg.heads = 12;
  cfg.patch = 16;
  cfg.image_channels = 3;
  cfg.image_height = 224;
  cfg.image_width = 224;
  cfg.classes = 7;
  cfg.sample_limit = 1;
  cfg.validate();
  ProjectionParams proj = init_projection(cfg, 1);
  Tensor z = Tensor::zeros({1, 768, 196});
  Tensor b = projection_forward(proj, z, cfg);
  CHECK(b.shape() == std::vector<std::size_t>{1, 768});
}

TEST_CASE("zero conv weights leave only the skip reduction") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(10);
  ProjectionParams proj = init_projection(cfg, 31);
  fill_zero(proj.conv1_w);
  fill_zero(proj.conv1_b);
  fill_zero(proj.conv2_w);
  fill_zero(proj.conv2_b);
  Tensor z = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.4, false);
  Tensor b = projection_forward(proj, z, cfg);
  Tensor skip = mean_last(z, 1);
  CHECK(testutil::max_abs_diff(b.data(), skip.data()) == 0.0);
}

TEST_CASE("projection gradients reach convs and skip path") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(11);
  ProjectionParams proj = init_projection(cfg, 37);
  Tensor z = rand_tensor({2, cfg.dim, cfg.tokens()}, rng, 0.4);
  auto leaves = proj.tensors();
  leaves.push_back(z);
  const double err = testutil::grad_check_sampled(
      leaves, [&] { return sum_all(projection_forward(proj, z, cfg)); }, rng,
      3);
  CHECK(err <= 1e-4);
}

TEST_CASE("projection output is invariant to batch order") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(12);
  ProjectionParams proj = init_projection(cfg, 41);
  Tensor z = rand_tensor({3, cfg.dim, cfg.tokens()}, rng, 0.4, false);
  Tensor b = projection_forward(proj, z, cfg);

  const std::size_t per = cfg.dim * cfg.tokens();
  std::vector<double> rev(z.size());
  auto zv = z.data();
  for (std::size_t i = 0; i < 3; ++i)
    std::copy(zv.begin() + (2 - i) * per, zv.begin() + (3 - i) * per,
              rev.begin() + i * per);
  Tensor br = projection_forward(proj, Tensor::from_data(z.shape(), rev), cfg);
  auto bv = b.data();
  auto brv = br.data();
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < cfg.dim; ++j)
      CHECK(bv[i * cfg.dim + j] == brv[(2 - i) * cfg.dim + j]);
}

TEST_CASE("tail_forward examples") {
  ModelConfig cfg = desk_config();
  Rng rng = make_rng(13);
  TailParams tail;
  tail.w = Tensor::zeros({cfg.dim, cfg.classes}, true);
  tail.b = Tensor::zeros({cfg.classes}, true);
  Tensor feats = rand_tensor({2, cfg.dim}, rng, 1.0, false);
  Tensor logits = tail_forward(tail, feats);
  for (double v : logits.data()) CHECK(v == 0.0);
  Tensor probs = softmax(logits, 1);
  for (double v : probs.data())
    CHECK(v == doctest::Approx(1.0 / cfg.classes));

  // Identity-like weights at D == K reproduce the input features.
  TailParams eye;
  eye.w = Tensor::zeros({4, 4}, true);
  for (std::size_t i = 0; i < 4; ++i) eye.w.mutable_data()[i * 4 + i] = 1.0;
  eye.b = Tensor::zeros({4}, true);
  Tensor f4 = rand_tensor({3, 4}, rng, 1.0, false);
  CHECK(testutil::bitwise_equal(tail_forward(eye, f4), f4));

  TailParams random_tail = init_tail(cfg, 43);
  CHECK(tail_forward(random_tail, feats).shape() ==
        std::vector<std::size_t>{2, cfg.classes});
  CHECK_THROWS_AS(tail_forward(random_tail, Tensor::zeros({2, 7})),
                  DimensionError);
}

TEST_CASE("init_params determinism and zero biases") {
  ModelConfig cfg = desk_config();
  ModelParams a = init_params(cfg, 0);
  ModelParams b = init_params(cfg, 0);
  ModelParams c = init_params(cfg, 1);

  auto at = a.tensors(), bt = b.tensors(), ct = c.tensors();
  bool all_equal_ab = true, any_diff_ac = false;
  for (std::size_t i = 0; i < at.size(); ++i) {
    all_equal_ab = all_equal_ab && testutil::bitwise_equal(at[i], bt[i]);
    any_diff_ac = any_diff_ac || !testutil::bitwise_equal(at[i], ct[i]);
  }
  CHECK(all_equal_ab);
  CHECK(any_diff_ac);

  for (const auto& nt : a.named("")) {
    if (nt.name.find("bias") != std::string::npos ||
        nt.name.find("beta") != std::string::npos) {
      for (double v : nt.tensor.data()) CHECK(v == 0.0);
    }
  }
}

TEST_CASE("frozen positional embeddings are honored") {
  ModelConfig cfg = desk_config();
  cfg.trainable_pos_embed = false;
  Rng rng = make_rng(14);
  BodyParams body = init_body(cfg, 47);
  CHECK(!body.pos.requires_grad());
  Tensor h = rand_tensor({1, cfg.dim, cfg.tokens()}, rng, 0.3, false);
  backward(sum_all(body_prefix_forward(body, h, 2, cfg)));
  CHECK(!body.pos.has_grad());
}
