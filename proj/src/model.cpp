#include "fesvibs/model.hpp"

#include <cmath>

#include "fesvibs/ops.hpp"
#include "fesvibs/rng.hpp"

namespace fesvibs {

namespace {
constexpr double kLayerNormEps = 1e-6;
}

std::vector<std::string> ModelConfig::check() const {
  std::vector<std::string> bad;
  if (blocks == 0) bad.push_back("blocks must be >= 1");
  if (dim == 0 || heads == 0 || dim % heads != 0)
    bad.push_back("dim must be a positive multiple of heads");
  if (patch == 0 || image_height % patch != 0 || image_width % patch != 0)
    bad.push_back("image height/width must be multiples of patch");
  if (image_channels == 0) bad.push_back("image_channels must be >= 1");
  if (classes == 0) bad.push_back("classes must be >= 1");
  if (sample_limit < 1 || sample_limit > blocks)
    bad.push_back("sample_limit must satisfy 1 <= S <= blocks");
  if (!(mlp_ratio > 0)) bad.push_back("mlp_ratio must be > 0");
  if (head_channels == 0) bad.push_back("head_channels must be >= 1");
  return bad;
}

void ModelConfig::validate() const {
  auto bad = check();
  if (bad.empty()) return;
  std::string msg = "invalid model config:";
  for (const auto& b : bad) msg += "\n  - " + b;
  throw ValidationError(msg);
}

// --- parameter plumbing -----------------------------------------------------

namespace {

Tensor clone_leaf(const Tensor& t) { return t.detached(t.requires_grad()); }

void push(std::vector<NamedTensor>& out, const std::string& prefix,
          const char* name, const Tensor& t) {
  out.push_back({prefix + name, t});
}

}  // namespace

std::vector<Tensor> HeadParams::tensors() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b};
}
std::vector<NamedTensor> HeadParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  push(out, p, "conv1.weight", conv1_w);
  push(out, p, "conv1.bias", conv1_b);
  push(out, p, "conv2.weight", conv2_w);
  push(out, p, "conv2.bias", conv2_b);
  return out;
}
HeadParams HeadParams::clone() const {
  return {clone_leaf(conv1_w), clone_leaf(conv1_b), clone_leaf(conv2_w),
          clone_leaf(conv2_b)};
}

std::vector<Tensor> BlockParams::tensors() const {
  return {ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b,
          mlp1_w, mlp1_b, mlp2_w, mlp2_b};
}
std::vector<NamedTensor> BlockParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  push(out, p, "ln1.gamma", ln1_g);
  push(out, p, "ln1.beta", ln1_b);
  push(out, p, "attn.q.weight", wq);
  push(out, p, "attn.q.bias", bq);
  push(out, p, "attn.k.weight", wk);
  push(out, p, "attn.k.bias", bk);
  push(out, p, "attn.v.weight", wv);
  push(out, p, "attn.v.bias", bv);
  push(out, p, "attn.out.weight", wo);
  push(out, p, "attn.out.bias", bo);
  push(out, p, "ln2.gamma", ln2_g);
  push(out, p, "ln2.beta", ln2_b);
  push(out, p, "mlp.fc1.weight", mlp1_w);
  push(out, p, "mlp.fc1.bias", mlp1_b);
  push(out, p, "mlp.fc2.weight", mlp2_w);
  push(out, p, "mlp.fc2.bias", mlp2_b);
  return out;
}
BlockParams BlockParams::clone() const {
  BlockParams c;
  c.ln1_g = clone_leaf(ln1_g);
  c.ln1_b = clone_leaf(ln1_b);
  c.wq = clone_leaf(wq);
  c.bq = clone_leaf(bq);
  c.wk = clone_leaf(wk);
  c.bk = clone_leaf(bk);
  c.wv = clone_leaf(wv);
  c.bv = clone_leaf(bv);
  c.wo = clone_leaf(wo);
  c.bo = clone_leaf(bo);
  c.ln2_g = clone_leaf(ln2_g);
  c.ln2_b = clone_leaf(ln2_b);
  c.mlp1_w = clone_leaf(mlp1_w);
  c.mlp1_b = clone_leaf(mlp1_b);
  c.mlp2_w = clone_leaf(mlp2_w);
  c.mlp2_b = clone_leaf(mlp2_b);
  return c;
}

std::vector<Tensor> BodyParams::tensors() const {
  std::vector<Tensor> out;
  for (const auto& b : blocks) {
    auto t = b.tensors();
    out.insert(out.end(), t.begin(), t.end());
  }
  out.push_back(cls);
  out.push_back(pos);
  return out;
}
std::vector<NamedTensor> BodyParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    auto t = blocks[i].named(p + "block" + std::to_string(i) + ".");
    out.insert(out.end(), t.begin(), t.end());
  }
  push(out, p, "cls", cls);
  push(out, p, "pos", pos);
  return out;
}
BodyParams BodyParams::clone() const {
  BodyParams c;
  c.blocks.reserve(blocks.size());
  for (const auto& b : blocks) c.blocks.push_back(b.clone());
  c.cls = clone_leaf(cls);
  c.pos = clone_leaf(pos);
  return c;
}

std::vector<Tensor> ProjectionParams::tensors() const {
  return {conv1_w, conv1_b, conv2_w, conv2_b};
}
std::vector<NamedTensor> ProjectionParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  push(out, p, "conv1.weight", conv1_w);
  push(out, p, "conv1.bias", conv1_b);
  push(out, p, "conv2.weight", conv2_w);
  push(out, p, "conv2.bias", conv2_b);
  return out;
}
ProjectionParams ProjectionParams::clone() const {
  return {clone_leaf(conv1_w), clone_leaf(conv1_b), clone_leaf(conv2_w),
          clone_leaf(conv2_b)};
}

std::vector<Tensor> TailParams::tensors() const { return {w, b}; }
std::vector<NamedTensor> TailParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  push(out, p, "weight", w);
  push(out, p, "bias", b);
  return out;
}
TailParams TailParams::clone() const { return {clone_leaf(w), clone_leaf(b)}; }

std::vector<Tensor> ModelParams::tensors() const {
  std::vector<Tensor> out;
  auto append = [&out](std::vector<Tensor> t) {
    out.insert(out.end(), t.begin(), t.end());
  };
  append(head.tensors());
  append(body.tensors());
  append(proj.tensors());
  append(tail.tensors());
  return out;
}
std::vector<NamedTensor> ModelParams::named(const std::string& p) const {
  std::vector<NamedTensor> out;
  auto append = [&out](std::vector<NamedTensor> t) {
    out.insert(out.end(), t.begin(), t.end());
  };
  append(head.named(p + "head."));
  append(body.named(p + "body."));
  append(proj.named(p + "proj."));
  append(tail.named(p + "tail."));
  return out;
}
ModelParams ModelParams::clone() const {
  return {head.clone(), body.clone(), proj.clone(), tail.clone()};
}

// --- forward passes ---------------------------------------------------------

Tensor head_forward(const HeadParams& p, const Tensor& x,
                    const ModelConfig& cfg) {
  if (x.rank() != 4 || x.dim(1) != cfg.image_channels ||
      x.dim(2) != cfg.image_height || x.dim(3) != cfg.image_width) {
    throw DimensionError("head_forward: image batch " + shape_str(x.shape()) +
                         " does not match configured shape [B," +
                         std::to_string(cfg.image_channels) + "," +
                         std::to_string(cfg.image_height) + "," +
                         std::to_string(cfg.image_width) + "]");
  }
  auto f = relu(add_channel_bias(conv2d(x, p.conv1_w, 1, 1), p.conv1_b));
  auto t = add_channel_bias(conv2d(f, p.conv2_w, cfg.patch, 0), p.conv2_b);
  return reshape(t, {x.dim(0), cfg.dim, cfg.tokens()});
}

Tensor block_forward(const BlockParams& p, const Tensor& tokens,
                     const ModelConfig& cfg) {
  if (tokens.rank() != 3 || tokens.dim(2) != cfg.dim ||
      (tokens.dim(1) != cfg.tokens() && tokens.dim(1) != cfg.tokens() + 1)) {
    throw DimensionError("block_forward: tokens " + shape_str(tokens.shape()) +
                         " incompatible with D=" + std::to_string(cfg.dim) +
                         ", M=" + std::to_string(cfg.tokens()));
  }
  const std::size_t b = tokens.dim(0), t = tokens.dim(1), d = cfg.dim;
  const std::size_t nh = cfg.heads, dh = cfg.head_dim();

  auto xn = layer_norm(tokens, p.ln1_g, p.ln1_b, kLayerNormEps);
  auto q = add_last_bias(matmul(xn, p.wq), p.bq);
  auto k = add_last_bias(matmul(xn, p.wk), p.bk);
  auto v = add_last_bias(matmul(xn, p.wv), p.bv);
  auto qh = permute(reshape(q, {b, t, nh, dh}), {0, 2, 1, 3});
  auto kt = permute(reshape(k, {b, t, nh, dh}), {0, 2, 3, 1});
  auto vh = permute(reshape(v, {b, t, nh, dh}), {0, 2, 1, 3});
  auto scores = scale(matmul(qh, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  auto attn = softmax(scores, 3);
  auto ctx = reshape(permute(matmul(attn, vh), {0, 2, 1, 3}), {b, t, d});
  auto attn_out = add_last_bias(matmul(ctx, p.wo), p.bo);
  auto h1 = add(tokens, attn_out);

  auto hn = layer_norm(h1, p.ln2_g, p.ln2_b, kLayerNormEps);
  auto m = add_last_bias(matmul(gelu(add_last_bias(matmul(hn, p.mlp1_w),
                                                   p.mlp1_b)),
                                p.mlp2_w),
                         p.mlp2_b);
  return add(h1, m);
}

namespace {

Tensor tokens_from_smashed(const Tensor& h, const ModelConfig& cfg) {
  if (h.rank() != 3 || h.dim(1) != cfg.dim || h.dim(2) != cfg.tokens()) {
    throw DimensionError("body: smashed representation " +
                         shape_str(h.shape()) + " expected [B," +
                         std::to_string(cfg.dim) + "," +
                         std::to_string(cfg.tokens()) + "]");
  }
  return transpose_last2(h);  // [B,M,D]
}

}  // namespace

Tensor body_prefix_forward(const BodyParams& p, const Tensor& h, std::size_t l,
                           const ModelConfig& cfg) {
  if (l < 1 || l > cfg.blocks) {
    throw ValidationError("body_prefix_forward: block index " +
                          std::to_string(l) + " outside [1," +
                          std::to_string(cfg.blocks) + "]");
  }
  auto tokens = add_position(tokens_from_smashed(h, cfg), p.pos, 1);
  for (std::size_t i = 0; i < l; ++i)
    tokens = block_forward(p.blocks[i], tokens, cfg);
  return transpose_last2(tokens);  // back to [B,D,M]
}

Tensor body_full_cls_forward(const BodyParams& p, const Tensor& h,
                             const ModelConfig& cfg) {
  auto tokens = prepend_token(tokens_from_smashed(h, cfg), p.cls);
  tokens = add_position(tokens, p.pos, 0);
  for (std::size_t i = 0; i < cfg.blocks; ++i)
    tokens = block_forward(p.blocks[i], tokens, cfg);
  return select_token(tokens, 0);
}

Tensor projection_forward(const ProjectionParams& p, const Tensor& z,
                          const ModelConfig& cfg) {
  if (z.rank() != 3 || z.dim(1) != cfg.dim || z.dim(2) != cfg.tokens()) {
    throw DimensionError("projection_forward: " + shape_str(z.shape()) +
                         " expected [B," + std::to_string(cfg.dim) + "," +
                         std::to_string(cfg.tokens()) + "]");
  }
  const std::size_t b = z.dim(0);
  auto grid = reshape(z, {b, cfg.dim, cfg.grid_h(), cfg.grid_w()});
  auto c1 = relu(add_channel_bias(conv2d(grid, p.conv1_w, 1, 1), p.conv1_b));
  auto c2 = add_channel_bias(conv2d(c1, p.conv2_w, 1, 1), p.conv2_b);
  auto conv_path = mean_last(c2, 2);  // [B,D]
  auto skip = mean_last(z, 1);        // [B,D]
  if (cfg.proj_skip == SkipReducer::kSum)
    skip = scale(skip, static_cast<double>(cfg.tokens()));
  return add(conv_path, skip);
}

Tensor tail_forward(const TailParams& p, const Tensor& b) {
  if (b.rank() != 2 || b.dim(1) != p.w.dim(0)) {
    throw DimensionError("tail_forward: features " + shape_str(b.shape()) +
                         " vs weight " + shape_str(p.w.shape()));
  }
  return add_last_bias(matmul(b, p.w), p.b);
}

// --- initialization ---------------------------------------------------------

namespace {

Tensor uniform_fan_in(Rng& rng, std::vector<std::size_t> shape,
                      std::size_t fan_in) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<double> data(shape_product(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor trunc_normal(Rng& rng, std::vector<std::size_t> shape,
                    double sigma = 0.02) {
  std::vector<double> data(shape_product(shape));
  for (auto& v : data) v = truncated_normal(rng, sigma);
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

Tensor zeros_param(std::vector<std::size_t> shape) {
  return Tensor::zeros(std::move(shape), true);
}

Tensor ones_param(std::vector<std::size_t> shape) {
  return Tensor::filled(std::move(shape), 1.0, true);
}

BlockParams init_block(const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.dim, hidden = cfg.mlp_hidden();
  BlockParams p;
  p.ln1_g = ones_param({d});
  p.ln1_b = zeros_param({d});
  p.wq = trunc_normal(rng, {d, d});
  p.bq = zeros_param({d});
  p.wk = trunc_normal(rng, {d, d});
  p.bk = zeros_param({d});
  p.wv = trunc_normal(rng, {d, d});
  p.bv = zeros_param({d});
  p.wo = trunc_normal(rng, {d, d});
  p.bo = zeros_param({d});
  p.ln2_g = ones_param({d});
  p.ln2_b = zeros_param({d});
  p.mlp1_w = trunc_normal(rng, {d, hidden});
  p.mlp1_b = zeros_param({hidden});
  p.mlp2_w = trunc_normal(rng, {hidden, d});
  p.mlp2_b = zeros_param({d});
  return p;
}

}  // namespace

HeadParams init_head(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  HeadParams p;
  p.conv1_w = uniform_fan_in(rng, {cfg.head_channels, cfg.image_channels, 3, 3},
                             cfg.image_channels * 9);
  p.conv1_b = zeros_param({cfg.head_channels});
  p.conv2_w =
      uniform_fan_in(rng, {cfg.dim, cfg.head_channels, cfg.patch, cfg.patch},
                     cfg.head_channels * cfg.patch * cfg.patch);
  p.conv2_b = zeros_param({cfg.dim});
  return p;
}

BodyParams init_body(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  BodyParams p;
  p.blocks.reserve(cfg.blocks);
  for (std::size_t i = 0; i < cfg.blocks; ++i)
    p.blocks.push_back(init_block(cfg, rng));
  p.cls = trunc_normal(rng, {cfg.dim});
  p.pos = trunc_normal(rng, {cfg.tokens() + 1, cfg.dim});
  if (!cfg.trainable_pos_embed) p.pos = p.pos.detached(false);
  return p;
}

ProjectionParams init_projection(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  ProjectionParams p;
  p.conv1_w = uniform_fan_in(rng, {cfg.dim, cfg.dim, 3, 3}, cfg.dim * 9);
  p.conv1_b = zeros_param({cfg.dim});
  p.conv2_w = uniform_fan_in(rng, {cfg.dim, cfg.dim, 3, 3}, cfg.dim * 9);
  p.conv2_b = zeros_param({cfg.dim});
  return p;
}

TailParams init_tail(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng = make_rng(seed);
  TailParams p;
  p.w = trunc_normal(rng, {cfg.dim, cfg.classes});
  p.b = zeros_param({cfg.classes});
  return p;
}

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.head = init_head(cfg, derive_seed(seed, 1));
  p.body = init_body(cfg, derive_seed(seed, 2));
  p.proj = init_projection(cfg, derive_seed(seed, 3));
  p.tail = init_tail(cfg, derive_seed(seed, 4));
  return p;
}

}  // namespace fesvibs
