#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fesvibs/tensor.hpp"

namespace fesvibs {

enum class SkipReducer { kMean, kSum };

// Shape hyperparameters shared by every network. The paper-scale instance
// is blocks=12, dim=768, heads=12, patch=16 on 224x224x3 images (tokens=196,
// sample_limit=6); the desk default below keeps the whole protocol testable
// in seconds.
struct ModelConfig {
  std::size_t blocks = 4;        // transformer depth L
  std::size_t dim = 32;          // embedding dim D
  std::size_t heads = 4;
  std::size_t patch = 4;
  std::size_t image_channels = 1;
  std::size_t image_height = 16;
  std::size_t image_width = 16;
  std::size_t classes = 4;       // K
  std::size_t sample_limit = 4;  // S: blocks eligible for sampling
  double mlp_ratio = 4.0;
  std::size_t head_channels = 16;
  bool trainable_pos_embed = true;
  SkipReducer proj_skip = SkipReducer::kMean;

  std::size_t grid_h() const { return image_height / patch; }
  std::size_t grid_w() const { return image_width / patch; }
  std::size_t tokens() const { return grid_h() * grid_w(); }  // M
  std::size_t head_dim() const { return dim / heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(static_cast<double>(dim) * mlp_ratio);
  }

  // Returns a list of violations; empty means valid.
  std::vector<std::string> check() const;
  void validate() const;  // throws ValidationError listing all violations
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// Client head: conv feature extractor plus the projection convolution that
// patchifies features into D x M tokens.
struct HeadParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  HeadParams clone() const;
};

struct BlockParams {
  Tensor ln1_g, ln1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor ln2_g, ln2_b;
  Tensor mlp1_w, mlp1_b, mlp2_w, mlp2_b;

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  BlockParams clone() const;
};

// Server body: L transformer blocks plus the cls token embedding and the
// positional table over M+1 slots (slot 0 is the cls position, used only on
// the cls-token path).
struct BodyParams {
  std::vector<BlockParams> blocks;
  Tensor cls;  // [D]
  Tensor pos;  // [M+1, D]

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  BodyParams clone() const;
};

// Projection network: two 3x3 convolutions over the token grid with a skip
// connection that reduces D x M to a length-D pseudo class token.
struct ProjectionParams {
  Tensor conv1_w, conv1_b;
  Tensor conv2_w, conv2_b;

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  ProjectionParams clone() const;
};

struct TailParams {
  Tensor w;  // [D, K]
  Tensor b;  // [K]

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  TailParams clone() const;
};

struct ModelParams {
  HeadParams head;
  BodyParams body;
  ProjectionParams proj;
  TailParams tail;

  std::vector<Tensor> tensors() const;
  std::vector<NamedTensor> named(const std::string& prefix) const;
  ModelParams clone() const;
};

// x: [B,C,H,W] -> smashed representation [B,D,M]
Tensor head_forward(const HeadParams& p, const Tensor& x,
                    const ModelConfig& cfg);

// tokens: [B,T,D] with T in {M, M+1}; pre-norm block, shape preserved.
Tensor block_forward(const BlockParams& p, const Tensor& tokens,
                     const ModelConfig& cfg);

// h: [B,D,M] -> z_l: [B,D,M]; positional embeddings added once before
// block 1, then blocks 1..l applied. Blocks past l are never read.
Tensor body_prefix_forward(const BodyParams& p, const Tensor& h,
                           std::size_t l, const ModelConfig& cfg);

// h: [B,D,M] -> final cls embedding [B,D] after all L blocks.
Tensor body_full_cls_forward(const BodyParams& p, const Tensor& h,
                             const ModelConfig& cfg);

// z: [B,D,M] -> pseudo class token [B,D]
Tensor projection_forward(const ProjectionParams& p, const Tensor& z,
                          const ModelConfig& cfg);

// b: [B,D] -> logits [B,K]
Tensor tail_forward(const TailParams& p, const Tensor& b);

HeadParams init_head(const ModelConfig& cfg, std::uint64_t seed);
BodyParams init_body(const ModelConfig& cfg, std::uint64_t seed);
ProjectionParams init_projection(const ModelConfig& cfg, std::uint64_t seed);
TailParams init_tail(const ModelConfig& cfg, std::uint64_t seed);

// Deterministic: one seed fixes every parameter group bitwise.
ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

}  // namespace fesvibs
