#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fesvibs/error.hpp"
#include "fesvibs/tensor.hpp"

namespace fesvibs {

struct Dataset {
  Tensor images;            // [N,C,H,W], values in [0,1]
  std::vector<int> labels;  // each in [0, classes)
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  void validate() const;
  Dataset subset(const std::vector<int>& indices) const;
};

enum class PartitionMode { kIid, kDirichlet, kNatural };

struct PartitionSpec {
  PartitionMode mode = PartitionMode::kIid;
  std::size_t n_clients = 1;
  double alpha = 0.5;  // dirichlet concentration
  std::uint64_t seed = 0;
  std::vector<std::vector<int>> natural_indices;  // kNatural only
};

// Class k is rendered as an oriented sinusoidal grating (distinct angle,
// frequency and phase per class) plus N(0, sigma^2) pixel noise, clipped to
// [0,1]. Pixels are quantized to f32 so container round-trips are bitwise.
Dataset generate_synthetic(std::size_t classes, std::size_t n,
                           std::size_t channels, std::size_t height,
                           std::size_t width, double noise_sigma,
                           std::uint64_t seed);

// Disjoint client shards covering the dataset. Dirichlet draws per-class
// client proportions from Dir(alpha * 1); an empty shard triggers a redraw
// (up to 100 attempts).
std::vector<Dataset> partition(const Dataset& data, const PartitionSpec& spec);

enum class ContainerErrc { kBadMagic, kTruncated, kCrcMismatch, kBadHeader };

class ContainerError : public Error {
 public:
  ContainerError(ContainerErrc code, const std::string& what)
      : Error(what), code_(code) {}
  ContainerErrc code() const { return code_; }

 private:
  ContainerErrc code_;
};

// Binary dataset container, little-endian:
//   magic "FSVB1" | u32 K,N,C,H,W | u8 dtype (0 = f32) |
//   N*C*H*W f32 pixels | N u16 labels | u32 crc32 of all preceding bytes
std::vector<std::uint8_t> serialize_container(const Dataset& data);
Dataset deserialize_container(const std::vector<std::uint8_t>& bytes);
void save_container(const Dataset& data, const std::string& path);
Dataset load_container(const std::string& path);

// Deterministic shuffled batching; the final partial batch is kept.
std::vector<std::vector<int>> batch_indices(std::size_t n,
                                            std::size_t batch_size,
                                            std::uint64_t seed,
                                            std::uint64_t epoch);

struct TrainBatch {
  Tensor images;
  std::vector<int> labels;
};

TrainBatch gather_batch(const Dataset& data, const std::vector<int>& indices);

// Pixel-space nearest-centroid classifier: per-class mean over `train`,
// nearest centroid per `eval` sample. Used as an independent baseline.
std::vector<int> nearest_centroid_predict(const Dataset& train,
                                          const Dataset& eval_set);

}  // namespace fesvibs
