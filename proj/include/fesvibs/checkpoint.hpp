#pragma once

#include <map>
#include <string>
#include <vector>

#include "fesvibs/model.hpp"
#include "fesvibs/protocol.hpp"

namespace fesvibs {

// Binary parameter container with named groups:
//   magic "FSVC1" | u8 version | u8 variant | model header | u32 n_clients |
//   u32 tensor count | (u32 name len, name, u8 rank, u32 dims..., f64 data) |
//   u32 crc32
struct Checkpoint {
  Variant variant = Variant::kFeSViBS;
  ModelConfig model;
  std::size_t n_clients = 0;
  std::vector<NamedTensor> tensors;

  const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Reassembles parameter groups from a loaded checkpoint. Split variants
// store "clientN.head/tail" plus "server.body/proj"; the local variants
// store every client's full stack under "clientN.".
HeadParams head_from_checkpoint(const Checkpoint& ckpt, int client);
TailParams tail_from_checkpoint(const Checkpoint& ckpt, int client);
BodyParams body_from_checkpoint(const Checkpoint& ckpt,
                                const std::string& prefix = "server.");
ProjectionParams projection_from_checkpoint(
    const Checkpoint& ckpt, const std::string& prefix = "server.");

}  // namespace fesvibs
