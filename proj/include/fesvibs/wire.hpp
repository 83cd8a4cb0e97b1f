#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "fesvibs/tensor.hpp"

namespace fesvibs::wire {

// Tagged union of every protocol exchange. No message type carries raw
// images or labels: only smashed representations, pseudo/cls tokens,
// gradients and unified head/tail parameters cross the boundary.

struct SmashedUpload {
  std::uint32_t client = 0, round = 0, batch = 0;
  Tensor h;  // [B,D,M]
};

struct PseudoTokenDown {
  std::uint32_t client = 0, round = 0, batch = 0;
  std::uint32_t sampled_block = 0;  // l in [1..S]
  Tensor b;                         // [B,D]
};

struct ClsTokenDown {
  std::uint32_t client = 0, round = 0, batch = 0;
  Tensor b;  // [B,D]
};

struct TailGradUp {
  std::uint32_t client = 0, round = 0, batch = 0;
  Tensor grad;  // d loss / d b
};

struct HeadGradDown {
  std::uint32_t client = 0, round = 0, batch = 0;
  Tensor grad;  // d loss / d h
};

// Carries head/tail parameter groups. Sent client -> server to report local
// parameters on a unifying round, and server -> clients to broadcast the
// FedAvg result.
struct UnifyBroadcast {
  std::uint32_t client = 0;  // sender when going up, 0 when broadcast
  std::uint32_t round = 0;
  std::vector<Tensor> head;
  std::vector<Tensor> tail;
};

struct RoundEnd {
  std::uint32_t client = 0;
  std::uint32_t round = 0;
};

struct ErrorMsg {
  std::uint16_t code = 0;
  std::string detail;
};

using Message = std::variant<SmashedUpload, PseudoTokenDown, ClsTokenDown,
                             TailGradUp, HeadGradDown, UnifyBroadcast,
                             RoundEnd, ErrorMsg>;

const char* message_type_name(const Message& m);

// Frame layout, little-endian:
//   u16 magic 0xFE5B | u8 version (1) | u8 type | u32 payload length |
//   payload | u32 crc32 over header+payload
// Tensor payloads are serialized as (u8 rank, u32 dims..., u8 dtype tag,
// raw data); dtype 0 is f32 (the wire precision), tag 1 reserves f64.
constexpr std::uint16_t kFrameMagic = 0xFE5B;
constexpr std::uint8_t kFrameVersion = 1;
constexpr std::size_t kDefaultMaxPayload = 64ull * 1024 * 1024;
constexpr std::size_t kFrameHeaderSize = 8;

std::vector<std::uint8_t> encode_frame(
    const Message& m, std::size_t max_payload = kDefaultMaxPayload);

Message decode_frame(const std::uint8_t* data, std::size_t len,
                     std::size_t max_payload = kDefaultMaxPayload);

inline Message decode_frame(const std::vector<std::uint8_t>& bytes,
                            std::size_t max_payload = kDefaultMaxPayload) {
  return decode_frame(bytes.data(), bytes.size(), max_payload);
}

// Header fields needed to read the rest of a frame off a byte stream.
struct FrameHeader {
  std::uint8_t type = 0;
  std::uint32_t payload_len = 0;
};
FrameHeader parse_frame_header(const std::uint8_t* data, std::size_t len,
                               std::size_t max_payload = kDefaultMaxPayload);

}  // namespace fesvibs::wire
