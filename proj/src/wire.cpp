#include "fesvibs/wire.hpp"

#include <zlib.h>

#include <cstring>

#include "fesvibs/error.hpp"

namespace fesvibs::wire {

namespace {

void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xFF));
  out.push_back(static_cast<std::uint8_t>((v >> 8) & 0xFF));
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::uint8_t* p;
  std::size_t left;

  void need(std::size_t n) const {
    if (left < n)
      throw TransportError(TransportErrc::kTruncated,
                           "frame: payload truncated");
  }
  std::uint8_t u8() {
    need(1);
    std::uint8_t v = *p;
    ++p;
    --left;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint16_t>(
        static_cast<std::uint16_t>(p[0]) |
        (static_cast<std::uint16_t>(p[1]) << 8));
    p += 2;
    left -= 2;
    return v;
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    p += 4;
    left -= 4;
    return v;
  }
  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
};

constexpr std::uint8_t kDtypeF32 = 0;

void put_tensor(std::vector<std::uint8_t>& out, const Tensor& t) {
  if (!t.defined())
    throw ValidationError("frame: undefined tensor payload");
  if (t.rank() > 255)
    throw ValidationError("frame: tensor rank exceeds wire limit");
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
  out.push_back(kDtypeF32);
  for (double v : t.data()) {
    float f = static_cast<float>(v);
    std::uint32_t bits;
    std::memcpy(&bits, &f, sizeof(bits));
    put_u32(out, bits);
  }
}

Tensor get_tensor(Reader& r) {
  const std::uint8_t rank = r.u8();
  std::vector<std::size_t> shape(rank);
  for (auto& d : shape) d = r.u32();
  const std::uint8_t dtype = r.u8();
  if (dtype != kDtypeF32)
    throw TransportError(TransportErrc::kUnknownType,
                         "frame: unsupported tensor dtype tag " +
                             std::to_string(dtype));
  const std::size_t n = shape_product(shape);
  std::vector<double> data(n);
  for (auto& v : data) v = static_cast<double>(r.f32());
  return Tensor::from_data(std::move(shape), std::move(data));
}

void put_tensor_list(std::vector<std::uint8_t>& out,
                     const std::vector<Tensor>& ts) {
  put_u32(out, static_cast<std::uint32_t>(ts.size()));
  for (const auto& t : ts) put_tensor(out, t);
}

std::vector<Tensor> get_tensor_list(Reader& r) {
  const std::uint32_t n = r.u32();
  std::vector<Tensor> out;
  out.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) out.push_back(get_tensor(r));
  return out;
}

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(len)));
}

std::uint8_t type_byte(const Message& m) {
  return static_cast<std::uint8_t>(m.index() + 1);
}

std::vector<std::uint8_t> encode_payload(const Message& m) {
  std::vector<std::uint8_t> out;
  std::visit(
      [&out](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, SmashedUpload>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_u32(out, msg.batch);
          put_tensor(out, msg.h);
        } else if constexpr (std::is_same_v<T, PseudoTokenDown>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_u32(out, msg.batch);
          put_u32(out, msg.sampled_block);
          put_tensor(out, msg.b);
        } else if constexpr (std::is_same_v<T, ClsTokenDown>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_u32(out, msg.batch);
          put_tensor(out, msg.b);
        } else if constexpr (std::is_same_v<T, TailGradUp>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_u32(out, msg.batch);
          put_tensor(out, msg.grad);
        } else if constexpr (std::is_same_v<T, HeadGradDown>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_u32(out, msg.batch);
          put_tensor(out, msg.grad);
        } else if constexpr (std::is_same_v<T, UnifyBroadcast>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
          put_tensor_list(out, msg.head);
          put_tensor_list(out, msg.tail);
        } else if constexpr (std::is_same_v<T, RoundEnd>) {
          put_u32(out, msg.client);
          put_u32(out, msg.round);
        } else if constexpr (std::is_same_v<T, ErrorMsg>) {
          put_u16(out, msg.code);
          put_u32(out, static_cast<std::uint32_t>(msg.detail.size()));
          out.insert(out.end(), msg.detail.begin(), msg.detail.end());
        }
      },
      m);
  return out;
}

Message decode_payload(std::uint8_t type, Reader& r) {
  switch (type) {
    case 1: {
      SmashedUpload m;
      m.client = r.u32();
      m.round = r.u32();
      m.batch = r.u32();
      m.h = get_tensor(r);
      return m;
    }
    case 2: {
      PseudoTokenDown m;
      m.client = r.u32();
      m.round = r.u32();
      m.batch = r.u32();
      m.sampled_block = r.u32();
      m.b = get_tensor(r);
      return m;
    }
    case 3: {
      ClsTokenDown m;
      m.client = r.u32();
      m.round = r.u32();
      m.batch = r.u32();
      m.b = get_tensor(r);
      return m;
    }
    case 4: {
      TailGradUp m;
      m.client = r.u32();
      m.round = r.u32();
      m.batch = r.u32();
      m.grad = get_tensor(r);
      return m;
    }
    case 5: {
      HeadGradDown m;
      m.client = r.u32();
      m.round = r.u32();
      m.batch = r.u32();
      m.grad = get_tensor(r);
      return m;
    }
    case 6: {
      UnifyBroadcast m;
      m.client = r.u32();
      m.round = r.u32();
      m.head = get_tensor_list(r);
      m.tail = get_tensor_list(r);
      return m;
    }
    case 7: {
      RoundEnd m;
      m.client = r.u32();
      m.round = r.u32();
      return m;
    }
    case 8: {
      ErrorMsg m;
      m.code = r.u16();
      const std::uint32_t n = r.u32();
      r.need(n);
      m.detail.assign(reinterpret_cast<const char*>(r.p), n);
      r.p += n;
      r.left -= n;
      return m;
    }
    default:
      throw TransportError(TransportErrc::kUnknownType,
                           "frame: unknown message type " +
                               std::to_string(type));
  }
}

}  // namespace

const char* message_type_name(const Message& m) {
  static constexpr const char* kNames[] = {
      "SmashedUpload", "PseudoTokenDown", "ClsTokenDown", "TailGradUp",
      "HeadGradDown",  "UnifyBroadcast",  "RoundEnd",     "Error"};
  return kNames[m.index()];
}

std::vector<std::uint8_t> encode_frame(const Message& m,
                                       std::size_t max_payload) {
  auto payload = encode_payload(m);
  if (payload.size() > max_payload)
    throw TransportError(TransportErrc::kOversize,
                         "frame: payload of " +
                             std::to_string(payload.size()) +
                             " bytes exceeds limit of " +
                             std::to_string(max_payload));
  std::vector<std::uint8_t> out;
  out.reserve(kFrameHeaderSize + payload.size() + 4);
  put_u16(out, kFrameMagic);
  out.push_back(kFrameVersion);
  out.push_back(type_byte(m));
  put_u32(out, static_cast<std::uint32_t>(payload.size()));
  out.insert(out.end(), payload.begin(), payload.end());
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

FrameHeader parse_frame_header(const std::uint8_t* data, std::size_t len,
                               std::size_t max_payload) {
  if (len < kFrameHeaderSize)
    throw TransportError(TransportErrc::kTruncated,
                         "frame: header truncated");
  const std::uint16_t magic = static_cast<std::uint16_t>(
      static_cast<std::uint16_t>(data[0]) |
      (static_cast<std::uint16_t>(data[1]) << 8));
  if (magic != kFrameMagic)
    throw TransportError(TransportErrc::kBadMagic, "frame: bad magic");
  if (data[2] != kFrameVersion)
    throw TransportError(TransportErrc::kBadVersion,
                         "frame: unsupported version " +
                             std::to_string(data[2]));
  FrameHeader h;
  h.type = data[3];
  h.payload_len = 0;
  for (int i = 0; i < 4; ++i)
    h.payload_len |= static_cast<std::uint32_t>(data[4 + i]) << (8 * i);
  if (h.payload_len > max_payload)
    throw TransportError(TransportErrc::kOversize,
                         "frame: declared payload of " +
                             std::to_string(h.payload_len) +
                             " bytes exceeds limit");
  return h;
}

Message decode_frame(const std::uint8_t* data, std::size_t len,
                     std::size_t max_payload) {
  FrameHeader h = parse_frame_header(data, len, max_payload);
  const std::size_t total = kFrameHeaderSize + h.payload_len + 4;
  if (len != total)
    throw TransportError(TransportErrc::kTruncated,
                         "frame: expected " + std::to_string(total) +
                             " bytes, got " + std::to_string(len));
  std::uint32_t stored = 0;
  for (int i = 0; i < 4; ++i)
    stored |= static_cast<std::uint32_t>(data[total - 4 + i]) << (8 * i);
  if (stored != crc32_of(data, total - 4))
    throw TransportError(TransportErrc::kBadCrc, "frame: crc mismatch");
  Reader r{data + kFrameHeaderSize, h.payload_len};
  Message m = decode_payload(h.type, r);
  if (r.left != 0)
    throw TransportError(TransportErrc::kTruncated,
                         "frame: trailing bytes after payload");
  return m;
}

}  // namespace fesvibs::wire
