#include "fesvibs/checkpoint.hpp"

#include <zlib.h>

#include <cstring>
#include <fstream>

namespace fesvibs {

namespace {

constexpr char kMagic[5] = {'F', 'S', 'V', 'C', '1'};
constexpr std::uint8_t kVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i)
    out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xFF));
}

void put_f64(std::vector<std::uint8_t>& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, sizeof(bits));
  for (int i = 0; i < 8; ++i)
    out.push_back(static_cast<std::uint8_t>((bits >> (8 * i)) & 0xFF));
}

struct Reader {
  const std::uint8_t* p;
  std::size_t left;

  void need(std::size_t n) const {
    if (left < n) throw IoError("checkpoint: truncated");
  }
  std::uint8_t u8() {
    need(1);
    std::uint8_t v = *p++;
    --left;
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
  double f64() {
    need(8);
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    p += 8;
    left -= 8;
    double v;
    std::memcpy(&v, &bits, sizeof(v));
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(p), n);
    p += n;
    left -= n;
    return s;
  }
};

std::uint32_t crc32_of(const std::uint8_t* data, std::size_t len) {
  return static_cast<std::uint32_t>(
      ::crc32(0L, reinterpret_cast<const Bytef*>(data),
              static_cast<uInt>(len)));
}

}  // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
  for (const auto& nt : tensors)
    if (nt.name == name) return &nt.tensor;
  return nullptr;
}

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out;
  out.insert(out.end(), kMagic, kMagic + 5);
  out.push_back(kVersion);
  out.push_back(static_cast<std::uint8_t>(ckpt.variant));
  const auto& m = ckpt.model;
  for (std::size_t v : {m.blocks, m.dim, m.heads, m.patch, m.image_channels,
                        m.image_height, m.image_width, m.classes,
                        m.sample_limit, m.head_channels})
    put_u32(out, static_cast<std::uint32_t>(v));
  put_f64(out, m.mlp_ratio);
  out.push_back(m.trainable_pos_embed ? 1 : 0);
  out.push_back(m.proj_skip == SkipReducer::kMean ? 0 : 1);
  put_u32(out, static_cast<std::uint32_t>(ckpt.n_clients));
  put_u32(out, static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& nt : ckpt.tensors) {
    put_u32(out, static_cast<std::uint32_t>(nt.name.size()));
    out.insert(out.end(), nt.name.begin(), nt.name.end());
    out.push_back(static_cast<std::uint8_t>(nt.tensor.rank()));
    for (std::size_t d : nt.tensor.shape())
      put_u32(out, static_cast<std::uint32_t>(d));
    for (double v : nt.tensor.data()) put_f64(out, v);
  }
  put_u32(out, crc32_of(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 10) throw IoError("checkpoint: file too short");
  if (std::memcmp(bytes.data(), kMagic, 5) != 0)
    throw IoError("checkpoint: bad magic");
  const std::uint32_t stored = [&] {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(bytes[bytes.size() - 4 + i]) << (8 * i);
    return v;
  }();
  if (stored != crc32_of(bytes.data(), bytes.size() - 4))
    throw IoError("checkpoint: crc mismatch");

  Reader r{bytes.data() + 5, bytes.size() - 5 - 4};
  if (r.u8() != kVersion) throw IoError("checkpoint: unsupported version");
  Checkpoint ckpt;
  ckpt.variant = static_cast<Variant>(r.u8());
  auto& m = ckpt.model;
  m.blocks = r.u32();
  m.dim = r.u32();
  m.heads = r.u32();
  m.patch = r.u32();
  m.image_channels = r.u32();
  m.image_height = r.u32();
  m.image_width = r.u32();
  m.classes = r.u32();
  m.sample_limit = r.u32();
  m.head_channels = r.u32();
  m.mlp_ratio = r.f64();
  m.trainable_pos_embed = r.u8() != 0;
  m.proj_skip = r.u8() == 0 ? SkipReducer::kMean : SkipReducer::kSum;
  ckpt.n_clients = r.u32();
  const std::uint32_t count = r.u32();
  ckpt.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = r.u32();
    std::string name = r.str(name_len);
    const std::uint8_t rank = r.u8();
    std::vector<std::size_t> shape(rank);
    for (auto& d : shape) d = r.u32();
    std::vector<double> data(shape_product(shape));
    for (auto& v : data) v = r.f64();
    ckpt.tensors.push_back(
        {std::move(name),
         Tensor::from_data(std::move(shape), std::move(data), true)});
  }
  if (r.left != 0) throw IoError("checkpoint: trailing bytes");
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  auto bytes = serialize_checkpoint(ckpt);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("checkpoint: cannot open " + path + " for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("checkpoint: short write to " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("checkpoint: cannot open " + path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                                  std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

namespace {

Tensor require(const Checkpoint& ckpt, const std::string& name) {
  const Tensor* t = ckpt.find(name);
  if (!t) throw IoError("checkpoint: missing tensor " + name);
  return t->detached(true);
}

}  // namespace

HeadParams head_from_checkpoint(const Checkpoint& ckpt, int client) {
  const std::string p = "client" + std::to_string(client) + ".head.";
  HeadParams h;
  h.conv1_w = require(ckpt, p + "conv1.weight");
  h.conv1_b = require(ckpt, p + "conv1.bias");
  h.conv2_w = require(ckpt, p + "conv2.weight");
  h.conv2_b = require(ckpt, p + "conv2.bias");
  return h;
}

TailParams tail_from_checkpoint(const Checkpoint& ckpt, int client) {
  const std::string p = "client" + std::to_string(client) + ".tail.";
  TailParams t;
  t.w = require(ckpt, p + "weight");
  t.b = require(ckpt, p + "bias");
  return t;
}

BodyParams body_from_checkpoint(const Checkpoint& ckpt,
                                const std::string& prefix) {
  BodyParams b;
  for (std::size_t i = 0; i < ckpt.model.blocks; ++i) {
    const std::string p = prefix + "body.block" + std::to_string(i) + ".";
    BlockParams blk;
    blk.ln1_g = require(ckpt, p + "ln1.gamma");
    blk.ln1_b = require(ckpt, p + "ln1.beta");
    blk.wq = require(ckpt, p + "attn.q.weight");
    blk.bq = require(ckpt, p + "attn.q.bias");
    blk.wk = require(ckpt, p + "attn.k.weight");
    blk.bk = require(ckpt, p + "attn.k.bias");
    blk.wv = require(ckpt, p + "attn.v.weight");
    blk.bv = require(ckpt, p + "attn.v.bias");
    blk.wo = require(ckpt, p + "attn.out.weight");
    blk.bo = require(ckpt, p + "attn.out.bias");
    blk.ln2_g = require(ckpt, p + "ln2.gamma");
    blk.ln2_b = require(ckpt, p + "ln2.beta");
    blk.mlp1_w = require(ckpt, p + "mlp.fc1.weight");
    blk.mlp1_b = require(ckpt, p + "mlp.fc1.bias");
    blk.mlp2_w = require(ckpt, p + "mlp.fc2.weight");
    blk.mlp2_b = require(ckpt, p + "mlp.fc2.bias");
    b.blocks.push_back(std::move(blk));
  }
  b.cls = require(ckpt, prefix + "body.cls");
  b.pos = require(ckpt, prefix + "body.pos");
  if (!ckpt.model.trainable_pos_embed) b.pos = b.pos.detached(false);
  return b;
}

ProjectionParams projection_from_checkpoint(const Checkpoint& ckpt,
                                            const std::string& prefix) {
  ProjectionParams p;
  p.conv1_w = require(ckpt, prefix + "proj.conv1.weight");
  p.conv1_b = require(ckpt, prefix + "proj.conv1.bias");
  p.conv2_w = require(ckpt, prefix + "proj.conv2.weight");
  p.conv2_b = require(ckpt, prefix + "proj.conv2.bias");
  return p;
}

}  // namespace fesvibs
