#include <doctest.h>
#include <zlib.h>

#include <cstring>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "fesvibs/transport.hpp"
#include "fesvibs/wire.hpp"
#include "test_util.hpp"

using namespace fesvibs;
using wire::Message;

namespace {

// Wire payloads are f32; round-trip fidelity is stated against tensors whose
// values are f32-representable.
Tensor rand_f32_tensor(std::vector<std::size_t> shape, Rng& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> data(shape_product(shape));
  for (auto& v : data) v = static_cast<double>(static_cast<float>(dist(rng)));
  return Tensor::from_data(std::move(shape), std::move(data));
}

bool tensor_equal(const Tensor& a, const Tensor& b) {
  return testutil::bitwise_equal(a, b);
}

bool message_equal(const Message& a, const Message& b) {
  if (a.index() != b.index()) return false;
  if (const auto* x = std::get_if<wire::SmashedUpload>(&a)) {
    const auto& y = std::get<wire::SmashedUpload>(b);
    return x->client == y.client && x->round == y.round &&
           x->batch == y.batch && tensor_equal(x->h, y.h);
  }
  if (const auto* x = std::get_if<wire::PseudoTokenDown>(&a)) {
    const auto& y = std::get<wire::PseudoTokenDown>(b);
    return x->client == y.client && x->round == y.round &&
           x->batch == y.batch && x->sampled_block == y.sampled_block &&
           tensor_equal(x->b, y.b);
  }
  if (const auto* x = std::get_if<wire::ClsTokenDown>(&a)) {
    const auto& y = std::get<wire::ClsTokenDown>(b);
    return x->client == y.client && x->round == y.round &&
           x->batch == y.batch && tensor_equal(x->b, y.b);
  }
  if (const auto* x = std::get_if<wire::TailGradUp>(&a)) {
    const auto& y = std::get<wire::TailGradUp>(b);
    return x->client == y.client && x->round == y.round &&
           x->batch == y.batch && tensor_equal(x->grad, y.grad);
  }
  if (const auto* x = std::get_if<wire::HeadGradDown>(&a)) {
    const auto& y = std::get<wire::HeadGradDown>(b);
    return x->client == y.client && x->round == y.round &&
           x->batch == y.batch && tensor_equal(x->grad, y.grad);
  }
  if (const auto* x = std::get_if<wire::UnifyBroadcast>(&a)) {
    const auto& y = std::get<wire::UnifyBroadcast>(b);
    if (x->client != y.client || x->round != y.round ||
        x->head.size() != y.head.size() || x->tail.size() != y.tail.size())
      return false;
    for (std::size_t i = 0; i < x->head.size(); ++i)
      if (!tensor_equal(x->head[i], y.head[i])) return false;
    for (std::size_t i = 0; i < x->tail.size(); ++i)
      if (!tensor_equal(x->tail[i], y.tail[i])) return false;
    return true;
  }
  if (const auto* x = std::get_if<wire::RoundEnd>(&a)) {
    const auto& y = std::get<wire::RoundEnd>(b);
    return x->client == y.client && x->round == y.round;
  }
  const auto& xe = std::get<wire::ErrorMsg>(a);
  const auto& ye = std::get<wire::ErrorMsg>(b);
  return xe.code == ye.code && xe.detail == ye.detail;
}

std::vector<Message> sample_messages(Rng& rng) {
  std::vector<Message> out;
  {
    wire::SmashedUpload m;
    m.client = 3;
    m.round = 9;
    m.batch = 2;
    m.h = rand_f32_tensor({2, 4, 3}, rng);
    out.push_back(m);
  }
  {
    wire::PseudoTokenDown m;
    m.client = 3;
    m.round = 9;
    m.batch = 2;
    m.sampled_block = 4;
    m.b = rand_f32_tensor({2, 4}, rng);
    out.push_back(m);
  }
  {
    wire::ClsTokenDown m;
    m.client = 1;
    m.round = 2;
    m.batch = 0;
    m.b = rand_f32_tensor({2, 4}, rng);
    out.push_back(m);
  }
  {
    wire::TailGradUp m;
    m.client = 0;
    m.round = 1;
    m.batch = 7;
    m.grad = rand_f32_tensor({2, 4}, rng);
    out.push_back(m);
  }
  {
    wire::HeadGradDown m;
    m.client = 0;
    m.round = 1;
    m.batch = 7;
    m.grad = rand_f32_tensor({2, 4, 3}, rng);
    out.push_back(m);
  }
  {
    wire::UnifyBroadcast m;
    m.client = 5;
    m.round = 6;
    m.head = {rand_f32_tensor({3, 2}, rng), rand_f32_tensor({2}, rng)};
    m.tail = {rand_f32_tensor({2, 2}, rng)};
    out.push_back(m);
  }
  {
    wire::RoundEnd m;
    m.client = 4;
    m.round = 12;
    out.push_back(m);
  }
  {
    wire::ErrorMsg m;
    m.code = 42;
    m.detail = "shape mismatch on upload";
    out.push_back(m);
  }
  return out;
}

}  // namespace

TEST_CASE("every message variant round-trips bitwise through the codec") {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    for (const auto& m : sample_messages(rng)) {
      auto bytes = wire::encode_frame(m);
      Message back = wire::decode_frame(bytes);
      CHECK(message_equal(m, back));
      // Re-encoding the decoded message reproduces the bytes exactly.
      CHECK(wire::encode_frame(back) == bytes);
    }
  }
}

TEST_CASE("golden frame bytes for a zeros smashed upload") {
  wire::SmashedUpload m;
  m.client = 1;
  m.round = 1;
  m.batch = 0;
  m.h = Tensor::zeros({2, 3});
  auto bytes = wire::encode_frame(m);
  std::string hex;
  char buf[3];
  for (auto b : bytes) {
    std::snprintf(buf, sizeof(buf), "%02x", b);
    hex += buf;
  }
  CHECK(hex ==
        "5bfe01012e000000010000000100000000000000020200000003000000000000"
        "00000000000000000000000000000000000000000000e7b9dcce");
}

TEST_CASE("frame decode errors are distinct") {
  Rng rng = make_rng(2);
  auto msgs = sample_messages(rng);
  auto bytes = wire::encode_frame(msgs[0]);

  auto flipped = bytes;
  flipped[12] ^= 0x40;
  try {
    wire::decode_frame(flipped);
    FAIL("expected crc error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kBadCrc);
  }

  auto truncated = bytes;
  truncated.resize(truncated.size() - 3);
  try {
    wire::decode_frame(truncated);
    FAIL("expected truncation error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kTruncated);
  }

  auto bad_magic = bytes;
  bad_magic[0] = 0x00;
  try {
    wire::decode_frame(bad_magic);
    FAIL("expected magic error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kBadMagic);
  }

  auto bad_version = bytes;
  bad_version[2] = 9;
  try {
    wire::decode_frame(bad_version);
    FAIL("expected version error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kBadVersion);
  }

  try {
    wire::encode_frame(msgs[0], /*max_payload=*/8);
    FAIL("expected oversize error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kOversize);
  }

  auto bad_type = bytes;
  bad_type[3] = 200;
  // CRC covers the type byte, so recompute it to reach the type check.
  {
    auto payload_end = bad_type.size() - 4;
    std::uint32_t crc = static_cast<std::uint32_t>(
        ::crc32(0L, bad_type.data(), static_cast<uInt>(payload_end)));
    for (int i = 0; i < 4; ++i)
      bad_type[payload_end + i] =
          static_cast<std::uint8_t>((crc >> (8 * i)) & 0xFF);
  }
  try {
    wire::decode_frame(bad_type);
    FAIL("expected unknown-type error");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kUnknownType);
  }
}

TEST_CASE("in-process channel pair delivers in order") {
  auto [a, b] = channel_pair();
  Rng rng = make_rng(3);
  auto msgs = sample_messages(rng);
  a->send(msgs[0]);
  Message got = b->receive();
  CHECK(message_equal(got, msgs[0]));

  for (std::uint32_t i = 0; i < 1000; ++i) {
    wire::RoundEnd m;
    m.client = i;
    m.round = i;
    b->send(m);
    // Drain as we go to stay inside the bounded queue.
    Message r = a->receive();
    CHECK(std::get<wire::RoundEnd>(r).client == i);
  }
}

TEST_CASE("receive on a closed channel raises a disconnect error") {
  auto [a, b] = channel_pair();
  a->close();
  try {
    b->receive();
    FAIL("expected disconnect");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kDisconnected);
  }
  try {
    b->send(wire::RoundEnd{});
    FAIL("expected disconnect");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kDisconnected);
  }
}

TEST_CASE("stream transport round-trips every variant over loopback") {
  StreamListener listener(0);
  REQUIRE(listener.port() != 0);
  auto client = stream_connect("127.0.0.1", listener.port());
  auto server = listener.accept();

  Rng rng = make_rng(4);
  for (const auto& m : sample_messages(rng)) {
    client->send(m);
    Message got = server->receive();
    CHECK(message_equal(m, got));
    server->send(got);
    Message echoed = client->receive();
    CHECK(message_equal(m, echoed));
  }
}

TEST_CASE("partial frame then close yields a truncation error") {
  StreamListener listener(0);
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(fd >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(listener.port());
  ::inet_pton(AF_INET, "127.0.0.1", &addr.sin_addr);
  REQUIRE(::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) == 0);
  auto server = listener.accept();

  wire::RoundEnd m;
  m.client = 1;
  m.round = 1;
  auto bytes = wire::encode_frame(m);
  // Send only part of the frame, then close.
  ::send(fd, bytes.data(), bytes.size() - 5, 0);
  ::close(fd);
  try {
    server->receive();
    FAIL("expected truncation");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kTruncated);
  }
}

TEST_CASE("connection refused maps to a disconnect error") {
  std::uint16_t dead_port;
  {
    StreamListener probe(0);
    dead_port = probe.port();
  }
  try {
    auto ep = stream_connect("127.0.0.1", dead_port);
    FAIL("expected disconnect");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kDisconnected);
  }
}

TEST_CASE("clean peer shutdown surfaces as disconnect at a frame boundary") {
  StreamListener listener(0);
  auto client = stream_connect("127.0.0.1", listener.port());
  auto server = listener.accept();
  client->close();
  try {
    server->receive();
    FAIL("expected disconnect");
  } catch (const TransportError& e) {
    CHECK(e.code() == TransportErrc::kDisconnected);
  }
}
