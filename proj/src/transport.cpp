#include "fesvibs/transport.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <deque>
#include <mutex>

#include "fesvibs/error.hpp"

namespace fesvibs {

namespace {

struct ChannelQueue {
  std::mutex mu;
  std::condition_variable cv;
  std::deque<wire::Message> q;
  std::size_t capacity;
  bool closed = false;

  explicit ChannelQueue(std::size_t cap) : capacity(cap) {}

  void push(const wire::Message& m) {
    std::unique_lock<std::mutex> lk(mu);
    cv.wait(lk, [&] { return closed || q.size() < capacity; });
    if (closed)
      throw TransportError(TransportErrc::kDisconnected,
                           "channel: peer closed");
    q.push_back(m);
    cv.notify_all();
  }

  wire::Message pop() {
    std::unique_lock<std::mutex> lk(mu);
    cv.wait(lk, [&] { return closed || !q.empty(); });
    if (q.empty())
      throw TransportError(TransportErrc::kDisconnected,
                           "channel: closed with no pending messages");
    wire::Message m = std::move(q.front());
    q.pop_front();
    cv.notify_all();
    return m;
  }

  void close() {
    std::lock_guard<std::mutex> lk(mu);
    closed = true;
    cv.notify_all();
  }
};

class ChannelEndpoint : public Endpoint {
 public:
  ChannelEndpoint(std::shared_ptr<ChannelQueue> out,
                  std::shared_ptr<ChannelQueue> in)
      : out_(std::move(out)), in_(std::move(in)) {}
  ~ChannelEndpoint() override { close(); }

  void send(const wire::Message& m) override { out_->push(m); }
  wire::Message receive() override { return in_->pop(); }
  void close() override {
    out_->close();
    in_->close();
  }

 private:
  std::shared_ptr<ChannelQueue> out_, in_;
};

}  // namespace

std::pair<std::unique_ptr<Endpoint>, std::unique_ptr<Endpoint>> channel_pair(
    std::size_t capacity) {
  auto a_to_b = std::make_shared<ChannelQueue>(capacity);
  auto b_to_a = std::make_shared<ChannelQueue>(capacity);
  return {std::make_unique<ChannelEndpoint>(a_to_b, b_to_a),
          std::make_unique<ChannelEndpoint>(b_to_a, a_to_b)};
}

// --- stream transport -------------------------------------------------------

namespace {

[[noreturn]] void throw_errno(const std::string& what) {
  throw TransportError(TransportErrc::kDisconnected,
                       what + ": " + std::strerror(errno));
}

class SocketEndpoint : public Endpoint {
 public:
  explicit SocketEndpoint(int fd) : fd_(fd) {}
  ~SocketEndpoint() override { close(); }

  void send(const wire::Message& m) override {
    auto frame = wire::encode_frame(m);
    std::size_t sent = 0;
    while (sent < frame.size()) {
      ssize_t n = ::send(fd_, frame.data() + sent, frame.size() - sent,
                         MSG_NOSIGNAL);
      if (n <= 0) throw_errno("stream send");
      sent += static_cast<std::size_t>(n);
    }
  }

  wire::Message receive() override {
    std::vector<std::uint8_t> buf(wire::kFrameHeaderSize);
    read_exact(buf.data(), buf.size(), /*eof_ok_at_start=*/true);
    auto header = wire::parse_frame_header(buf.data(), buf.size());
    const std::size_t total =
        wire::kFrameHeaderSize + header.payload_len + 4;
    buf.resize(total);
    read_exact(buf.data() + wire::kFrameHeaderSize,
               total - wire::kFrameHeaderSize, /*eof_ok_at_start=*/false);
    return wire::decode_frame(buf.data(), buf.size());
  }

  void close() override {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  void read_exact(std::uint8_t* dst, std::size_t len, bool eof_ok_at_start) {
    std::size_t got = 0;
    while (got < len) {
      ssize_t n = ::recv(fd_, dst + got, len - got, 0);
      if (n == 0) {
        if (got == 0 && eof_ok_at_start)
          throw TransportError(TransportErrc::kDisconnected,
                               "stream: peer closed");
        throw TransportError(TransportErrc::kTruncated,
                             "stream: connection closed mid-frame");
      }
      if (n < 0) throw_errno("stream recv");
      got += static_cast<std::size_t>(n);
    }
  }

  int fd_;
};

}  // namespace

StreamListener::StreamListener(std::uint16_t port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw_errno("listener socket");
  int one = 1;
  ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(port);
  if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0)
    throw_errno("listener bind");
  if (::listen(fd_, 16) < 0) throw_errno("listener listen");
  socklen_t len = sizeof(addr);
  if (::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len) < 0)
    throw_errno("listener getsockname");
  port_ = ntohs(addr.sin_port);
}

StreamListener::~StreamListener() {
  if (fd_ >= 0) ::close(fd_);
}

std::unique_ptr<Endpoint> StreamListener::accept() {
  int fd = ::accept(fd_, nullptr, nullptr);
  if (fd < 0) throw_errno("listener accept");
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<SocketEndpoint>(fd);
}

std::unique_ptr<Endpoint> stream_connect(const std::string& host,
                                         std::uint16_t port) {
  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd < 0) throw_errno("connect socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd);
    throw TransportError(TransportErrc::kDisconnected,
                         "connect: bad address " + host);
  }
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0) {
    int err = errno;
    ::close(fd);
    throw TransportError(TransportErrc::kDisconnected,
                         std::string("connect: ") + std::strerror(err));
  }
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  return std::make_unique<SocketEndpoint>(fd);
}

}  // namespace fesvibs
