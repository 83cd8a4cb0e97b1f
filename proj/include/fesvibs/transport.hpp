#pragma once

#include <memory>
#include <string>
#include <utility>

#include "fesvibs/wire.hpp"

namespace fesvibs {

// Ordered, lossless, blocking message endpoint. Each endpoint is owned by
// one execution context; handing a message across endpoints is the
// synchronization point.
class Endpoint {
 public:
  virtual ~Endpoint() = default;
  virtual void send(const wire::Message& m) = 0;
  virtual wire::Message receive() = 0;
  virtual void close() = 0;
};

// In-process connected pair over bounded queues. Messages are handed over
// at full in-memory precision (no wire serialization).
std::pair<std::unique_ptr<Endpoint>, std::unique_ptr<Endpoint>> channel_pair(
    std::size_t capacity = 256);

// Loopback/TCP stream transport carrying wire frames; payload tensors are
// narrowed to f32 by the frame codec.
class StreamListener {
 public:
  explicit StreamListener(std::uint16_t port = 0);  // 0 picks a free port
  ~StreamListener();
  StreamListener(const StreamListener&) = delete;
  StreamListener& operator=(const StreamListener&) = delete;

  std::uint16_t port() const { return port_; }
  std::unique_ptr<Endpoint> accept();

 private:
  int fd_ = -1;
  std::uint16_t port_ = 0;
};

std::unique_ptr<Endpoint> stream_connect(const std::string& host,
                                         std::uint16_t port);

}  // namespace fesvibs
