#pragma once

#include <stdexcept>
#include <string>

namespace fesvibs {

// Base for all errors raised by this library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

// Mismatched tensor/parameter shapes. The message names the offending shapes.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// A value-level precondition failed (bad label, bad hyperparameter, ...).
class ValidationError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared where the contract forbids it.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Experiment configuration is inconsistent; message lists every failure.
class ConfigError : public Error {
 public:
  using Error::Error;
};

// A message arrived out of order or with contents the state machine rejects.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

enum class TransportErrc {
  kBadMagic,
  kBadVersion,
  kBadCrc,
  kTruncated,
  kOversize,
  kUnknownType,
  kDisconnected,
};

class TransportError : public Error {
 public:
  TransportError(TransportErrc code, const std::string& what)
      : Error(what), code_(code) {}
  TransportErrc code() const { return code_; }

 private:
  TransportErrc code_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace fesvibs
