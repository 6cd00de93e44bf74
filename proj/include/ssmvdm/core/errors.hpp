#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace ssmvdm {

// Error taxonomy shared by the library and the CLI. The CLI maps each
// category to a distinct process exit code (see cli/commands.hpp).
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid configuration: bad hyperparameter ranges, indivisible extents,
// malformed run-config files, unknown keys.
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

// Malformed external data: bad magic, version mismatch, truncated payload,
// out-of-range values in containers.
class DataError : public Error {
 public:
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// A measurement or run exceeded its byte budget. Records the sequence
// length at which the failure occurred when known.
class CapacityError : public Error {
 public:
  CapacityError(const std::string& msg, std::int64_t sequence_length = -1)
      : Error(msg), sequence_length_(sequence_length) {}
  std::int64_t sequence_length() const { return sequence_length_; }

 private:
  std::int64_t sequence_length_;
};

// Extent mismatch between tensors handed to an operation.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

// A non-differentiable operation was used on a gradient-requiring path.
class UnsupportedOpError : public Error {
 public:
  explicit UnsupportedOpError(const std::string& msg) : Error(msg) {}
};

// NaN/Inf reached a public operation boundary.
class NonFiniteError : public Error {
 public:
  explicit NonFiniteError(const std::string& msg) : Error(msg) {}
};

}  // namespace ssmvdm
