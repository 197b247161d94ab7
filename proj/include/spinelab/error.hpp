#ifndef SPINELAB_ERROR_HPP_
#define SPINELAB_ERROR_HPP_

#include <stdexcept>
#include <string>

namespace spinelab {

/// Base class for all spinelab errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Invalid user-supplied configuration (bad field values, impossible layouts).
class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

/// Malformed on-disk data: wrong magic, unknown dtype, bad text tables.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

/// Structurally valid file with inconsistent content (truncated payload etc.).
class CorruptionError : public Error {
 public:
  explicit CorruptionError(const std::string& msg) : Error(msg) {}
};

/// Tensor/port shape mismatches.
class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

/// Out-of-range coordinate or index.
class RangeError : public Error {
 public:
  explicit RangeError(const std::string& msg) : Error(msg) {}
};

}  // namespace spinelab

#endif  // SPINELAB_ERROR_HPP_
