#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace mulde {

/// Error categories surfaced by the library. Each maps to a distinct CLI exit
/// code and a stable machine-readable tag.
enum class ErrorCategory {
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
  kShape = 5,
  kNumeric = 6,
};

const char* category_tag(ErrorCategory category);

class Error : public std::runtime_error {
 public:
  Error(ErrorCategory category, const std::string& what)
      : std::runtime_error(what), category_(category) {}

  ErrorCategory category() const noexcept { return category_; }
  int exit_code() const noexcept { return static_cast<int>(category_); }

 private:
  ErrorCategory category_;
};

class UsageError : public Error {
 public:
  explicit UsageError(const std::string& what) : Error(ErrorCategory::kUsage, what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(ErrorCategory::kIo, what) {}
};

/// Malformed file content. `offset` is the byte offset (binary formats) or
/// line number (text formats) where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(ErrorCategory::kFormat, what + " (at offset " + std::to_string(offset) + ")"),
        offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what) : Error(ErrorCategory::kShape, what) {}
};

/// A NaN or infinity appeared. `layer` identifies the network layer where it
/// was first observed, or -1 when not attributable to a layer.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer = -1)
      : Error(ErrorCategory::kNumeric, what), layer_(layer) {}

  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

}  // namespace mulde
