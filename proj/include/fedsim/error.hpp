#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace fedsim {

// Base of every error the library throws. Callers that only care about
// "something in fedsim failed" can catch this.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class UsageError : public Error { using Error::Error; };
class LayoutError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class LabelError : public Error { using Error::Error; };
class SpecError : public Error { using Error::Error; };
class OptionError : public Error { using Error::Error; };
class PartitionError : public Error { using Error::Error; };
class ProtocolError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };

// Malformed dataset or checkpoint bytes. offset() is the byte position at
// which decoding gave up.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

}  // namespace fedsim
