#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace ape {

/// Shape mismatch between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid argument value (empty input, unnormalised weights, k > N, ...).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid or unknown configuration key, missing checkpoint, rank outside the
/// embedding table.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// forward_layer was asked to advance a passage that is already at layer L.
class AlreadyCompleteError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Episodes were sampled under parameters that have since changed.
class StaleEpisodeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Training produced a non-finite loss or a runaway gradient norm.
class TrainingDivergedError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed dataset or checkpoint input.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line, std::size_t byte_offset)
      : std::runtime_error("line " + std::to_string(line) + ", byte " +
                           std::to_string(byte_offset) + ": " + what),
        line_(line),
        byte_offset_(byte_offset) {}

  std::size_t line() const noexcept { return line_; }
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t line_;
  std::size_t byte_offset_;
};

}  // namespace ape
