#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>

namespace dare {

/// Base class for every error raised by the lab.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Invalid configuration value. `key()` names the offending key.
class ConfigError : public Error {
 public:
  ConfigError(std::string key, const std::string& what)
      : Error("config error [" + key + "]: " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error("data error: " + what) {}
};

class HintFormatError : public Error {
 public:
  explicit HintFormatError(const std::string& what) : Error("hint format error: " + what) {}
};

/// Importance weights with a non-positive sum.
class DegenerateWeightsError : public Error {
 public:
  explicit DegenerateWeightsError(const std::string& what)
      : Error("degenerate weights: " + what) {}
};

/// The finite-sample bound precondition eps < b_min does not hold.
class BoundInapplicableError : public Error {
 public:
  BoundInapplicableError(double epsilon, double b_min)
      : Error("bound inapplicable: epsilon=" + std::to_string(epsilon) +
              " >= b_min=" + std::to_string(b_min)),
        epsilon_(epsilon) {}
  double epsilon() const noexcept { return epsilon_; }

 private:
  double epsilon_;
};

class SelectionError : public Error {
 public:
  explicit SelectionError(const std::string& what) : Error("selection error: " + what) {}
};

class GroupingError : public Error {
 public:
  explicit GroupingError(const std::string& what) : Error("grouping error: " + what) {}
};

class NumericalError : public Error {
 public:
  NumericalError(std::int64_t group_prompt, const std::string& what)
      : Error("numerical error in group for prompt " + std::to_string(group_prompt) + ": " + what),
        prompt_id_(group_prompt) {}
  std::int64_t prompt_id() const noexcept { return prompt_id_; }

 private:
  std::int64_t prompt_id_;
};

/// Corrupt or partial snapshot file. `byte_offset()` is npos when the
/// document parsed but failed schema validation.
class IntegrityError : public Error {
 public:
  static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();

  IntegrityError(std::size_t byte_offset, const std::string& what)
      : Error("integrity error" +
              (byte_offset == npos ? std::string{} : " at byte " + std::to_string(byte_offset)) +
              ": " + what),
        byte_offset_(byte_offset) {}
  std::size_t byte_offset() const noexcept { return byte_offset_; }

 private:
  std::size_t byte_offset_;
};

class MetricError : public Error {
 public:
  explicit MetricError(const std::string& what) : Error("metric error: " + what) {}
};

}  // namespace dare
