#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace eegdg {

// Base for every error raised by the library. `kind()` is a stable short tag
// used by the CLI when it prints machine-readable error lines.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
  virtual const char* kind() const noexcept { return "error"; }
};

class DimensionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "dimension"; }
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what, std::string key = {})
      : Error(what), key_(std::move(key)) {}
  const char* kind() const noexcept override { return "config"; }
  // Offending configuration key, empty when the error is not key-specific.
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

class ContractError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "contract"; }
};

class NumericError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "numeric"; }
};

class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::size_t offset)
      : Error(what + " (at byte offset " + std::to_string(offset) + ")"),
        detail_(what),
        offset_(offset) {}
  const char* kind() const noexcept override { return "format"; }
  std::size_t offset() const noexcept { return offset_; }
  // Message without the offset suffix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  std::string detail_;
  std::size_t offset_;
};

class IngestionError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "ingestion"; }
};

class IoError : public Error {
 public:
  using Error::Error;
  const char* kind() const noexcept override { return "io"; }
};

}  // namespace eegdg
