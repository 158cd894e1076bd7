#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace osvit {

// Broad failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind {
  kDimension,
  kConfig,
  kUsage,
  kParse,
  kFormat,
  kLength,
  kUnsupported,
  kIo,
  kNumeric,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what)
      : Error(ErrorKind::kDimension, what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::kConfig, what) {}
};

struct UsageError : Error {
  explicit UsageError(const std::string& what)
      : Error(ErrorKind::kUsage, what) {}
};

// Row-level parse failure; line is 1-based and counts the header row.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(ErrorKind::kParse, "line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class FormatError : public Error {
 public:
  FormatError(std::uint64_t offset, const std::string& what)
      : Error(ErrorKind::kFormat,
              "format error at byte " + std::to_string(offset) + ": " + what),
        offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

class LengthError : public Error {
 public:
  LengthError(std::uint64_t expected, std::uint64_t actual,
              const std::string& what)
      : Error(ErrorKind::kLength,
              what + ": expected " + std::to_string(expected) +
                  " bytes, got " + std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}
  std::uint64_t expected() const noexcept { return expected_; }
  std::uint64_t actual() const noexcept { return actual_; }

 private:
  std::uint64_t expected_;
  std::uint64_t actual_;
};

struct UnsupportedError : Error {
  explicit UnsupportedError(const std::string& what)
      : Error(ErrorKind::kUnsupported, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

struct NumericError : Error {
  explicit NumericError(const std::string& what)
      : Error(ErrorKind::kNumeric, what) {}
};

}  // namespace osvit
