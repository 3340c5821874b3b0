#pragma once

#include <stdexcept>
#include <string>

namespace patchbank {

// Exit codes shared by the command-line tool.
enum class ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kIo = 3,
  kFormat = 4,
};

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what, ExitCode code = ExitCode::kFailure)
      : std::runtime_error(what), code_(code) {}
  ExitCode code() const noexcept { return code_; }

 private:
  ExitCode code_;
};

/// Bad argument, shape mismatch or config value.
class InvalidInput : public Error {
 public:
  explicit InvalidInput(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

/// Aggregation over an empty set (e.g. every patch masked out).
class EmptyInput : public Error {
 public:
  explicit EmptyInput(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

/// Input without usable structure, e.g. zero-variance features for PCA.
class DegenerateInput : public Error {
 public:
  explicit DegenerateInput(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

/// Metric undefined for the given labels (single class, no positives).
class UndefinedMetric : public Error {
 public:
  explicit UndefinedMetric(const std::string& what) : Error(what, ExitCode::kUsage) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error(what, ExitCode::kIo) {}
};

/// Malformed .pfv/.amb payload. The message names the byte offset.
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error(what, ExitCode::kFormat) {}
};

}  // namespace patchbank
