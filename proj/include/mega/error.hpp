#pragma once

#include <stdexcept>
#include <string>

namespace mega {

enum class ErrorKind {
  InvalidParams,
  InvalidRotation,
  Config,
  Fit,
  InvalidToken,
  Shape,
  EmptyLoss,
  Divergence,
  Domain,
  Schedule,
  Alignment,
  NotPsd,
  InsufficientSamples,
  CovarianceRank,
  DegenerateRotation,
  Io,
  CorruptCheckpoint,
  Validation,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

  // Bad user input (config, files that fail validation) as opposed to a
  // failure while running a valid job.
  bool is_validation() const noexcept;

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

}  // namespace mega
