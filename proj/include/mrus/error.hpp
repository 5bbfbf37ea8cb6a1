#pragma once

#include <stdexcept>
#include <string>

namespace mrus {

/// Failure classes shared by the C++ core and the C API status codes.
enum class ErrorCode {
  InvalidArgument = 1,
  FrameMismatch,
  Io,
  Config,
  EmptyInput,
  Degenerate,
  InsufficientData,
  NoCorrespondences,
  NoOverlap,
  OutOfBounds,
  Timeout,
  Malformed,
  Aborted,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(message), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

}  // namespace mrus
