#pragma once

#include <stdexcept>
#include <string>

namespace mha2gqa {

// Failure classes map one-to-one onto CLI exit codes.
enum class ErrorKind {
  kInvalidArgument = 1,
  kIo = 2,
  kFormat = 2,
  kVerification = 3,
  kDivergence = 4,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }
  int exit_code() const noexcept { return static_cast<int>(kind_); }

 private:
  ErrorKind kind_;
};

struct InvalidArgument : Error {
  explicit InvalidArgument(const std::string& what) : Error(ErrorKind::kInvalidArgument, what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

// Checkpoint / artifact parse failures. `detail` distinguishes header corruption,
// shape mismatch and truncation so callers can report them separately.
struct FormatError : Error {
  enum class Detail { kCorruptHeader, kShapeMismatch, kTruncated, kOther };
  FormatError(Detail detail, const std::string& what) : Error(ErrorKind::kFormat, what), detail(detail) {}
  Detail detail;
};

struct VerificationError : Error {
  explicit VerificationError(const std::string& what) : Error(ErrorKind::kVerification, what) {}
};

struct DivergenceError : Error {
  explicit DivergenceError(const std::string& what) : Error(ErrorKind::kDivergence, what) {}
};

}  // namespace mha2gqa
