#pragma once

#include <stdexcept>
#include <string>

namespace atmoe {

enum class ErrorKind {
  InvalidArgument,
  DimensionMismatch,
  Io,
  StageOrder,
  CorruptCheckpoint,
  Verification,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

/// Process exit code used by the command-line tool for each error kind.
inline int exit_code(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::StageOrder:
      return 3;
    case ErrorKind::CorruptCheckpoint:
      return 4;
    case ErrorKind::Verification:
      return 5;
    default:
      return 2;
  }
}

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool condition, const std::string& what) {
  if (!condition) fail(ErrorKind::InvalidArgument, what);
}

}  // namespace atmoe
