#pragma once

#include <stdexcept>
#include <string>

namespace dda {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor or image shapes that do not line up with what an operation expects.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A stage of the pipeline produced a non-finite value or otherwise failed.
/// `stage()` names the stage so the CLI can report it.
class PipelineFault : public Error {
 public:
  PipelineFault(std::string stage, const std::string& what)
      : Error("[" + stage + "] " + what), stage_(std::move(stage)) {}

  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

/// Malformed or version-mismatched files (checkpoints, banks, configs).
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Transient failures talking to a remote backend.
class BackendUnavailable : public Error {
 public:
  using Error::Error;
};

}  // namespace dda
