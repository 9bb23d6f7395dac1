#pragma once

#include <stdexcept>
#include <string>

namespace edgeflow {

// Every failure the library reports carries one of these codes so callers
// (and the CLI exit-code mapping) can dispatch without string matching.
enum class Err {
  // template files
  Syntax,
  MissingKey,
  UnknownKey,
  DuplicateKey,
  InvalidRef,
  InvalidCron,
  IndexMismatch,
  // workflow graphs
  UnknownSuccessor,
  CycleDetected,
  MultipleEntries,
  Unreachable,
  DuplicateFunction,
  NoBranchMatch,
  // storage
  UnknownBackend,
  BackendUnavailable,
  NotFound,
  CapacityExceeded,
  // runtime
  HandlerPanic,
  InputMissing,
  DownstreamFailure,
  DuplicateHandler,
  StartupValidation,
  // gateway
  TierUnreachable,
  Timeout,
  InvalidEnvelope,
  BindError,
  // metrics
  EmptySamples,
  // scenario configs / CLI usage
  InvalidScenario,
};

const char* err_name(Err e);

class Error : public std::runtime_error {
 public:
  Error(Err code, std::string message)
      : std::runtime_error(std::string(err_name(code)) + ": " + message),
        code_(code) {}

  // Template parse errors remember the 1-based source line (0 = whole file).
  Error(Err code, int line, std::string message)
      : std::runtime_error(std::string(err_name(code)) + " (line " +
                           std::to_string(line) + "): " + message),
        code_(code),
        line_(line) {}

  Err code() const { return code_; }
  int line() const { return line_; }

 private:
  Err code_;
  int line_ = 0;
};

}  // namespace edgeflow
