#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace edgeflow {

// Process exit codes; a stable contract for scripts wrapping the binary.
constexpr int kExitOk = 0;             // success (warnings included)
constexpr int kExitValidation = 1;     // bundle validation errors
constexpr int kExitUsage = 2;          // bad flags, configs, or paths
constexpr int kExitFailureBudget = 3;  // run finished but failed too much

// The full command surface of the `edgeflow` binary, callable in-process.
// `args` excludes the program name. Human output goes to `out`, diagnostics
// to `err`; the return value is the process exit code.
int cli_main(std::vector<std::string> args, std::ostream& out,
             std::ostream& err);

}  // namespace edgeflow
