#pragma once

#include <stdexcept>
#include <string>

namespace cutkit {

// Error taxonomy. The CLI maps these to process exit codes; library code throws
// and never exits. UsageError -> 1, DataError -> 2, RuntimeError -> 3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad invocation or configuration: unknown flags, malformed config values,
// missing required settings.
struct UsageError : Error {
  explicit UsageError(const std::string& msg) : Error(msg) {}
};

// Invalid input data: malformed JSONL, schema violations, dangling partner
// references, out-of-alphabet text.
struct DataError : Error {
  explicit DataError(const std::string& msg) : Error(msg) {}
};

// Failures while running: I/O errors, checkpoint corruption, judge endpoint
// failures after retries, sequence overflow.
struct RuntimeError : Error {
  explicit RuntimeError(const std::string& msg) : Error(msg) {}
};

}  // namespace cutkit
