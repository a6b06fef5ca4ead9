#pragma once

#include <iosfwd>

namespace mvlfmm::cli {

/// Exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitFit = 4;

/// Parses the command line and runs one command. Errors are reported as a
/// single JSON object on `err`; the return value is the exit code.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace mvlfmm::cli
