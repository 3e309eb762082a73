#pragma once

#include <ostream>

namespace gcnforge {

inline constexpr const char* kToolVersion = "0.1.0";

// Entry point of the gcn-forge command line. Returns the process exit code:
// 0 success, 1 runtime or I/O failure, 2 usage or validation error.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace gcnforge
