#pragma once

#include <string>
#include <vector>

namespace joker {

// Full command-line front end. Returns the process exit code:
// 0 clean, 1 runtime failure, 2 usage error, 3 rootkit alert,
// 4 clean but with skipped detectors.
int run_cli(int argc, const char* const* argv);

// Convenience for tests: args exclude the program name.
int run_cli(const std::vector<std::string>& args);

} // namespace joker
