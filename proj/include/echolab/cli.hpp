// Batch experiment runner: every analysis as a subcommand driven by a JSON
// config, a seed, and an output directory. Reports are canonical JSON
// (sorted keys, 17 significant digits) so identical runs produce identical
// bytes.
#pragma once

#include <string>
#include <vector>

namespace echolab::cli {

// Full command-line entry point. Returns the process exit code:
//   0 success, 2 validation/config error, 3 numerical failure.
int run(int argc, const char* const* argv);

// Convenience overload for in-process invocation.
int run(const std::vector<std::string>& args);

}  // namespace echolab::cli
