#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace esnet {

/// Exit codes: 0 success, 1 runtime failure, 2 usage or precondition error.
enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2 };

/// Runs one subcommand. `args` excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace esnet
