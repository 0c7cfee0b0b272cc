#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace squeeze10 {

// Exit codes of run_cli.
inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

/// Entry point for the squeeze10 tool. args excludes the program name.
/// Summaries go to out; usage errors and diagnostics go to err.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Reads SQUEEZE_LOG (error, info, debug) and configures the stderr logger.
void init_logging();

}  // namespace squeeze10
