#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace qkv {

// Process exit statuses of the command-line tool.
enum ExitCode : int { exit_ok = 0, exit_usage = 2, exit_data = 3, exit_protocol = 4 };

// Runs the command-line tool. `args` excludes the program name. Reports go
// to `out` (or to --out), diagnostics to `err`. Never throws.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace qkv
