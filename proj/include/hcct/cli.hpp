#pragma once

#include <string>
#include <vector>

namespace hcct {

// Entry point for the command-line tool. `args` excludes the program name.
// Exit codes: 0 success, 1 usage/validation, 2 runtime/numeric failure.
int run_cli(const std::vector<std::string>& args);

} // namespace hcct
