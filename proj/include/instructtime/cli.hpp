#pragma once

#include <string>
#include <vector>

namespace instructtime {

// Full command-line entry point. Returns the process exit status:
// 0 success, 1 runtime or validation failure, 2 usage error.
int cli_run(int argc, const char* const* argv);

// Test-friendly wrapper; args exclude the program name.
int cli_run(const std::vector<std::string>& args);

}  // namespace instructtime
