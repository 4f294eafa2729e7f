#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace deepstack::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

/// Environment variable naming the default root for run directories.
inline constexpr const char* kOutputRootEnv = "DEEPSTACK_OUT";

/// Entry point behind the `deepstack` executable. `args` excludes the
/// program name. Returns the process exit code.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace deepstack::cli
