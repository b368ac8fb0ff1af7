#pragma once

#include <string>
#include <vector>

namespace droppatch::cli {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumeric = 4;

/// Environment variable naming the directory under which runs are created
/// when --out is not given.
inline constexpr const char* kOutputRootEnv = "DROPPATCH_OUTPUT_ROOT";

/// Runs one subcommand; args[0] is the program name.
int run(const std::vector<std::string>& args);
int run(int argc, char** argv);

}  // namespace droppatch::cli
