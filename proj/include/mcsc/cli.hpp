#pragma once

namespace mcsc::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 1, kRuntimeFailure = 2 };

// Subcommands: gen-data, train, eval, export-embeddings. Returns an ExitCode.
int run(int argc, char** argv);

}  // namespace mcsc::cli
