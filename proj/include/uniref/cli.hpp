#pragma once

#include <string>
#include <vector>

namespace uniref {

/// Entry point of the `uniref` tool. `args` excludes the program name. Returns the exit status.
int run_cli(const std::vector<std::string>& args);
int run_cli(int argc, char** argv);

/// Strip wall-clock and timestamp fields from a JSON-lines file so that runs can be compared
/// byte for byte.
std::string canonicalize_metrics(const std::string& jsonl);

}  // namespace uniref
