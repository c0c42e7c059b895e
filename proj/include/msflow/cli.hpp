#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace msf::cli {

// Dispatch one command line (without the program name). Returns the process
// exit code: 0 on success, non-zero on any failure, in which case a single
// JSON object {"error": ..., "command": ...} is written to err. Regular
// command output goes to out; artifacts land in the --out directory.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace msf::cli
