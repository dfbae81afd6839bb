#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mmld::cli {

// Runs one command line (args[0] is the program name). Returns the process
// exit status: 0 on success, 1 on runtime failure, 2 on usage errors, and
// CLI11's own codes for parse errors.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mmld::cli
