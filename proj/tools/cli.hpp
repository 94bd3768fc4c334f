#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace slpmt::cli {

// Runs one command line (without the program name). Diagnostics go to `err`
// as a single line; the return value is the process exit code.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace slpmt::cli
