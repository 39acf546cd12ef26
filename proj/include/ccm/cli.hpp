#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace ccm::cli {

/// Runs one command line (without the program name). Returns the process exit code:
/// 0 ok, 2 usage, 3 I/O or malformed file, 4 numeric failure, 5 shape mismatch.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int run(int argc, char** argv);

}  // namespace ccm::cli
