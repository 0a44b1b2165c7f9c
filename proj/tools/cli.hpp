#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace flag::cli {

/// Runs one command line (without the program name). Diagnostics go to
/// `err`, usage text to `out`. Returns the process exit code: 0 success,
/// 1 usage, 2 data or format, 3 numeric.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace flag::cli
