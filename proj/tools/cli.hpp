#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace poemform::cli {

// Exit codes: 0 success, 1 validation error (bad flags, bad input files,
// vocabulary mismatch), 2 runtime failure.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace poemform::cli
