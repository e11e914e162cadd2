#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace mulde::cli {

/// Runs one command. `args` excludes the program name. Returns the process
/// exit status: 0 on success, otherwise the error category's code after a
/// single "error:<category>: message" line on `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mulde::cli
