#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace baseq {

/// The baseq command line. `args[0]` is the program name. Returns the exit
/// code: 0 ok, 1 invalid input or config, 2 runtime / file format error,
/// 3 verify failure.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace baseq
