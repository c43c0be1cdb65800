#pragma once

#include <iosfwd>

namespace hemosbi {

/// Entry point of the command-line front end. Returns the process exit code:
/// 0 success, 1 error, 2 completed with warnings.
int run_cli(int argc, const char* const* argv);
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

} // namespace hemosbi
