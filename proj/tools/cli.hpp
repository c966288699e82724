#pragma once

#include <iosfwd>

namespace refsplat {

/// Entry point of the command-line tool. Help and results go to `out`, errors to `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace refsplat
