#pragma once

#include <iosfwd>

namespace medpo::cli {

/// Exit codes: 0 success, 1 usage or validation error, 2 runtime error.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInvalid = 1;
inline constexpr int kExitRuntime = 2;

/// Entry point of the `medpo` binary. Results go to `out`, diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace medpo::cli
