#pragma once

#include <iosfwd>
#include <stdexcept>

namespace laser::cli {

// Exit codes: 0 success, 1 run failed (including a failed gradient audit),
// 2 usage error (bad flag, missing file, invalid config or input file).
inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace laser::cli
