#pragma once

#include <string>
#include <vector>

namespace sdah {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Quick built-in suite: gradient checks, file round trips, window math,
/// zero-offset equivalence, schedule values and FLOP accounting.
std::vector<CheckResult> run_selfcheck();

}  // namespace sdah
