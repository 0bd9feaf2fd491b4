#pragma once

#include <string>
#include <vector>

namespace shrike::verify {

struct CheckResult {
  std::string name;
  bool passed = false;
  std::string detail;  // short failure context or headline numbers
};

// Runs the invariant suite. fast trims repetition counts to keep the run
// under a minute; full uses the acceptance-grade sizes.
std::vector<CheckResult> run(bool fast);

}  // namespace shrike::verify
