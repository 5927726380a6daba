#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

namespace msic {

struct SelftestOptions {
  bool full = false;  // adds 64-bit gradient checks of every layer type and larger sweeps
  // Negative control: unmasks the centre tap of the first spatial context
  // layer so the causality check must fail.
  bool corrupt_mask = false;
  std::uint64_t seed = 1;
  // Names of the checks to run; empty runs all of them.
  std::vector<std::string> only;
};

struct SelftestResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

// Runs every invariant check, printing one table row per check as it finishes.
std::vector<SelftestResult> run_selftest(const SelftestOptions& options, std::ostream& out);

}  // namespace msic
