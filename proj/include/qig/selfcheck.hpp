#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace qig {

// One named property check. A check passes iff measured <= tolerance, so the
// JSON report carries the full pass condition alongside the verdict.
struct CheckResult {
  std::string name;
  bool passed = false;
  double measured = 0.0;
  double tolerance = 0.0;
  std::string detail;
  double elapsed_ms = 0.0;
};

// Seeded property suite over every module: quantizer bounds and round trips,
// gradient/finite-difference agreement, attribution completeness in the exact
// and convergent regimes, weighting arithmetic, equalization search
// consistency, error-compensation dominance over round-to-nearest, and
// attribution/leave-one-out agreement on planted outliers.
// corrupt_tolerances replaces every tolerance with an unsatisfiable one; it
// exists so callers can confirm that failures actually propagate.
std::vector<CheckResult> run_property_suite(std::uint64_t seed,
                                            bool corrupt_tolerances = false);

bool all_passed(const std::vector<CheckResult>& results);

}  // namespace qig
