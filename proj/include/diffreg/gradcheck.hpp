#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "diffreg/error.hpp"

namespace diffreg {

struct GradcheckOptions {
  std::uint64_t seed = 0;
  /// Test hook: negate every analytic gradient before it is compared.
  bool flip_sign = false;
};

struct GradcheckResult {
  std::string suite;
  int instances = 0;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  double seconds = 0.0;

  bool passed() const { return instances > 0 && max_relative_error < tolerance; }
};

/// bpnp, circle, offset, depth, csd.
const std::vector<std::string>& gradcheck_suites();

/// Compares one analytic gradient family against central differences of
/// its forward function. Throws InvalidArgument for an unknown suite.
GradcheckResult run_gradcheck_suite(std::string_view suite, const GradcheckOptions& options = {});

/// One row per suite: name, instances, max error, tolerance, PASS/FAIL.
std::string format_gradcheck_table(const std::vector<GradcheckResult>& results);

}  // namespace diffreg
