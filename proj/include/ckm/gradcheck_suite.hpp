#pragma once

#include "json.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ckm {

struct GradcheckEntry {
  std::string op;
  int instantiations = 0;
  double max_relative_error = 0.0;
  std::int64_t entries_checked = 0;
  std::int64_t entries_straddled = 0;
  double seconds = 0.0;
  bool passed = false;
};

struct GradcheckSuiteReport {
  std::vector<GradcheckEntry> entries;
  double tolerance = 1e-4;
  bool passed() const;
  nlohmann::json to_json() const;
};

/// Names of every checked operation, including the full model + loss compositions.
std::vector<std::string> gradcheck_ops();

/// Central-difference check (fp64) of each op on `instantiations` random shapes.
/// `only` restricts the run to one op name; an unknown name throws InvalidArgument.
GradcheckSuiteReport run_gradcheck_suite(const std::string& only = "", int instantiations = 5,
                                         std::uint64_t seed = 2024, double tolerance = 1e-4);

}  // namespace ckm
