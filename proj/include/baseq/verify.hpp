#pragma once

#include <string>
#include <vector>

namespace baseq {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Check names, in run order.
const std::vector<std::string>& verify_check_names();

/// Built-in oracle suite. A check named in `inject_failure` runs with an
/// impossible tolerance (test hook). Throws ValidationError for an unknown
/// name.
std::vector<CheckResult> run_verify_suite(const std::string& inject_failure = "");

}  // namespace baseq
