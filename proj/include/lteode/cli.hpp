#pragma once

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "lteode/tensor.hpp"

namespace lteode::cli {

/// Exit codes.
inline constexpr int kOk = 0;
inline constexpr int kUsage = 1;
inline constexpr int kDataError = 2;
inline constexpr int kInvariantFailure = 3;

/// Runs one command. `args` excludes the program name. Failures print a single
/// `error[<kind>]: <message>` line to `err`.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Flat `key = value` file; `#` starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text, const std::string& where);

/// The two-node crossing construction: identical states under the smooth
/// flow, and an ordered pair with and without the jump operator.
struct IntersectDemo {
  std::vector<std::vector<double>> off_identical;  // per state (step 0 = initial): node values
  std::vector<std::vector<double>> off_ordered;
  std::vector<std::vector<double>> on_ordered;
  double max_identical_gap = 0.0;
  bool off_keeps_order = false;
  bool on_crosses = false;

  bool passed() const noexcept { return max_identical_gap == 0.0 && off_keeps_order && on_crosses; }
};

IntersectDemo run_intersect_demo();

}  // namespace lteode::cli
