#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace ssdiff::cli {

struct Check {
  std::string name;
  double value = 0.0;
  double threshold = 0.0;
  bool passed = false;
};

struct SuiteResult {
  std::string suite;
  std::vector<Check> checks;
  double seconds = 0.0;

  [[nodiscard]] bool passed() const;
};

struct VerifyOptions {
  std::vector<int> D{2, 3};
  std::vector<int> T{2, 3};
  int stacks = 20;
  std::vector<int> gap_T{8, 16, 32, 64};
  int gap_mc_T = 4;
  long gap_mc_n = 1'000'000;
  int equivalence_T = 100;
  long equivalence_n_mc = 100'000;
  long ksg_n = 100'000;
  int ksg_k = 10;
  long dsivi_M = 100'000;
  std::uint64_t seed = 1;
  std::string gap_csv;  // written by the gap suite when non-empty
};

[[nodiscard]] SuiteResult verify_sufficiency(const VerifyOptions& options);
[[nodiscard]] SuiteResult verify_equivalence(const VerifyOptions& options);
[[nodiscard]] SuiteResult verify_gap(const VerifyOptions& options);
[[nodiscard]] SuiteResult verify_estimators(const VerifyOptions& options);

// I(x0; x) for x0 ~ U(lo, hi) and x | x0 ~ Beta(1 + nu x0, 1 + nu (1 - x0)) by nested quadrature.
[[nodiscard]] double beta_mi_quadrature(double nu, double lo, double hi);

[[nodiscard]] std::string report_json(const std::vector<SuiteResult>& suites);

}  // namespace ssdiff::cli
