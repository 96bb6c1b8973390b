#pragma once

// Self-check oracles shared by the `verify` command and the acceptance suite.
// Each oracle recomputes a quantity by an independent, deliberately naive
// route (central differences, pairwise scans, direct sums, closed forms) and
// compares it with the optimized implementation.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

namespace socialgf::oracles {

struct OracleResult {
  std::string name;
  double measured = 0.0;   // worst error (or the criterion's statistic)
  double tolerance = 0.0;
  bool passed = false;
  std::string detail;
};

nlohmann::json to_json(const OracleResult& r);
// One line: "PASS name measured=... tolerance=... detail".
std::string to_line(const OracleResult& r);

// Backprop vs central differences, worst relative error over `nets` random MLPs.
OracleResult gradient_exactness(int nets = 100, std::uint64_t seed = 2024);

// One-record DSM training at a fixed time; relative L2 error of the trained
// output against (x0 - x~)/sigma^2 over probe points.
OracleResult dsm_point_mass(int steps = 20000, std::uint64_t seed = 7, bool negate_target = false);

// 10k-sample isotropic Gaussian; worst (over `times`) relative L2 error of the
// trained field against -(x - mu)/(s^2 + sigma(t)^2) on a 2-std grid.
OracleResult dsm_gaussian(int steps = 20000, std::uint64_t seed = 11, bool negate_target = false,
                          std::vector<double> times = {0.01, 0.15, 0.3});

// Largest output change under same-kind slot shuffles.
OracleResult permutation_invariance(std::uint64_t seed = 5);

// detect_events vs a pairwise scan with brute-force assignments, 100 crowded
// states per scenario; measured = number of mismatching states.
OracleResult event_equivalence(int states_per_scenario = 100);

// compute_gae vs the direct discounted sum of TD residuals on random 100-step sequences.
OracleResult gae_equivalence(int sequences = 50, std::uint64_t seed = 17);

// Shaped-reward penalty along a straight-line approach to a Gaussian mean;
// measured = number of non-decreasing steps in the penalty (must be 0).
OracleResult shaping_monotonicity();

struct VerifyOptions {
  int dsm_steps = 20000;
  bool flip_dsm_target = false;
};

std::vector<OracleResult> run_all(const VerifyOptions& options = {});

}  // namespace socialgf::oracles
