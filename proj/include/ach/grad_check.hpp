#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

// Finite-difference verification of the analytic gradients. Every check
// rebuilds its little world from a seed for each evaluation, so stochastic
// pieces (selection noise, dropout) see identical draws on both sides of the
// difference quotient.

namespace ach {

struct CheckResult {
  std::string name;
  std::int64_t points = 0;   // number of coordinates swept
  double max_rel = 0.0;      // worst relative error over the sweep
  double tol = 0.0;
  bool pass = false;
};

// |a - f| / max(|a|, |f|, rel_floor); coordinates where both sides are below
// zero_tol count as an exact match, since a structurally zero gradient is
// recovered only up to round-off by the quotient.
double fd_rel_err(double analytic, double fd, double rel_floor,
                  double zero_tol);

struct FdProblem {
  std::string name;
  std::vector<double> x0;
  // Full evaluation at a point; must be deterministic in x.
  std::function<double(const std::vector<double>&)> loss;
  // Analytic gradient at x0, same layout as x0.
  std::function<std::vector<double>()> analytic;
};

struct CheckOptions {
  std::uint64_t seed = 1;
  double h = 1e-5;          // central-difference step
  double tol = 1e-4;        // pass threshold on the relative error
  double rel_floor = 1e-6;
  double zero_tol = 1e-7;
  bool f32 = false;         // run forward/backward in float
};

// Canonical options for a float run: wider step, loose tolerance.
CheckOptions f32_options(std::uint64_t seed);

CheckResult run_fd(const FdProblem& p, const CheckOptions& o);

// Named suites. "op" sweeps each primitive, "module" the composed layers.
std::vector<CheckResult> op_checks(const CheckOptions& o);
std::vector<CheckResult> module_checks(const CheckOptions& o);
std::vector<CheckResult> all_checks(const CheckOptions& o);

// The full-layer sweep on its own (selection noise on, soft mask): input,
// pointwise weights, batch norm, scores, DyNorm, all from one seed.
CheckResult ach_layer_fd(const CheckOptions& o);

// Harness self-test: compares finite differences against a deliberately
// sign-flipped DyNorm alpha gradient. Passes iff the corruption is detected.
CheckResult dysoft_sign_sentinel(const CheckOptions& o);

}  // namespace ach
