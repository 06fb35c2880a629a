#pragma once

// Finite-difference verification of every layer's backward pass in 64-bit.
//
// Each trial builds one layer on a random small shape, draws inputs in [-1, 1]
// kept clear of non-differentiable points, and compares the analytic gradient
// of <layer(x), r> (r random) against central differences with step 1e-3, for
// the input and every parameter tensor.

#include <cstdint>
#include <string>
#include <vector>

namespace dlbl {

struct GradCheckConfig {
  std::uint64_t seed = 1;
  std::size_t trials = 20;  // per layer kind
  double step = 1e-3;
  double tolerance = 1e-4;
  // Layer kinds to run; empty means all of gradcheck_kinds().
  std::vector<std::string> kinds;
  // Negative control: perturbs the analytic gradient of this kind so the
  // check must fail.
  std::string inject_fault;
};

struct GradCheckRecord {
  std::string kind;
  std::size_t trial = 0;
  std::string target;  // "input", or the parameter name
  std::string shape;
  double rel_error = 0;
  bool pass = false;
};

struct GradCheckSummary {
  std::string kind;
  std::size_t trials = 0;
  std::size_t failures = 0;
  double worst = 0;
};

struct GradCheckReport {
  std::vector<GradCheckRecord> records;
  std::vector<GradCheckSummary> summaries;
  bool pass() const;
};

// conv, deconv, maxpool, avgpool, bn, lrelu, dropout, fc, softmax_xent
const std::vector<std::string>& gradcheck_kinds();

GradCheckReport run_gradcheck(const GradCheckConfig& cfg);

// ||a - b|| / max(||a||, ||b||), 0 when both vanish.
double normwise_relative_error(const std::vector<double>& a,
                               const std::vector<double>& b);

}  // namespace dlbl
