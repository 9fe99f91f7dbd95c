#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "jdnet/tensor.hpp"

namespace jdnet {

/// Outcome of comparing reverse-mode gradients against central differences.
struct GradCheckReport {
  std::string name;
  /// One entry per checked element: |a - n| / max(1e-8, |a| + |n|).
  std::vector<double> relative_errors;
  double max_relative_error = 0.0;
  double tolerance = 0.0;
  /// Elements whose +-step stencil straddled a kink and were re-measured.
  std::size_t refined_elements = 0;
  bool passed = true;
};

struct GradCheckOptions {
  double step = 1e-3;
  double tolerance = 1e-4;
  /// Upper bound on checked elements per input; 0 checks every element.
  /// When limited, elements are spread evenly across the tensor.
  std::size_t max_elements_per_input = 0;
  /// When an element fails at `step`, halve the step (up to this many times)
  /// until three successive central differences agree within a tenth of
  /// the tolerance, and score against the last of them instead. A stencil
  /// crossing a LeakyReLU kink is thereby re-measured on a smooth piece; a
  /// wrong analytic gradient still fails because the refined estimate
  /// converges to the true one.
  int max_refinements = 16;
};

double gradcheck_relative_error(double analytic, double numeric);

/// Checks d f / d inputs for a scalar-valued `f` in 64-bit arithmetic.
///
/// `f` must read the inputs through the handles passed here; elements are
/// perturbed in place by +-step and restored afterwards.
GradCheckReport finite_diff_check(const std::string& name, const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs, const GradCheckOptions& options = {});

}  // namespace jdnet
