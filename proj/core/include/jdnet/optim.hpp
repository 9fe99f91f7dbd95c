#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "jdnet/modules.hpp"

namespace jdnet {

/// NaN/inf encountered in a loss or gradient.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam moments aligned with a parameter list (same order, same shapes).
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint32_t step = 0;
  std::vector<Tensor<float>> m;
  std::vector<Tensor<float>> v;

  /// Zero moments shaped like `params`; resets the step counter.
  static AdamState for_parameters(const TensorList<float>& params);
};

/// One bias-corrected Adam update of every parameter from its accumulated
/// gradient (a parameter without a gradient counts as zero gradient).
/// Throws NumericalError naming the first non-finite gradient; nothing is
/// modified in that case.
void adam_step(const TensorList<float>& params, AdamState& state, double lr);

}  // namespace jdnet
