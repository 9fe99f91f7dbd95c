#pragma once

#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "jdnet/gradcheck.hpp"

namespace jdnet {

/// One differentiable operator or module checked on several random shapes.
struct GradCheckCase {
  std::string name;
  std::string group;  // conv | attention | scaleagg | scconv | ssim | network
  double default_tolerance = 1e-4;
  std::function<GradCheckReport(const GradCheckOptions&)> run;
};

const std::vector<GradCheckCase>& gradcheck_registry();

/// Valid values for the group filter, "all" first.
const std::vector<std::string>& gradcheck_groups();

/// Runs every case of `group` ("all" for everything). `tolerance` overrides
/// the per-case default when set.
std::vector<GradCheckReport> run_gradcheck_suite(std::string_view group, std::optional<double> tolerance = {},
                                                 const std::function<void(const GradCheckReport&)>& on_report = {});

}  // namespace jdnet
