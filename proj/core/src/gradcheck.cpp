#include "jdnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace jdnet {

double gradcheck_relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

GradCheckReport finite_diff_check(const std::string& name, const std::function<Tensor<double>()>& f,
                                  std::vector<Tensor<double>> inputs, const GradCheckOptions& options) {
  GradCheckReport report;
  report.name = name;
  report.tolerance = options.tolerance;

  for (auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  clear_tape<double>();
  {
    const Tensor<double> loss = f();
    detail::require(loss.numel() == 1, "finite_diff_check: f must be scalar-valued");
    backward(loss);
  }

  const NoGradGuard no_grad;
  auto evaluate = [&f] { return f().item(); };

  for (auto& x : inputs) {
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    const std::size_t count = x.numel();
    std::size_t checked = options.max_elements_per_input == 0
                              ? count
                              : std::min(count, options.max_elements_per_input);
    auto values = x.data();
    for (std::size_t k = 0; k < checked; ++k) {
      const std::size_t i = checked == count ? k : (k * count) / checked;
      const double original = values[i];
      double roundoff = 0.0;  // bound on the cancellation error of the last difference
      auto central = [&](double h) {
        values[i] = original + h;
        const double up = evaluate();
        values[i] = original - h;
        const double down = evaluate();
        values[i] = original;
        roundoff = 64.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down)) / h;
        return (up - down) / (2.0 * h);
      };
      double numeric = central(options.step);
      double err = gradcheck_relative_error(analytic[i], numeric);
      // Refinement accepts only after three successive step halvings agree,
      // since two kink-polluted estimates can coincide by chance.
      const double agree = 0.1 * options.tolerance;
      double h = options.step;
      bool old_ok = false;
      for (int r = 0; r < options.max_refinements && !(err <= options.tolerance); ++r) {
        h *= 0.5;
        const double finer = central(h);
        const bool ok = std::abs(numeric - finer) <= agree * (std::abs(numeric) + std::abs(finer)) + roundoff;
        if (ok && old_ok) {
          err = gradcheck_relative_error(analytic[i], finer);
          ++report.refined_elements;
          break;
        }
        old_ok = ok;
        numeric = finer;
      }
      if (!std::isfinite(err)) err = HUGE_VAL;
      report.relative_errors.push_back(err);
      report.max_relative_error = std::max(report.max_relative_error, err);
    }
  }
  report.passed = report.max_relative_error <= options.tolerance;
  return report;
}

}  // namespace jdnet
