#include "osvit/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "osvit/rng.hpp"

namespace osvit {

GradCheckReport grad_check(const ScalarFn& f, std::span<const Tensor64> inputs,
                           const GradCheckOptions& options) {
  std::vector<Tensor64> params;
  params.reserve(inputs.size());
  for (const auto& in : inputs) {
    params.push_back(in.detach().set_requires_grad(true));
  }

  {
    Tape64 tape;
    ActiveTape<double> scope(tape);
    Tensor64 loss = f(params);
    tape.backward(loss);
  }

  const double h = options.step;
  const double abs_tol = options.absolute_tolerance < 0.0
                             ? h * h
                             : options.absolute_tolerance;
  Rng rng(options.seed);
  GradCheckReport report;

  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor64& p = params[i];
    std::vector<std::size_t> coords(p.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > options.max_coords_per_input) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t idx : coords) {
      const double analytic = p.has_grad() ? p.grad()[idx] : 0.0;
      const double saved = p.data()[idx];
      p.data()[idx] = saved + h;
      const double up = f(params).item();
      p.data()[idx] = saved - h;
      const double down = f(params).item();
      p.data()[idx] = saved;
      const double numeric = (up - down) / (2.0 * h);

      const double diff = std::abs(analytic - numeric);
      const double denom =
          std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      GradCheckCoord c;
      c.input = i;
      c.index = idx;
      c.analytic = analytic;
      c.numeric = numeric;
      c.relative_error = diff / denom;
      c.zero = std::max(std::abs(analytic), std::abs(numeric)) <= abs_tol;
      if (c.zero) {
        c.pass = diff <= abs_tol;
        ++report.zero_coords;
      } else {
        c.pass = c.relative_error <= options.tolerance;
        report.max_relative_error =
            std::max(report.max_relative_error, c.relative_error);
      }
      report.passed = report.passed && c.pass;
      report.coords.push_back(c);
    }
  }
  return report;
}

}  // namespace osvit
