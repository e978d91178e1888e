#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace esnet {

/// One block of coordinates to perturb: `values` is read by the loss closure,
/// `analytic` holds the gradient claimed for those coordinates.
struct GradTarget {
    std::string name;
    std::span<double> values;
    std::span<const double> analytic;
};

struct GradCheckOptions {
    double eps = 1e-6;              // step is eps * max(1, |value|)
    std::size_t max_coords = 10000;  // larger problems get a seeded subsample
    std::uint64_t seed = 0x5eed;
};

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_target;
    std::size_t worst_index = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t checked = 0;
    std::size_t kink_adjusted = 0;  // coordinates where a kink forced a different stencil
    bool finite = true;
    std::string failure;  // set when a non-finite value was met

    bool passed(double tol) const { return finite && max_rel_error < tol; }
};

/// Central-difference check of `analytic` against `loss` over every target
/// coordinate. Relative error uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator. Each perturbed value is restored before the next coordinate.
GradCheckResult grad_check(const std::function<double()>& loss, std::span<GradTarget> targets,
                           const GradCheckOptions& opts = {});

/// For piecewise-smooth losses. `region` identifies the linear piece (ReLU
/// masks, pooling choices) of the most recent `loss` evaluation. When a
/// perturbation leaves the piece containing the unperturbed point, the step
/// shrinks by 10x (up to three times); if it still leaves, a one-sided
/// difference is taken on a side that stayed inside.
GradCheckResult grad_check(const std::function<double()>& loss, const std::function<std::uint64_t()>& region,
                           std::span<GradTarget> targets, const GradCheckOptions& opts = {});

}  // namespace esnet
