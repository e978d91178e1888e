#include "esnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace esnet {

namespace {

constexpr int kMaxShrink = 3;

GradCheckResult check_impl(const std::function<double()>& loss, const std::function<std::uint64_t()>* region,
                           std::span<GradTarget> targets, const GradCheckOptions& opts) {
    struct Coord {
        std::size_t target;
        std::size_t index;
    };
    std::vector<Coord> coords;
    for (std::size_t t = 0; t < targets.size(); ++t) {
        if (targets[t].values.size() != targets[t].analytic.size()) {
            throw std::invalid_argument("grad_check: target '" + targets[t].name +
                                        "' has mismatched value/gradient lengths");
        }
        for (std::size_t i = 0; i < targets[t].values.size(); ++i) coords.push_back({t, i});
    }
    if (coords.size() > opts.max_coords) {
        std::mt19937_64 rng(opts.seed);
        // Partial Fisher-Yates with an explicit modulo draw keeps the sample
        // independent of the standard library's distribution implementation.
        for (std::size_t i = 0; i < opts.max_coords; ++i) {
            const std::size_t j = i + static_cast<std::size_t>(rng() % (coords.size() - i));
            std::swap(coords[i], coords[j]);
        }
        coords.resize(opts.max_coords);
        std::sort(coords.begin(), coords.end(), [](const Coord& a, const Coord& b) {
            return a.target != b.target ? a.target < b.target : a.index < b.index;
        });
    }

    GradCheckResult r;
    double f0 = 0.0;
    std::uint64_t home = 0;
    if (region) {
        f0 = loss();
        home = (*region)();
    }
    for (const Coord& c : coords) {
        GradTarget& t = targets[c.target];
        double& v = t.values[c.index];
        const double saved = v;
        double h = opts.eps * std::max(1.0, std::abs(saved));
        double numeric = 0.0, fp = 0.0, fm = 0.0;
        for (int attempt = 0;; ++attempt) {
            v = saved + h;
            fp = loss();
            const bool plus_home = !region || (*region)() == home;
            v = saved - h;
            fm = loss();
            const bool minus_home = !region || (*region)() == home;
            v = saved;
            if (plus_home && minus_home) {
                numeric = (fp - fm) / (2.0 * h);
            } else if (attempt < kMaxShrink) {
                h /= 10.0;
                continue;
            } else if (plus_home) {
                numeric = (fp - f0) / h;
            } else if (minus_home) {
                numeric = (f0 - fm) / h;
            } else {
                numeric = (fp - fm) / (2.0 * h);
            }
            if (attempt > 0 || !(plus_home && minus_home)) ++r.kink_adjusted;
            break;
        }
        const double analytic = t.analytic[c.index];
        ++r.checked;
        if (!std::isfinite(fp) || !std::isfinite(fm) || !std::isfinite(analytic)) {
            r.finite = false;
            r.failure = "non-finite value at " + t.name + "[" + std::to_string(c.index) + "]";
            r.worst_target = t.name;
            r.worst_index = c.index;
            return r;
        }
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
        const double err = std::abs(analytic - numeric) / denom;
        if (r.checked == 1 || err > r.max_rel_error) {
            r.max_rel_error = err;
            r.worst_target = t.name;
            r.worst_index = c.index;
            r.worst_analytic = analytic;
            r.worst_numeric = numeric;
        }
    }
    return r;
}

}  // namespace

GradCheckResult grad_check(const std::function<double()>& loss, std::span<GradTarget> targets,
                           const GradCheckOptions& opts) {
    return check_impl(loss, nullptr, targets, opts);
}

GradCheckResult grad_check(const std::function<double()>& loss, const std::function<std::uint64_t()>& region,
                           std::span<GradTarget> targets, const GradCheckOptions& opts) {
    return check_impl(loss, &region, targets, opts);
}

}  // namespace esnet
