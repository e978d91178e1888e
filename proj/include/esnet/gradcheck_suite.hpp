#pragma once

// The fixed battery of finite-difference checks run by `esnet gradcheck`
// and by the acceptance binary.

#include <string>
#include <vector>

#include "esnet/gradcheck.hpp"

namespace esnet {

inline constexpr double kGradTolerance = 1e-4;

enum class SuiteScale { Tiny, Small };

SuiteScale parse_suite_scale(const std::string& s);

struct GradCase {
    std::string name;
    GradCheckResult result;
    double seconds = 0.0;

    bool passed() const { return result.passed(kGradTolerance); }
};

/// Runs every case in double precision. Tiny shrinks the tensors; Small
/// uses the full-network input of 3x32x16 at widths 4/8/16.
std::vector<GradCase> run_gradcheck_suite(SuiteScale scale, const GradCheckOptions& opts = {});

/// One line per case: name, max relative error, coordinates, verdict.
std::string format_grad_case(const GradCase& c);

}  // namespace esnet
