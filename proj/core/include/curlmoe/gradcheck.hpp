#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <type_traits>
#include <vector>

#include "curlmoe/nn.hpp"

namespace curlmoe::nn {

struct GradCheckOptions {
    std::size_t coordinates = 200;
    double step = 1e-3;
    double tolerance = 1e-3;
    /// Five-point central stencil instead of the two-point one.
    bool five_point = false;
    std::uint64_t seed = 0;

    /// FP64: five-point stencil, step 1e-3, tolerance 1e-6. FP32: two-point, 1e-3, 1e-3.
    template <typename Real>
    static GradCheckOptions defaults_for() {
        GradCheckOptions o;
        if constexpr (std::is_same_v<Real, double>) {
            o.five_point = true;
            o.tolerance = 1e-6;
        }
        return o;
    }
};

struct GradCheckParam {
    std::string name;
    std::size_t checked = 0;
    double max_rel_error = 0.0;
};

struct GradCheckReport {
    std::vector<GradCheckParam> params;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    double tolerance = 0.0;
    bool deterministic = true;
    bool passed = false;
};

/// `model(true)` evaluates the loss and accumulates gradients into `store`;
/// `model(false)` only evaluates the loss. The model must be deterministic
/// (any routing decisions frozen). Gradients are zeroed before the analytic
/// pass and restored to the analytic values on return.
template <typename Real>
GradCheckReport grad_check(const std::function<double(bool)>& model, ParamStore<Real>& store,
                           const GradCheckOptions& opts);

/// |a - b| / max(|a|, |b|, 1e-8).
double relative_error(double a, double b);

}  // namespace curlmoe::nn
