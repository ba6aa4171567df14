#include "curlmoe/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace curlmoe::nn {

double relative_error(double a, double b) {
    const double denom = std::max({std::abs(a), std::abs(b), 1e-8});
    return std::abs(a - b) / denom;
}

template <typename Real>
GradCheckReport grad_check(const std::function<double(bool)>& model, ParamStore<Real>& store,
                           const GradCheckOptions& opts) {
    GradCheckReport report;
    report.tolerance = opts.tolerance;

    store.zero_grad();
    const double base = model(true);
    const double again = model(false);
    report.deterministic = (base == again);

    // Flat (param, offset) coordinates, sampled without replacement.
    std::vector<std::pair<ParamId, std::size_t>> coords;
    coords.reserve(store.total_values());
    for (ParamId p = 0; p < store.size(); ++p)
        for (std::size_t i = 0; i < store[p].value.size(); ++i) coords.emplace_back(p, i);
    Rng rng(opts.seed);
    if (coords.size() > opts.coordinates) {
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(opts.coordinates);
        std::sort(coords.begin(), coords.end());
    }

    report.params.resize(store.size());
    for (ParamId p = 0; p < store.size(); ++p) report.params[p].name = store[p].name;

    const auto eval_at = [&](ParamId p, std::size_t i, Real value) {
        store[p].value[i] = value;
        return model(false);
    };

    for (const auto& [p, i] : coords) {
        const Real original = store[p].value[i];
        const Real h = static_cast<Real>(opts.step);
        double numeric = 0.0;
        if (opts.five_point) {
            const double fp1 = eval_at(p, i, original + h);
            const double fm1 = eval_at(p, i, original - h);
            const double fp2 = eval_at(p, i, original + Real(2) * h);
            const double fm2 = eval_at(p, i, original - Real(2) * h);
            numeric = (8.0 * (fp1 - fm1) - (fp2 - fm2)) / (12.0 * static_cast<double>(h));
        } else {
            const double fp = eval_at(p, i, original + h);
            const double fm = eval_at(p, i, original - h);
            numeric = (fp - fm) / (2.0 * static_cast<double>(h));
        }
        store[p].value[i] = original;

        const double analytic = static_cast<double>(store[p].grad[i]);
        const double err = relative_error(analytic, numeric);
        auto& entry = report.params[p];
        entry.checked += 1;
        entry.max_rel_error = std::max(entry.max_rel_error, err);
        report.max_rel_error = std::max(report.max_rel_error, err);
        report.coordinates += 1;
    }

    report.params.erase(std::remove_if(report.params.begin(), report.params.end(),
                                       [](const GradCheckParam& g) { return g.checked == 0; }),
                        report.params.end());
    report.passed = report.deterministic && report.max_rel_error <= opts.tolerance;
    return report;
}

template GradCheckReport grad_check(const std::function<double(bool)>&, ParamStore<float>&,
                                    const GradCheckOptions&);
template GradCheckReport grad_check(const std::function<double(bool)>&, ParamStore<double>&,
                                    const GradCheckOptions&);

}  // namespace curlmoe::nn
