#pragma once

#include <functional>

#include "pixelwave/ops.hpp"

namespace pixelwave {

struct GradCheckReport {
    double max_rel_err = 0;
    bool passed = false;
    int64_t elements = 0;
};

// Compares the tape gradient of a scalar-valued closure against central
// finite differences. 64-bit inputs only; the closure must be a pure
// function of the given leaves.
//
// rel error per element: |a - n| / max(1, |a|, |n|).
using GradCheckFn = std::function<Value<double>(Tape<double>&, const std::vector<Value<double>>&)>;

inline GradCheckReport grad_check(const GradCheckFn& fn, std::vector<Tensor<double>> inputs, double eps = 1e-5,
                                  double tol = 1e-4) {
    GradCheckReport report;

    std::vector<Value<double>> leaves;
    leaves.reserve(inputs.size());
    for (auto& t : inputs) leaves.push_back(make_value<double>(t, true));

    Tape<double> tape;
    auto loss = fn(tape, leaves);
    if (loss->value.numel() != 1) throw input_error("grad_check: closure must be scalar-valued");
    tape.backward(loss);

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        std::vector<Value<double>> vs;
        vs.reserve(xs.size());
        for (auto& t : xs) vs.push_back(make_value<double>(t, false));
        Tape<double> local;
        local.set_recording(false);
        return static_cast<double>(fn(local, vs)->value[0]);
    };

    for (size_t which = 0; which < inputs.size(); ++which) {
        for (int64_t i = 0; i < inputs[which].numel(); ++i) {
            double x0 = inputs[which][i];
            double h = eps * std::max(1.0, std::abs(x0));
            inputs[which][i] = x0 + h;
            double fp = eval(inputs);
            inputs[which][i] = x0 - h;
            double fm = eval(inputs);
            inputs[which][i] = x0;
            double numeric = (fp - fm) / (2.0 * h);
            double analytic = leaves[which]->grad[i];
            double rel = std::abs(analytic - numeric) / std::max({1.0, std::abs(analytic), std::abs(numeric)});
            report.max_rel_err = std::max(report.max_rel_err, rel);
            ++report.elements;
        }
    }
    report.passed = report.max_rel_err <= tol;
    return report;
}

}  // namespace pixelwave
