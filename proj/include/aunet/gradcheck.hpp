// Central finite-difference gradient checking. This is the independent
// oracle for every differentiable kernel: it re-evaluates the forward
// function at perturbed inputs and never touches the tape machinery of the
// path under test. Run at double precision.
#pragma once

#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "aunet/tensor.hpp"

namespace aunet {

struct GradCheckResult {
    bool ok = true;
    double max_rel_err = 0.0;
    int64_t worst_index = -1;
    std::string detail;
};

// f() must rebuild the forward pass from scratch reading the current
// contents of `leaf` and return the scalar output value.
template <typename T>
GradCheckResult check_gradient_fd(Tensor<T>& leaf, const std::vector<T>& analytic,
                                  const std::function<double()>& f, double rel_tol = 1e-4,
                                  double abs_floor = 1e-8, double step = 1e-5) {
    GradCheckResult res;
    auto& data = leaf.data();
    if (analytic.size() != data.size()) {
        res.ok = false;
        res.detail = "analytic gradient length mismatch";
        return res;
    }
    for (size_t i = 0; i < data.size(); ++i) {
        const T saved = data[i];
        const double h = step * std::max(1.0, std::abs(double(saved)));
        data[i] = saved + static_cast<T>(h);
        const double fp = f();
        data[i] = saved - static_cast<T>(h);
        const double fm = f();
        data[i] = saved;
        const double numeric = (fp - fm) / (2.0 * h);
        const double a = double(analytic[i]);
        const double diff = std::abs(a - numeric);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-12});
        const double rel = diff / denom;
        if (rel > res.max_rel_err) {
            res.max_rel_err = rel;
            res.worst_index = static_cast<int64_t>(i);
        }
        if (diff > abs_floor && rel > rel_tol) {
            res.ok = false;
            res.detail = "index " + std::to_string(i) + ": analytic " + std::to_string(a) +
                         " vs numeric " + std::to_string(numeric);
        }
    }
    return res;
}

// Convenience wrapper: builds the graph once for the analytic gradient of
// `leaf`, then sweeps finite differences with the same builder.
template <typename T>
GradCheckResult gradcheck(Tensor<T>& leaf, const std::function<Tensor<T>()>& build,
                          double rel_tol = 1e-4) {
    leaf.set_requires_grad(true);
    leaf.zero_grad();
    Tensor<T> out = build();
    out.backward();
    std::vector<T> analytic = leaf.grad();
    auto f = [&]() -> double {
        NoGradGuard ng;
        return double(build().item());
    };
    return check_gradient_fd(leaf, analytic, f, rel_tol);
}

}  // namespace aunet
