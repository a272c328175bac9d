#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "kiest/numerics/tensor.hpp"

namespace kiest {

inline double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

// Central-difference check of d fn(x) / dx. Returns the max relative error.
inline double grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor x, double h = 1e-5) {
    if (!x.requires_grad()) x = Tensor::from(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
    x.zero_grad();
    backward(fn(x));
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    NoGradGuard guard;
    double worst = 0.0;
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double orig = data[i];
        data[i] = orig + h;
        const double fp = fn(x).item();
        data[i] = orig - h;
        const double fm = fn(x).item();
        data[i] = orig;
        worst = std::max(worst, relative_error(analytic[i], (fp - fm) / (2.0 * h)));
    }
    return worst;
}

// Same check over every entry of a parameter list for a closure-built loss.
inline double grad_check_params(const std::function<Tensor()>& loss_fn, std::vector<Tensor> params, double h = 1e-5) {
    for (auto& p : params) p.zero_grad();
    backward(loss_fn());
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());
    NoGradGuard guard;
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto data = params[k].mutable_data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double orig = data[i];
            data[i] = orig + h;
            const double fp = loss_fn().item();
            data[i] = orig - h;
            const double fm = loss_fn().item();
            data[i] = orig;
            worst = std::max(worst, relative_error(analytic[k][i], (fp - fm) / (2.0 * h)));
        }
    }
    for (auto& p : params) p.zero_grad();
    return worst;
}

}  // namespace kiest
