#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "mamlab/tensor.hpp"

namespace mamlab {

namespace detail {

inline double relative_error(double analytic, double numeric) {
    return std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
}

inline double scalar_value(const Tensor& t) {
    if (!t.is_scalar()) throw ContractError("gradient check needs a scalar function, got shape " + shape_str(t.shape()));
    return t.item();
}

} // namespace detail

// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
inline double check_gradient(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point, double epsilon) {
    if (!(epsilon > 0.0)) throw ParameterError("check_gradient: epsilon must be positive");
    Tensor x = Tensor::from(point.shape(), point.values(), true);
    Tensor y = fn(x);
    detail::scalar_value(y);
    backward(y);
    const std::vector<double> analytic =
        x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end()) : std::vector<double>(x.numel(), 0.0);

    NoGradGuard no_grad;
    double worst = 0.0;
    std::vector<double> probe = point.values();
    for (std::size_t i = 0; i < probe.size(); ++i) {
        const double saved = probe[i];
        probe[i] = saved + epsilon;
        const double hi = detail::scalar_value(fn(Tensor::from(point.shape(), probe)));
        probe[i] = saved - epsilon;
        const double lo = detail::scalar_value(fn(Tensor::from(point.shape(), probe)));
        probe[i] = saved;
        worst = std::max(worst, detail::relative_error(analytic[i], (hi - lo) / (2.0 * epsilon)));
    }
    return worst;
}

// Same measure for a loss over several parameter tensors, perturbed in place and restored.
// `loss` must be a pure function of the parameter values.
inline double check_gradient(const std::function<Tensor()>& loss, std::vector<Tensor> params, double epsilon) {
    if (!(epsilon > 0.0)) throw ParameterError("check_gradient: epsilon must be positive");
    for (Tensor& p : params) p.zero_grad();
    backward(loss());
    std::vector<std::vector<double>> analytic;
    for (const Tensor& p : params) {
        analytic.push_back(p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                        : std::vector<double>(p.numel(), 0.0));
    }
    NoGradGuard no_grad;
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto values = params[k].mutable_data();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const double saved = values[i];
            values[i] = saved + epsilon;
            const double hi = detail::scalar_value(loss());
            values[i] = saved - epsilon;
            const double lo = detail::scalar_value(loss());
            values[i] = saved;
            worst = std::max(worst, detail::relative_error(analytic[k][i], (hi - lo) / (2.0 * epsilon)));
        }
    }
    return worst;
}

} // namespace mamlab
