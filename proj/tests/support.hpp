#pragma once

// Shared helpers for the test suites: random tensors, relative error, and a
// central finite-difference gradient checker. The checker rebuilds the graph
// for every probe, so the loss builder must close over the leaf tensors.

#include <cmath>
#include <functional>
#include <vector>

#include "daffnet/rng.hpp"
#include "daffnet/tensor.hpp"

namespace testsup {

// validate op outputs in every test binary
static const bool finite_checks_enabled = (daffnet::finite_checks() = true);

template <class T>
daffnet::TensorT<T> rand_tensor(daffnet::Shape shape, daffnet::Rng& rng, double lo = -1.0,
                                double hi = 1.0) {
    std::vector<T> v(daffnet::shape_numel(shape));
    for (auto& x : v) x = (T)rng.uniform(lo, hi);
    return daffnet::TensorT<T>::from(std::move(shape), std::move(v));
}

template <class T>
daffnet::TensorT<T> randn_tensor(daffnet::Shape shape, daffnet::Rng& rng, double mean = 0.0,
                                 double stddev = 1.0) {
    return daffnet::TensorT<T>::from(shape, rng.normal_vec<T>(daffnet::shape_numel(shape), mean,
                                                              stddev));
}

inline double rel_err(double a, double b) {
    return std::abs(a - b) / (std::abs(b) + 1e-8);
}

// Re-draw every parameter at O(1) scale so activations sit far from the
// piecewise-linear kinks that invalidate central differences.
template <class T, class ParamSet>
void randomize_params(ParamSet& ps, daffnet::Rng& rng, double stddev = 0.25) {
    for (auto& [name, t] : ps.items)
        for (auto& v : t.mutable_values()) v = (T)rng.normal(0.0, stddev);
}

// max over all leaf elements of |analytic - central difference| / (|cd|+1e-8)
inline double grad_check(const std::function<daffnet::TensorT<double>()>& build_loss,
                         std::vector<daffnet::TensorT<double>> leaves, double step = 1e-4) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    auto loss = build_loss();
    daffnet::backward(loss);
    std::vector<std::vector<double>> analytic;
    analytic.reserve(leaves.size());
    for (auto& l : leaves)
        analytic.push_back(l.has_grad() ? l.grad() : std::vector<double>(l.numel(), 0.0));

    double worst = 0.0;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto& data = leaves[li].mutable_values();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + step;
            const double up = build_loss().item();
            data[i] = keep - step;
            const double dn = build_loss().item();
            data[i] = keep;
            const double numeric = (up - dn) / (2.0 * step);
            worst = std::max(worst, rel_err(analytic[li][i], numeric));
        }
    }
    return worst;
}

}  // namespace testsup
