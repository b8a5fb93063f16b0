#pragma once

// Central finite-difference gradient oracle. Lives in test code only and
// never calls into Tape::backward for its reference values.

#include <cmath>
#include <functional>
#include <vector>

#include "bhn/rng.hpp"
#include "bhn/tensor.hpp"

namespace bhn::testing {

// Scalar function of a flat list of input tensors.
using ScalarFn = std::function<double(const std::vector<TensorT<double>>&)>;

inline double rel_err(double a, double b) {
    const double denom = std::max({std::fabs(a), std::fabs(b), 1e-3});
    return std::fabs(a - b) / denom;
}

struct FdReport {
    double max_rel_err = 0;
    int checked = 0;
};

/// Central differences with h = 1e-3 on every element of every input.
inline FdReport fd_gradients(const ScalarFn& f, std::vector<TensorT<double>> inputs,
                             const std::vector<TensorT<double>>& analytic, double h = 1e-3) {
    FdReport rep;
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        for (std::size_t i = 0; i < inputs[k].data.size(); ++i) {
            const double saved = inputs[k].data[i];
            inputs[k].data[i] = saved + h;
            const double up = f(inputs);
            inputs[k].data[i] = saved - h;
            const double down = f(inputs);
            inputs[k].data[i] = saved;
            const double fd = (up - down) / (2 * h);
            rep.max_rel_err = std::max(rep.max_rel_err, rel_err(fd, analytic[k].data[i]));
            ++rep.checked;
        }
    }
    return rep;
}

inline TensorT<double> random_tensor(Shape shape, Rng& rng, double lo = -2.0, double hi = 2.0) {
    TensorT<double> t = TensorT<double>::zeros(std::move(shape));
    for (auto& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

/// Uniform values kept away from a kink at `avoid` by `margin`.
inline TensorT<double> random_tensor_avoiding(Shape shape, Rng& rng, double avoid,
                                              double margin, double lo = -2.0,
                                              double hi = 2.0) {
    TensorT<double> t = TensorT<double>::zeros(std::move(shape));
    for (auto& v : t.data) {
        do {
            v = rng.uniform(lo, hi);
        } while (std::fabs(v - avoid) < margin);
    }
    return t;
}

}  // namespace bhn::testing
