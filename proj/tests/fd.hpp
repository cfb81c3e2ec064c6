#pragma once

// Central-finite-difference oracle used across the test suites. Kept
// independent of the graph's backward pass: it only ever evaluates scalar
// functions forward at perturbed inputs.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

#include "ddlab/tensor.hpp"

namespace fd {

using ScalarOfTensor = std::function<double(const ddlab::Tensor&)>;

inline double partial(const ScalarOfTensor& f, const ddlab::Tensor& x, std::size_t i,
                      double h = 1e-5) {
    ddlab::Tensor xp = x;
    ddlab::Tensor xm = x;
    xp[i] += h;
    xm[i] -= h;
    return (f(xp) - f(xm)) / (2.0 * h);
}

/// Largest relative mismatch between an analytic gradient and central
/// differences over the probed coordinates. Relative to the larger of the
/// two magnitudes, with an absolute floor so near-zero entries compare
/// absolutely.
inline double max_rel_err(const ScalarOfTensor& f, const ddlab::Tensor& x,
                          const ddlab::Tensor& grad, const std::vector<std::size_t>& probes,
                          double h = 1e-5, double abs_floor = 1e-7) {
    double worst = 0.0;
    for (std::size_t i : probes) {
        const double numeric = partial(f, x, i, h);
        const double analytic = grad[i];
        const double scale = std::max({std::abs(numeric), std::abs(analytic), abs_floor});
        worst = std::max(worst, std::abs(numeric - analytic) / scale);
    }
    return worst;
}

inline std::vector<std::size_t> spread_probes(std::size_t size, std::size_t count) {
    std::vector<std::size_t> probes;
    if (size == 0) return probes;
    count = std::min(count, size);
    for (std::size_t i = 0; i < count; ++i) probes.push_back(i * size / count);
    return probes;
}

}  // namespace fd
