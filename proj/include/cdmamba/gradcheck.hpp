#pragma once

#include <cmath>
#include <cstddef>
#include <functional>

#include "cdmamba/tensor.hpp"

// Central-difference gradient verification. The error metric is relative with
// the denominator floored at 1e-4, so gradients below that magnitude are held
// to an absolute tolerance instead; difference quotients at step 1e-6·scale
// carry roundoff around 1e-10 which would otherwise swamp tiny entries.

namespace cdmamba {

inline double gradcheck_rel_err(double analytic, double numeric) {
    double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-4});
    return std::abs(analytic - numeric) / denom;
}

// perturbs x[i] in place, restores it, returns the central difference of f
inline double fd_derivative(TensorT<double>& x, std::size_t i,
                            const std::function<double()>& f) {
    double orig = x[i];
    double h = 1e-6 * std::max(1.0, std::abs(orig));
    x[i] = orig + h;
    double fp = f();
    x[i] = orig - h;
    double fm = f();
    x[i] = orig;
    return (fp - fm) / (2.0 * h);
}

struct GradCheckReport {
    double max_rel = 0;
    double sum_rel = 0;
    std::size_t count = 0;

    void record(double rel) {
        if (rel > max_rel) max_rel = rel;
        sum_rel += rel;
        ++count;
    }
    double mean_rel() const { return count == 0 ? 0.0 : sum_rel / static_cast<double>(count); }
};

// checks every entry of x against the analytic gradient
inline GradCheckReport check_tensor_gradient(TensorT<double>& x,
                                             const TensorT<double>& analytic,
                                             const std::function<double()>& f) {
    require_same_shape(x, analytic, "check_tensor_gradient");
    GradCheckReport rep;
    for (std::size_t i = 0; i < x.size(); ++i)
        rep.record(gradcheck_rel_err(analytic[i], fd_derivative(x, i, f)));
    return rep;
}

// checks a strided sample of entries (every stride-th starting at offset)
inline GradCheckReport check_sampled_gradient(TensorT<double>& x,
                                              const TensorT<double>& analytic,
                                              const std::function<double()>& f,
                                              std::size_t stride, std::size_t offset = 0) {
    require_same_shape(x, analytic, "check_sampled_gradient");
    GradCheckReport rep;
    for (std::size_t i = offset; i < x.size(); i += stride)
        rep.record(gradcheck_rel_err(analytic[i], fd_derivative(x, i, f)));
    return rep;
}

}  // namespace cdmamba
