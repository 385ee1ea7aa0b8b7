#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "cdmamba/ops_basic.hpp"
#include "cdmamba/tape.hpp"
#include "cdmamba/taped_ops.hpp"
#include "cdmamba/tensor.hpp"
#include "cdmamba/threading.hpp"

// Selective state-space scan. Zero-order-hold discretization with a diagonal
// per-channel state matrix; B, C, and the step size are projections of the
// input at each position. The quadratic unrolled form serves as an
// independent reference for the linear-time recurrence.

namespace cdmamba {

inline constexpr double kZohTau = 1e-4;

// a_bar = e^{delta a}
template <typename S>
S zoh_a(S a, S delta) {
    return std::exp(delta * a);
}

// b_bar = ((e^{delta a} - 1)/a) b, with a series branch near delta·a = 0
template <typename S>
S zoh_b(S a, S b, S delta) {
    S u = delta * a;
    if (std::abs(u) >= static_cast<S>(kZohTau)) return ((std::exp(u) - S(1)) / a) * b;
    return delta * b * (S(1) + u / S(2) + u * u / S(6));
}

template <typename S>
std::pair<S, S> discretize_zoh(S a, S b, S delta) {
    return {zoh_a(a, delta), zoh_b(a, b, delta)};
}

// d f/d a where f = (e^{delta a} - 1)/a, matching the branch split of zoh_b
template <typename S>
S zoh_f_da(S a, S delta) {
    S u = delta * a;
    if (std::abs(u) >= static_cast<S>(kZohTau)) {
        S f = (std::exp(u) - S(1)) / a;
        return (delta * std::exp(u) - f) / a;
    }
    return delta * delta * (S(0.5) + u / S(3) + u * u / S(8));
}

template <typename S>
struct SsmParamsT {
    TensorT<S> a;           // [c, n]
    TensorT<S> w_b;         // [n, c]
    TensorT<S> w_c;         // [n, c]
    TensorT<S> w_delta;     // [c, c]
    TensorT<S> bias_delta;  // [c]

    std::size_t channels() const { return a.extent(0); }
    std::size_t states() const { return a.extent(1); }
};

using SsmParams = SsmParamsT<double>;

template <typename S>
void check_ssm_shapes(const TensorT<S>& x, const SsmParamsT<S>& p) {
    if (x.ndim() != 3) throw ShapeError("ssm_scan: want [b,l,c]");
    std::size_t c = p.channels(), n = p.states();
    if (x.extent(2) != c) throw ShapeError("ssm_scan: channel mismatch");
    if (p.w_b.ndim() != 2 || p.w_b.extent(0) != n || p.w_b.extent(1) != c ||
        p.w_c.ndim() != 2 || p.w_c.extent(0) != n || p.w_c.extent(1) != c ||
        p.w_delta.ndim() != 2 || p.w_delta.extent(0) != c || p.w_delta.extent(1) != c ||
        p.bias_delta.size() != c)
        throw ShapeError("ssm_scan: parameter shape mismatch");
}

template <typename S>
TensorT<S> ssm_scan(const TensorT<S>& x, const SsmParamsT<S>& p) {
    check_ssm_shapes(x, p);
    std::size_t b = x.extent(0), l = x.extent(1), c = p.channels(), n = p.states();
    TensorT<S> dlin = channel_linear(x, p.w_delta, &p.bias_delta);  // [b,l,c]
    TensorT<S> bproj = channel_linear(x, p.w_b);           // [b,l,n]
    TensorT<S> cproj = channel_linear(x, p.w_c);           // [b,l,n]
    TensorT<S> y(x.shape());
    parallel_for(b * c, [&](std::size_t lo, std::size_t hi) {
        std::vector<S> h(n);
        for (std::size_t r = lo; r < hi; ++r) {
            std::size_t bi = r / c, ch = r % c;
            std::fill(h.begin(), h.end(), S(0));
            for (std::size_t i = 0; i < l; ++i) {
                S delta = softplus_scalar(dlin.at3(bi, i, ch));
                S xi = x.at3(bi, i, ch);
                S acc = 0;
                for (std::size_t k = 0; k < n; ++k) {
                    S ak = p.a.data()[ch * n + k];
                    // e^u is both a_bar and the closed-form numerator of
                    // b_bar, so one exponential serves both factors
                    S u = delta * ak;
                    S eu = std::exp(u);
                    S bk = bproj.at3(bi, i, k);
                    S bbar = std::abs(u) >= static_cast<S>(kZohTau)
                                 ? ((eu - S(1)) / ak) * bk
                                 : delta * bk * (S(1) + u / S(2) + u * u / S(6));
                    h[k] = eu * h[k] + bbar * xi;
                    acc += cproj.at3(bi, i, k) * h[k];
                }
                y.at3(bi, i, ch) = acc;
            }
        }
    }, 1);
    y.check_finite_if_enabled("ssm_scan");
    return y;
}

// Quadratic reference: each output as an explicit weighted sum of past inputs,
// with a running product of transition factors. No shared recurrence state.
template <typename S>
TensorT<S> ssm_unrolled_oracle(const TensorT<S>& x, const SsmParamsT<S>& p) {
    check_ssm_shapes(x, p);
    std::size_t b = x.extent(0), l = x.extent(1), c = p.channels(), n = p.states();
    TensorT<S> dlin = channel_linear(x, p.w_delta, &p.bias_delta);
    TensorT<S> bproj = channel_linear(x, p.w_b);
    TensorT<S> cproj = channel_linear(x, p.w_c);
    TensorT<S> y(x.shape());
    parallel_for(b * c, [&](std::size_t lo, std::size_t hi) {
        std::vector<S> prod(n);
        for (std::size_t r = lo; r < hi; ++r) {
            std::size_t bi = r / c, ch = r % c;
            for (std::size_t i = 0; i < l; ++i) {
                std::fill(prod.begin(), prod.end(), S(1));
                S acc = 0;
                for (std::size_t j = i + 1; j-- > 0;) {
                    S delta_j = softplus_scalar(dlin.at3(bi, j, ch));
                    S xj = x.at3(bi, j, ch);
                    for (std::size_t k = 0; k < n; ++k) {
                        S ak = p.a.data()[ch * n + k];
                        acc += cproj.at3(bi, i, k) * prod[k] *
                               zoh_b(ak, bproj.at3(bi, j, k), delta_j) * xj;
                        prod[k] *= zoh_a(ak, delta_j);
                    }
                }
                y.at3(bi, i, ch) = acc;
            }
        }
    }, 1);
    return y;
}

template <typename S>
struct SsmGrads {
    TensorT<S> x, a, w_b, w_c, w_delta, bias_delta;
};

// Fused adjoint of ssm_scan: reverse-time recurrence over the hidden state
// with the per-slice trajectory recomputed up front. Projection adjoints are
// delegated to channel_linear_vjp on the recomputed projection inputs.
template <typename S>
SsmGrads<S> ssm_scan_vjp(const TensorT<S>& x, const SsmParamsT<S>& p, const TensorT<S>& g) {
    check_ssm_shapes(x, p);
    require_same_shape(x, g, "ssm_scan_vjp");
    std::size_t b = x.extent(0), l = x.extent(1), c = p.channels(), n = p.states();
    TensorT<S> dlin = channel_linear(x, p.w_delta, &p.bias_delta);
    TensorT<S> bproj = channel_linear(x, p.w_b);
    TensorT<S> cproj = channel_linear(x, p.w_c);

    TensorT<S> gdlin({b, l, c});
    TensorT<S> gbproj({b, l, n});
    TensorT<S> gcproj({b, l, n});
    TensorT<S> gx_direct({b, l, c});
    TensorT<S> ga_partial({b, c, n});  // per-batch partials, reduced in order below

    // channels of one batch contribute to shared gbproj/gcproj rows, so the
    // parallel axis is the batch only
    parallel_for(b, [&](std::size_t blo, std::size_t bhi) {
        // trajectory caches: the reverse sweep reuses the identical rounded
        // step factors instead of re-deriving them, so the adjoint matches
        // a recomputing implementation bit for bit at a third of the
        // exponential count
        std::vector<S> h(l * n), gh(n), deltas(l), abar_t(l * n), f_t(l * n);
        for (std::size_t bi = blo; bi < bhi; ++bi)
            for (std::size_t ch = 0; ch < c; ++ch) {
                // forward trajectory for this slice
                for (std::size_t i = 0; i < l; ++i) {
                    S delta = softplus_scalar(dlin.at3(bi, i, ch));
                    deltas[i] = delta;
                    S xi = x.at3(bi, i, ch);
                    for (std::size_t k = 0; k < n; ++k) {
                        S ak = p.a.data()[ch * n + k];
                        S u = delta * ak;
                        S eu = std::exp(u);
                        S bk = bproj.at3(bi, i, k);
                        S bbar;
                        S f;  // (e^{u}-1)/a with series branch, i.e. b_bar at b=1
                        if (std::abs(u) >= static_cast<S>(kZohTau)) {
                            f = (eu - S(1)) / ak;
                            bbar = f * bk;
                        } else {
                            S poly = S(1) + u / S(2) + u * u / S(6);
                            f = delta * poly;
                            bbar = delta * bk * poly;
                        }
                        abar_t[i * n + k] = eu;
                        f_t[i * n + k] = f;
                        S prev = i == 0 ? S(0) : h[(i - 1) * n + k];
                        h[i * n + k] = eu * prev + bbar * xi;
                    }
                }
                // reverse sweep
                std::fill(gh.begin(), gh.end(), S(0));
                for (std::size_t i = l; i-- > 0;) {
                    S delta = deltas[i];
                    S xi = x.at3(bi, i, ch);
                    S gy = g.at3(bi, i, ch);
                    S gdelta = 0, gxi = 0;
                    for (std::size_t k = 0; k < n; ++k) {
                        S ak = p.a.data()[ch * n + k];
                        S u = delta * ak;
                        S abar = abar_t[i * n + k];
                        S bk = bproj.at3(bi, i, k);
                        S f = f_t[i * n + k];
                        S hk = h[i * n + k];
                        S hprev = i == 0 ? S(0) : h[(i - 1) * n + k];
                        gcproj.at3(bi, i, k) += gy * hk;
                        S ghk = gh[k] + gy * cproj.at3(bi, i, k);
                        S gabar = ghk * hprev;
                        S gbbar = ghk * xi;
                        gxi += ghk * f * bk;
                        gbproj.at3(bi, i, k) += gbbar * f;
                        S gf = gbbar * bk;
                        gdelta += gabar * ak * abar + gf * abar;  // d f/d delta = e^{u}
                        S fda = std::abs(u) >= static_cast<S>(kZohTau)
                                    ? (delta * abar - f) / ak
                                    : delta * delta * (S(0.5) + u / S(3) + u * u / S(8));
                        ga_partial.at3(bi, ch, k) += gabar * delta * abar + gf * fda;
                        gh[k] = ghk * abar;  // carry to step i-1
                    }
                    S sig = sigmoid_scalar(dlin.at3(bi, i, ch));
                    gdlin.at3(bi, i, ch) = gdelta * sig;
                    gx_direct.at3(bi, i, ch) = gxi;
                }
            }
    }, 1);

    TensorT<S> ga({c, n});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < c * n; ++i) ga[i] += ga_partial[bi * c * n + i];

    auto gd = channel_linear_vjp(x, p.w_delta, true, gdlin);
    auto gb = channel_linear_vjp(x, p.w_b, false, gbproj);
    auto gc = channel_linear_vjp(x, p.w_c, false, gcproj);
    TensorT<S> gx = gx_direct;
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gd.x[i] + gb.x[i] + gc.x[i];
    return {std::move(gx), std::move(ga), std::move(gb.w), std::move(gc.w),
            std::move(gd.w), std::move(gd.bias)};
}

template <typename S>
TensorT<S> gated_ssm(const TensorT<S>& x, const TensorT<S>& gate, const SsmParamsT<S>& p) {
    require_same_shape(x, gate, "gated_ssm");
    return mul(ssm_scan(x, p), silu(gate));
}

// ------------------------------------------------------------- taped variant

namespace ad {

template <typename S>
struct SsmVars {
    VarT<S> a, w_b, w_c, w_delta, bias_delta;
};

template <typename S>
SsmParamsT<S> ssm_params_from_tape(const Tape<S>& t, const SsmVars<S>& v) {
    return {t.value(v.a.id), t.value(v.w_b.id), t.value(v.w_c.id), t.value(v.w_delta.id),
            t.value(v.bias_delta.id)};
}

template <typename S>
VarT<S> ssm_scan(VarT<S> x, const SsmVars<S>& pv) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    SsmVars<S> v = pv;
    std::size_t id = t.push(cdmamba::ssm_scan(t.value(ix), ssm_params_from_tape(t, v)),
                            [ix, v](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::ssm_scan_vjp(
                                    tp.value(ix), ssm_params_from_tape(tp, v), g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(v.a.id, gr.a);
                                tp.accumulate(v.w_b.id, gr.w_b);
                                tp.accumulate(v.w_c.id, gr.w_c);
                                tp.accumulate(v.w_delta.id, gr.w_delta);
                                tp.accumulate(v.bias_delta.id, gr.bias_delta);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> gated_ssm(VarT<S> x, VarT<S> gate, const SsmVars<S>& pv) {
    return mul(ssm_scan(x, pv), silu(gate));
}

}  // namespace ad

}  // namespace cdmamba
