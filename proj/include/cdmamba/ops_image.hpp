#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <utility>

#include "cdmamba/ops_basic.hpp"
#include "cdmamba/tensor.hpp"
#include "cdmamba/threading.hpp"

// Spatial primitives: convolution, pooling, upsampling, normalization, and the
// small pooled-map ops the attention skips need. Cross-correlation convention
// throughout (no kernel flip).

namespace cdmamba {

struct Conv2dSpec {
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t dilation = 1;
};

inline std::size_t conv_out_extent(std::size_t in, std::size_t k, const Conv2dSpec& sp) {
    std::size_t eff = sp.dilation * (k - 1) + 1;
    std::size_t padded = in + 2 * sp.pad;
    if (padded < eff) throw ShapeError("conv2d: non-positive output extent");
    return (padded - eff) / sp.stride + 1;
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias,
                  const Conv2dSpec& sp) {
    if (x.ndim() != 4 || w.ndim() != 4) throw ShapeError("conv2d: want [b,cin,h,w], [cout,cin,kh,kw]");
    std::size_t b = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    if (w.extent(1) != cin) throw ShapeError("conv2d: cin mismatch between input and weight");
    if (kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv2d: kernel extents must be odd");
    if (bias && bias->size() != cout) throw ShapeError("conv2d: bias length mismatch");
    std::size_t oh = conv_out_extent(h, kh, sp);
    std::size_t ow = conv_out_extent(wd, kw, sp);
    TensorT<S> y({b, cout, oh, ow});
    parallel_for(b * cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            std::size_t bi = r / cout, oc = r % cout;
            for (std::size_t yo = 0; yo < oh; ++yo)
                for (std::size_t xo = 0; xo < ow; ++xo) {
                    S acc = bias ? (*bias)[oc] : S(0);
                    for (std::size_t ic = 0; ic < cin; ++ic)
                        for (std::size_t ki = 0; ki < kh; ++ki) {
                            std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(yo * sp.stride + ki * sp.dilation) -
                                                static_cast<std::ptrdiff_t>(sp.pad);
                            if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                            for (std::size_t kj = 0; kj < kw; ++kj) {
                                std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(xo * sp.stride + kj * sp.dilation) -
                                                    static_cast<std::ptrdiff_t>(sp.pad);
                                if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wd)) continue;
                                acc += x.at4(bi, ic, static_cast<std::size_t>(yi), static_cast<std::size_t>(xi)) *
                                       w.at4(oc, ic, ki, kj);
                            }
                        }
                    y.at4(bi, oc, yo, xo) = acc;
                }
        }
    }, 1);
    return y;
}

template <typename S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const Conv2dSpec& sp) {
    return conv2d(x, w, static_cast<const TensorT<S>*>(nullptr), sp);
}

template <typename S>
struct Conv2dGrads {
    TensorT<S> x, w, bias;
};

template <typename S>
Conv2dGrads<S> conv2d_vjp(const TensorT<S>& x, const TensorT<S>& w, bool has_bias,
                          const Conv2dSpec& sp, const TensorT<S>& g) {
    std::size_t b = x.extent(0), cin = x.extent(1), h = x.extent(2), wd = x.extent(3);
    std::size_t cout = w.extent(0), kh = w.extent(2), kw = w.extent(3);
    std::size_t oh = g.extent(2), ow = g.extent(3);
    Conv2dGrads<S> out{TensorT<S>(x.shape()), TensorT<S>(w.shape()),
                       has_bias ? TensorT<S>({cout}) : TensorT<S>()};
    // grad wrt input: disjoint over batch
    parallel_for(b, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t bi = lo; bi < hi; ++bi)
            for (std::size_t oc = 0; oc < cout; ++oc)
                for (std::size_t yo = 0; yo < oh; ++yo)
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        S go = g.at4(bi, oc, yo, xo);
                        if (go == S(0)) continue;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t ki = 0; ki < kh; ++ki) {
                                std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(yo * sp.stride + ki * sp.dilation) -
                                                    static_cast<std::ptrdiff_t>(sp.pad);
                                if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kj = 0; kj < kw; ++kj) {
                                    std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(xo * sp.stride + kj * sp.dilation) -
                                                        static_cast<std::ptrdiff_t>(sp.pad);
                                    if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    out.x.at4(bi, ic, static_cast<std::size_t>(yi), static_cast<std::size_t>(xi)) +=
                                        go * w.at4(oc, ic, ki, kj);
                                }
                            }
                    }
    }, 1);
    // grad wrt weight/bias: disjoint over output channel
    parallel_for(cout, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t oc = lo; oc < hi; ++oc)
            for (std::size_t bi = 0; bi < b; ++bi)
                for (std::size_t yo = 0; yo < oh; ++yo)
                    for (std::size_t xo = 0; xo < ow; ++xo) {
                        S go = g.at4(bi, oc, yo, xo);
                        if (has_bias) out.bias[oc] += go;
                        if (go == S(0)) continue;
                        for (std::size_t ic = 0; ic < cin; ++ic)
                            for (std::size_t ki = 0; ki < kh; ++ki) {
                                std::ptrdiff_t yi = static_cast<std::ptrdiff_t>(yo * sp.stride + ki * sp.dilation) -
                                                    static_cast<std::ptrdiff_t>(sp.pad);
                                if (yi < 0 || yi >= static_cast<std::ptrdiff_t>(h)) continue;
                                for (std::size_t kj = 0; kj < kw; ++kj) {
                                    std::ptrdiff_t xi = static_cast<std::ptrdiff_t>(xo * sp.stride + kj * sp.dilation) -
                                                        static_cast<std::ptrdiff_t>(sp.pad);
                                    if (xi < 0 || xi >= static_cast<std::ptrdiff_t>(wd)) continue;
                                    out.w.at4(oc, ic, ki, kj) +=
                                        go * x.at4(bi, ic, static_cast<std::size_t>(yi), static_cast<std::size_t>(xi));
                                }
                            }
                    }
    }, 1);
    return out;
}

// 1-D convolution with kernel 3 and same padding, over [b, n]
template <typename S>
TensorT<S> conv1d_k3(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias) {
    if (x.ndim() != 2 || w.size() != 3) throw ShapeError("conv1d_k3: want [b,n] and kernel [3]");
    std::size_t b = x.extent(0), n = x.extent(1);
    TensorT<S> y(x.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < n; ++i) {
            S acc = bias ? (*bias)[0] : S(0);
            for (std::size_t k = 0; k < 3; ++k) {
                std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i + k) - 1;
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(n)) continue;
                acc += x.data()[bi * n + j] * w[k];
            }
            y.data()[bi * n + i] = acc;
        }
    return y;
}

template <typename S>
struct Conv1dGrads {
    TensorT<S> x, w, bias;
};

template <typename S>
Conv1dGrads<S> conv1d_k3_vjp(const TensorT<S>& x, const TensorT<S>& w, bool has_bias,
                             const TensorT<S>& g) {
    std::size_t b = x.extent(0), n = x.extent(1);
    Conv1dGrads<S> out{TensorT<S>(x.shape()), TensorT<S>(w.shape()),
                       has_bias ? TensorT<S>({1}) : TensorT<S>()};
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < n; ++i) {
            S go = g.data()[bi * n + i];
            if (has_bias) out.bias[0] += go;
            for (std::size_t k = 0; k < 3; ++k) {
                std::ptrdiff_t j = static_cast<std::ptrdiff_t>(i + k) - 1;
                if (j < 0 || j >= static_cast<std::ptrdiff_t>(n)) continue;
                out.x.data()[bi * n + j] += go * w[k];
                out.w[k] += go * x.data()[bi * n + j];
            }
        }
    return out;
}

// --------------------------------------------------------------- max pooling

template <typename S>
TensorT<S> maxpool2(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("maxpool2: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    if (h % 2 != 0 || w % 2 != 0) throw ShapeError("maxpool2: spatial extents must be even");
    TensorT<S> y({b, c, h / 2, w / 2});
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const S* xp = x.data() + bc * h * w;
        S* yp = y.data() + bc * (h / 2) * (w / 2);
        for (std::size_t i = 0; i < h / 2; ++i)
            for (std::size_t j = 0; j < w / 2; ++j) {
                S m = xp[(2 * i) * w + 2 * j];
                m = std::max(m, xp[(2 * i) * w + 2 * j + 1]);
                m = std::max(m, xp[(2 * i + 1) * w + 2 * j]);
                m = std::max(m, xp[(2 * i + 1) * w + 2 * j + 1]);
                yp[i * (w / 2) + j] = m;
            }
    }
    return y;
}

// gradient routes to the first max in row-major window order
template <typename S>
TensorT<S> maxpool2_vjp(const TensorT<S>& x, const TensorT<S>& g) {
    std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    TensorT<S> gx(x.shape());
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const S* xp = x.data() + bc * h * w;
        const S* gp = g.data() + bc * (h / 2) * (w / 2);
        S* gxp = gx.data() + bc * h * w;
        for (std::size_t i = 0; i < h / 2; ++i)
            for (std::size_t j = 0; j < w / 2; ++j) {
                std::size_t idx[4] = {(2 * i) * w + 2 * j, (2 * i) * w + 2 * j + 1,
                                      (2 * i + 1) * w + 2 * j, (2 * i + 1) * w + 2 * j + 1};
                std::size_t best = 0;
                for (std::size_t k = 1; k < 4; ++k)
                    if (xp[idx[k]] > xp[idx[best]]) best = k;
                gxp[idx[best]] += gp[i * (w / 2) + j];
            }
    }
    return gx;
}

// --------------------------------------------------------- bilinear upsample

// align-corners=false; source centers at (o+0.5)/2 - 0.5, edge clamped
namespace detail {
struct LerpTap {
    std::size_t i0, i1;
    double w1;  // weight of i1; i0 gets (1 - w1)
};

inline LerpTap upsample_tap(std::size_t o, std::size_t in_extent) {
    double src = (static_cast<double>(o) + 0.5) * 0.5 - 0.5;
    double f = std::floor(src);
    double frac = src - f;
    std::ptrdiff_t i0 = static_cast<std::ptrdiff_t>(f);
    std::ptrdiff_t i1 = i0 + 1;
    std::ptrdiff_t last = static_cast<std::ptrdiff_t>(in_extent) - 1;
    i0 = std::clamp<std::ptrdiff_t>(i0, 0, last);
    i1 = std::clamp<std::ptrdiff_t>(i1, 0, last);
    return {static_cast<std::size_t>(i0), static_cast<std::size_t>(i1), frac};
}
}  // namespace detail

template <typename S>
TensorT<S> bilinear_upsample2(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("bilinear_upsample2: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    TensorT<S> y({b, c, 2 * h, 2 * w});
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const S* xp = x.data() + bc * h * w;
        S* yp = y.data() + bc * 4 * h * w;
        for (std::size_t oy = 0; oy < 2 * h; ++oy) {
            auto ty = detail::upsample_tap(oy, h);
            for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                auto tx = detail::upsample_tap(ox, w);
                double v = (1 - ty.w1) * ((1 - tx.w1) * xp[ty.i0 * w + tx.i0] + tx.w1 * xp[ty.i0 * w + tx.i1]) +
                           ty.w1 * ((1 - tx.w1) * xp[ty.i1 * w + tx.i0] + tx.w1 * xp[ty.i1 * w + tx.i1]);
                yp[oy * 2 * w + ox] = static_cast<S>(v);
            }
        }
    }
    return y;
}

template <typename S>
TensorT<S> bilinear_upsample2_vjp(const Shape& in_shape, const TensorT<S>& g) {
    std::size_t b = in_shape[0], c = in_shape[1], h = in_shape[2], w = in_shape[3];
    TensorT<S> gx(in_shape);
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        const S* gp = g.data() + bc * 4 * h * w;
        S* gxp = gx.data() + bc * h * w;
        for (std::size_t oy = 0; oy < 2 * h; ++oy) {
            auto ty = detail::upsample_tap(oy, h);
            for (std::size_t ox = 0; ox < 2 * w; ++ox) {
                auto tx = detail::upsample_tap(ox, w);
                double go = gp[oy * 2 * w + ox];
                gxp[ty.i0 * w + tx.i0] += static_cast<S>((1 - ty.w1) * (1 - tx.w1) * go);
                gxp[ty.i0 * w + tx.i1] += static_cast<S>((1 - ty.w1) * tx.w1 * go);
                gxp[ty.i1 * w + tx.i0] += static_cast<S>(ty.w1 * (1 - tx.w1) * go);
                gxp[ty.i1 * w + tx.i1] += static_cast<S>(ty.w1 * tx.w1 * go);
            }
        }
    }
    return gx;
}

// -------------------------------------------------------------- normalization

// group normalization over [b,c,h,w]; per (batch, group) statistics
template <typename S>
TensorT<S> group_norm(const TensorT<S>& x, std::size_t groups, const TensorT<S>& gamma,
                      const TensorT<S>& beta, S eps) {
    if (x.ndim() != 4) throw ShapeError("group_norm: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    if (groups == 0 || c % groups != 0)
        throw ShapeError("group_norm: channel count " + std::to_string(c) +
                         " not divisible by groups " + std::to_string(groups));
    if (gamma.size() != c || beta.size() != c) throw ShapeError("group_norm: affine length mismatch");
    std::size_t cg = c / groups, n = cg * hw;
    TensorT<S> y(x.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const S* xp = x.data() + (bi * c + gi * cg) * hw;
            S mean = 0;
            for (std::size_t i = 0; i < n; ++i) mean += xp[i];
            mean /= static_cast<S>(n);
            S var = 0;
            for (std::size_t i = 0; i < n; ++i) {
                S d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<S>(n);
            S inv = S(1) / std::sqrt(var + eps);
            S* yp = y.data() + (bi * c + gi * cg) * hw;
            for (std::size_t ci = 0; ci < cg; ++ci) {
                S gm = gamma[gi * cg + ci], bt = beta[gi * cg + ci];
                for (std::size_t i = 0; i < hw; ++i)
                    yp[ci * hw + i] = (xp[ci * hw + i] - mean) * inv * gm + bt;
            }
        }
    return y;
}

template <typename S>
struct NormGrads {
    TensorT<S> x, gamma, beta;
};

template <typename S>
NormGrads<S> group_norm_vjp(const TensorT<S>& x, std::size_t groups, const TensorT<S>& gamma,
                            S eps, const TensorT<S>& g) {
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    std::size_t cg = c / groups, n = cg * hw;
    NormGrads<S> out{TensorT<S>(x.shape()), TensorT<S>({c}), TensorT<S>({c})};
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t gi = 0; gi < groups; ++gi) {
            const S* xp = x.data() + (bi * c + gi * cg) * hw;
            const S* gp = g.data() + (bi * c + gi * cg) * hw;
            S mean = 0;
            for (std::size_t i = 0; i < n; ++i) mean += xp[i];
            mean /= static_cast<S>(n);
            S var = 0;
            for (std::size_t i = 0; i < n; ++i) {
                S d = xp[i] - mean;
                var += d * d;
            }
            var /= static_cast<S>(n);
            S inv = S(1) / std::sqrt(var + eps);
            // accumulate dxhat sums for the mean/variance terms
            S sum_dxhat = 0, sum_dxhat_xhat = 0;
            for (std::size_t ci = 0; ci < cg; ++ci) {
                S gm = gamma[gi * cg + ci];
                for (std::size_t i = 0; i < hw; ++i) {
                    S xhat = (xp[ci * hw + i] - mean) * inv;
                    S dxhat = gp[ci * hw + i] * gm;
                    sum_dxhat += dxhat;
                    sum_dxhat_xhat += dxhat * xhat;
                    out.gamma[gi * cg + ci] += gp[ci * hw + i] * xhat;
                    out.beta[gi * cg + ci] += gp[ci * hw + i];
                }
            }
            S* gxp = out.x.data() + (bi * c + gi * cg) * hw;
            S invn = S(1) / static_cast<S>(n);
            for (std::size_t ci = 0; ci < cg; ++ci) {
                S gm = gamma[gi * cg + ci];
                for (std::size_t i = 0; i < hw; ++i) {
                    S xhat = (xp[ci * hw + i] - mean) * inv;
                    S dxhat = gp[ci * hw + i] * gm;
                    gxp[ci * hw + i] = inv * (dxhat - invn * sum_dxhat - invn * xhat * sum_dxhat_xhat);
                }
            }
        }
    return out;
}

// layer normalization over the channel axis of [b,l,c]
template <typename S>
TensorT<S> layer_norm_seq(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta,
                          S eps) {
    if (x.ndim() != 3) throw ShapeError("layer_norm_seq: want [b,l,c]");
    std::size_t rows = x.extent(0) * x.extent(1), c = x.extent(2);
    if (gamma.size() != c || beta.size() != c) throw ShapeError("layer_norm_seq: affine length mismatch");
    TensorT<S> y(x.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xp = x.data() + r * c;
        S* yp = y.data() + r * c;
        S mean = 0;
        for (std::size_t i = 0; i < c; ++i) mean += xp[i];
        mean /= static_cast<S>(c);
        S var = 0;
        for (std::size_t i = 0; i < c; ++i) {
            S d = xp[i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(c);
        S inv = S(1) / std::sqrt(var + eps);
        for (std::size_t i = 0; i < c; ++i) yp[i] = (xp[i] - mean) * inv * gamma[i] + beta[i];
    }
    return y;
}

template <typename S>
NormGrads<S> layer_norm_seq_vjp(const TensorT<S>& x, const TensorT<S>& gamma, S eps,
                                const TensorT<S>& g) {
    std::size_t rows = x.extent(0) * x.extent(1), c = x.extent(2);
    NormGrads<S> out{TensorT<S>(x.shape()), TensorT<S>({c}), TensorT<S>({c})};
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xp = x.data() + r * c;
        const S* gp = g.data() + r * c;
        S* gxp = out.x.data() + r * c;
        S mean = 0;
        for (std::size_t i = 0; i < c; ++i) mean += xp[i];
        mean /= static_cast<S>(c);
        S var = 0;
        for (std::size_t i = 0; i < c; ++i) {
            S d = xp[i] - mean;
            var += d * d;
        }
        var /= static_cast<S>(c);
        S inv = S(1) / std::sqrt(var + eps);
        S sum_dxhat = 0, sum_dxhat_xhat = 0;
        for (std::size_t i = 0; i < c; ++i) {
            S xhat = (xp[i] - mean) * inv;
            S dxhat = gp[i] * gamma[i];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            out.gamma[i] += gp[i] * xhat;
            out.beta[i] += gp[i];
        }
        S invc = S(1) / static_cast<S>(c);
        for (std::size_t i = 0; i < c; ++i) {
            S xhat = (xp[i] - mean) * inv;
            S dxhat = gp[i] * gamma[i];
            gxp[i] = inv * (dxhat - invc * sum_dxhat - invc * xhat * sum_dxhat_xhat);
        }
    }
    return out;
}

// --------------------------------------------------- pooled maps / broadcasts

// mean over channels -> [b,1,h,w]
template <typename S>
TensorT<S> channel_mean_map(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("channel_mean_map: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> y({b, 1, x.extent(2), x.extent(3)});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < hw; ++i) {
            S acc = 0;
            for (std::size_t ci = 0; ci < c; ++ci) acc += x.data()[(bi * c + ci) * hw + i];
            y.data()[bi * hw + i] = acc / static_cast<S>(c);
        }
    return y;
}

template <typename S>
TensorT<S> channel_mean_map_vjp(const Shape& in_shape, const TensorT<S>& g) {
    std::size_t b = in_shape[0], c = in_shape[1], hw = in_shape[2] * in_shape[3];
    TensorT<S> gx(in_shape);
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < hw; ++i) {
            S v = g.data()[bi * hw + i] / static_cast<S>(c);
            for (std::size_t ci = 0; ci < c; ++ci) gx.data()[(bi * c + ci) * hw + i] = v;
        }
    return gx;
}

// max over channels -> [b,1,h,w]; adjoint routes to the first max channel
template <typename S>
TensorT<S> channel_max_map(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("channel_max_map: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> y({b, 1, x.extent(2), x.extent(3)});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < hw; ++i) {
            S m = x.data()[bi * c * hw + i];
            for (std::size_t ci = 1; ci < c; ++ci)
                m = std::max(m, x.data()[(bi * c + ci) * hw + i]);
            y.data()[bi * hw + i] = m;
        }
    return y;
}

template <typename S>
TensorT<S> channel_max_map_vjp(const TensorT<S>& x, const TensorT<S>& g) {
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> gx(x.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < hw; ++i) {
            std::size_t best = 0;
            S m = x.data()[bi * c * hw + i];
            for (std::size_t ci = 1; ci < c; ++ci)
                if (x.data()[(bi * c + ci) * hw + i] > m) {
                    m = x.data()[(bi * c + ci) * hw + i];
                    best = ci;
                }
            gx.data()[(bi * c + best) * hw + i] += g.data()[bi * hw + i];
        }
    return gx;
}

// global average pool -> [b,c]
template <typename S>
TensorT<S> global_avg_pool(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("global_avg_pool: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> y({b, c});
    for (std::size_t bc = 0; bc < b * c; ++bc) {
        S acc = 0;
        const S* xp = x.data() + bc * hw;
        for (std::size_t i = 0; i < hw; ++i) acc += xp[i];
        y[bc] = acc / static_cast<S>(hw);
    }
    return y;
}

template <typename S>
TensorT<S> global_avg_pool_vjp(const Shape& in_shape, const TensorT<S>& g) {
    std::size_t hw = in_shape[2] * in_shape[3];
    TensorT<S> gx(in_shape);
    for (std::size_t bc = 0; bc < in_shape[0] * in_shape[1]; ++bc) {
        S v = g[bc] / static_cast<S>(hw);
        S* p = gx.data() + bc * hw;
        for (std::size_t i = 0; i < hw; ++i) p[i] = v;
    }
    return gx;
}

// x[b,c,h,w] * m[b,1,h,w], mask broadcast over channels
template <typename S>
TensorT<S> mul_mask(const TensorT<S>& x, const TensorT<S>& m) {
    if (x.ndim() != 4 || m.ndim() != 4 || m.extent(1) != 1 || m.extent(0) != x.extent(0) ||
        m.extent(2) != x.extent(2) || m.extent(3) != x.extent(3))
        throw ShapeError("mul_mask: want [b,c,h,w] and [b,1,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> y(x.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < hw; ++i)
                y.data()[(bi * c + ci) * hw + i] =
                    x.data()[(bi * c + ci) * hw + i] * m.data()[bi * hw + i];
    return y;
}

template <typename S>
std::pair<TensorT<S>, TensorT<S>> mul_mask_vjp(const TensorT<S>& x, const TensorT<S>& m,
                                               const TensorT<S>& g) {
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> gx(x.shape()), gm(m.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < hw; ++i) {
                S go = g.data()[(bi * c + ci) * hw + i];
                gx.data()[(bi * c + ci) * hw + i] = go * m.data()[bi * hw + i];
                gm.data()[bi * hw + i] += go * x.data()[(bi * c + ci) * hw + i];
            }
    return {std::move(gx), std::move(gm)};
}

// x[b,c,h,w] * w[b,c], per-channel scalar gate
template <typename S>
TensorT<S> mul_channel_weights(const TensorT<S>& x, const TensorT<S>& w) {
    if (x.ndim() != 4 || w.ndim() != 2 || w.extent(0) != x.extent(0) || w.extent(1) != x.extent(1))
        throw ShapeError("mul_channel_weights: want [b,c,h,w] and [b,c]");
    std::size_t hw = x.extent(2) * x.extent(3);
    TensorT<S> y(x.shape());
    for (std::size_t bc = 0; bc < x.extent(0) * x.extent(1); ++bc) {
        S wv = w[bc];
        const S* xp = x.data() + bc * hw;
        S* yp = y.data() + bc * hw;
        for (std::size_t i = 0; i < hw; ++i) yp[i] = xp[i] * wv;
    }
    return y;
}

template <typename S>
std::pair<TensorT<S>, TensorT<S>> mul_channel_weights_vjp(const TensorT<S>& x, const TensorT<S>& w,
                                                          const TensorT<S>& g) {
    std::size_t hw = x.extent(2) * x.extent(3);
    TensorT<S> gx(x.shape()), gw(w.shape());
    for (std::size_t bc = 0; bc < x.extent(0) * x.extent(1); ++bc) {
        S wv = w[bc];
        const S* xp = x.data() + bc * hw;
        const S* gp = g.data() + bc * hw;
        S* gxp = gx.data() + bc * hw;
        S acc = 0;
        for (std::size_t i = 0; i < hw; ++i) {
            gxp[i] = gp[i] * wv;
            acc += gp[i] * xp[i];
        }
        gw[bc] = acc;
    }
    return {std::move(gx), std::move(gw)};
}

// ------------------------------------------------- image <-> sequence layout

// [b,c,h,w] -> [b, h*w, c], row-major over (h, w)
template <typename S>
TensorT<S> seq_from_image(const TensorT<S>& x) {
    if (x.ndim() != 4) throw ShapeError("seq_from_image: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), hw = x.extent(2) * x.extent(3);
    TensorT<S> y({b, hw, c});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < hw; ++i)
                y.data()[(bi * hw + i) * c + ci] = x.data()[(bi * c + ci) * hw + i];
    return y;
}

template <typename S>
TensorT<S> image_from_seq(const TensorT<S>& x, std::size_t h, std::size_t w) {
    if (x.ndim() != 3 || x.extent(1) != h * w) throw ShapeError("image_from_seq: want [b,h*w,c]");
    std::size_t b = x.extent(0), c = x.extent(2), hw = h * w;
    TensorT<S> y({b, c, h, w});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t i = 0; i < hw; ++i)
                y.data()[(bi * c + ci) * hw + i] = x.data()[(bi * hw + i) * c + ci];
    return y;
}

}  // namespace cdmamba
