#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <utility>
#include <vector>

#include "cdmamba/tensor.hpp"
#include "cdmamba/threading.hpp"

// Elementwise, axis, linear-algebra primitives and their adjoints.
// Every *_vjp is a pure function of forward inputs/outputs and the output
// cotangent; nothing here touches global state.

namespace cdmamba {

// ---------------------------------------------------------------- elementwise

template <typename S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "add");
    TensorT<S> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] + b[i];
    return y;
}

template <typename S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "sub");
    TensorT<S> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] - b[i];
    return y;
}

template <typename S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    require_same_shape(a, b, "mul");
    TensorT<S> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * b[i];
    return y;
}

template <typename S>
TensorT<S> scale(const TensorT<S>& a, S alpha) {
    TensorT<S> y(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) y[i] = a[i] * alpha;
    return y;
}

// ---------------------------------------------------------------- activations

template <typename S>
S sigmoid_scalar(S x) {
    // split by sign so large |x| never overflows exp
    if (x >= S(0)) {
        S e = std::exp(-x);
        return S(1) / (S(1) + e);
    }
    S e = std::exp(x);
    return e / (S(1) + e);
}

template <typename S>
S softplus_scalar(S x) {
    if (x > S(30)) return x;
    return std::log1p(std::exp(x));
}

inline double norm_cdf(double x) { return 0.5 * (1.0 + std::erf(x * 0.7071067811865475244)); }
inline double norm_pdf(double x) { return std::exp(-0.5 * x * x) * 0.3989422804014326779; }

template <typename S>
TensorT<S> sigmoid(const TensorT<S>& x) {
    TensorT<S> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = sigmoid_scalar(x[i]);
    return y;
}

// d sigmoid = y (1 - y), from the forward output
template <typename S>
TensorT<S> sigmoid_vjp(const TensorT<S>& y, const TensorT<S>& g) {
    TensorT<S> gx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) gx[i] = g[i] * y[i] * (S(1) - y[i]);
    return gx;
}

// exact GELU: x * Phi(x)
template <typename S>
TensorT<S> gelu(const TensorT<S>& x) {
    TensorT<S> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i)
        y[i] = static_cast<S>(static_cast<double>(x[i]) * norm_cdf(static_cast<double>(x[i])));
    return y;
}

template <typename S>
TensorT<S> gelu_vjp(const TensorT<S>& x, const TensorT<S>& g) {
    TensorT<S> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        double v = static_cast<double>(x[i]);
        gx[i] = g[i] * static_cast<S>(norm_cdf(v) + v * norm_pdf(v));
    }
    return gx;
}

template <typename S>
TensorT<S> silu(const TensorT<S>& x) {
    TensorT<S> y(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] * sigmoid_scalar(x[i]);
    return y;
}

template <typename S>
TensorT<S> silu_vjp(const TensorT<S>& x, const TensorT<S>& g) {
    TensorT<S> gx(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        S s = sigmoid_scalar(x[i]);
        gx[i] = g[i] * (s + x[i] * s * (S(1) - s));
    }
    return gx;
}

// ------------------------------------------------------------- axis utilities

template <typename S>
TensorT<S> reshape(const TensorT<S>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.size())
        throw ShapeError("reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                         shape_str(new_shape));
    return TensorT<S>(std::move(new_shape), std::vector<S>(x.data(), x.data() + x.size()));
}

namespace detail {

inline void axis_strides(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& mid,
                         std::size_t& inner) {
    outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    mid = s[axis];
    inner = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename S>
TensorT<S> flip(const TensorT<S>& x, std::size_t axis) {
    if (axis >= x.ndim()) throw ShapeError("flip: axis out of range");
    std::size_t outer, mid, inner;
    detail::axis_strides(x.shape(), axis, outer, mid, inner);
    TensorT<S> y(x.shape());
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const S* src = x.data() + (o * mid + m) * inner;
            S* dst = y.data() + (o * mid + (mid - 1 - m)) * inner;
            std::copy(src, src + inner, dst);
        }
    return y;
}

template <typename S>
TensorT<S> slice_axis(const TensorT<S>& x, std::size_t axis, std::size_t begin, std::size_t len) {
    if (axis >= x.ndim()) throw ShapeError("slice_axis: axis out of range");
    if (begin + len > x.extent(axis)) throw ShapeError("slice_axis: range out of bounds");
    std::size_t outer, mid, inner;
    detail::axis_strides(x.shape(), axis, outer, mid, inner);
    Shape ps = x.shape();
    ps[axis] = len;
    TensorT<S> y(ps);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < len; ++m) {
            const S* src = x.data() + (o * mid + begin + m) * inner;
            std::copy(src, src + inner, y.data() + (o * len + m) * inner);
        }
    return y;
}

// scatter the slice gradient back into a zero tensor of the source shape
template <typename S>
TensorT<S> slice_axis_vjp(const Shape& in_shape, std::size_t axis, std::size_t begin,
                          const TensorT<S>& g) {
    std::size_t outer, mid, inner;
    detail::axis_strides(in_shape, axis, outer, mid, inner);
    std::size_t len = g.extent(axis);
    TensorT<S> gx(in_shape);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < len; ++m) {
            const S* src = g.data() + (o * len + m) * inner;
            std::copy(src, src + inner, gx.data() + (o * mid + begin + m) * inner);
        }
    return gx;
}

template <typename S>
std::vector<TensorT<S>> split(const TensorT<S>& x, std::size_t axis, std::size_t parts) {
    if (axis >= x.ndim()) throw ShapeError("split: axis out of range");
    if (parts == 0 || x.extent(axis) % parts != 0)
        throw ShapeError("split: extent " + std::to_string(x.extent(axis)) +
                         " not divisible into " + std::to_string(parts) + " parts");
    std::size_t outer, mid, inner;
    detail::axis_strides(x.shape(), axis, outer, mid, inner);
    std::size_t piece = mid / parts;
    Shape ps = x.shape();
    ps[axis] = piece;
    std::vector<TensorT<S>> out(parts, TensorT<S>(ps));
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t p = 0; p < parts; ++p)
            for (std::size_t m = 0; m < piece; ++m) {
                const S* src = x.data() + (o * mid + p * piece + m) * inner;
                S* dst = out[p].data() + (o * piece + m) * inner;
                std::copy(src, src + inner, dst);
            }
    return out;
}

template <typename S>
TensorT<S> concat(const std::vector<TensorT<S>>& parts, std::size_t axis) {
    if (parts.empty()) throw ShapeError("concat: no inputs");
    const Shape& s0 = parts[0].shape();
    if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
    std::size_t total = 0;
    for (const auto& p : parts) {
        if (p.ndim() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (i != axis && p.shape()[i] != s0[i])
                throw ShapeError("concat: extent mismatch on axis " + std::to_string(i));
        total += p.extent(axis);
    }
    Shape ys = s0;
    ys[axis] = total;
    TensorT<S> y(ys);
    std::size_t outer, mid, inner;
    detail::axis_strides(ys, axis, outer, mid, inner);
    for (std::size_t o = 0; o < outer; ++o) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            std::size_t pm = p.extent(axis);
            const S* src = p.data() + o * pm * inner;
            S* dst = y.data() + (o * mid + off) * inner;
            std::copy(src, src + pm * inner, dst);
            off += pm;
        }
    }
    return y;
}

// slice of the concat adjoint: which input owns which span
template <typename S>
std::vector<TensorT<S>> concat_vjp(const std::vector<Shape>& part_shapes, std::size_t axis,
                                   const TensorT<S>& g) {
    std::vector<TensorT<S>> grads;
    grads.reserve(part_shapes.size());
    std::size_t outer, mid, inner;
    detail::axis_strides(g.shape(), axis, outer, mid, inner);
    std::size_t off = 0;
    for (const Shape& ps : part_shapes) {
        std::size_t pm = ps[axis];
        TensorT<S> gp(ps);
        for (std::size_t o = 0; o < outer; ++o) {
            const S* src = g.data() + (o * mid + off) * inner;
            S* dst = gp.data() + o * pm * inner;
            std::copy(src, src + pm * inner, dst);
        }
        off += pm;
        grads.push_back(std::move(gp));
    }
    return grads;
}

template <typename S>
TensorT<S> permute_axes(const TensorT<S>& x, const std::vector<std::size_t>& perm) {
    if (perm.size() != x.ndim()) throw ShapeError("permute_axes: rank mismatch");
    Shape ys(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) ys[i] = x.extent(perm[i]);
    TensorT<S> y(ys);
    std::size_t r = x.ndim();
    std::vector<std::size_t> xstr(r, 1), ystr(r, 1);
    for (std::size_t i = r; i-- > 1;) xstr[i - 1] = xstr[i] * x.shape()[i];
    for (std::size_t i = r; i-- > 1;) ystr[i - 1] = ystr[i] * ys[i];
    std::vector<std::size_t> idx(r, 0);
    for (std::size_t flat = 0; flat < y.size(); ++flat) {
        std::size_t rem = flat, src = 0;
        for (std::size_t i = 0; i < r; ++i) {
            std::size_t c = rem / ystr[i];
            rem %= ystr[i];
            src += c * xstr[perm[i]];
        }
        y[flat] = x[src];
    }
    return y;
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
    std::vector<std::size_t> inv(perm.size());
    for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    return inv;
}

// y[:, i, :] = x[:, perm[i], :]   (sequence reordering on [b, l, c])
template <typename S>
TensorT<S> permute_positions(const TensorT<S>& x, const std::vector<std::size_t>& perm) {
    if (x.ndim() != 3) throw ShapeError("permute_positions: want rank-3 [b,l,c]");
    std::size_t b = x.extent(0), l = x.extent(1), c = x.extent(2);
    if (perm.size() != l) throw ShapeError("permute_positions: permutation length mismatch");
    TensorT<S> y(x.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < l; ++i) {
            const S* src = x.data() + (bi * l + perm[i]) * c;
            S* dst = y.data() + (bi * l + i) * c;
            std::copy(src, src + c, dst);
        }
    return y;
}

template <typename S>
TensorT<S> permute_positions_vjp(const std::vector<std::size_t>& perm, const TensorT<S>& g) {
    std::size_t b = g.extent(0), l = g.extent(1), c = g.extent(2);
    TensorT<S> gx(g.shape());
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < l; ++i) {
            const S* src = g.data() + (bi * l + i) * c;
            S* dst = gx.data() + (bi * l + perm[i]) * c;
            for (std::size_t k = 0; k < c; ++k) dst[k] += src[k];
        }
    return gx;
}

// --------------------------------------------------------------- linear maps

// affine map applied independently at every (b, l) position
template <typename S>
TensorT<S> channel_linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>* bias) {
    if (x.ndim() != 3 || w.ndim() != 2) throw ShapeError("channel_linear: want [b,l,cin], [cout,cin]");
    std::size_t b = x.extent(0), l = x.extent(1), cin = x.extent(2);
    std::size_t cout = w.extent(0);
    if (w.extent(1) != cin) throw ShapeError("channel_linear: cin mismatch");
    if (bias && bias->size() != cout) throw ShapeError("channel_linear: bias length mismatch");
    TensorT<S> y({b, l, cout});
    std::size_t rows = b * l;
    parallel_for(rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            const S* xi = x.data() + r * cin;
            S* yi = y.data() + r * cout;
            for (std::size_t o = 0; o < cout; ++o) {
                S acc = bias ? (*bias)[o] : S(0);
                const S* wr = w.data() + o * cin;
                for (std::size_t k = 0; k < cin; ++k) acc += wr[k] * xi[k];
                yi[o] = acc;
            }
        }
    }, 64);
    return y;
}

template <typename S>
TensorT<S> channel_linear(const TensorT<S>& x, const TensorT<S>& w) {
    return channel_linear(x, w, static_cast<const TensorT<S>*>(nullptr));
}

template <typename S>
struct LinearGrads {
    TensorT<S> x, w, bias;
};

template <typename S>
LinearGrads<S> channel_linear_vjp(const TensorT<S>& x, const TensorT<S>& w, bool has_bias,
                                  const TensorT<S>& g) {
    std::size_t b = x.extent(0), l = x.extent(1), cin = x.extent(2);
    std::size_t cout = w.extent(0);
    LinearGrads<S> out{TensorT<S>(x.shape()), TensorT<S>(w.shape()),
                       has_bias ? TensorT<S>({cout}) : TensorT<S>()};
    std::size_t rows = b * l;
    for (std::size_t r = 0; r < rows; ++r) {
        const S* xi = x.data() + r * cin;
        const S* gi = g.data() + r * cout;
        S* gxi = out.x.data() + r * cin;
        for (std::size_t o = 0; o < cout; ++o) {
            S go = gi[o];
            const S* wr = w.data() + o * cin;
            S* gwr = out.w.data() + o * cin;
            for (std::size_t k = 0; k < cin; ++k) {
                gxi[k] += wr[k] * go;
                gwr[k] += xi[k] * go;
            }
            if (has_bias) out.bias[o] += go;
        }
    }
    return out;
}

// batched matmul: [b,m,k] x [b,k,n] -> [b,m,n]
template <typename S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b) {
    if (a.ndim() != 3 || b.ndim() != 3 || a.extent(0) != b.extent(0) || a.extent(2) != b.extent(1))
        throw ShapeError("matmul: want [b,m,k] x [b,k,n]");
    std::size_t nb = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    TensorT<S> y({nb, m, n});
    parallel_for(nb * m, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            std::size_t bi = r / m, mi = r % m;
            const S* arow = a.data() + (bi * m + mi) * k;
            S* yrow = y.data() + (bi * m + mi) * n;
            for (std::size_t ki = 0; ki < k; ++ki) {
                S av = arow[ki];
                const S* brow = b.data() + (bi * k + ki) * n;
                for (std::size_t ni = 0; ni < n; ++ni) yrow[ni] += av * brow[ni];
            }
        }
    }, 16);
    return y;
}

template <typename S>
TensorT<S> transpose_12(const TensorT<S>& x) {
    if (x.ndim() != 3) throw ShapeError("transpose_12: want rank-3");
    std::size_t b = x.extent(0), m = x.extent(1), n = x.extent(2);
    TensorT<S> y({b, n, m});
    for (std::size_t bi = 0; bi < b; ++bi)
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) y.at3(bi, j, i) = x.at3(bi, i, j);
    return y;
}

template <typename S>
std::pair<TensorT<S>, TensorT<S>> matmul_vjp(const TensorT<S>& a, const TensorT<S>& b,
                                             const TensorT<S>& g) {
    // ga = g b^T, gb = a^T g
    return {matmul(g, transpose_12(b)), matmul(transpose_12(a), g)};
}

// ------------------------------------------------------------------ softmax

// softmax over the last axis of [b,m,n]
template <typename S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    if (x.ndim() != 3) throw ShapeError("softmax_rows: want rank-3");
    std::size_t rows = x.extent(0) * x.extent(1), n = x.extent(2);
    TensorT<S> y(x.shape());
    parallel_for(rows, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t r = lo; r < hi; ++r) {
            const S* xi = x.data() + r * n;
            S* yi = y.data() + r * n;
            S mx = xi[0];
            for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xi[j]);
            S sum = 0;
            for (std::size_t j = 0; j < n; ++j) {
                yi[j] = std::exp(xi[j] - mx);
                sum += yi[j];
            }
            S inv = S(1) / sum;
            for (std::size_t j = 0; j < n; ++j) yi[j] *= inv;
        }
    }, 64);
    return y;
}

template <typename S>
TensorT<S> softmax_rows_vjp(const TensorT<S>& y, const TensorT<S>& g) {
    std::size_t rows = y.extent(0) * y.extent(1), n = y.extent(2);
    TensorT<S> gx(y.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        const S* yi = y.data() + r * n;
        const S* gi = g.data() + r * n;
        S* gxi = gx.data() + r * n;
        S dot = 0;
        for (std::size_t j = 0; j < n; ++j) dot += yi[j] * gi[j];
        for (std::size_t j = 0; j < n; ++j) gxi[j] = yi[j] * (gi[j] - dot);
    }
    return gx;
}

// ----------------------------------------------------------------- reductions

template <typename S>
TensorT<S> mean_all(const TensorT<S>& x) {
    S acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return TensorT<S>::scalar(acc / static_cast<S>(x.size()));
}

template <typename S>
TensorT<S> mean_all_vjp(const Shape& in_shape, const TensorT<S>& g) {
    TensorT<S> gx(in_shape);
    S v = g[0] / static_cast<S>(gx.size());
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] = v;
    return gx;
}

template <typename S>
TensorT<S> sum_all(const TensorT<S>& x) {
    S acc = 0;
    for (std::size_t i = 0; i < x.size(); ++i) acc += x[i];
    return TensorT<S>::scalar(acc);
}

}  // namespace cdmamba
