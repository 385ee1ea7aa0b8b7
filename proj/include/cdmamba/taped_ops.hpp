#pragma once

#include <cstddef>
#include <optional>
#include <utility>
#include <vector>

#include "cdmamba/ops_basic.hpp"
#include "cdmamba/ops_image.hpp"
#include "cdmamba/tape.hpp"

// Differentiable wrappers. Each calls the pure forward, pushes the result, and
// registers a closure that feeds the matching *_vjp and routes pieces to the
// parents. Closures capture node ids, never tensors, except where the vjp
// needs a value the tape no longer exposes cheaply.

namespace cdmamba::ad {

template <typename S>
VarT<S> add(VarT<S> a, VarT<S> b) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id, ib = b.id;
    std::size_t id = t.push(cdmamba::add(t.value(ia), t.value(ib)),
                            [ia, ib](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, g);
                                tp.accumulate(ib, g);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> sub(VarT<S> a, VarT<S> b) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id, ib = b.id;
    std::size_t id = t.push(cdmamba::sub(t.value(ia), t.value(ib)),
                            [ia, ib](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, g);
                                TensorT<S> ng = g;
                                for (std::size_t i = 0; i < ng.size(); ++i) ng[i] = -ng[i];
                                tp.accumulate(ib, ng);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> mul(VarT<S> a, VarT<S> b) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id, ib = b.id;
    std::size_t id = t.push(cdmamba::mul(t.value(ia), t.value(ib)),
                            [ia, ib](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::mul(g, tp.value(ib)));
                                tp.accumulate(ib, cdmamba::mul(g, tp.value(ia)));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> scale(VarT<S> a, S k) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t id = t.push(cdmamba::scale(t.value(ia), k),
                            [ia, k](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::scale(g, k));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> sigmoid(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t self = t.size();  // vjp reads the output node itself
    std::size_t id = t.push(cdmamba::sigmoid(t.value(ia)),
                            [ia, self](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::sigmoid_vjp(tp.value(self), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> gelu(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t id = t.push(cdmamba::gelu(t.value(ia)),
                            [ia](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::gelu_vjp(tp.value(ia), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> silu(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t id = t.push(cdmamba::silu(t.value(ia)),
                            [ia](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::silu_vjp(tp.value(ia), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> reshape(VarT<S> a, const Shape& shape) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    Shape orig = t.value(ia).shape();
    std::size_t id = t.push(cdmamba::reshape(t.value(ia), shape),
                            [ia, orig](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::reshape(g, orig));
                            });
    return {&t, id};
}

template <typename S>
std::vector<VarT<S>> split(VarT<S> a, std::size_t axis, std::size_t parts) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::vector<TensorT<S>> pieces = cdmamba::split(t.value(ia), axis, parts);
    std::vector<VarT<S>> out;
    for (std::size_t p = 0; p < parts; ++p) {
        std::size_t id = t.push(std::move(pieces[p]),
                                [ia, axis, parts, p](Tape<S>& tp, const TensorT<S>& g) {
                                    // scatter this part's gradient back into a zero block
                                    const TensorT<S>& xv = tp.value(ia);
                                    std::vector<TensorT<S>> gs;
                                    Shape psh = g.shape();
                                    for (std::size_t q = 0; q < parts; ++q)
                                        gs.push_back(q == p ? g : TensorT<S>(psh));
                                    TensorT<S> full = cdmamba::concat(gs, axis);
                                    require_same_shape(full, xv, "split vjp");
                                    tp.accumulate(ia, full);
                                });
        out.push_back({&t, id});
    }
    return out;
}

template <typename S>
VarT<S> slice_axis(VarT<S> a, std::size_t axis, std::size_t begin, std::size_t len) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    Shape orig = t.value(ia).shape();
    std::size_t id = t.push(cdmamba::slice_axis(t.value(ia), axis, begin, len),
                            [ia, axis, begin, orig](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::slice_axis_vjp(orig, axis, begin, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> concat(const std::vector<VarT<S>>& parts, std::size_t axis) {
    Tape<S>& t = *parts.front().tape;
    std::vector<TensorT<S>> vals;
    std::vector<std::size_t> ids;
    std::vector<Shape> shapes;
    for (const auto& p : parts) {
        vals.push_back(t.value(p.id));
        ids.push_back(p.id);
        shapes.push_back(t.value(p.id).shape());
    }
    std::size_t id = t.push(cdmamba::concat(vals, axis),
                            [ids, shapes, axis](Tape<S>& tp, const TensorT<S>& g) {
                                std::vector<TensorT<S>> gs = cdmamba::concat_vjp(shapes, axis, g);
                                for (std::size_t i = 0; i < ids.size(); ++i)
                                    tp.accumulate(ids[i], gs[i]);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> permute_positions(VarT<S> a, const std::vector<std::size_t>& perm) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t id = t.push(cdmamba::permute_positions(t.value(ia), perm),
                            [ia, perm](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::permute_positions_vjp(perm, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> channel_linear(VarT<S> x, VarT<S> w, std::optional<VarT<S>> bias) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, iw = w.id;
    std::optional<std::size_t> ibias;
    if (bias) ibias = bias->id;
    const TensorT<S>* bp = bias ? &t.value(*ibias) : nullptr;
    std::size_t id = t.push(cdmamba::channel_linear(t.value(ix), t.value(iw), bp),
                            [ix, iw, ibias](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::channel_linear_vjp(tp.value(ix), tp.value(iw),
                                                                     ibias.has_value(), g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(iw, gr.w);
                                if (ibias) tp.accumulate(*ibias, gr.bias);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> channel_linear(VarT<S> x, VarT<S> w) {
    return channel_linear(x, w, std::optional<VarT<S>>());
}

template <typename S>
VarT<S> matmul(VarT<S> a, VarT<S> b) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id, ib = b.id;
    std::size_t id = t.push(cdmamba::matmul(t.value(ia), t.value(ib)),
                            [ia, ib](Tape<S>& tp, const TensorT<S>& g) {
                                auto [ga, gb] = cdmamba::matmul_vjp(tp.value(ia), tp.value(ib), g);
                                tp.accumulate(ia, ga);
                                tp.accumulate(ib, gb);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> transpose_12(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t id = t.push(cdmamba::transpose_12(t.value(ia)),
                            [ia](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::transpose_12(g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> softmax_rows(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    std::size_t self = t.size();
    std::size_t id = t.push(cdmamba::softmax_rows(t.value(ia)),
                            [ia, self](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::softmax_rows_vjp(tp.value(self), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> mean_all(VarT<S> a) {
    Tape<S>& t = *a.tape;
    std::size_t ia = a.id;
    Shape sh = t.value(ia).shape();
    std::size_t id = t.push(cdmamba::mean_all(t.value(ia)),
                            [ia, sh](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ia, cdmamba::mean_all_vjp(sh, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> conv2d(VarT<S> x, VarT<S> w, std::optional<VarT<S>> bias, const Conv2dSpec& sp) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, iw = w.id;
    std::optional<std::size_t> ibias;
    if (bias) ibias = bias->id;
    const TensorT<S>* bp = bias ? &t.value(*ibias) : nullptr;
    std::size_t id = t.push(cdmamba::conv2d(t.value(ix), t.value(iw), bp, sp),
                            [ix, iw, ibias, sp](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::conv2d_vjp(tp.value(ix), tp.value(iw),
                                                              ibias.has_value(), sp, g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(iw, gr.w);
                                if (ibias) tp.accumulate(*ibias, gr.bias);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> conv1d_k3(VarT<S> x, VarT<S> w, std::optional<VarT<S>> bias) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, iw = w.id;
    std::optional<std::size_t> ibias;
    if (bias) ibias = bias->id;
    const TensorT<S>* bp = bias ? &t.value(*ibias) : nullptr;
    std::size_t id = t.push(cdmamba::conv1d_k3(t.value(ix), t.value(iw), bp),
                            [ix, iw, ibias](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::conv1d_k3_vjp(tp.value(ix), tp.value(iw),
                                                                 ibias.has_value(), g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(iw, gr.w);
                                if (ibias) tp.accumulate(*ibias, gr.bias);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> maxpool2(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    std::size_t id = t.push(cdmamba::maxpool2(t.value(ix)),
                            [ix](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::maxpool2_vjp(tp.value(ix), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> bilinear_upsample2(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    Shape sh = t.value(ix).shape();
    std::size_t id = t.push(cdmamba::bilinear_upsample2(t.value(ix)),
                            [ix, sh](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::bilinear_upsample2_vjp(sh, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> group_norm(VarT<S> x, std::size_t groups, VarT<S> gamma, VarT<S> beta, S eps) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
    std::size_t id = t.push(cdmamba::group_norm(t.value(ix), groups, t.value(ig), t.value(ib), eps),
                            [ix, ig, ib, groups, eps](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::group_norm_vjp(tp.value(ix), groups,
                                                                  tp.value(ig), eps, g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(ig, gr.gamma);
                                tp.accumulate(ib, gr.beta);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> layer_norm_seq(VarT<S> x, VarT<S> gamma, VarT<S> beta, S eps) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, ig = gamma.id, ib = beta.id;
    std::size_t id = t.push(cdmamba::layer_norm_seq(t.value(ix), t.value(ig), t.value(ib), eps),
                            [ix, ig, ib, eps](Tape<S>& tp, const TensorT<S>& g) {
                                auto gr = cdmamba::layer_norm_seq_vjp(tp.value(ix), tp.value(ig),
                                                                      eps, g);
                                tp.accumulate(ix, gr.x);
                                tp.accumulate(ig, gr.gamma);
                                tp.accumulate(ib, gr.beta);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> channel_mean_map(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    Shape sh = t.value(ix).shape();
    std::size_t id = t.push(cdmamba::channel_mean_map(t.value(ix)),
                            [ix, sh](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::channel_mean_map_vjp(sh, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> channel_max_map(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    std::size_t id = t.push(cdmamba::channel_max_map(t.value(ix)),
                            [ix](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::channel_max_map_vjp(tp.value(ix), g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> global_avg_pool(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    Shape sh = t.value(ix).shape();
    std::size_t id = t.push(cdmamba::global_avg_pool(t.value(ix)),
                            [ix, sh](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::global_avg_pool_vjp(sh, g));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> mul_mask(VarT<S> x, VarT<S> m) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, im = m.id;
    std::size_t id = t.push(cdmamba::mul_mask(t.value(ix), t.value(im)),
                            [ix, im](Tape<S>& tp, const TensorT<S>& g) {
                                auto [gx, gm] = cdmamba::mul_mask_vjp(tp.value(ix), tp.value(im), g);
                                tp.accumulate(ix, gx);
                                tp.accumulate(im, gm);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> mul_channel_weights(VarT<S> x, VarT<S> w) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id, iw = w.id;
    std::size_t id = t.push(cdmamba::mul_channel_weights(t.value(ix), t.value(iw)),
                            [ix, iw](Tape<S>& tp, const TensorT<S>& g) {
                                auto [gx, gw] =
                                    cdmamba::mul_channel_weights_vjp(tp.value(ix), tp.value(iw), g);
                                tp.accumulate(ix, gx);
                                tp.accumulate(iw, gw);
                            });
    return {&t, id};
}

template <typename S>
VarT<S> seq_from_image(VarT<S> x) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    Shape sh = t.value(ix).shape();
    std::size_t id = t.push(cdmamba::seq_from_image(t.value(ix)),
                            [ix, sh](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::image_from_seq(g, sh[2], sh[3]));
                            });
    return {&t, id};
}

template <typename S>
VarT<S> image_from_seq(VarT<S> x, std::size_t h, std::size_t w) {
    Tape<S>& t = *x.tape;
    std::size_t ix = x.id;
    std::size_t id = t.push(cdmamba::image_from_seq(t.value(ix), h, w),
                            [ix](Tape<S>& tp, const TensorT<S>& g) {
                                tp.accumulate(ix, cdmamba::seq_from_image(g));
                            });
    return {&t, id};
}

}  // namespace cdmamba::ad
