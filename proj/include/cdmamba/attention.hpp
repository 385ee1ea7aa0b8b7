#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "cdmamba/ops_basic.hpp"
#include "cdmamba/ops_image.hpp"
#include "cdmamba/taped_ops.hpp"

// Skip-connection attention. Deep stages use scaled dot-product attention over
// positions and over channels; shallow stages use a pooled spatial mask from a
// shared dilated conv plus a cross-stage channel bridge. Both variants wrap
// the encoder feature as F_pam = PAM(x) + x, F_skip = CAM(F_pam) + F_pam + x.

namespace cdmamba {

inline std::size_t qk_channels(std::size_t c) { return c / 8 > 0 ? c / 8 : 1; }

template <typename S>
struct HeavyDaParamsT {
    // 1x1 projections stored as channel matrices; bias-free
    TensorT<S> q_s, k_s;  // [c/8, c]
    TensorT<S> v_s;       // [c, c]
    TensorT<S> q_c, k_c, v_c;  // [c, c]
};

using HeavyDaParams = HeavyDaParamsT<double>;

template <typename S>
TensorT<S> pam_heavy(const TensorT<S>& x, const TensorT<S>& qw, const TensorT<S>& kw,
                     const TensorT<S>& vw) {
    if (x.ndim() != 4) throw ShapeError("pam_heavy: want [b,c,h,w]");
    std::size_t h = x.extent(2), w = x.extent(3);
    S temp = S(1) / std::sqrt(static_cast<S>(qw.extent(0)));
    TensorT<S> seq = seq_from_image(x);  // [b,hw,c]
    TensorT<S> q = channel_linear(seq, qw);
    TensorT<S> k = channel_linear(seq, kw);
    TensorT<S> v = channel_linear(seq, vw);
    TensorT<S> att = softmax_rows(scale(matmul(q, transpose_12(k)), temp));
    return image_from_seq(matmul(att, v), h, w);
}

template <typename S>
TensorT<S> cam_heavy(const TensorT<S>& x, const TensorT<S>& qw, const TensorT<S>& kw,
                     const TensorT<S>& vw) {
    if (x.ndim() != 4) throw ShapeError("cam_heavy: want [b,c,h,w]");
    std::size_t b = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    S temp = S(1) / std::sqrt(static_cast<S>(h * w));
    TensorT<S> seq = seq_from_image(x);
    // channel-major flats [b,c,hw]
    TensorT<S> q = reshape(image_from_seq(channel_linear(seq, qw), h, w), {b, c, h * w});
    TensorT<S> k = reshape(image_from_seq(channel_linear(seq, kw), h, w), {b, c, h * w});
    TensorT<S> v = reshape(image_from_seq(channel_linear(seq, vw), h, w), {b, c, h * w});
    TensorT<S> att = softmax_rows(scale(matmul(q, transpose_12(k)), temp));  // [b,c,c]
    return reshape(matmul(att, v), {b, c, h, w});
}

template <typename S>
TensorT<S> da_block_heavy(const TensorT<S>& x, const HeavyDaParamsT<S>& p) {
    TensorT<S> f_pam = add(pam_heavy(x, p.q_s, p.k_s, p.v_s), x);
    TensorT<S> out = add(cam_heavy(f_pam, p.q_c, p.k_c, p.v_c), f_pam);
    return add(out, x);
}

// shared across the shallow stages: one mask conv, one channel bridge
template <typename S>
struct LightDaParamsT {
    TensorT<S> pam_conv_w;    // [1, 2, 7, 7], dilation 3, bias-free
    TensorT<S> bridge_conv_w; // [3]
    TensorT<S> bridge_conv_b; // [1]
    TensorT<S> bridge_fc_w;   // [total, total] over concatenated pooled channels
    TensorT<S> bridge_fc_b;   // [total]
};

using LightDaParams = LightDaParamsT<double>;

inline constexpr Conv2dSpec kLightMaskConv{1, 9, 3};  // 7x7 at dilation 3, same size

template <typename S>
TensorT<S> pam_light(const TensorT<S>& x, const TensorT<S>& conv_w) {
    if (x.ndim() != 4) throw ShapeError("pam_light: want [b,c,h,w]");
    TensorT<S> stats = concat<S>({channel_mean_map(x), channel_max_map(x)}, 1);  // [b,2,h,w]
    TensorT<S> mask = sigmoid(conv2d(stats, conv_w, kLightMaskConv));
    return mul_mask(x, mask);
}

// pooled descriptors of every shallow F_pam, mixed jointly, split back per stage
template <typename S>
std::vector<TensorT<S>> bridge_channel_weights(const std::vector<TensorT<S>>& f_pams,
                                               const LightDaParamsT<S>& p) {
    std::vector<TensorT<S>> pooled;
    std::vector<std::size_t> widths;
    for (const auto& f : f_pams) {
        pooled.push_back(global_avg_pool(f));  // [b,c_i]
        widths.push_back(f.extent(1));
    }
    TensorT<S> cat = concat(pooled, 1);  // [b,total]
    std::size_t bsz = cat.extent(0), total = cat.extent(1);
    if (p.bridge_fc_w.extent(0) != total) throw ShapeError("bridge: pooled width mismatch");
    TensorT<S> mixed = conv1d_k3(cat, p.bridge_conv_w, &p.bridge_conv_b);
    TensorT<S> fc = reshape(channel_linear(reshape(mixed, {bsz, 1, total}), p.bridge_fc_w,
                                           &p.bridge_fc_b),
                            {bsz, total});
    TensorT<S> gates = sigmoid(fc);
    std::vector<TensorT<S>> out;
    std::size_t off = 0;
    for (std::size_t wi : widths) {
        out.push_back(slice_axis(gates, 1, off, wi));
        off += wi;
    }
    return out;
}

// ------------------------------------------------------------ taped variants

namespace ad {

template <typename S>
struct HeavyDaVars {
    VarT<S> q_s, k_s, v_s, q_c, k_c, v_c;
};

template <typename S>
VarT<S> pam_heavy(VarT<S> x, VarT<S> qw, VarT<S> kw, VarT<S> vw) {
    std::size_t h = x.value().extent(2), w = x.value().extent(3);
    S temp = S(1) / std::sqrt(static_cast<S>(qw.value().extent(0)));
    VarT<S> seq = seq_from_image(x);
    VarT<S> q = channel_linear(seq, qw);
    VarT<S> k = channel_linear(seq, kw);
    VarT<S> v = channel_linear(seq, vw);
    VarT<S> att = softmax_rows(scale(matmul(q, transpose_12(k)), temp));
    return image_from_seq(matmul(att, v), h, w);
}

template <typename S>
VarT<S> cam_heavy(VarT<S> x, VarT<S> qw, VarT<S> kw, VarT<S> vw) {
    std::size_t b = x.value().extent(0), c = x.value().extent(1);
    std::size_t h = x.value().extent(2), w = x.value().extent(3);
    S temp = S(1) / std::sqrt(static_cast<S>(h * w));
    VarT<S> seq = seq_from_image(x);
    auto flat = [&](VarT<S> proj) {
        return reshape(image_from_seq(proj, h, w), Shape{b, c, h * w});
    };
    VarT<S> q = flat(channel_linear(seq, qw));
    VarT<S> k = flat(channel_linear(seq, kw));
    VarT<S> v = flat(channel_linear(seq, vw));
    VarT<S> att = softmax_rows(scale(matmul(q, transpose_12(k)), temp));
    return reshape(matmul(att, v), Shape{b, c, h, w});
}

template <typename S>
VarT<S> da_block_heavy(VarT<S> x, const HeavyDaVars<S>& p) {
    VarT<S> f_pam = add(pam_heavy(x, p.q_s, p.k_s, p.v_s), x);
    return add(add(cam_heavy(f_pam, p.q_c, p.k_c, p.v_c), f_pam), x);
}

template <typename S>
struct LightDaVars {
    VarT<S> pam_conv_w, bridge_conv_w, bridge_conv_b, bridge_fc_w, bridge_fc_b;
};

template <typename S>
VarT<S> pam_light(VarT<S> x, VarT<S> conv_w) {
    VarT<S> stats = concat<S>({channel_mean_map(x), channel_max_map(x)}, 1);
    VarT<S> mask = sigmoid(conv2d(stats, conv_w, std::optional<VarT<S>>(), kLightMaskConv));
    return mul_mask(x, mask);
}

template <typename S>
std::vector<VarT<S>> bridge_channel_weights(const std::vector<VarT<S>>& f_pams,
                                            const LightDaVars<S>& p) {
    std::vector<VarT<S>> pooled;
    std::vector<std::size_t> widths;
    for (VarT<S> f : f_pams) {
        pooled.push_back(global_avg_pool(f));
        widths.push_back(f.value().extent(1));
    }
    VarT<S> cat = concat(pooled, 1);
    std::size_t bsz = cat.value().extent(0), total = cat.value().extent(1);
    VarT<S> mixed = conv1d_k3(cat, p.bridge_conv_w, std::optional<VarT<S>>(p.bridge_conv_b));
    VarT<S> fc = reshape(channel_linear(reshape(mixed, Shape{bsz, 1, total}), p.bridge_fc_w,
                                        std::optional<VarT<S>>(p.bridge_fc_b)),
                         Shape{bsz, total});
    VarT<S> gates = sigmoid(fc);
    std::vector<VarT<S>> out;
    std::size_t off = 0;
    for (std::size_t wi : widths) {
        out.push_back(slice_axis(gates, 1, off, wi));
        off += wi;
    }
    return out;
}

}  // namespace ad

}  // namespace cdmamba
