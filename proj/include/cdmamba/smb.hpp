#pragma once

#include <cstddef>
#include <vector>

#include "cdmamba/ops_basic.hpp"
#include "cdmamba/ops_image.hpp"
#include "cdmamba/ssm.hpp"

// Multi-directional state-space block. The channel axis splits into four
// chunks; each chunk is scanned forward, backward, and in the two half-swapped
// orders, sharing one forward parameter set and one reverse-family set across
// all chunks. Scan outputs are realigned to natural position order before
// summation, mixed with the gate copy, and projected out.

namespace cdmamba {

inline std::vector<std::size_t> perm_identity(std::size_t l) {
    std::vector<std::size_t> p(l);
    for (std::size_t i = 0; i < l; ++i) p[i] = i;
    return p;
}

inline std::vector<std::size_t> perm_reverse(std::size_t l) {
    std::vector<std::size_t> p(l);
    for (std::size_t i = 0; i < l; ++i) p[i] = l - 1 - i;
    return p;
}

// first half in order, second half reversed
inline std::vector<std::size_t> perm_forward_backward(std::size_t l) {
    std::vector<std::size_t> p(l);
    for (std::size_t i = 0; i < l; ++i) p[i] = i < l / 2 ? i : l - 1 - i + l / 2;
    return p;
}

// first half reversed, second half in order
inline std::vector<std::size_t> perm_backward_forward(std::size_t l) {
    std::vector<std::size_t> p(l);
    for (std::size_t i = 0; i < l; ++i) p[i] = i < l / 2 ? l / 2 - 1 - i : i;
    return p;
}

template <typename S>
struct DirectionBundle {
    TensorT<S> f, b, fb, bf;
    std::vector<std::size_t> perm_b, perm_fb, perm_bf;
};

template <typename S>
DirectionBundle<S> build_directions(const TensorT<S>& chunk) {
    if (chunk.ndim() != 3) throw ShapeError("build_directions: want [b,l,c]");
    std::size_t l = chunk.extent(1);
    // a single position degenerates every order to identity; longer sequences
    // must be even so the half-swapped orders are defined
    if (l > 1 && l % 2 != 0) throw ShapeError("build_directions: sequence length must be even");
    DirectionBundle<S> d;
    d.perm_b = perm_reverse(l);
    d.perm_fb = perm_forward_backward(l);
    d.perm_bf = perm_backward_forward(l);
    d.f = chunk;
    d.b = permute_positions(chunk, d.perm_b);
    d.fb = permute_positions(chunk, d.perm_fb);
    d.bf = permute_positions(chunk, d.perm_bf);
    return d;
}

template <typename S>
struct CloudSmbParamsT {
    TensorT<S> norm_in_gamma, norm_in_beta;    // [c_in]
    SsmParamsT<S> ssm_forward;                 // chunk width c_in/4
    SsmParamsT<S> ssm_reverse_family;          // shared by b, fb, bf
    TensorT<S> agg_w;                          // [c_in/4, c_in/2], bias-free
    TensorT<S> norm_out_gamma, norm_out_beta;  // [2 c_in]
    TensorT<S> out_w;                          // [c_out, 2 c_in]
    TensorT<S> out_bias;                       // [c_out]
};

using CloudSmbParams = CloudSmbParamsT<double>;

inline constexpr double kNormEps = 1e-5;

// one chunk through the four shared scans: gate rides along each permutation,
// outputs are realigned, summed, mixed with the gate, residual added
template <typename S>
TensorT<S> smm_forward(const TensorT<S>& chunk, const TensorT<S>& gate,
                       const CloudSmbParamsT<S>& p) {
    require_same_shape(chunk, gate, "smm_forward");
    DirectionBundle<S> d = build_directions(chunk);
    TensorT<S> z = gated_ssm(d.f, gate, p.ssm_forward);
    auto dir = [&](const TensorT<S>& seq, const std::vector<std::size_t>& perm) {
        TensorT<S> o = gated_ssm(seq, permute_positions(gate, perm), p.ssm_reverse_family);
        return permute_positions(o, inverse_permutation(perm));
    };
    TensorT<S> zb = dir(d.b, d.perm_b);
    TensorT<S> zfb = dir(d.fb, d.perm_fb);
    TensorT<S> zbf = dir(d.bf, d.perm_bf);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += zb[i] + zfb[i] + zbf[i];
    TensorT<S> mixed = channel_linear(concat<S>({z, gate}, 2), p.agg_w);
    return add(mixed, chunk);
}

template <typename S>
TensorT<S> cloud_smb(const TensorT<S>& x, const CloudSmbParamsT<S>& p) {
    if (x.ndim() != 3) throw ShapeError("cloud_smb: want [b,l,c]");
    if (x.extent(2) % 4 != 0) throw ShapeError("cloud_smb: channels must be divisible by 4");
    TensorT<S> f = layer_norm_seq(x, p.norm_in_gamma, p.norm_in_beta, S(kNormEps));
    std::vector<TensorT<S>> chunks = split(f, 2, 4);
    std::vector<TensorT<S>> lanes;
    for (std::size_t i = 0; i < 4; ++i) {
        const TensorT<S>& gate = chunks[i];  // the gate path is a copy of the chunk
        lanes.push_back(smm_forward(chunks[i], gate, p));
        lanes.push_back(silu(gate));
    }
    TensorT<S> wide = concat(lanes, 2);  // [b, l, 2 c_in]
    TensorT<S> normed = layer_norm_seq(wide, p.norm_out_gamma, p.norm_out_beta, S(kNormEps));
    return channel_linear(normed, p.out_w, &p.out_bias);
}

// ablation substitute: one forward-direction gated scan at full width
template <typename S>
struct PlainMambaParamsT {
    TensorT<S> norm_gamma, norm_beta;  // [c_in]
    SsmParamsT<S> ssm;                 // width c_in
    TensorT<S> out_w;                  // [c_out, c_in]
    TensorT<S> out_bias;               // [c_out]
};

using PlainMambaParams = PlainMambaParamsT<double>;

template <typename S>
TensorT<S> plain_mamba(const TensorT<S>& x, const PlainMambaParamsT<S>& p) {
    TensorT<S> f = layer_norm_seq(x, p.norm_gamma, p.norm_beta, S(kNormEps));
    TensorT<S> z = gated_ssm(f, f, p.ssm);
    return channel_linear(z, p.out_w, &p.out_bias);
}

// ------------------------------------------------------------ taped variants

namespace ad {

template <typename S>
struct CloudSmbVars {
    VarT<S> norm_in_gamma, norm_in_beta;
    SsmVars<S> ssm_forward, ssm_reverse_family;
    VarT<S> agg_w;
    VarT<S> norm_out_gamma, norm_out_beta;
    VarT<S> out_w, out_bias;
};

template <typename S>
VarT<S> smm_forward(VarT<S> chunk, VarT<S> gate, const CloudSmbVars<S>& p) {
    std::size_t l = chunk.value().extent(1);
    if (l > 1 && l % 2 != 0) throw ShapeError("smm_forward: sequence length must be even");
    VarT<S> z = gated_ssm(chunk, gate, p.ssm_forward);
    auto dir = [&](const std::vector<std::size_t>& perm) {
        VarT<S> seq = permute_positions(chunk, perm);
        VarT<S> o = gated_ssm(seq, permute_positions(gate, perm), p.ssm_reverse_family);
        return permute_positions(o, inverse_permutation(perm));
    };
    VarT<S> s = add(add(z, dir(perm_reverse(l))),
                    add(dir(perm_forward_backward(l)), dir(perm_backward_forward(l))));
    VarT<S> mixed = channel_linear(concat<S>({s, gate}, 2), p.agg_w);
    return add(mixed, chunk);
}

template <typename S>
VarT<S> cloud_smb(VarT<S> x, const CloudSmbVars<S>& p) {
    if (x.value().extent(2) % 4 != 0) throw ShapeError("cloud_smb: channels must be divisible by 4");
    VarT<S> f = layer_norm_seq(x, p.norm_in_gamma, p.norm_in_beta, S(kNormEps));
    std::vector<VarT<S>> chunks = split(f, 2, 4);
    std::vector<VarT<S>> lanes;
    for (std::size_t i = 0; i < 4; ++i) {
        lanes.push_back(smm_forward(chunks[i], chunks[i], p));
        lanes.push_back(silu(chunks[i]));
    }
    VarT<S> wide = concat(lanes, 2);
    VarT<S> normed = layer_norm_seq(wide, p.norm_out_gamma, p.norm_out_beta, S(kNormEps));
    return channel_linear(normed, p.out_w, std::optional<VarT<S>>(p.out_bias));
}

template <typename S>
struct PlainMambaVars {
    VarT<S> norm_gamma, norm_beta;
    SsmVars<S> ssm;
    VarT<S> out_w, out_bias;
};

template <typename S>
VarT<S> plain_mamba(VarT<S> x, const PlainMambaVars<S>& p) {
    VarT<S> f = layer_norm_seq(x, p.norm_gamma, p.norm_beta, S(kNormEps));
    VarT<S> z = gated_ssm(f, f, p.ssm);
    return channel_linear(z, p.out_w, std::optional<VarT<S>>(p.out_bias));
}

}  // namespace ad

}  // namespace cdmamba
