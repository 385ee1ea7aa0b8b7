#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cdmamba/attention.hpp"
#include "cdmamba/ops_basic.hpp"
#include "cdmamba/ops_image.hpp"
#include "cdmamba/rng.hpp"
#include "cdmamba/smb.hpp"
#include "cdmamba/ssm.hpp"
#include "cdmamba/tape.hpp"
#include "cdmamba/taped_ops.hpp"

// Six-stage U-shaped segmentation network: a stage-1 convolution, five
// encoder state-space blocks with norm/pool/GELU transitions, attention skip
// connections, and a mirrored decoder with bilinear upsampling ending in a
// sigmoid probability head.

namespace cdmamba {

struct NetworkConfig {
    std::array<std::size_t, 6> stage_widths{8, 16, 24, 32, 48, 64};
    std::size_t in_bands = 4;
    std::size_t ssm_state_dim = 8;
    std::size_t groups = 4;
    bool use_da_block = true;
    bool use_cloud_smb = true;
};

inline void validate_config(const NetworkConfig& cfg) {
    for (std::size_t w : cfg.stage_widths)
        if (w == 0 || w % 4 != 0) throw ShapeError("config: stage widths must be positive multiples of 4");
    if (cfg.stage_widths[0] < cfg.groups) throw ShapeError("config: c1 must be >= groups");
    if (cfg.in_bands == 0 || cfg.ssm_state_dim == 0 || cfg.groups == 0)
        throw ShapeError("config: zero-sized dimension");
}

// ------------------------------------------------------------- parameter store

template <typename S>
class ParamStoreT {
public:
    void add(const std::string& name, TensorT<S> t) {
        if (index_.count(name)) throw ShapeError("param store: duplicate name " + name);
        index_[name] = tensors_.size();
        names_.push_back(name);
        tensors_.push_back(std::move(t));
    }

    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t index_of(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw ShapeError("param store: unknown parameter " + name);
        return it->second;
    }

    const TensorT<S>& at(const std::string& name) const { return tensors_[index_of(name)]; }
    TensorT<S>& at(const std::string& name) { return tensors_[index_of(name)]; }

    std::size_t count() const { return tensors_.size(); }
    const std::string& name(std::size_t i) const { return names_[i]; }
    const TensorT<S>& tensor(std::size_t i) const { return tensors_[i]; }
    TensorT<S>& tensor(std::size_t i) { return tensors_[i]; }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t.size();
        return n;
    }

private:
    std::vector<std::string> names_;
    std::vector<TensorT<S>> tensors_;
    std::unordered_map<std::string, std::size_t> index_;
};

using ParamStore = ParamStoreT<double>;

// ------------------------------------------------------- parameter enumeration

enum class ParamInit { uniform_fan_in, ones, zeros, ssm_rates, ssm_step_bias };

struct ParamSpec {
    std::string name;
    Shape shape;
    ParamInit init;
    std::size_t fan_in;  // only meaningful for uniform_fan_in
};

namespace detail {

inline void push_ssm_specs(std::vector<ParamSpec>& v, const std::string& prefix, std::size_t c,
                           std::size_t n) {
    v.push_back({prefix + ".a", {c, n}, ParamInit::ssm_rates, 0});
    v.push_back({prefix + ".w_b", {n, c}, ParamInit::uniform_fan_in, c});
    v.push_back({prefix + ".w_c", {n, c}, ParamInit::uniform_fan_in, c});
    v.push_back({prefix + ".w_delta", {c, c}, ParamInit::uniform_fan_in, c});
    v.push_back({prefix + ".bias_delta", {c}, ParamInit::ssm_step_bias, 0});
}

inline void push_smb_specs(std::vector<ParamSpec>& v, const std::string& prefix, std::size_t c_in,
                           std::size_t c_out, std::size_t n, bool multi_direction) {
    if (multi_direction) {
        std::size_t q = c_in / 4;
        v.push_back({prefix + ".norm_in.gamma", {c_in}, ParamInit::ones, 0});
        v.push_back({prefix + ".norm_in.beta", {c_in}, ParamInit::zeros, 0});
        push_ssm_specs(v, prefix + ".ssm_f", q, n);
        push_ssm_specs(v, prefix + ".ssm_r", q, n);
        v.push_back({prefix + ".agg_proj.weight", {q, 2 * q}, ParamInit::uniform_fan_in, 2 * q});
        v.push_back({prefix + ".norm_out.gamma", {2 * c_in}, ParamInit::ones, 0});
        v.push_back({prefix + ".norm_out.beta", {2 * c_in}, ParamInit::zeros, 0});
        v.push_back({prefix + ".out_proj.weight", {c_out, 2 * c_in}, ParamInit::uniform_fan_in, 2 * c_in});
        v.push_back({prefix + ".out_proj.bias", {c_out}, ParamInit::uniform_fan_in, 2 * c_in});
    } else {
        v.push_back({prefix + ".norm.gamma", {c_in}, ParamInit::ones, 0});
        v.push_back({prefix + ".norm.beta", {c_in}, ParamInit::zeros, 0});
        push_ssm_specs(v, prefix + ".ssm", c_in, n);
        v.push_back({prefix + ".out_proj.weight", {c_out, c_in}, ParamInit::uniform_fan_in, c_in});
        v.push_back({prefix + ".out_proj.bias", {c_out}, ParamInit::uniform_fan_in, c_in});
    }
}

}  // namespace detail

inline std::vector<ParamSpec> enumerate_params(const NetworkConfig& cfg) {
    validate_config(cfg);
    std::vector<ParamSpec> v;
    const auto& w = cfg.stage_widths;
    std::size_t n = cfg.ssm_state_dim;

    v.push_back({"stage1.conv.weight", {w[0], cfg.in_bands, 3, 3}, ParamInit::uniform_fan_in,
                 cfg.in_bands * 9});
    v.push_back({"stage1.conv.bias", {w[0]}, ParamInit::uniform_fan_in, cfg.in_bands * 9});

    for (std::size_t i = 2; i <= 6; ++i) {
        std::string p = "enc.stage" + std::to_string(i);
        std::size_t c_in = w[i - 2], c_out = w[i - 1];
        v.push_back({p + ".norm.gamma", {c_in}, ParamInit::ones, 0});
        v.push_back({p + ".norm.beta", {c_in}, ParamInit::zeros, 0});
        detail::push_smb_specs(v, p + ".smb", c_in, c_out, n, cfg.use_cloud_smb);
    }

    if (cfg.use_da_block) {
        std::size_t total = w[0] + w[1] + w[2];
        v.push_back({"skip.light.pam_conv.weight", {1, 2, 7, 7}, ParamInit::uniform_fan_in, 98});
        v.push_back({"skip.light.bridge_conv.weight", {3}, ParamInit::uniform_fan_in, 3});
        v.push_back({"skip.light.bridge_conv.bias", {1}, ParamInit::uniform_fan_in, 3});
        v.push_back({"skip.light.bridge_fc.weight", {total, total}, ParamInit::uniform_fan_in, total});
        v.push_back({"skip.light.bridge_fc.bias", {total}, ParamInit::uniform_fan_in, total});
        for (std::size_t i = 4; i <= 6; ++i) {
            std::string p = "skip.stage" + std::to_string(i);
            std::size_t c = w[i - 1], r = qk_channels(c);
            v.push_back({p + ".q_s.weight", {r, c}, ParamInit::uniform_fan_in, c});
            v.push_back({p + ".k_s.weight", {r, c}, ParamInit::uniform_fan_in, c});
            v.push_back({p + ".v_s.weight", {c, c}, ParamInit::uniform_fan_in, c});
            v.push_back({p + ".q_c.weight", {c, c}, ParamInit::uniform_fan_in, c});
            v.push_back({p + ".k_c.weight", {c, c}, ParamInit::uniform_fan_in, c});
            v.push_back({p + ".v_c.weight", {c, c}, ParamInit::uniform_fan_in, c});
        }
    }

    for (std::size_t i = 6; i >= 2; --i) {
        std::string p = "dec.stage" + std::to_string(i);
        std::size_t c_in = w[i - 1], c_out = w[i - 2];
        detail::push_smb_specs(v, p + ".smb", c_in, c_out, n, cfg.use_cloud_smb);
        v.push_back({p + ".norm.gamma", {c_out}, ParamInit::ones, 0});
        v.push_back({p + ".norm.beta", {c_out}, ParamInit::zeros, 0});
    }

    v.push_back({"head.conv.weight", {1, w[0], 3, 3}, ParamInit::uniform_fan_in, w[0] * 9});
    v.push_back({"head.conv.bias", {1}, ParamInit::uniform_fan_in, w[0] * 9});
    return v;
}

inline std::size_t param_count(const NetworkConfig& cfg) {
    std::size_t total = 0;
    for (const auto& s : enumerate_params(cfg)) {
        std::size_t n = 1;
        for (std::size_t e : s.shape) n *= e;
        total += n;
    }
    return total;
}

// sampling happens in double regardless of S so both precisions share one
// initialization stream
template <typename S>
ParamStoreT<S> init_params(const NetworkConfig& cfg, std::uint64_t seed) {
    ParamStoreT<S> ps;
    Rng rng(seed);
    for (const auto& spec : enumerate_params(cfg)) {
        TensorT<S> t(spec.shape);
        switch (spec.init) {
            case ParamInit::uniform_fan_in: {
                double bound = std::sqrt(1.0 / static_cast<double>(spec.fan_in));
                for (std::size_t i = 0; i < t.size(); ++i)
                    t[i] = static_cast<S>((2.0 * rng.uniform() - 1.0) * bound);
                break;
            }
            case ParamInit::ones:
                for (std::size_t i = 0; i < t.size(); ++i) t[i] = S(1);
                break;
            case ParamInit::zeros:
                break;
            case ParamInit::ssm_rates: {
                std::size_t n = spec.shape[1];
                for (std::size_t i = 0; i < t.size(); ++i)
                    t[i] = -static_cast<S>(i % n + 1);
                break;
            }
            case ParamInit::ssm_step_bias: {
                // log-uniform step target in [1e-3, 1e-1], stored pre-softplus
                double lo = std::log(1e-3), hi = std::log(1e-1);
                for (std::size_t i = 0; i < t.size(); ++i) {
                    double step = std::exp(lo + rng.uniform() * (hi - lo));
                    t[i] = static_cast<S>(std::log(std::expm1(step)));
                }
                break;
            }
        }
        ps.add(spec.name, std::move(t));
    }
    return ps;
}

// ----------------------------------------------------------- param gathering

template <typename S>
SsmParamsT<S> get_ssm_params(const ParamStoreT<S>& ps, const std::string& p) {
    return {ps.at(p + ".a"), ps.at(p + ".w_b"), ps.at(p + ".w_c"), ps.at(p + ".w_delta"),
            ps.at(p + ".bias_delta")};
}

template <typename S>
CloudSmbParamsT<S> get_smb_params(const ParamStoreT<S>& ps, const std::string& p) {
    return {ps.at(p + ".norm_in.gamma"), ps.at(p + ".norm_in.beta"),
            get_ssm_params(ps, p + ".ssm_f"), get_ssm_params(ps, p + ".ssm_r"),
            ps.at(p + ".agg_proj.weight"), ps.at(p + ".norm_out.gamma"),
            ps.at(p + ".norm_out.beta"), ps.at(p + ".out_proj.weight"),
            ps.at(p + ".out_proj.bias")};
}

template <typename S>
PlainMambaParamsT<S> get_plain_params(const ParamStoreT<S>& ps, const std::string& p) {
    return {ps.at(p + ".norm.gamma"), ps.at(p + ".norm.beta"), get_ssm_params(ps, p + ".ssm"),
            ps.at(p + ".out_proj.weight"), ps.at(p + ".out_proj.bias")};
}

template <typename S>
HeavyDaParamsT<S> get_heavy_params(const ParamStoreT<S>& ps, const std::string& p) {
    return {ps.at(p + ".q_s.weight"), ps.at(p + ".k_s.weight"), ps.at(p + ".v_s.weight"),
            ps.at(p + ".q_c.weight"), ps.at(p + ".k_c.weight"), ps.at(p + ".v_c.weight")};
}

template <typename S>
LightDaParamsT<S> get_light_params(const ParamStoreT<S>& ps) {
    return {ps.at("skip.light.pam_conv.weight"), ps.at("skip.light.bridge_conv.weight"),
            ps.at("skip.light.bridge_conv.bias"), ps.at("skip.light.bridge_fc.weight"),
            ps.at("skip.light.bridge_fc.bias")};
}

// --------------------------------------------------------------- pure forward

// zero_skip_stage (1..6) blanks one skip path; 0 leaves all intact
template <typename S>
TensorT<S> network_forward(const TensorT<S>& x, const ParamStoreT<S>& ps,
                           const NetworkConfig& cfg, int zero_skip_stage = 0,
                           std::vector<TensorT<S>>* enc_out = nullptr) {
    validate_config(cfg);
    if (x.ndim() != 4 || x.extent(1) != cfg.in_bands)
        throw ShapeError("network_forward: want [b,bands,h,w]");
    if (x.extent(2) % 32 != 0 || x.extent(3) % 32 != 0)
        throw ShapeError("network_forward: spatial extents must be divisible by 32");

    Conv2dSpec same3{1, 1, 1};
    std::vector<TensorT<S>> enc(6);
    {
        const TensorT<S>& cw = ps.at("stage1.conv.weight");
        const TensorT<S>& cb = ps.at("stage1.conv.bias");
        enc[0] = conv2d(x, cw, &cb, same3);
    }
    for (std::size_t i = 2; i <= 6; ++i) {
        std::string p = "enc.stage" + std::to_string(i);
        TensorT<S> cur = group_norm(enc[i - 2], cfg.groups, ps.at(p + ".norm.gamma"),
                                    ps.at(p + ".norm.beta"), S(kNormEps));
        cur = gelu(maxpool2(cur));
        std::size_t h = cur.extent(2), w = cur.extent(3);
        TensorT<S> seq = seq_from_image(cur);
        seq = cfg.use_cloud_smb ? cloud_smb(seq, get_smb_params(ps, p + ".smb"))
                                : plain_mamba(seq, get_plain_params(ps, p + ".smb"));
        enc[i - 1] = image_from_seq(seq, h, w);
    }
    if (enc_out) *enc_out = enc;

    std::vector<TensorT<S>> skip(6);
    if (cfg.use_da_block) {
        LightDaParamsT<S> light = get_light_params(ps);
        std::vector<TensorT<S>> f_pams;
        for (std::size_t i = 0; i < 3; ++i)
            f_pams.push_back(add(pam_light(enc[i], light.pam_conv_w), enc[i]));
        std::vector<TensorT<S>> gates = bridge_channel_weights(f_pams, light);
        for (std::size_t i = 0; i < 3; ++i) {
            TensorT<S> cam = mul_channel_weights(f_pams[i], gates[i]);
            skip[i] = add(add(cam, f_pams[i]), enc[i]);
        }
        for (std::size_t i = 4; i <= 6; ++i)
            skip[i - 1] = da_block_heavy(enc[i - 1],
                                         get_heavy_params(ps, "skip.stage" + std::to_string(i)));
    } else {
        for (std::size_t i = 0; i < 6; ++i) skip[i] = enc[i];
    }
    if (zero_skip_stage >= 1 && zero_skip_stage <= 6)
        skip[zero_skip_stage - 1] = TensorT<S>(skip[zero_skip_stage - 1].shape());

    TensorT<S> d = skip[5];
    for (std::size_t i = 6; i >= 2; --i) {
        std::string p = "dec.stage" + std::to_string(i);
        if (i < 6) d = add(d, skip[i - 1]);
        std::size_t h = d.extent(2), w = d.extent(3);
        TensorT<S> seq = seq_from_image(d);
        seq = cfg.use_cloud_smb ? cloud_smb(seq, get_smb_params(ps, p + ".smb"))
                                : plain_mamba(seq, get_plain_params(ps, p + ".smb"));
        d = image_from_seq(seq, h, w);
        d = group_norm(d, cfg.groups, ps.at(p + ".norm.gamma"), ps.at(p + ".norm.beta"),
                       S(kNormEps));
        d = gelu(bilinear_upsample2(d));
    }

    d = add(d, skip[0]);
    const TensorT<S>& hw_ = ps.at("head.conv.weight");
    const TensorT<S>& hb = ps.at("head.conv.bias");
    TensorT<S> y = sigmoid(conv2d(d, hw_, &hb, same3));
    return reshape(y, {x.extent(0), x.extent(2), x.extent(3)});
}

// -------------------------------------------------------------- taped forward

// every store tensor becomes a tape leaf, in store order; gradients are read
// back through the same index
template <typename S>
struct TapedParams {
    Tape<S>* tape = nullptr;
    const ParamStoreT<S>* store = nullptr;
    std::vector<std::size_t> ids;

    VarT<S> operator()(const std::string& name) const {
        return {tape, ids[store->index_of(name)]};
    }

    TensorT<S> grad_or_zero(std::size_t i) const {
        if (tape->has_grad(ids[i])) return tape->grad(ids[i]);
        return TensorT<S>(store->tensor(i).shape());
    }
};

template <typename S>
TapedParams<S> register_params(Tape<S>& t, const ParamStoreT<S>& ps) {
    TapedParams<S> tp{&t, &ps, {}};
    tp.ids.reserve(ps.count());
    for (std::size_t i = 0; i < ps.count(); ++i) tp.ids.push_back(t.leaf(ps.tensor(i)));
    return tp;
}

namespace ad {

template <typename S>
SsmVars<S> get_ssm_vars(const TapedParams<S>& tp, const std::string& p) {
    return {tp(p + ".a"), tp(p + ".w_b"), tp(p + ".w_c"), tp(p + ".w_delta"),
            tp(p + ".bias_delta")};
}

template <typename S>
CloudSmbVars<S> get_smb_vars(const TapedParams<S>& tp, const std::string& p) {
    return {tp(p + ".norm_in.gamma"), tp(p + ".norm_in.beta"), get_ssm_vars(tp, p + ".ssm_f"),
            get_ssm_vars(tp, p + ".ssm_r"), tp(p + ".agg_proj.weight"),
            tp(p + ".norm_out.gamma"), tp(p + ".norm_out.beta"), tp(p + ".out_proj.weight"),
            tp(p + ".out_proj.bias")};
}

template <typename S>
PlainMambaVars<S> get_plain_vars(const TapedParams<S>& tp, const std::string& p) {
    return {tp(p + ".norm.gamma"), tp(p + ".norm.beta"), get_ssm_vars(tp, p + ".ssm"),
            tp(p + ".out_proj.weight"), tp(p + ".out_proj.bias")};
}

template <typename S>
VarT<S> network_forward(VarT<S> x, const TapedParams<S>& tp, const NetworkConfig& cfg) {
    validate_config(cfg);
    // copy extents now: the tape's node storage may reallocate under later
    // pushes, invalidating value references
    if (x.value().ndim() != 4 || x.value().extent(1) != cfg.in_bands)
        throw ShapeError("network_forward: want [b,bands,h,w]");
    std::size_t xb = x.value().extent(0), xh = x.value().extent(2), xw = x.value().extent(3);
    if (xh % 32 != 0 || xw % 32 != 0)
        throw ShapeError("network_forward: spatial extents must be divisible by 32");

    Conv2dSpec same3{1, 1, 1};
    std::vector<VarT<S>> enc(6);
    enc[0] = conv2d(x, tp("stage1.conv.weight"),
                    std::optional<VarT<S>>(tp("stage1.conv.bias")), same3);
    for (std::size_t i = 2; i <= 6; ++i) {
        std::string p = "enc.stage" + std::to_string(i);
        VarT<S> cur = group_norm(enc[i - 2], cfg.groups, tp(p + ".norm.gamma"),
                                 tp(p + ".norm.beta"), S(kNormEps));
        cur = gelu(maxpool2(cur));
        std::size_t h = cur.value().extent(2), w = cur.value().extent(3);
        VarT<S> seq = seq_from_image(cur);
        seq = cfg.use_cloud_smb ? cloud_smb(seq, get_smb_vars(tp, p + ".smb"))
                                : plain_mamba(seq, get_plain_vars(tp, p + ".smb"));
        enc[i - 1] = image_from_seq(seq, h, w);
    }

    std::vector<VarT<S>> skip(6);
    if (cfg.use_da_block) {
        LightDaVars<S> light{tp("skip.light.pam_conv.weight"), tp("skip.light.bridge_conv.weight"),
                             tp("skip.light.bridge_conv.bias"), tp("skip.light.bridge_fc.weight"),
                             tp("skip.light.bridge_fc.bias")};
        std::vector<VarT<S>> f_pams;
        for (std::size_t i = 0; i < 3; ++i)
            f_pams.push_back(add(pam_light(enc[i], light.pam_conv_w), enc[i]));
        std::vector<VarT<S>> gates = bridge_channel_weights(f_pams, light);
        for (std::size_t i = 0; i < 3; ++i)
            skip[i] = add(add(mul_channel_weights(f_pams[i], gates[i]), f_pams[i]), enc[i]);
        for (std::size_t i = 4; i <= 6; ++i) {
            std::string p = "skip.stage" + std::to_string(i);
            HeavyDaVars<S> hv{tp(p + ".q_s.weight"), tp(p + ".k_s.weight"), tp(p + ".v_s.weight"),
                              tp(p + ".q_c.weight"), tp(p + ".k_c.weight"), tp(p + ".v_c.weight")};
            skip[i - 1] = da_block_heavy(enc[i - 1], hv);
        }
    } else {
        skip = enc;
    }

    VarT<S> d = skip[5];
    for (std::size_t i = 6; i >= 2; --i) {
        std::string p = "dec.stage" + std::to_string(i);
        if (i < 6) d = add(d, skip[i - 1]);
        std::size_t h = d.value().extent(2), w = d.value().extent(3);
        VarT<S> seq = seq_from_image(d);
        seq = cfg.use_cloud_smb ? cloud_smb(seq, get_smb_vars(tp, p + ".smb"))
                                : plain_mamba(seq, get_plain_vars(tp, p + ".smb"));
        d = image_from_seq(seq, h, w);
        d = group_norm(d, cfg.groups, tp(p + ".norm.gamma"), tp(p + ".norm.beta"), S(kNormEps));
        d = gelu(bilinear_upsample2(d));
    }

    d = add(d, skip[0]);
    VarT<S> y = sigmoid(conv2d(d, tp("head.conv.weight"),
                               std::optional<VarT<S>>(tp("head.conv.bias")), same3));
    return reshape(y, Shape{xb, xh, xw});
}

}  // namespace ad

}  // namespace cdmamba
