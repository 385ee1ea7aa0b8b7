#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cdmamba/network.hpp"
#include "cdmamba/tensor.hpp"

// Decoupled weight-decay Adam over a parameter store, plus the cosine
// annealing schedule. Decay applies to matrix-or-higher weights only; the
// state transition rates are excluded so their sign structure survives.

namespace cdmamba {

inline double cosine_lr(double lr0, double lr_min, std::size_t epoch, std::size_t epochs) {
    if (epochs == 0) return lr_min;
    double phase = M_PI * static_cast<double>(epoch) / static_cast<double>(epochs);
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + std::cos(phase));
}

inline bool decay_applies(const std::string& name, std::size_t ndim) {
    if (ndim < 2) return false;
    return name.size() < 2 || name.compare(name.size() - 2, 2, ".a") != 0;
}

template <typename S>
class AdamWT {
public:
    AdamWT(const ParamStoreT<S>& ps, double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
        for (std::size_t i = 0; i < ps.count(); ++i) {
            m_.push_back(TensorT<S>(ps.tensor(i).shape()));
            v_.push_back(TensorT<S>(ps.tensor(i).shape()));
            decayed_.push_back(decay_applies(ps.name(i), ps.tensor(i).ndim()));
        }
    }

    void step(ParamStoreT<S>& ps, const std::vector<TensorT<S>>& grads, double lr) {
        if (grads.size() != m_.size()) throw ShapeError("optimizer: gradient count mismatch");
        ++steps_;
        double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
        double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
        for (std::size_t i = 0; i < m_.size(); ++i) {
            TensorT<S>& p = ps.tensor(i);
            const TensorT<S>& g = grads[i];
            require_same_shape(p, g, "optimizer step");
            TensorT<S>& m = m_[i];
            TensorT<S>& v = v_[i];
            S wd = decayed_[i] ? static_cast<S>(weight_decay_) : S(0);
            for (std::size_t j = 0; j < p.size(); ++j) {
                m[j] = static_cast<S>(beta1_) * m[j] + static_cast<S>(1.0 - beta1_) * g[j];
                v[j] = static_cast<S>(beta2_) * v[j] + static_cast<S>(1.0 - beta2_) * g[j] * g[j];
                S mhat = m[j] / static_cast<S>(bc1);
                S vhat = v[j] / static_cast<S>(bc2);
                p[j] -= static_cast<S>(lr) *
                        (mhat / (std::sqrt(vhat) + static_cast<S>(eps_)) + wd * p[j]);
            }
        }
    }

    std::size_t steps() const { return steps_; }
    void set_steps(std::size_t n) { steps_ = n; }
    std::size_t slots() const { return m_.size(); }
    bool decayed(std::size_t i) const { return decayed_[i]; }
    TensorT<S>& first_moment(std::size_t i) { return m_[i]; }
    TensorT<S>& second_moment(std::size_t i) { return v_[i]; }
    const TensorT<S>& first_moment(std::size_t i) const { return m_[i]; }
    const TensorT<S>& second_moment(std::size_t i) const { return v_[i]; }

private:
    double beta1_, beta2_, eps_, weight_decay_;
    std::size_t steps_ = 0;
    std::vector<TensorT<S>> m_, v_;
    std::vector<bool> decayed_;
};

using AdamW = AdamWT<double>;

}  // namespace cdmamba
