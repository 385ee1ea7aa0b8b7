#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "cdmamba/tape.hpp"
#include "cdmamba/tensor.hpp"

// Composite segmentation objective (clamped cross-entropy plus smoothed Dice)
// and threshold metrics over pooled pixel confusion counts.

namespace cdmamba {

struct LossConfig {
    double gamma = 1.0;
    double epsilon = 1.0;
    double bce_clamp = 1e-7;
};

template <typename S>
void check_binary_targets(const TensorT<S>& t) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] != S(0) && t[i] != S(1))
            throw NumericError("targets must be exactly 0 or 1");
}

template <typename S>
S bce_loss(const TensorT<S>& y, const TensorT<S>& t, S clamp = S(1e-7)) {
    require_same_shape(y, t, "bce_loss");
    check_binary_targets(t);
    S acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        S p = std::min(std::max(y[i], clamp), S(1) - clamp);
        acc += t[i] == S(1) ? -std::log(p) : -std::log(S(1) - p);
    }
    return acc / static_cast<S>(y.size());
}

// zero slope outside the clamp interval (the clamp is flat there)
template <typename S>
TensorT<S> bce_loss_vjp(const TensorT<S>& y, const TensorT<S>& t, S clamp, S g) {
    TensorT<S> gy(y.shape());
    S invn = S(1) / static_cast<S>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
        if (y[i] < clamp || y[i] > S(1) - clamp) continue;
        S d = t[i] == S(1) ? -S(1) / y[i] : S(1) / (S(1) - y[i]);
        gy[i] = g * d * invn;
    }
    return gy;
}

template <typename S>
S dice_loss(const TensorT<S>& y, const TensorT<S>& t, S epsilon = S(1)) {
    require_same_shape(y, t, "dice_loss");
    S inter = 0, sy = 0, st = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        inter += y[i] * t[i];
        sy += y[i];
        st += t[i];
    }
    return S(1) - (S(2) * inter + epsilon) / (sy + st + epsilon);
}

template <typename S>
TensorT<S> dice_loss_vjp(const TensorT<S>& y, const TensorT<S>& t, S epsilon, S g) {
    S inter = 0, sy = 0, st = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        inter += y[i] * t[i];
        sy += y[i];
        st += t[i];
    }
    S num = S(2) * inter + epsilon, den = sy + st + epsilon;
    TensorT<S> gy(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i)
        gy[i] = g * (num - S(2) * t[i] * den) / (den * den);
    return gy;
}

template <typename S>
S overall_loss(const TensorT<S>& y, const TensorT<S>& t, const LossConfig& cfg) {
    return bce_loss(y, t, static_cast<S>(cfg.bce_clamp)) +
           static_cast<S>(cfg.gamma) * dice_loss(y, t, static_cast<S>(cfg.epsilon));
}

template <typename S>
TensorT<S> overall_loss_vjp(const TensorT<S>& y, const TensorT<S>& t, const LossConfig& cfg, S g) {
    TensorT<S> gb = bce_loss_vjp(y, t, static_cast<S>(cfg.bce_clamp), g);
    TensorT<S> gd = dice_loss_vjp(y, t, static_cast<S>(cfg.epsilon),
                                  g * static_cast<S>(cfg.gamma));
    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += gd[i];
    return gb;
}

// ------------------------------------------------------------------- metrics

struct ConfusionCounts {
    std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;

    ConfusionCounts& operator+=(const ConfusionCounts& o) {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    std::uint64_t total() const { return tp + fp + fn + tn; }
};

template <typename S>
ConfusionCounts confusion(const TensorT<S>& y, const TensorT<S>& t, S threshold = S(0.5)) {
    require_same_shape(y, t, "confusion");
    check_binary_targets(t);
    ConfusionCounts c;
    for (std::size_t i = 0; i < y.size(); ++i) {
        bool pred = y[i] > threshold;
        bool truth = t[i] == S(1);
        if (pred && truth) ++c.tp;
        else if (pred && !truth) ++c.fp;
        else if (!pred && truth) ++c.fn;
        else ++c.tn;
    }
    return c;
}

struct Metrics {
    double miou = 0, f1 = 0, acc = 0;
};

// empty classes (no prediction and no truth) count as IoU 1
inline Metrics metrics_from_counts(const ConfusionCounts& c) {
    auto iou = [](std::uint64_t inter, std::uint64_t uni) {
        return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    };
    Metrics m;
    double iou_cloud = iou(c.tp, c.tp + c.fp + c.fn);
    double iou_bg = iou(c.tn, c.tn + c.fp + c.fn);
    m.miou = 0.5 * (iou_cloud + iou_bg);
    std::uint64_t f1_den = 2 * c.tp + c.fp + c.fn;
    m.f1 = f1_den == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(f1_den);
    m.acc = c.total() == 0 ? 1.0
                           : static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
    return m;
}

template <typename S>
Metrics metrics(const TensorT<S>& y, const TensorT<S>& t, S threshold = S(0.5)) {
    return metrics_from_counts(confusion(y, t, threshold));
}

// ------------------------------------------------------------- taped variant

namespace ad {

template <typename S>
VarT<S> overall_loss(VarT<S> y, const TensorT<S>& t, const LossConfig& cfg) {
    Tape<S>& tp = *y.tape;
    std::size_t iy = y.id;
    std::size_t id = tp.push(TensorT<S>::scalar(cdmamba::overall_loss(tp.value(iy), t, cfg)),
                             [iy, t, cfg](Tape<S>& tpp, const TensorT<S>& g) {
                                 tpp.accumulate(
                                     iy, cdmamba::overall_loss_vjp(tpp.value(iy), t, cfg, g[0]));
                             });
    return {&tp, id};
}

}  // namespace ad

}  // namespace cdmamba
