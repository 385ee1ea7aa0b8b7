#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

#include "cdmamba/rng.hpp"
#include "cdmamba/tensor.hpp"

// Synthetic four-band scenes (r, g, b, nir) with cloud masks. Clouds come from
// a multi-octave value-noise field thresholded with a feathered edge and are
// bright in every band. Confuser patches are bright in the visible bands but
// dark in near-infrared, so brightness alone cannot separate them from cloud.

namespace cdmamba {

namespace detail {

// bilinear value noise from a seeded lattice, period `cells` across the tile
inline std::vector<double> value_noise(std::size_t h, std::size_t w, std::size_t cells, Rng& rng) {
    std::size_t gh = cells + 1, gw = cells + 1;
    std::vector<double> grid(gh * gw);
    for (auto& v : grid) v = rng.uniform();
    std::vector<double> out(h * w);
    for (std::size_t y = 0; y < h; ++y) {
        double fy = static_cast<double>(y) / static_cast<double>(h) * cells;
        std::size_t y0 = static_cast<std::size_t>(fy);
        double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < w; ++x) {
            double fx = static_cast<double>(x) / static_cast<double>(w) * cells;
            std::size_t x0 = static_cast<std::size_t>(fx);
            double tx = fx - static_cast<double>(x0);
            double a = grid[y0 * gw + x0], b = grid[y0 * gw + x0 + 1];
            double c = grid[(y0 + 1) * gw + x0], d = grid[(y0 + 1) * gw + x0 + 1];
            out[y * w + x] = (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
        }
    }
    return out;
}

inline std::vector<double> octave_noise(std::size_t h, std::size_t w, Rng& rng) {
    std::vector<double> acc(h * w, 0.0);
    double weight = 1.0, total = 0.0;
    for (std::size_t cells : {2ul, 4ul, 8ul, 16ul}) {
        std::vector<double> layer = value_noise(h, w, cells, rng);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weight * layer[i];
        total += weight;
        weight *= 0.5;
    }
    for (auto& v : acc) v /= total;
    return acc;
}

// threshold placed by bisection so the cloud fraction lands on target
inline double coverage_cut(const std::vector<double>& field, double target) {
    double lo = 0.0, hi = 1.0;
    for (int it = 0; it < 40; ++it) {
        double mid = 0.5 * (lo + hi);
        std::size_t above = 0;
        for (double v : field)
            if (v > mid) ++above;
        double frac = static_cast<double>(above) / static_cast<double>(field.size());
        (frac > target ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

}  // namespace detail

struct LabeledScene {
    Tensor bands;  // [4,h,w]
    Tensor mask;   // [h,w], hard 0/1
};

struct SceneDebug {
    Tensor alpha;          // [h,w] feathered cloud opacity
    Tensor confuser;       // [h,w] 1 inside a confuser patch
    Tensor bands_clean;    // [4,h,w] before sensor noise
};

inline LabeledScene gen_scene(std::size_t h, std::size_t w, std::uint64_t seed,
                              SceneDebug* dbg = nullptr) {
    Rng rng(seed);
    Tensor bands({4, h, w});
    Tensor mask({h, w});
    Tensor alpha({h, w});
    Tensor confuser({h, w});

    // background terrain
    std::vector<double> t1 = detail::octave_noise(h, w, rng);
    std::vector<double> t2 = detail::octave_noise(h, w, rng);
    for (std::size_t i = 0; i < h * w; ++i) {
        bands[0 * h * w + i] = 0.22 + 0.16 * t1[i];
        bands[1 * h * w + i] = 0.25 + 0.16 * t1[i];
        bands[2 * h * w + i] = 0.22 + 0.13 * t2[i];
        bands[3 * h * w + i] = 0.42 + 0.28 * t2[i];  // vegetation stays nir-bright
    }

    // confuser patches: visible-bright, nir-dark ellipses
    std::size_t n_conf = 1 + rng.next_u64() % 3;
    for (std::size_t k = 0; k < n_conf; ++k) {
        double cy = rng.uniform() * h, cx = rng.uniform() * w;
        double ry = (0.08 + 0.10 * rng.uniform()) * h;
        double rx = (0.08 + 0.10 * rng.uniform()) * w;
        double vis = 0.80 + 0.10 * rng.uniform();
        double nir = 0.28 + 0.14 * rng.uniform();
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
                double dy = (y - cy) / ry, dx = (x - cx) / rx;
                if (dy * dy + dx * dx > 1.0) continue;
                std::size_t i = y * w + x;
                bands[0 * h * w + i] = vis;
                bands[1 * h * w + i] = vis;
                bands[2 * h * w + i] = vis - 0.03;
                bands[3 * h * w + i] = nir;
                confuser[i] = 1.0;
            }
    }

    // cloud field with feathered opacity; the label follows the crisp cut
    std::vector<double> field = detail::octave_noise(h, w, rng);
    double target = 0.20 + 0.25 * rng.uniform();
    double cut = detail::coverage_cut(field, target);
    double feather = 0.08;
    double cloud_base = 0.86 + 0.06 * rng.uniform();
    std::vector<double> tex = detail::octave_noise(h, w, rng);
    for (std::size_t i = 0; i < h * w; ++i) {
        double a = 0.5 + (field[i] - cut) / (2.0 * feather);
        a = std::clamp(a, 0.0, 1.0);
        alpha[i] = a;
        mask[i] = field[i] > cut ? 1.0 : 0.0;
        double cv = std::clamp(cloud_base + 0.06 * (tex[i] - 0.5), 0.0, 1.0);
        for (std::size_t b = 0; b < 4; ++b) {
            std::size_t j = b * h * w + i;
            bands[j] = bands[j] * (1.0 - a) + cv * a;
        }
    }

    if (dbg) {
        dbg->alpha = alpha;
        dbg->confuser = confuser;
        dbg->bands_clean = bands;
    }

    // sensor noise, applied after the label is fixed
    for (std::size_t j = 0; j < bands.size(); ++j)
        bands[j] = std::clamp(bands[j] + 0.03 * rng.normal(), 0.0, 1.0);

    return {std::move(bands), std::move(mask)};
}

struct SampleSet {
    Tensor x;  // [n,4,h,w]
    Tensor t;  // [n,h,w]
    std::size_t size() const { return x.extent(0); }
};

// tile i draws from a stream derived as (seed, i), so any subset regenerates
// identically regardless of order
inline SampleSet gen_synthetic(std::size_t count, std::size_t h, std::size_t w,
                               std::uint64_t seed) {
    SampleSet s{Tensor({count, 4, h, w}), Tensor({count, h, w})};
    for (std::size_t i = 0; i < count; ++i) {
        LabeledScene sc = gen_scene(h, w, Rng::derive(seed, i));
        std::copy(sc.bands.data(), sc.bands.data() + sc.bands.size(),
                  s.x.data() + i * 4 * h * w);
        std::copy(sc.mask.data(), sc.mask.data() + sc.mask.size(), s.t.data() + i * h * w);
    }
    return s;
}

struct SplitIndices {
    std::vector<std::size_t> train, val;
};

inline SplitIndices split_indices(std::size_t n, double val_fraction, std::uint64_t seed) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(seed);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.next_u64() % i]);
    std::size_t n_val = static_cast<std::size_t>(std::round(val_fraction * n));
    SplitIndices s;
    s.val.assign(order.begin(), order.begin() + n_val);
    s.train.assign(order.begin() + n_val, order.end());
    return s;
}

inline SampleSet take(const SampleSet& s, const std::vector<std::size_t>& idx) {
    std::size_t h = s.x.extent(2), w = s.x.extent(3);
    SampleSet out{Tensor({idx.size(), 4, h, w}), Tensor({idx.size(), h, w})};
    for (std::size_t i = 0; i < idx.size(); ++i) {
        const double* xs = s.x.data() + idx[i] * 4 * h * w;
        std::copy(xs, xs + 4 * h * w, out.x.data() + i * 4 * h * w);
        const double* ts = s.t.data() + idx[i] * h * w;
        std::copy(ts, ts + h * w, out.t.data() + i * h * w);
    }
    return out;
}

}  // namespace cdmamba
