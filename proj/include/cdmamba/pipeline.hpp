#pragma once

#include <cstddef>
#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include "cdmamba/loss.hpp"
#include "cdmamba/network.hpp"
#include "cdmamba/tensor.hpp"

// Scene-scale handling: disjoint tiling for training, mirror-padded tiling
// with crop-back for inference, and confusion overlays for inspection.

namespace cdmamba {

struct TileOffset {
    std::size_t row, col;  // pixel offsets of the tile origin
};

// row-major disjoint tiles; partial rows and columns at the borders are
// dropped, which is the training-time contract
template <typename S>
std::vector<TensorT<S>> tile_scene(const TensorT<S>& bands, std::size_t tile,
                                   std::vector<TileOffset>* offsets = nullptr) {
    if (bands.ndim() != 3) throw ShapeError("tile_scene: want [bands,h,w]");
    if (tile == 0) throw ShapeError("tile_scene: zero tile size");
    std::size_t nb = bands.extent(0), h = bands.extent(1), w = bands.extent(2);
    std::vector<TensorT<S>> out;
    if (offsets) offsets->clear();
    for (std::size_t r = 0; r + tile <= h; r += tile)
        for (std::size_t c = 0; c + tile <= w; c += tile) {
            TensorT<S> t({nb, tile, tile});
            for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t y = 0; y < tile; ++y)
                    for (std::size_t x = 0; x < tile; ++x)
                        t[(b * tile + y) * tile + x] = bands[(b * h + r + y) * w + c + x];
            out.push_back(std::move(t));
            if (offsets) offsets->push_back({r, c});
        }
    return out;
}

// mirror the interior across the last row/column (the edge itself is not
// repeated), growing bottom and right to the requested extents
template <typename S>
TensorT<S> reflect_pad(const TensorT<S>& bands, std::size_t target_h, std::size_t target_w) {
    if (bands.ndim() != 3) throw ShapeError("reflect_pad: want [bands,h,w]");
    std::size_t nb = bands.extent(0), h = bands.extent(1), w = bands.extent(2);
    if (target_h < h || target_w < w) throw ShapeError("reflect_pad: target smaller than input");
    if (target_h >= 2 * h || target_w >= 2 * w)
        throw ShapeError("reflect_pad: padding exceeds the mirrorable interior");
    TensorT<S> out({nb, target_h, target_w});
    for (std::size_t b = 0; b < nb; ++b)
        for (std::size_t y = 0; y < target_h; ++y) {
            std::size_t sy = y < h ? y : 2 * h - 2 - y;
            for (std::size_t x = 0; x < target_w; ++x) {
                std::size_t sx = x < w ? x : 2 * w - 2 - x;
                out[(b * target_h + y) * target_w + x] = bands[(b * h + sy) * w + sx];
            }
        }
    return out;
}

inline std::string tile_name(const std::string& scene, const TileOffset& at) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "_r%04zu_c%04zu", at.row, at.col);
    return scene + buf;
}

// pad to a tile multiple, run every tile through the network, stitch the
// probabilities, crop back to the scene extents
template <typename S>
TensorT<S> infer_scene(const TensorT<S>& bands, const ParamStoreT<S>& ps,
                       const NetworkConfig& cfg, std::size_t tile) {
    if (bands.ndim() != 3) throw ShapeError("infer_scene: want [bands,h,w]");
    if (tile % 32 != 0 || tile == 0) throw ShapeError("infer_scene: tile must be a multiple of 32");
    std::size_t nb = bands.extent(0), h = bands.extent(1), w = bands.extent(2);
    std::size_t ph = (h + tile - 1) / tile * tile;
    std::size_t pw = (w + tile - 1) / tile * tile;
    TensorT<S> padded = (ph == h && pw == w) ? bands : reflect_pad(bands, ph, pw);

    TensorT<S> stitched({ph, pw});
    for (std::size_t r = 0; r + tile <= ph; r += tile)
        for (std::size_t c = 0; c + tile <= pw; c += tile) {
            TensorT<S> x({1, nb, tile, tile});
            for (std::size_t b = 0; b < nb; ++b)
                for (std::size_t y = 0; y < tile; ++y)
                    for (std::size_t xx = 0; xx < tile; ++xx)
                        x[(b * tile + y) * tile + xx] = padded[(b * ph + r + y) * pw + c + xx];
            TensorT<S> prob = network_forward(x, ps, cfg);  // [1,tile,tile]
            for (std::size_t y = 0; y < tile; ++y)
                for (std::size_t xx = 0; xx < tile; ++xx)
                    stitched[(r + y) * pw + c + xx] = prob[y * tile + xx];
        }

    if (ph == h && pw == w) return stitched;
    TensorT<S> out({h, w});
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) out[y * w + x] = stitched[y * pw + x];
    return out;
}

// white hits, green false alarms, red misses, black correct background
template <typename S>
Tensor render_overlay(const TensorT<S>& prob, const TensorT<S>& truth, S threshold = S(0.5)) {
    require_same_shape(prob, truth, "render_overlay");
    if (prob.ndim() != 2) throw ShapeError("render_overlay: want [h,w]");
    check_binary_targets(truth);
    std::size_t h = prob.extent(0), w = prob.extent(1);
    Tensor rgb({3, h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        bool pred = prob[i] > threshold;
        bool truth_i = truth[i] == S(1);
        double r = 0, g = 0, b = 0;
        if (pred && truth_i) r = g = b = 1.0;
        else if (pred && !truth_i) g = 1.0;
        else if (!pred && truth_i) r = 1.0;
        rgb[i] = r;
        rgb[h * w + i] = g;
        rgb[2 * h * w + i] = b;
    }
    return rgb;
}

}  // namespace cdmamba
