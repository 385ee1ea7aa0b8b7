#include <doctest.h>

#include <cmath>

#include "cdmamba/gradcheck.hpp"
#include "cdmamba/ops_basic.hpp"
#include "cdmamba/ops_image.hpp"
#include "cdmamba/rng.hpp"
#include "cdmamba/tape.hpp"
#include "cdmamba/taped_ops.hpp"

using namespace cdmamba;

namespace {

Tensor rand_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
    Tensor t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = scale * rng.normal();
    return t;
}

double weighted_mean(const Tensor& y, const Tensor& w) {
    double acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
    return acc / static_cast<double>(y.size());
}

// builds L = mean(w ⊙ y) on the tape and returns the gradient of one leaf
template <typename Build>
Tensor taped_gradient(Tape<double>& t, const Tensor& probe, std::size_t leaf_id, const Tensor& w,
                      Build&& build) {
    (void)probe;
    Var y = build();
    Var wv = make_leaf(t, w);
    Var L = ad::mean_all(ad::mul(y, wv));
    t.backward(L.id);
    return t.grad(leaf_id);
}

}  // namespace

TEST_CASE("tape accumulates fan-out gradients") {
    Tape<double> t;
    Tensor x0({3});
    x0[0] = 1.0;
    x0[1] = -2.0;
    x0[2] = 0.5;
    Var x = make_leaf(t, x0);
    Var y = ad::add(ad::mul(x, x), x);  // x^2 + x, grad 2x + 1
    Var L = ad::mean_all(y);
    t.backward(L.id);
    const Tensor& g = t.grad(x.id);
    for (std::size_t i = 0; i < 3; ++i)
        CHECK(g[i] == doctest::Approx((2.0 * x0[i] + 1.0) / 3.0).epsilon(1e-12));
}

TEST_CASE("elementwise and activation gradients") {
    Rng rng(101);
    Tensor x0 = rand_tensor({2, 5}, rng);
    Tensor b0 = rand_tensor({2, 5}, rng);
    Tensor w = rand_tensor({2, 5}, rng);

    SUBCASE("add sub mul scale") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var b = make_leaf(t, b0);
        Var y = ad::scale(ad::mul(ad::add(x, b), ad::sub(x, b)), 1.5);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        Tensor gx = t.grad(x.id);
        Tensor gb = t.grad(b.id);
        auto f = [&]() {
            return weighted_mean(scale(mul(add(x0, b0), sub(x0, b0)), 1.5), w);
        };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, gb, f).max_rel <= 1e-5);
    }

    SUBCASE("sigmoid") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::sigmoid(x); });
        auto f = [&]() { return weighted_mean(sigmoid(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("gelu") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::gelu(x); });
        auto f = [&]() { return weighted_mean(gelu(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("silu") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::silu(x); });
        auto f = [&]() { return weighted_mean(silu(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("corrupted adjoint is detected") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::gelu(x); });
        for (std::size_t i = 0; i < gx.size(); ++i) gx[i] *= 2.0;  // deliberate corruption
        auto f = [&]() { return weighted_mean(gelu(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel > 1e-1);
    }
}

TEST_CASE("axis op gradients") {
    Rng rng(202);
    Tensor x0 = rand_tensor({2, 4, 6}, rng);

    SUBCASE("split concat permute slice") {
        Tensor w = rand_tensor({2, 4, 6}, rng);
        std::vector<std::size_t> perm{3, 1, 0, 2};
        Tape<double> t;
        Var x = make_leaf(t, x0);
        auto build = [&] {
            auto parts = ad::split(x, 2, 2);
            Var m = ad::concat<double>({ad::scale(parts[0], 2.0), parts[1]}, 2);
            return ad::permute_positions(m, perm);
        };
        Tensor gx = taped_gradient(t, x0, x.id, w, build);
        auto f = [&]() {
            auto parts = split(x0, 2, 2);
            Tensor m = concat<double>({scale(parts[0], 2.0), parts[1]}, 2);
            return weighted_mean(permute_positions(m, perm), w);
        };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("slice_axis") {
        Tensor w = rand_tensor({2, 2, 6}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::slice_axis(x, 1, 1, 2); });
        auto f = [&]() { return weighted_mean(slice_axis(x0, 1, 1, 2), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("reshape") {
        Tensor w = rand_tensor({8, 6}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::reshape(x, Shape{8, 6}); });
        auto f = [&]() { return weighted_mean(reshape(x0, {8, 6}), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }
}

TEST_CASE("linear and matmul gradients") {
    Rng rng(303);
    Tensor x0 = rand_tensor({2, 3, 4}, rng);
    Tensor w0 = rand_tensor({5, 4}, rng);
    Tensor b0 = rand_tensor({5}, rng);
    Tensor w = rand_tensor({2, 3, 5}, rng);

    SUBCASE("channel_linear") {
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var wm = make_leaf(t, w0);
        Var bv = make_leaf(t, b0);
        Var y = ad::channel_linear(x, wm, std::optional<Var>(bv));
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(channel_linear(x0, w0, &b0), w); };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(w0, t.grad(wm.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, t.grad(bv.id), f).max_rel <= 1e-5);
    }

    SUBCASE("matmul") {
        Tensor a0 = rand_tensor({2, 3, 4}, rng);
        Tensor c0 = rand_tensor({2, 4, 5}, rng);
        Tensor wm = rand_tensor({2, 3, 5}, rng);
        Tape<double> t;
        Var a = make_leaf(t, a0);
        Var c = make_leaf(t, c0);
        Var y = ad::matmul(a, c);
        Var wv = make_leaf(t, wm);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(matmul(a0, c0), wm); };
        CHECK(check_tensor_gradient(a0, t.grad(a.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(c0, t.grad(c.id), f).max_rel <= 1e-5);
    }

    SUBCASE("softmax_rows") {
        Tensor w2 = rand_tensor({2, 3, 4}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w2, [&] { return ad::softmax_rows(x); });
        auto f = [&]() { return weighted_mean(softmax_rows(x0), w2); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }
}

TEST_CASE("conv gradients") {
    Rng rng(404);

    SUBCASE("conv2d stride 1 pad 1") {
        Tensor x0 = rand_tensor({2, 3, 4, 4}, rng);
        Tensor k0 = rand_tensor({2, 3, 3, 3}, rng);
        Tensor b0 = rand_tensor({2}, rng);
        Tensor w = rand_tensor({2, 2, 4, 4}, rng);
        Conv2dSpec sp{1, 1, 1};
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var k = make_leaf(t, k0);
        Var b = make_leaf(t, b0);
        Var y = ad::conv2d(x, k, std::optional<Var>(b), sp);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(conv2d(x0, k0, &b0, sp), w); };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(k0, t.grad(k.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, t.grad(b.id), f).max_rel <= 1e-5);
    }

    SUBCASE("conv2d stride 2 dilation 2") {
        Tensor x0 = rand_tensor({1, 2, 7, 7}, rng);
        Tensor k0 = rand_tensor({2, 2, 3, 3}, rng);
        Conv2dSpec sp{2, 2, 2};
        std::size_t oh = conv_out_extent(7, 3, sp);
        Tensor w = rand_tensor({1, 2, oh, oh}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var k = make_leaf(t, k0);
        Var y = ad::conv2d(x, k, std::optional<Var>(), sp);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() {
            return weighted_mean(conv2d(x0, k0, static_cast<const Tensor*>(nullptr), sp), w);
        };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(k0, t.grad(k.id), f).max_rel <= 1e-5);
    }

    SUBCASE("conv1d_k3") {
        Tensor x0 = rand_tensor({2, 6}, rng);
        Tensor k0 = rand_tensor({3}, rng);
        Tensor b0 = rand_tensor({1}, rng);
        Tensor w = rand_tensor({2, 6}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var k = make_leaf(t, k0);
        Var b = make_leaf(t, b0);
        Var y = ad::conv1d_k3(x, k, std::optional<Var>(b));
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(conv1d_k3(x0, k0, &b0), w); };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(k0, t.grad(k.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, t.grad(b.id), f).max_rel <= 1e-5);
    }
}

TEST_CASE("pooling and resampling gradients") {
    Rng rng(505);

    SUBCASE("maxpool2") {
        Tensor x0 = rand_tensor({1, 2, 4, 4}, rng);
        Tensor w = rand_tensor({1, 2, 2, 2}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::maxpool2(x); });
        auto f = [&]() { return weighted_mean(maxpool2(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }

    SUBCASE("bilinear_upsample2") {
        Tensor x0 = rand_tensor({1, 2, 3, 3}, rng);
        Tensor w = rand_tensor({1, 2, 6, 6}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::bilinear_upsample2(x); });
        auto f = [&]() { return weighted_mean(bilinear_upsample2(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }
}

TEST_CASE("normalization gradients") {
    Rng rng(606);

    SUBCASE("group_norm") {
        Tensor x0 = rand_tensor({2, 4, 3, 3}, rng);
        Tensor g0 = rand_tensor({4}, rng);
        Tensor b0 = rand_tensor({4}, rng);
        Tensor w = rand_tensor({2, 4, 3, 3}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var gm = make_leaf(t, g0);
        Var bt = make_leaf(t, b0);
        Var y = ad::group_norm(x, 2, gm, bt, 1e-5);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(group_norm(x0, 2, g0, b0, 1e-5), w); };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(g0, t.grad(gm.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, t.grad(bt.id), f).max_rel <= 1e-5);
    }

    SUBCASE("layer_norm_seq") {
        Tensor x0 = rand_tensor({2, 3, 4}, rng);
        Tensor g0 = rand_tensor({4}, rng);
        Tensor b0 = rand_tensor({4}, rng);
        Tensor w = rand_tensor({2, 3, 4}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var gm = make_leaf(t, g0);
        Var bt = make_leaf(t, b0);
        Var y = ad::layer_norm_seq(x, gm, bt, 1e-5);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() { return weighted_mean(layer_norm_seq(x0, g0, b0, 1e-5), w); };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(g0, t.grad(gm.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(b0, t.grad(bt.id), f).max_rel <= 1e-5);
    }
}

TEST_CASE("pooled map and broadcast gradients") {
    Rng rng(707);

    SUBCASE("channel maps and gap") {
        Tensor x0 = rand_tensor({2, 3, 2, 2}, rng);
        Tensor wmean = rand_tensor({2, 1, 2, 2}, rng);
        Tensor wgap = rand_tensor({2, 3}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var y1 = ad::channel_mean_map(x);
        Var y2 = ad::channel_max_map(x);
        Var y3 = ad::global_avg_pool(x);
        Var w1 = make_leaf(t, wmean);
        Var w2 = make_leaf(t, wmean);
        Var w3 = make_leaf(t, wgap);
        Var L = ad::add(ad::add(ad::mean_all(ad::mul(y1, w1)), ad::mean_all(ad::mul(y2, w2))),
                        ad::mean_all(ad::mul(y3, w3)));
        t.backward(L.id);
        auto f = [&]() {
            return weighted_mean(channel_mean_map(x0), wmean) +
                   weighted_mean(channel_max_map(x0), wmean) +
                   weighted_mean(global_avg_pool(x0), wgap);
        };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
    }

    SUBCASE("mul_mask and mul_channel_weights") {
        Tensor x0 = rand_tensor({2, 3, 2, 2}, rng);
        Tensor m0 = rand_tensor({2, 1, 2, 2}, rng);
        Tensor c0 = rand_tensor({2, 3}, rng);
        Tensor w = rand_tensor({2, 3, 2, 2}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Var m = make_leaf(t, m0);
        Var cv = make_leaf(t, c0);
        Var y = ad::mul_channel_weights(ad::mul_mask(x, m), cv);
        Var wv = make_leaf(t, w);
        Var L = ad::mean_all(ad::mul(y, wv));
        t.backward(L.id);
        auto f = [&]() {
            return weighted_mean(mul_channel_weights(mul_mask(x0, m0), c0), w);
        };
        CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(m0, t.grad(m.id), f).max_rel <= 1e-5);
        CHECK(check_tensor_gradient(c0, t.grad(cv.id), f).max_rel <= 1e-5);
    }

    SUBCASE("layout converters") {
        Tensor x0 = rand_tensor({2, 3, 2, 4}, rng);
        Tensor w = rand_tensor({2, 8, 3}, rng);
        Tape<double> t;
        Var x = make_leaf(t, x0);
        Tensor gx = taped_gradient(t, x0, x.id, w, [&] { return ad::seq_from_image(x); });
        auto f = [&]() { return weighted_mean(seq_from_image(x0), w); };
        CHECK(check_tensor_gradient(x0, gx, f).max_rel <= 1e-5);
    }
}
