#include <doctest.h>

#include <cmath>

#include "cdmamba/gradcheck.hpp"
#include "cdmamba/rng.hpp"
#include "cdmamba/smb.hpp"

using namespace cdmamba;

namespace {

SsmParams random_ssm(std::size_t c, std::size_t n, Rng& rng) {
    SsmParams p{Tensor({c, n}), Tensor({n, c}), Tensor({n, c}), Tensor({c, c}), Tensor({c})};
    for (std::size_t i = 0; i < p.a.size(); ++i) p.a[i] = -(0.2 + 2.0 * rng.uniform());
    for (std::size_t i = 0; i < p.w_b.size(); ++i) p.w_b[i] = 0.5 * rng.normal();
    for (std::size_t i = 0; i < p.w_c.size(); ++i) p.w_c[i] = 0.5 * rng.normal();
    for (std::size_t i = 0; i < p.w_delta.size(); ++i) p.w_delta[i] = 0.3 * rng.normal();
    for (std::size_t i = 0; i < p.bias_delta.size(); ++i) p.bias_delta[i] = 0.5 * rng.normal();
    return p;
}

CloudSmbParams random_block(std::size_t c_in, std::size_t c_out, std::size_t n, Rng& rng) {
    std::size_t q = c_in / 4;
    CloudSmbParams p{Tensor({c_in}), Tensor({c_in}), random_ssm(q, n, rng), random_ssm(q, n, rng),
                     Tensor({q, 2 * q}), Tensor({2 * c_in}), Tensor({2 * c_in}),
                     Tensor({c_out, 2 * c_in}), Tensor({c_out})};
    for (std::size_t i = 0; i < c_in; ++i) p.norm_in_gamma[i] = 1.0;
    for (std::size_t i = 0; i < 2 * c_in; ++i) p.norm_out_gamma[i] = 1.0;
    for (std::size_t i = 0; i < p.agg_w.size(); ++i) p.agg_w[i] = 0.4 * rng.normal();
    for (std::size_t i = 0; i < p.out_w.size(); ++i) p.out_w[i] = 0.3 * rng.normal();
    for (std::size_t i = 0; i < p.out_bias.size(); ++i) p.out_bias[i] = 0.1 * rng.normal();
    return p;
}

Tensor random_seq(std::size_t b, std::size_t l, std::size_t c, Rng& rng) {
    Tensor x({b, l, c});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    return x;
}

Tensor weights_like(const Tensor& x, Rng& rng) {
    Tensor w(x.shape());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.normal();
    return w;
}

double weighted_mean(const Tensor& y, const Tensor& w) {
    double acc = 0;
    for (std::size_t i = 0; i < y.size(); ++i) acc += y[i] * w[i];
    return acc / static_cast<double>(y.size());
}

}  // namespace

TEST_CASE("direction orders at length four") {
    Tensor x({1, 4, 1});
    for (std::size_t i = 0; i < 4; ++i) x.at3(0, i, 0) = static_cast<double>(i + 1);
    DirectionBundle<double> d = build_directions(x);

    double b_want[] = {4, 3, 2, 1};
    double fb_want[] = {1, 2, 4, 3};
    double bf_want[] = {2, 1, 3, 4};
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(d.b.at3(0, i, 0) == b_want[i]);
        CHECK(d.fb.at3(0, i, 0) == fb_want[i]);
        CHECK(d.bf.at3(0, i, 0) == bf_want[i]);
    }
}

TEST_CASE("direction permutations are involutions") {
    for (std::size_t l : {2ul, 4ul, 64ul, 1024ul}) {
        for (auto perm : {perm_reverse(l), perm_forward_backward(l), perm_backward_forward(l)}) {
            for (std::size_t i = 0; i < l; ++i) CHECK(perm[perm[i]] == i);
            CHECK(inverse_permutation(perm) == perm);
        }
        Rng rng(100 + l);
        Tensor x = random_seq(1, l, 3, rng);
        for (auto perm : {perm_reverse(l), perm_forward_backward(l), perm_backward_forward(l)})
            CHECK(max_abs_diff(permute_positions(permute_positions(x, perm), perm), x) == 0.0);
    }
}

TEST_CASE("half-swapped orders degenerate to identity at length two") {
    CHECK(perm_forward_backward(2) == perm_identity(2));
    CHECK(perm_backward_forward(2) == perm_identity(2));
}

TEST_CASE("odd sequence length rejected") {
    Tensor x({1, 5, 2});
    CHECK_THROWS_AS(build_directions(x), ShapeError);
}

TEST_CASE("dead scan paths leave pure residual") {
    Rng rng(17);
    CloudSmbParams p = random_block(8, 8, 4, rng);
    for (std::size_t i = 0; i < p.ssm_forward.w_c.size(); ++i) p.ssm_forward.w_c[i] = 0.0;
    for (std::size_t i = 0; i < p.ssm_reverse_family.w_c.size(); ++i)
        p.ssm_reverse_family.w_c[i] = 0.0;
    for (std::size_t i = 0; i < p.agg_w.size(); ++i) p.agg_w[i] = 0.0;

    Tensor chunk = random_seq(2, 8, 2, rng);
    Tensor gate = random_seq(2, 8, 2, rng);
    CHECK(max_abs_diff(smm_forward(chunk, gate, p), chunk) == 0.0);
}

TEST_CASE("zero chunk and gate give zero") {
    Rng rng(19);
    CloudSmbParams p = random_block(8, 8, 4, rng);
    Tensor z({1, 8, 2});
    Tensor y = smm_forward(z, z, p);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
}

TEST_CASE("block shape contract") {
    Rng rng(23);
    CloudSmbParams p = random_block(8, 16, 4, rng);
    Tensor x = random_seq(2, 64, 8, rng);
    Tensor y = cloud_smb(x, p);
    REQUIRE(y.shape() == Shape{2, 64, 16});
    CHECK(y.all_finite());

    Tensor bad({1, 64, 6});
    CHECK_THROWS_AS(cloud_smb(bad, p), ShapeError);
}

TEST_CASE("lane interleave order") {
    // with scans and aggregation dead, each scan lane reduces to its chunk, so
    // the wide tensor must read (chunk0, silu0, chunk1, silu1, ...)
    Rng rng(29);
    CloudSmbParams p = random_block(8, 16, 2, rng);
    for (std::size_t i = 0; i < p.ssm_forward.w_c.size(); ++i) p.ssm_forward.w_c[i] = 0.0;
    for (std::size_t i = 0; i < p.ssm_reverse_family.w_c.size(); ++i)
        p.ssm_reverse_family.w_c[i] = 0.0;
    for (std::size_t i = 0; i < p.agg_w.size(); ++i) p.agg_w[i] = 0.0;

    Tensor x = random_seq(1, 4, 8, rng);
    Tensor f = layer_norm_seq(x, p.norm_in_gamma, p.norm_in_beta, kNormEps);
    std::vector<Tensor> chunks = split(f, 2, 4);
    std::vector<Tensor> lanes;
    for (std::size_t i = 0; i < 4; ++i) {
        lanes.push_back(chunks[i]);
        lanes.push_back(silu(chunks[i]));
    }
    Tensor wide = concat(lanes, 2);
    Tensor want = channel_linear(
        layer_norm_seq(wide, p.norm_out_gamma, p.norm_out_beta, kNormEps), p.out_w, &p.out_bias);
    CHECK(max_abs_diff(cloud_smb(x, p), want) == 0.0);
}

TEST_CASE("batch rows are independent") {
    Rng rng(31);
    CloudSmbParams p = random_block(8, 12, 4, rng);
    Tensor x = random_seq(2, 16, 8, rng);
    Tensor y = cloud_smb(x, p);

    for (std::size_t bi = 0; bi < 2; ++bi) {
        Tensor row({1, 16, 8});
        for (std::size_t i = 0; i < row.size(); ++i) row[i] = x[bi * row.size() + i];
        Tensor yr = cloud_smb(row, p);
        for (std::size_t i = 0; i < yr.size(); ++i) CHECK(yr[i] == y[bi * yr.size() + i]);
    }
}

TEST_CASE("both scan parameter sets are live") {
    Rng rng(37);
    CloudSmbParams p = random_block(8, 8, 4, rng);
    Tensor x = random_seq(1, 8, 8, rng);
    Tensor base = cloud_smb(x, p);

    CloudSmbParams pf = p;
    pf.ssm_forward.w_c[0] += 0.5;
    CHECK(max_abs_diff(cloud_smb(x, pf), base) > 0.0);

    CloudSmbParams pr = p;
    pr.ssm_reverse_family.w_c[0] += 0.5;
    CHECK(max_abs_diff(cloud_smb(x, pr), base) > 0.0);
}

TEST_CASE("block determinism") {
    Rng rng(41);
    CloudSmbParams p = random_block(8, 16, 4, rng);
    Tensor x = random_seq(2, 32, 8, rng);
    CHECK(max_abs_diff(cloud_smb(x, p), cloud_smb(x, p)) == 0.0);
}

TEST_CASE("taped block matches the plain path") {
    Rng rng(43);
    CloudSmbParams p = random_block(8, 12, 4, rng);
    Tensor x = random_seq(2, 16, 8, rng);

    Tape<double> t;
    ad::CloudSmbVars<double> pv{
        make_leaf(t, p.norm_in_gamma),
        make_leaf(t, p.norm_in_beta),
        {make_leaf(t, p.ssm_forward.a), make_leaf(t, p.ssm_forward.w_b),
         make_leaf(t, p.ssm_forward.w_c), make_leaf(t, p.ssm_forward.w_delta),
         make_leaf(t, p.ssm_forward.bias_delta)},
        {make_leaf(t, p.ssm_reverse_family.a), make_leaf(t, p.ssm_reverse_family.w_b),
         make_leaf(t, p.ssm_reverse_family.w_c), make_leaf(t, p.ssm_reverse_family.w_delta),
         make_leaf(t, p.ssm_reverse_family.bias_delta)},
        make_leaf(t, p.agg_w),
        make_leaf(t, p.norm_out_gamma),
        make_leaf(t, p.norm_out_beta),
        make_leaf(t, p.out_w),
        make_leaf(t, p.out_bias)};
    Var y = ad::cloud_smb(make_leaf(t, x), pv);
    CHECK(max_abs_diff(y.value(), cloud_smb(x, p)) <= 1e-14);
}

TEST_CASE("full block gradient check") {
    Rng rng(47);
    std::size_t b = 1, l = 16, c_in = 4, c_out = 4, n = 2;
    CloudSmbParams p = random_block(c_in, c_out, n, rng);
    Tensor x0 = random_seq(b, l, c_in, rng);
    Tensor wts = weights_like(Tensor({b, l, c_out}), rng);

    Tape<double> t;
    Var x = make_leaf(t, x0);
    ad::CloudSmbVars<double> pv{
        make_leaf(t, p.norm_in_gamma),
        make_leaf(t, p.norm_in_beta),
        {make_leaf(t, p.ssm_forward.a), make_leaf(t, p.ssm_forward.w_b),
         make_leaf(t, p.ssm_forward.w_c), make_leaf(t, p.ssm_forward.w_delta),
         make_leaf(t, p.ssm_forward.bias_delta)},
        {make_leaf(t, p.ssm_reverse_family.a), make_leaf(t, p.ssm_reverse_family.w_b),
         make_leaf(t, p.ssm_reverse_family.w_c), make_leaf(t, p.ssm_reverse_family.w_delta),
         make_leaf(t, p.ssm_reverse_family.bias_delta)},
        make_leaf(t, p.agg_w),
        make_leaf(t, p.norm_out_gamma),
        make_leaf(t, p.norm_out_beta),
        make_leaf(t, p.out_w),
        make_leaf(t, p.out_bias)};
    Var y = ad::cloud_smb(x, pv);
    Var L = ad::mean_all(ad::mul(y, make_leaf(t, wts)));
    t.backward(L.id);

    auto f = [&]() { return weighted_mean(cloud_smb(x0, p), wts); };
    CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.norm_in_gamma, t.grad(pv.norm_in_gamma.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.ssm_forward.w_b, t.grad(pv.ssm_forward.w_b.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.ssm_forward.a, t.grad(pv.ssm_forward.a.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.ssm_reverse_family.w_c, t.grad(pv.ssm_reverse_family.w_c.id), f)
              .max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.ssm_reverse_family.bias_delta,
                                t.grad(pv.ssm_reverse_family.bias_delta.id), f)
              .max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.agg_w, t.grad(pv.agg_w.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.norm_out_beta, t.grad(pv.norm_out_beta.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.out_w, t.grad(pv.out_w.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.out_bias, t.grad(pv.out_bias.id), f).max_rel <= 1e-4);
}

TEST_CASE("single direction substitute") {
    Rng rng(53);
    std::size_t c_in = 8, c_out = 12;
    PlainMambaParams p{Tensor({c_in}), Tensor({c_in}), random_ssm(c_in, 4, rng),
                       Tensor({c_out, c_in}), Tensor({c_out})};
    for (std::size_t i = 0; i < c_in; ++i) p.norm_gamma[i] = 1.0;
    for (std::size_t i = 0; i < p.out_w.size(); ++i) p.out_w[i] = 0.3 * rng.normal();
    for (std::size_t i = 0; i < p.out_bias.size(); ++i) p.out_bias[i] = 0.1 * rng.normal();

    Tensor x = random_seq(2, 16, c_in, rng);
    Tensor y = plain_mamba(x, p);
    REQUIRE(y.shape() == Shape{2, 16, c_out});
    CHECK(y.all_finite());

    Tape<double> t;
    ad::PlainMambaVars<double> pv{make_leaf(t, p.norm_gamma),
                                  make_leaf(t, p.norm_beta),
                                  {make_leaf(t, p.ssm.a), make_leaf(t, p.ssm.w_b),
                                   make_leaf(t, p.ssm.w_c), make_leaf(t, p.ssm.w_delta),
                                   make_leaf(t, p.ssm.bias_delta)},
                                  make_leaf(t, p.out_w),
                                  make_leaf(t, p.out_bias)};
    Var yv = ad::plain_mamba(make_leaf(t, x), pv);
    CHECK(max_abs_diff(yv.value(), y) <= 1e-14);
}

TEST_CASE("plain substitute gradient check") {
    Rng rng(59);
    std::size_t b = 1, l = 8, c = 4;
    PlainMambaParams p{Tensor({c}), Tensor({c}), random_ssm(c, 2, rng), Tensor({c, c}),
                       Tensor({c})};
    for (std::size_t i = 0; i < c; ++i) p.norm_gamma[i] = 1.0;
    for (std::size_t i = 0; i < p.out_w.size(); ++i) p.out_w[i] = 0.3 * rng.normal();

    Tensor x0 = random_seq(b, l, c, rng);
    Tensor wts = weights_like(Tensor({b, l, c}), rng);

    Tape<double> t;
    Var x = make_leaf(t, x0);
    ad::PlainMambaVars<double> pv{make_leaf(t, p.norm_gamma),
                                  make_leaf(t, p.norm_beta),
                                  {make_leaf(t, p.ssm.a), make_leaf(t, p.ssm.w_b),
                                   make_leaf(t, p.ssm.w_c), make_leaf(t, p.ssm.w_delta),
                                   make_leaf(t, p.ssm.bias_delta)},
                                  make_leaf(t, p.out_w),
                                  make_leaf(t, p.out_bias)};
    Var y = ad::plain_mamba(x, pv);
    Var L = ad::mean_all(ad::mul(y, make_leaf(t, wts)));
    t.backward(L.id);

    auto f = [&]() { return weighted_mean(plain_mamba(x0, p), wts); };
    CHECK(check_tensor_gradient(x0, t.grad(x.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.ssm.w_delta, t.grad(pv.ssm.w_delta.id), f).max_rel <= 1e-4);
    CHECK(check_tensor_gradient(p.norm_gamma, t.grad(pv.norm_gamma.id), f).max_rel <= 1e-4);
}
