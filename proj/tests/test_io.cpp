#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "cdmamba/io.hpp"
#include "cdmamba/optim.hpp"
#include "cdmamba/rng.hpp"
#include "cdmamba/trainer.hpp"

using namespace cdmamba;

namespace {

Tensor random_tensor(const Shape& s, std::uint64_t seed) {
    Rng rng(seed);
    Tensor t(s);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("tensor container round trip") {
    Tensor t = random_tensor({3, 5, 2}, 1);
    std::stringstream ss;
    write_tensor(ss, t);
    Tensor back = read_tensor<double>(ss);
    REQUIRE(back.shape() == t.shape());
    CHECK(max_abs_diff(back, t) == 0.0);
}

TEST_CASE("single precision container and cross-precision load") {
    TensorT<float> t({4, 4});
    Rng rng(2);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(rng.normal());
    std::stringstream ss;
    write_tensor(ss, t);
    std::string payload = ss.str();

    std::stringstream s1(payload);
    TensorT<float> f = read_tensor<float>(s1);
    CHECK(max_abs_diff(f, t) == 0.0f);

    std::stringstream s2(payload);
    Tensor d = read_tensor<double>(s2);
    for (std::size_t i = 0; i < t.size(); ++i) CHECK(d[i] == static_cast<double>(t[i]));
}

TEST_CASE("container rejects corruption") {
    Tensor t = random_tensor({2, 2}, 3);
    std::stringstream ss;
    write_tensor(ss, t);
    std::string payload = ss.str();

    std::string bad_magic = payload;
    bad_magic[0] = 'X';
    std::stringstream b1(bad_magic);
    CHECK_THROWS_AS(read_tensor<double>(b1), IoError);

    std::stringstream b2(payload.substr(0, payload.size() - 5));
    CHECK_THROWS_AS(read_tensor<double>(b2), IoError);

    std::string bad_version = payload;
    bad_version[4] = 9;
    std::stringstream b3(bad_version);
    CHECK_THROWS_AS(read_tensor<double>(b3), IoError);
}

TEST_CASE("weight store round trip") {
    NetworkConfig cfg;
    cfg.stage_widths = {4, 4, 4, 4, 4, 4};
    cfg.in_bands = 2;
    cfg.ssm_state_dim = 2;
    ParamStore ps = init_params<double>(cfg, 5);

    std::stringstream ss;
    write_params(ss, ps);
    ParamStore back = read_params<double>(ss);
    REQUIRE(back.count() == ps.count());
    for (std::size_t i = 0; i < ps.count(); ++i) {
        CHECK(back.name(i) == ps.name(i));
        CHECK(max_abs_diff(back.tensor(i), ps.tensor(i)) == 0.0);
    }
    validate_params(back, cfg);

    NetworkConfig other = cfg;
    other.stage_widths = {8, 8, 8, 8, 8, 8};
    CHECK_THROWS_AS(validate_params(back, other), IoError);
}

TEST_CASE("weight store file round trip") {
    NetworkConfig cfg;
    cfg.stage_widths = {4, 4, 4, 4, 4, 4};
    cfg.in_bands = 2;
    cfg.ssm_state_dim = 2;
    ParamStore ps = init_params<double>(cfg, 6);
    std::string path = "io_test_weights.cdmw";
    save_params(path, ps);
    ParamStore back = load_params<double>(path);
    CHECK(back.count() == ps.count());
    CHECK(max_abs_diff(back.at("head.conv.weight"), ps.at("head.conv.weight")) == 0.0);
    std::remove(path.c_str());
    CHECK_THROWS_AS(load_params<double>(path), IoError);
}

TEST_CASE("config parsing") {
    std::stringstream ss(
        "# training setup\n"
        "epochs = 12\n"
        "lr0=0.002   # inline comment\n"
        "  run_name =  demo run \n"
        "\n"
        "use_da = false\n");
    Config c = Config::parse(ss);
    CHECK(c.get_size("epochs", 80) == 12);
    CHECK(c.get_double("lr0", 1e-3) == 0.002);
    CHECK(c.get_string("run_name", "x") == "demo run");
    CHECK(c.get_bool("use_da", true) == false);
    CHECK(c.get_double("absent", 7.5) == 7.5);
    c.reject_unknown();
}

TEST_CASE("config rejects malformed and unknown input") {
    std::stringstream bad1("epochs 12\n");
    CHECK_THROWS_AS(Config::parse(bad1), IoError);

    std::stringstream bad2("epochs = \n");
    CHECK_THROWS_AS(Config::parse(bad2), IoError);

    std::stringstream bad3("a = 1\na = 2\n");
    CHECK_THROWS_AS(Config::parse(bad3), IoError);

    std::stringstream ss("known = 1\nmystery = 2\n");
    Config c = Config::parse(ss);
    c.get_size("known", 0);
    CHECK_THROWS_AS(c.reject_unknown(), IoError);

    std::stringstream nb("epochs = seven\n");
    Config c2 = Config::parse(nb);
    CHECK_THROWS_AS(c2.get_size("epochs", 1), IoError);
}

TEST_CASE("ppm writer output bytes") {
    Tensor rgb({3, 2, 2});
    rgb[0] = 1.0;              // r of top-left
    rgb[4 + 1] = 0.5;          // g of top-right
    rgb[8 + 2] = 2.0;          // b of bottom-left, clamped to 1
    rgb[8 + 3] = -1.0;         // clamped to 0
    std::string path = "io_test.ppm";
    write_ppm(path, rgb);

    std::ifstream is(path, std::ios::binary);
    std::stringstream buf;
    buf << is.rdbuf();
    std::string got = buf.str();
    std::string head = "P6\n2 2\n255\n";
    REQUIRE(got.size() == head.size() + 12);
    CHECK(got.compare(0, head.size(), head) == 0);
    const unsigned char* px = reinterpret_cast<const unsigned char*>(got.data() + head.size());
    CHECK(px[0] == 255);  // top-left r
    CHECK(px[1] == 0);
    CHECK(px[4] == 128);  // top-right g: round(0.5*255 + 0.5)
    CHECK(px[6] == 0);    // bottom-left r
    CHECK(px[8] == 255);  // bottom-left b clamped from above
    CHECK(px[11] == 0);   // bottom-right b clamped from below
    std::remove(path.c_str());
}

TEST_CASE("epoch log line format") {
    std::string line = format_epoch_line(3, 1e-3, 0.6931471805599453, 0.5, 0.666667, 0.75);
    CHECK(line == "epoch=3 lr=0.001 loss=0.69314718 val_miou=0.500000 val_f1=0.666667 val_acc=0.750000");
}

TEST_CASE("checkpoint round trip restores training state") {
    NetworkConfig cfg;
    cfg.stage_widths = {4, 4, 4, 4, 4, 4};
    cfg.in_bands = 2;
    cfg.ssm_state_dim = 2;
    ParamStore ps = init_params<double>(cfg, 7);
    AdamW opt(ps, 0.9, 0.999, 1e-8, 1e-2);

    std::vector<Tensor> g;
    Rng rng(8);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        Tensor t(ps.tensor(i).shape());
        for (std::size_t j = 0; j < t.size(); ++j) t[j] = 0.01 * rng.normal();
        g.push_back(t);
    }
    opt.step(ps, g, 1e-3);

    std::string path = "io_test_ckpt.cdmw";
    save_checkpoint(path, ps, opt, 5);

    ParamStore ps2 = init_params<double>(cfg, 99);
    AdamW opt2(ps2, 0.9, 0.999, 1e-8, 1e-2);
    std::size_t next = load_checkpoint(path, ps2, opt2);
    CHECK(next == 5);
    CHECK(opt2.steps() == 1);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        CHECK(max_abs_diff(ps2.tensor(i), ps.tensor(i)) == 0.0);
        CHECK(max_abs_diff(opt2.first_moment(i), opt.first_moment(i)) == 0.0);
        CHECK(max_abs_diff(opt2.second_moment(i), opt.second_moment(i)) == 0.0);
    }

    // identical updates after restore
    opt.step(ps, g, 5e-4);
    opt2.step(ps2, g, 5e-4);
    for (std::size_t i = 0; i < ps.count(); ++i)
        CHECK(max_abs_diff(ps2.tensor(i), ps.tensor(i)) == 0.0);
    std::remove(path.c_str());
}
