// Command-line surface: training, inference, evaluation, tiling, gradient
// checking, synthetic data generation, and kernel benchmarks.
//
// Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cdmamba/data.hpp"
#include "cdmamba/io.hpp"
#include "cdmamba/pipeline.hpp"
#include "cdmamba/trainer.hpp"

namespace fs = std::filesystem;
using namespace cdmamba;
using Clock = std::chrono::steady_clock;

namespace {

// ------------------------------------------------------------------ plumbing

// mirrors every line to both the console and the log file
class TeeBuf : public std::streambuf {
public:
    TeeBuf(std::streambuf* a, std::streambuf* b) : a_(a), b_(b) {}

protected:
    int overflow(int c) override {
        if (c == EOF) return c;
        if (a_->sputc(static_cast<char>(c)) == EOF) return EOF;
        if (b_->sputc(static_cast<char>(c)) == EOF) return EOF;
        return c;
    }
    int sync() override { return a_->pubsync() == 0 && b_->pubsync() == 0 ? 0 : -1; }

private:
    std::streambuf* a_;
    std::streambuf* b_;
};

std::vector<std::size_t> parse_widths(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(static_cast<std::size_t>(std::stoull(item)));
        } catch (const std::logic_error&) {
            throw IoError("config: bad stage width '" + item + "'");
        }
    }
    return out;
}

struct ScenePair {
    std::string stem;
    fs::path bands;
    fs::path mask;  // may be empty
};

// pairs <stem>.bands.cdmt with <stem>.mask.cdmt, sorted by stem
std::vector<ScenePair> discover_pairs(const std::string& dir, bool need_mask) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
    const std::string suffix = ".bands.cdmt";
    std::vector<ScenePair> pairs;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string name = entry.path().filename().string();
        if (name.size() <= suffix.size() || name.substr(name.size() - suffix.size()) != suffix)
            continue;
        ScenePair p;
        p.stem = name.substr(0, name.size() - suffix.size());
        p.bands = entry.path();
        fs::path mask = entry.path().parent_path() / (p.stem + ".mask.cdmt");
        if (fs::exists(mask))
            p.mask = mask;
        else if (need_mask)
            throw IoError("missing mask for scene: " + p.stem);
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw IoError("no *.bands.cdmt scenes in: " + dir);
    std::sort(pairs.begin(), pairs.end(),
              [](const ScenePair& a, const ScenePair& b) { return a.stem < b.stem; });
    return pairs;
}

SampleSet load_sample_set(const std::string& dir) {
    std::vector<ScenePair> pairs = discover_pairs(dir, true);
    Tensor first = load_tensor<double>(pairs[0].bands.string());
    if (first.ndim() != 3 || first.extent(0) != 4)
        throw IoError("scene bands must be [4,h,w]: " + pairs[0].bands.string());
    std::size_t h = first.extent(1), w = first.extent(2);

    SampleSet set;
    set.x = Tensor({pairs.size(), 4, h, w});
    set.t = Tensor({pairs.size(), h, w});
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        Tensor bands = i == 0 ? std::move(first) : load_tensor<double>(pairs[i].bands.string());
        Tensor mask = load_tensor<double>(pairs[i].mask.string());
        if (bands.shape() != Shape{4, h, w} || mask.shape() != Shape{h, w})
            throw IoError("scene extents differ across the set: " + pairs[i].stem);
        std::copy(&bands[0], &bands[0] + bands.size(), &set.x[i * 4 * h * w]);
        std::copy(&mask[0], &mask[0] + mask.size(), &set.t[i * h * w]);
    }
    return set;
}

std::string metrics_line(const Metrics& m) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "miou=%.6f f1=%.6f acc=%.6f", m.miou, m.f1, m.acc);
    return buf;
}

// --------------------------------------------------------------------- train

struct TrainArgs {
    std::string config_path, data, out, precision = "double";
    bool resume = false;
};

template <typename S>
int run_train(const NetworkConfig& net_cfg, const TrainConfig& tc, const SampleSet& data,
              const fs::path& out_dir, std::uint64_t init_seed, bool resume) {
    ParamStoreT<S> ps = init_params<S>(net_cfg, init_seed);
    AdamWT<S> opt(ps, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    fs::path ckpt = out_dir / "checkpoint.cdmw";

    std::size_t start_epoch = 0;
    if (resume) {
        if (!fs::exists(ckpt)) throw IoError("resume: no checkpoint at " + ckpt.string());
        start_epoch = load_checkpoint(ckpt.string(), ps, opt);
        std::cout << "resuming at epoch " << start_epoch << "\n";
    }

    std::ofstream log_file(out_dir / "train.log", resume ? std::ios::app : std::ios::trunc);
    if (!log_file) throw IoError("cannot write log in " + out_dir.string());
    TeeBuf tee(std::cout.rdbuf(), log_file.rdbuf());
    std::ostream log(&tee);

    auto t0 = Clock::now();
    auto stats = train(ps, net_cfg, tc, data, &log, ckpt.string(), start_epoch, &opt);
    double secs = std::chrono::duration<double>(Clock::now() - t0).count();

    save_model((out_dir / "model.cdmw").string(), ps, net_cfg);
    if (!stats.empty())
        std::cout << "done: epochs=" << stats.size() << " final_val_miou=" << stats.back().miou
                  << " wall=" << secs << "s\n";
    std::cout << "model written to " << (out_dir / "model.cdmw").string() << "\n";
    return 0;
}

int cmd_train(const TrainArgs& args) {
    NetworkConfig net_cfg;
    TrainConfig tc;
    std::size_t synth_count = 200, synth_h = 64, synth_w = 64;
    std::uint64_t data_seed = 42, init_seed = 42;
    std::string precision = args.precision;

    if (!args.config_path.empty()) {
        Config cfg = Config::parse_file(args.config_path);
        std::string widths = cfg.get_string("stage_widths", "");
        if (!widths.empty()) {
            std::vector<std::size_t> ws = parse_widths(widths);
            if (ws.size() != 6) throw IoError("config: stage_widths wants 6 entries");
            for (std::size_t i = 0; i < 6; ++i) net_cfg.stage_widths[i] = ws[i];
        }
        net_cfg.in_bands = cfg.get_size("in_bands", net_cfg.in_bands);
        net_cfg.ssm_state_dim = cfg.get_size("ssm_state_dim", net_cfg.ssm_state_dim);
        net_cfg.groups = cfg.get_size("groups", net_cfg.groups);
        net_cfg.use_da_block = cfg.get_bool("use_da_block", net_cfg.use_da_block);
        net_cfg.use_cloud_smb = cfg.get_bool("use_cloud_smb", net_cfg.use_cloud_smb);

        tc.epochs = cfg.get_size("epochs", tc.epochs);
        tc.batch_size = cfg.get_size("batch_size", tc.batch_size);
        tc.lr0 = cfg.get_double("lr0", tc.lr0);
        tc.lr_min = cfg.get_double("lr_min", tc.lr_min);
        tc.weight_decay = cfg.get_double("weight_decay", tc.weight_decay);
        tc.beta1 = cfg.get_double("beta1", tc.beta1);
        tc.beta2 = cfg.get_double("beta2", tc.beta2);
        tc.adam_eps = cfg.get_double("adam_eps", tc.adam_eps);
        tc.val_fraction = cfg.get_double("val_fraction", tc.val_fraction);
        tc.seed = cfg.get_size("seed", tc.seed);
        tc.loss.gamma = cfg.get_double("dice_gamma", tc.loss.gamma);

        synth_count = cfg.get_size("count", synth_count);
        synth_h = cfg.get_size("height", synth_h);
        synth_w = cfg.get_size("width", synth_w);
        data_seed = cfg.get_size("data_seed", data_seed);
        init_seed = cfg.get_size("init_seed", init_seed);
        precision = cfg.get_string("precision", precision);
        cfg.reject_unknown();
    }
    if (precision != "double" && precision != "single")
        throw IoError("precision must be double or single");
    validate_config(net_cfg);
    if (net_cfg.in_bands != 4) throw IoError("training data is 4-band; in_bands must be 4");

    SampleSet data = args.data == "synthetic" ? gen_synthetic(synth_count, synth_h, synth_w, data_seed)
                                              : load_sample_set(args.data);
    fs::path out_dir(args.out);
    fs::create_directories(out_dir);

    if (precision == "single")
        return run_train<float>(net_cfg, tc, data, out_dir, init_seed, args.resume);
    return run_train<double>(net_cfg, tc, data, out_dir, init_seed, args.resume);
}

// --------------------------------------------------------------------- infer

struct InferArgs {
    std::string weights, input, out, overlay, truth, precision = "double";
    std::size_t tile = 64;
    double threshold = 0.5;
};

template <typename S>
int run_infer(const InferArgs& args) {
    auto [ps, cfg] = load_model<S>(args.weights);
    TensorT<S> bands = load_tensor<S>(args.input);
    if (bands.ndim() != 3) throw IoError("input must be [bands,h,w]: " + args.input);
    if (bands.extent(0) != cfg.in_bands) throw IoError("input band count does not match the model");

    TensorT<S> prob = infer_scene(bands, ps, cfg, args.tile);
    save_tensor(args.out, prob);
    std::cout << "prediction written to " << args.out << "\n";

    if (!args.overlay.empty()) {
        if (args.truth.empty()) throw IoError("--overlay needs --truth");
        TensorT<S> truth = load_tensor<S>(args.truth);
        Tensor rgb = render_overlay(prob, truth, static_cast<S>(args.threshold));
        write_ppm(args.overlay, rgb);
        Metrics m = metrics_from_counts(confusion(prob, truth));
        std::cout << "overlay written to " << args.overlay << " (" << metrics_line(m) << ")\n";
    }
    return 0;
}

// ---------------------------------------------------------------------- eval

int cmd_eval(const std::string& weights, const std::string& dir, const std::string& report_path,
             std::size_t tile) {
    auto [ps, cfg] = load_model<double>(weights);
    std::vector<ScenePair> pairs = discover_pairs(dir, true);

    std::ofstream report;
    if (!report_path.empty()) {
        report.open(report_path);
        if (!report) throw IoError("cannot write report: " + report_path);
    }

    ConfusionCounts pooled;
    double loss_sum = 0;
    LossConfig loss_cfg;
    for (const ScenePair& p : pairs) {
        Tensor bands = load_tensor<double>(p.bands.string());
        Tensor mask = load_tensor<double>(p.mask.string());
        Tensor prob = infer_scene(bands, ps, cfg, tile);
        ConfusionCounts counts = confusion(prob, mask);
        pooled += counts;
        loss_sum += overall_loss(prob, mask, loss_cfg);
        std::string line = "scene=" + p.stem + " " + metrics_line(metrics_from_counts(counts));
        std::cout << line << "\n";
        if (report) report << line << "\n";
    }
    Metrics overall = metrics_from_counts(pooled);
    char tail[160];
    std::snprintf(tail, sizeof tail, "overall %s loss=%.8g scenes=%zu",
                  metrics_line(overall).c_str(), loss_sum / static_cast<double>(pairs.size()),
                  pairs.size());
    std::cout << tail << "\n";
    if (report) report << tail << "\n";
    return 0;
}

// ---------------------------------------------------------------------- tile

int cmd_tile(const std::string& input, std::size_t size, const std::string& out,
             std::string scene_id) {
    Tensor bands = load_tensor<double>(input);
    if (bands.ndim() != 3) throw IoError("input must be [bands,h,w]: " + input);
    if (scene_id.empty()) {
        scene_id = fs::path(input).filename().string();
        for (const char* suffix : {".cdmt", ".bands"}) {
            std::size_t n = std::strlen(suffix);
            if (scene_id.size() > n && scene_id.substr(scene_id.size() - n) == suffix)
                scene_id = scene_id.substr(0, scene_id.size() - n);
        }
    }

    fs::create_directories(out);
    std::vector<TileOffset> offsets;
    std::vector<Tensor> tiles = tile_scene(bands, size, &offsets);
    for (std::size_t i = 0; i < tiles.size(); ++i) {
        fs::path path = fs::path(out) / (tile_name(scene_id, offsets[i]) + ".cdmt");
        save_tensor(path.string(), tiles[i]);
    }
    std::cout << tiles.size() << " tiles written to " << out << "\n";
    return 0;
}

// ----------------------------------------------------------------- the rest

int cmd_check_grad(const std::string& config_path, std::uint64_t seed) {
    if (!config_path.empty()) {
        Config cfg = Config::parse_file(config_path);
        seed = cfg.get_size("seed", seed);
        cfg.reject_unknown();
    }
    NetworkGradReport rep = check_network_gradients(seed);
    std::printf("probes=%zu max_rel=%.3g mean_rel=%.3g worst=%s\n", rep.probes, rep.max_rel,
                rep.mean_rel, rep.worst_param.c_str());
    if (rep.max_rel > 1e-3) {
        std::fprintf(stderr, "gradient check failed: max relative error %.3g > 1e-3\n", rep.max_rel);
        return 3;
    }
    return 0;
}

int cmd_gen_data(std::uint64_t seed, std::size_t count, std::size_t size, const std::string& out) {
    SampleSet set = gen_synthetic(count, size, size, seed);
    fs::create_directories(out);
    std::size_t hw = size * size;
    for (std::size_t i = 0; i < count; ++i) {
        char stem[32];
        std::snprintf(stem, sizeof stem, "scene%04zu", i);
        Tensor bands({4, size, size}), mask({size, size});
        std::copy(&set.x[i * 4 * hw], &set.x[(i + 1) * 4 * hw], &bands[0]);
        std::copy(&set.t[i * hw], &set.t[(i + 1) * hw], &mask[0]);
        save_tensor((fs::path(out) / (std::string(stem) + ".bands.cdmt")).string(), bands);
        save_tensor((fs::path(out) / (std::string(stem) + ".mask.cdmt")).string(), mask);
    }
    std::cout << count << " scenes written to " << out << "\n";
    return 0;
}

int cmd_bench(const std::string& op, std::size_t repeat) {
    Rng rng(7);
    auto fill = [&](Tensor& t) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = 0.1 * rng.normal();
    };

    double total_ms = 0;
    if (op == "scan") {
        std::size_t b = 2, l = 1024, c = 16, n = 8;
        Tensor x({b, l, c}), a({c, n}), w_b({n, c}), w_c({n, c}), w_d({c, c}), bias({c});
        fill(x); fill(a); fill(w_b); fill(w_c); fill(w_d); fill(bias);
        SsmParams p{a, w_b, w_c, w_d, bias};
        auto t0 = Clock::now();
        for (std::size_t r = 0; r < repeat; ++r) {
            Tensor y = ssm_scan(x, p);
            x[0] += 1e-12 * y[0];
        }
        total_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        std::printf("scan [%zu,%zu,%zu] n=%zu: %.2f ms/iter over %zu iters\n", b, l, c, n,
                    total_ms / static_cast<double>(repeat), repeat);
    } else if (op == "conv") {
        Tensor x({2, 16, 64, 64}), w({16, 16, 3, 3}), bias({16});
        fill(x); fill(w); fill(bias);
        Conv2dSpec spec{1, 1, 1};
        auto t0 = Clock::now();
        for (std::size_t r = 0; r < repeat; ++r) {
            Tensor y = conv2d(x, w, &bias, spec);
            x[0] += 1e-12 * y[0];
        }
        total_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        std::printf("conv2d 3x3 [2,16,64,64]: %.2f ms/iter over %zu iters\n",
                    total_ms / static_cast<double>(repeat), repeat);
    } else {
        std::size_t b = 2, l = 1024, c = 16, q = c / 4, n = 8;
        CloudSmbParams p;
        p.norm_in_gamma = Tensor({c});
        p.norm_in_beta = Tensor({c});
        for (std::size_t i = 0; i < c; ++i) p.norm_in_gamma[i] = 1.0;
        for (SsmParams* s : {&p.ssm_forward, &p.ssm_reverse_family}) {
            s->a = Tensor({q, n});
            s->w_b = Tensor({n, q});
            s->w_c = Tensor({n, q});
            s->w_delta = Tensor({q, q});
            s->bias_delta = Tensor({q});
            for (std::size_t i = 0; i < q * n; ++i) s->a[i] = -1.0;
            fill(s->w_b); fill(s->w_c); fill(s->w_delta); fill(s->bias_delta);
        }
        p.agg_w = Tensor({q, 2 * q});
        p.norm_out_gamma = Tensor({2 * c});
        p.norm_out_beta = Tensor({2 * c});
        for (std::size_t i = 0; i < 2 * c; ++i) p.norm_out_gamma[i] = 1.0;
        p.out_w = Tensor({c, 2 * c});
        p.out_bias = Tensor({c});
        fill(p.agg_w); fill(p.out_w);

        Tensor x({b, l, c});
        fill(x);
        auto t0 = Clock::now();
        for (std::size_t r = 0; r < repeat; ++r) {
            Tensor y = cloud_smb(x, p);
            x[0] += 1e-12 * y[0];
        }
        total_ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
        std::printf("cloud_smb [%zu,%zu,%zu]: %.2f ms/iter over %zu iters\n", b, l, c,
                    total_ms / static_cast<double>(repeat), repeat);
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    // the trainer and the file readers carry their own finite guards; the
    // per-op checks are a debugging aid, too costly for production runs
    set_checked_mode(false);

    CLI::App app{"cloud detection toolkit"};
    app.require_subcommand(1);

    TrainArgs train_args;
    auto* train_cmd = app.add_subcommand("train", "train a model");
    train_cmd->add_option("--config", train_args.config_path, "key = value hyperparameter file");
    train_cmd->add_option("--data", train_args.data, "scene directory, or 'synthetic'")->required();
    train_cmd->add_option("--out", train_args.out, "output directory")->required();
    train_cmd->add_option("--precision", train_args.precision, "double or single")
        ->check(CLI::IsMember({"double", "single"}));
    train_cmd->add_flag("--resume", train_args.resume, "continue from checkpoint in --out");

    InferArgs infer_args;
    auto* infer_cmd = app.add_subcommand("infer", "predict a cloud probability map");
    infer_cmd->add_option("--weights", infer_args.weights, "model file")->required();
    infer_cmd->add_option("--input", infer_args.input, "bands tensor file")->required();
    infer_cmd->add_option("--out", infer_args.out, "output mask tensor file")->required();
    infer_cmd->add_option("--tile", infer_args.tile, "inference tile extent");
    infer_cmd->add_option("--threshold", infer_args.threshold, "overlay decision threshold");
    infer_cmd->add_option("--overlay", infer_args.overlay, "also write an error overlay PPM");
    infer_cmd->add_option("--truth", infer_args.truth, "truth mask for the overlay");
    infer_cmd->add_option("--precision", infer_args.precision, "double or single")
        ->check(CLI::IsMember({"double", "single"}));

    std::string eval_weights, eval_data, eval_report;
    std::size_t eval_tile = 64;
    auto* eval_cmd = app.add_subcommand("eval", "score a model against truth masks");
    eval_cmd->add_option("--weights", eval_weights, "model file")->required();
    eval_cmd->add_option("--data", eval_data, "scene directory with masks")->required();
    eval_cmd->add_option("--report", eval_report, "write per-scene lines here");
    eval_cmd->add_option("--tile", eval_tile, "inference tile extent");

    std::string tile_input, tile_out, tile_scene_id;
    std::size_t tile_size = 384;
    auto* tile_cmd = app.add_subcommand("tile", "cut a scene into training tiles");
    tile_cmd->add_option("--input", tile_input, "bands tensor file")->required();
    tile_cmd->add_option("--size", tile_size, "tile extent, multiple of 32")
        ->check(CLI::Validator(
            [](std::string& v) -> std::string {
                try {
                    unsigned long long n = std::stoull(v);
                    if (n != 0 && n % 32 == 0) return {};
                } catch (const std::logic_error&) {
                }
                return "not a positive multiple of 32: " + v;
            },
            "TILE"));
    tile_cmd->add_option("--out", tile_out, "output directory")->required();
    tile_cmd->add_option("--scene", tile_scene_id, "scene id for tile names");

    std::string grad_config;
    std::uint64_t grad_seed = 41;
    auto* grad_cmd = app.add_subcommand("check-grad", "finite-difference network gradient check");
    grad_cmd->add_option("--config", grad_config, "optional file with a seed key");
    grad_cmd->add_option("--seed", grad_seed, "probe seed");

    std::uint64_t gen_seed = 42;
    std::size_t gen_count = 16, gen_size = 64;
    std::string gen_out;
    auto* gen_cmd = app.add_subcommand("gen-data", "generate labeled synthetic scenes");
    gen_cmd->add_option("--seed", gen_seed, "generator seed");
    gen_cmd->add_option("--count", gen_count, "number of scenes");
    gen_cmd->add_option("--size", gen_size, "square scene extent");
    gen_cmd->add_option("--out", gen_out, "output directory")->required();

    std::string bench_op = "scan";
    std::size_t bench_repeat = 10;
    auto* bench_cmd = app.add_subcommand("bench", "time a kernel");
    bench_cmd->add_option("--op", bench_op, "scan, conv, or block")
        ->check(CLI::IsMember({"scan", "conv", "block"}));
    bench_cmd->add_option("--repeat", bench_repeat, "iterations");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*train_cmd) return cmd_train(train_args);
        if (*infer_cmd)
            return infer_args.precision == "single" ? run_infer<float>(infer_args)
                                                    : run_infer<double>(infer_args);
        if (*eval_cmd) return cmd_eval(eval_weights, eval_data, eval_report, eval_tile);
        if (*tile_cmd) return cmd_tile(tile_input, tile_size, tile_out, tile_scene_id);
        if (*grad_cmd) return cmd_check_grad(grad_config, grad_seed);
        if (*gen_cmd) return cmd_gen_data(gen_seed, gen_count, gen_size, gen_out);
        if (*bench_cmd) return cmd_bench(bench_op, bench_repeat);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const IoError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const ShapeError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 2;
    }
    return 0;
}
