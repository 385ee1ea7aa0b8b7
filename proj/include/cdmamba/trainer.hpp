#pragma once

#include <cmath>
#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include "cdmamba/data.hpp"
#include "cdmamba/gradcheck.hpp"
#include "cdmamba/io.hpp"
#include "cdmamba/loss.hpp"
#include "cdmamba/network.hpp"
#include "cdmamba/optim.hpp"

// Desk-scale training loop: seeded shuffles, taped forward and backward over
// mini-batches, decoupled-decay Adam on a cosine schedule, validation through
// the untaped forward path, per-epoch log lines and checkpoints.

namespace cdmamba {

struct TrainConfig {
    std::size_t epochs = 80;
    std::size_t batch_size = 8;
    double lr0 = 1e-3;
    double lr_min = 1e-5;
    double weight_decay = 1e-2;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double val_fraction = 0.2;
    std::uint64_t seed = 42;
    LossConfig loss;
};

struct EpochStats {
    std::size_t epoch = 0;
    double lr = 0, loss = 0, miou = 0, f1 = 0, acc = 0;
};

namespace detail {

template <typename S>
void fill_batch(const SampleSet& data, const std::vector<std::size_t>& idx, std::size_t begin,
                std::size_t count, TensorT<S>& x, TensorT<S>& t) {
    std::size_t h = data.x.extent(2), w = data.x.extent(3);
    std::size_t xs = 4 * h * w, ts = h * w;
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t src = idx[begin + i];
        for (std::size_t j = 0; j < xs; ++j)
            x[i * xs + j] = static_cast<S>(data.x[src * xs + j]);
        for (std::size_t j = 0; j < ts; ++j)
            t[i * ts + j] = static_cast<S>(data.t[src * ts + j]);
    }
}

}  // namespace detail

// pooled confusion counts plus mean loss over a sample subset; shared by
// training-time validation and the standalone evaluator so both report
// identical numbers
template <typename S>
std::pair<Metrics, double> evaluate(const ParamStoreT<S>& ps, const NetworkConfig& net_cfg,
                                    const SampleSet& data, const std::vector<std::size_t>& idx,
                                    std::size_t batch_size, const LossConfig& loss_cfg) {
    std::size_t h = data.x.extent(2), w = data.x.extent(3);
    ConfusionCounts pooled;
    double loss_sum = 0;
    std::size_t seen = 0;
    for (std::size_t at = 0; at < idx.size(); at += batch_size) {
        std::size_t n = std::min(batch_size, idx.size() - at);
        TensorT<S> x({n, 4, h, w}), t({n, h, w});
        detail::fill_batch(data, idx, at, n, x, t);
        TensorT<S> y = network_forward(x, ps, net_cfg);
        pooled += confusion(y, t);
        loss_sum += static_cast<double>(overall_loss(y, t, loss_cfg)) * static_cast<double>(n);
        seen += n;
    }
    double mean_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    return {metrics_from_counts(pooled), mean_loss};
}

// ---------------------------------------------------------------- checkpoints

// single store holding weights, optimizer moments, and counters
template <typename S>
void save_checkpoint(const std::string& path, const ParamStoreT<S>& ps, const AdamWT<S>& opt,
                     std::size_t next_epoch) {
    ParamStoreT<S> box;
    for (std::size_t i = 0; i < ps.count(); ++i) box.add("param." + ps.name(i), ps.tensor(i));
    for (std::size_t i = 0; i < ps.count(); ++i) box.add("opt.m." + ps.name(i), opt.first_moment(i));
    for (std::size_t i = 0; i < ps.count(); ++i) box.add("opt.v." + ps.name(i), opt.second_moment(i));
    box.add("meta.steps", TensorT<S>::scalar(static_cast<S>(opt.steps())));
    box.add("meta.epoch", TensorT<S>::scalar(static_cast<S>(next_epoch)));
    save_params(path, box);
}

template <typename S>
std::size_t load_checkpoint(const std::string& path, ParamStoreT<S>& ps, AdamWT<S>& opt) {
    ParamStoreT<S> box = load_params<S>(path);
    for (std::size_t i = 0; i < ps.count(); ++i) {
        const std::string& name = ps.name(i);
        TensorT<S> w = box.at("param." + name);
        require_same_shape(w, ps.tensor(i), ("checkpoint " + name).c_str());
        ps.tensor(i) = std::move(w);
        opt.first_moment(i) = box.at("opt.m." + name);
        opt.second_moment(i) = box.at("opt.v." + name);
    }
    opt.set_steps(static_cast<std::size_t>(box.at("meta.steps")[0]));
    return static_cast<std::size_t>(box.at("meta.epoch")[0]);
}

// -------------------------------------------------------------- training loop

template <typename S>
std::vector<EpochStats> train(ParamStoreT<S>& ps, const NetworkConfig& net_cfg,
                              const TrainConfig& tc, const SampleSet& data,
                              std::ostream* log = nullptr,
                              const std::string& checkpoint_path = std::string(),
                              std::size_t start_epoch = 0, AdamWT<S>* opt_in = nullptr) {
    if (data.size() < 2) throw ShapeError("train: need at least two samples");
    std::size_t h = data.x.extent(2), w = data.x.extent(3);
    SplitIndices split = split_indices(data.size(), tc.val_fraction, tc.seed);
    if (split.train.empty() || split.val.empty())
        throw ShapeError("train: empty split");

    AdamWT<S> local_opt(ps, tc.beta1, tc.beta2, tc.adam_eps, tc.weight_decay);
    AdamWT<S>& opt = opt_in ? *opt_in : local_opt;

    std::vector<EpochStats> history;
    for (std::size_t epoch = start_epoch; epoch < tc.epochs; ++epoch) {
        double lr = cosine_lr(tc.lr0, tc.lr_min, epoch, tc.epochs);

        // each epoch's order is a pure function of (seed, epoch) so a resumed
        // run replays the same batches as an uninterrupted one
        std::vector<std::size_t> order = split.train;
        Rng shuffle_rng(Rng::derive(tc.seed, 1000 + epoch));
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[shuffle_rng.next_u64() % i]);

        double loss_sum = 0;
        std::size_t seen = 0, batch_index = 0;
        for (std::size_t at = 0; at < order.size(); at += tc.batch_size, ++batch_index) {
            std::size_t n = std::min(tc.batch_size, order.size() - at);
            TensorT<S> x({n, 4, h, w}), t({n, h, w});
            detail::fill_batch(data, order, at, n, x, t);

            Tape<S> tape;
            TapedParams<S> tp = register_params(tape, ps);
            VarT<S> xv = make_leaf(tape, x);
            VarT<S> y = ad::network_forward(xv, tp, net_cfg);
            VarT<S> L = ad::overall_loss(y, t, tc.loss);
            double batch_loss = static_cast<double>(L.value()[0]);
            if (!std::isfinite(batch_loss))
                throw NumericError("train: non-finite loss in epoch " + std::to_string(epoch) +
                                   " batch " + std::to_string(batch_index));
            tape.backward(L.id);

            std::vector<TensorT<S>> grads;
            grads.reserve(ps.count());
            for (std::size_t i = 0; i < ps.count(); ++i) grads.push_back(tp.grad_or_zero(i));
            for (std::size_t i = 0; i < grads.size(); ++i)
                if (!grads[i].all_finite())
                    throw NumericError("train: non-finite gradient for " + ps.name(i) +
                                       " in epoch " + std::to_string(epoch) + " batch " +
                                       std::to_string(batch_index));
            opt.step(ps, grads, lr);
            loss_sum += batch_loss * static_cast<double>(n);
            seen += n;
        }

        auto [val, val_loss] = evaluate(ps, net_cfg, data, split.val, tc.batch_size, tc.loss);
        (void)val_loss;
        EpochStats st{epoch, lr, loss_sum / static_cast<double>(seen), val.miou, val.f1, val.acc};
        history.push_back(st);
        if (log)
            (*log) << format_epoch_line(st.epoch, st.lr, st.loss, st.miou, st.f1, st.acc) << "\n"
                   << std::flush;
        if (!checkpoint_path.empty()) save_checkpoint(checkpoint_path, ps, opt, epoch + 1);
    }
    return history;
}

// ------------------------------------------------------- gradient spot check

struct NetworkGradReport {
    double max_rel = 0;
    double mean_rel = 0;
    std::size_t probes = 0;
    std::string worst_param;
};

// sampled finite-difference audit of the taped network path on a small
// configuration; the thresholds mirror the test suite
inline NetworkGradReport check_network_gradients(std::uint64_t seed) {
    NetworkConfig cfg;
    cfg.stage_widths = {4, 4, 4, 4, 4, 4};
    cfg.in_bands = 2;
    cfg.ssm_state_dim = 2;
    ParamStore ps = init_params<double>(cfg, seed);
    Rng rng(Rng::derive(seed, 1));
    Tensor x0({1, 2, 32, 32});
    for (std::size_t i = 0; i < x0.size(); ++i) x0[i] = rng.uniform();
    Tensor wts({1, 32, 32});
    for (std::size_t i = 0; i < wts.size(); ++i) wts[i] = rng.normal();

    Tape<double> tape;
    TapedParams<double> tp = register_params(tape, ps);
    Var x = make_leaf(tape, x0);
    Var y = ad::network_forward(x, tp, cfg);
    Var L = ad::mean_all(ad::mul(y, make_leaf(tape, wts)));
    tape.backward(L.id);

    auto f = [&]() {
        Tensor y2 = network_forward(x0, ps, cfg);
        double acc = 0;
        for (std::size_t i = 0; i < y2.size(); ++i) acc += y2[i] * wts[i];
        return acc / static_cast<double>(y2.size());
    };

    NetworkGradReport rep;
    double rel_sum = 0;
    for (std::size_t i = 0; i < ps.count(); ++i) {
        Tensor analytic = tp.grad_or_zero(i);
        std::size_t stride = ps.tensor(i).size() / 2 + 1;
        GradCheckReport r = check_sampled_gradient(ps.tensor(i), analytic, f, stride);
        if (r.max_rel > rep.max_rel) {
            rep.max_rel = r.max_rel;
            rep.worst_param = ps.name(i);
        }
        rel_sum += r.sum_rel;
        rep.probes += r.count;
    }
    GradCheckReport rx = check_sampled_gradient(x0, tape.grad(x.id), f, 257);
    if (rx.max_rel > rep.max_rel) {
        rep.max_rel = rx.max_rel;
        rep.worst_param = "input";
    }
    rel_sum += rx.sum_rel;
    rep.probes += rx.count;
    rep.mean_rel = rep.probes ? rel_sum / static_cast<double>(rep.probes) : 0.0;
    return rep;
}

}  // namespace cdmamba
