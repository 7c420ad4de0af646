#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "bfcn/dataset.hpp"
#include "bfcn/graph.hpp"
#include "bfcn/model_io.hpp"
#include "bfcn/ops.hpp"

namespace bfcn {

// --- optimizer ------------------------------------------------------------------

/// v <- momentum * v + g; p <- p - lr * v. Missing velocity entries start at zero.
inline void sgd_momentum_step(ParamMap& params, const ParamMap& grads, ParamMap& velocity, double lr,
                              double momentum) {
    require(lr > 0, ErrorKind::bad_config, "lr must be positive");
    require(momentum >= 0 && momentum < 1, ErrorKind::bad_config, "momentum must be in [0,1)");
    for (auto& [name, p] : params) {
        auto g_it = grads.find(name);
        if (g_it == grads.end()) continue;
        const RealTensor& g = g_it->second;
        require_same_shape(p.shape(), g.shape(), "sgd gradient");
        RealTensor& v = velocity.try_emplace(name, p.shape(), 0.0).first->second;
        require_same_shape(p.shape(), v.shape(), "sgd velocity");
        for (std::size_t i = 0; i < p.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            p[i] -= lr * v[i];
        }
    }
}

// --- bit-width analysis -------------------------------------------------------------

/// Error model of a k_w x k_a convolution: 1/2^k_w + 1/2^k_a.
inline double allocation_error(int k_w, int k_a) {
    require(k_w >= 1 && k_a >= 1, ErrorKind::bad_bit_width, "bit-widths must be >= 1");
    return quantization_error_bound(k_w) + quantization_error_bound(k_a);
}

/// Exhaustive minimizer of allocation_error over integer k_w * k_a <= budget.
/// Ties prefer k_w == k_a, then the larger k_a.
inline std::pair<int, int> optimal_allocation(int budget) {
    require(budget >= 1, ErrorKind::bad_config, "budget must be >= 1");
    std::pair<int, int> best{1, 1};
    double best_e = allocation_error(1, 1);
    for (int kw = 1; kw <= budget; ++kw)
        for (int ka = 1; kw * ka <= budget; ++ka) {
            const double e = allocation_error(kw, ka);
            bool better = e < best_e;
            if (e == best_e) {
                const bool bal = kw == ka, best_bal = best.first == best.second;
                better = (bal && !best_bal) || (bal == best_bal && ka > best.second);
            }
            if (better) {
                best = {kw, ka};
                best_e = e;
            }
        }
    return best;
}

/// W = 1 / ln(c + p) per class.
inline std::vector<double> class_weights(const std::vector<double>& pixel_freqs, double c) {
    require(c > 1, ErrorKind::bad_constant, "class weight constant c must exceed 1");
    std::vector<double> w;
    w.reserve(pixel_freqs.size());
    for (double p : pixel_freqs) {
        require(p >= 0 && p <= 1, ErrorKind::bad_config, "pixel frequency outside [0,1]");
        w.push_back(1.0 / std::log(c + p));
    }
    return w;
}

// --- bit-width decay -------------------------------------------------------------------

struct DecaySchedule {
    int c = 8;
    int r = 1;
    int target = 2;
    std::size_t fine_tune_iters = 200;
};

/// c, c - r, c - 2r, ... with the last entry clamped to target.
inline std::vector<int> decay_sequence(const DecaySchedule& s) {
    require(s.r >= 1, ErrorKind::bad_schedule, "decay rate must be >= 1");
    require(s.target >= 1 && s.c <= 8, ErrorKind::bad_schedule, "bit-widths must lie in [1,8]");
    require(s.target <= s.c, ErrorKind::bad_schedule,
            "target " + std::to_string(s.target) + " exceeds initial bit-width " + std::to_string(s.c));
    std::vector<int> seq;
    for (int k = s.c; k > s.target; k -= s.r) seq.push_back(k);
    seq.push_back(s.target);
    return seq;
}

/// Per-step (k_w, k_a) for a possibly unequal target: the shared sequence runs
/// down to min(target_w, target_a) and each side stops at its own target.
inline std::vector<std::pair<int, int>> decay_pairs(const DecaySchedule& s, int target_w, int target_a) {
    DecaySchedule shared = s;
    shared.target = std::min(target_w, target_a);
    std::vector<std::pair<int, int>> out;
    for (int k : decay_sequence(shared)) {
        const std::pair<int, int> p{std::max(k, target_w), std::max(k, target_a)};
        if (out.empty() || out.back() != p) out.push_back(p);
    }
    return out;
}

// --- configuration ------------------------------------------------------------------------

enum class Route { p1, p2, p1_8bit };

inline std::string to_string(Route r) {
    switch (r) {
    case Route::p1: return "p1";
    case Route::p2: return "p2";
    case Route::p1_8bit: return "p1-8bit";
    }
    return "?";
}

inline Route parse_route(const std::string& s) {
    if (s == "p1") return Route::p1;
    if (s == "p2") return Route::p2;
    if (s == "p1-8bit") return Route::p1_8bit;
    fail(ErrorKind::bad_config, "unknown route '" + s + "' (expected p1, p2, p1-8bit)");
}

struct TrainConfig {
    double lr = 0.05;
    double finetune_lr = 0.02;
    double momentum = 0.9;
    std::size_t batch = 8;
    std::size_t iters = 600; // full-precision (or P2 pretraining) phase
    Route route = Route::p1_8bit;
    // Iteration at which each scale's loss switches on, coarse to fine.
    // Empty: equal splits of `iters`.
    std::vector<std::size_t> stage_schedule;
    double class_weight_c = 1.4;
    bool augment = true;
    std::size_t divergence_patience = 10;

    void validate() const {
        require(lr > 0 && finetune_lr > 0, ErrorKind::bad_config, "lr must be positive");
        require(momentum >= 0 && momentum < 1, ErrorKind::bad_config, "momentum must be in [0,1)");
        require(batch >= 1, ErrorKind::bad_config, "batch must be >= 1");
        require(class_weight_c > 1, ErrorKind::bad_constant, "class weight constant c must exceed 1");
    }
};

/// Scales (strides) whose loss is active at iteration `it` of a phase.
inline std::vector<std::size_t> active_scales(const SegNet& net, const std::vector<std::size_t>& schedule,
                                              std::size_t phase_iters, std::size_t it) {
    std::vector<std::size_t> out;
    const std::size_t n = net.scales.size();
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t start = schedule.empty() ? phase_iters * i / n : schedule.at(i);
        if (it >= start) out.push_back(net.scales[i].stride);
    }
    return out;
}

// --- training loop --------------------------------------------------------------------------

struct StepMetrics {
    int k_w = full_precision;
    int k_a = full_precision;
    std::size_t iters = 0;
    double train_loss = 0.0; // mean loss over the step's last quarter
    double val_miou = 0.0;
};

/// Everything that evolves during training.
struct TrainState {
    SegNet net;
    ParamMap velocity;
    std::size_t iteration = 0; // global, across phases
    std::uint64_t seed = 0;
    std::vector<double> class_w;
    std::ostream* log = nullptr;
};

inline std::string bits_label(const SegNet& net) {
    for (const auto& l : net.layers)
        if (!conv_units(l).empty() && !l.first_layer)
            return std::to_string(l.quant.k_w) + "-" + std::to_string(l.quant.k_a);
    return "?";
}

namespace detail {

inline std::string join_scales(const std::vector<std::size_t>& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
    return out;
}

/// Samples drawn for one iteration: an epoch-wise shuffled index stream.
class BatchSampler {
public:
    BatchSampler(std::size_t n, std::uint64_t seed) : n_(n), rng_(seed) {}

    std::vector<std::size_t> next(std::size_t batch) {
        std::vector<std::size_t> out;
        while (out.size() < batch) {
            if (pos_ == order_.size()) reshuffle();
            out.push_back(order_[pos_++]);
        }
        return out;
    }

private:
    void reshuffle() {
        order_.resize(n_);
        std::iota(order_.begin(), order_.end(), std::size_t{0});
        for (std::size_t i = n_; i > 1; --i)
            std::swap(order_[i - 1], order_[static_cast<std::size_t>(rng_.uniform_int(0, static_cast<std::int64_t>(i) - 1))]);
        pos_ = 0;
    }
    std::size_t n_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;
};

struct Batch {
    RealTensor images;
    LabelMap labels;
};

inline Batch make_batch(const std::vector<SegSample>& data, const std::vector<std::size_t>& idx, bool augment,
                        std::uint64_t aug_seed) {
    std::vector<SegSample> samples;
    samples.reserve(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i)
        samples.push_back(augment ? augment_for_training(data[idx[i]], sub_seed(aug_seed, "item", i)) : data[idx[i]]);
    std::vector<const RealTensor*> imgs;
    std::vector<const LabelMap*> labs;
    for (const auto& s : samples) {
        imgs.push_back(&s.image);
        labs.push_back(&s.labels);
    }
    return {stack_batch(imgs), stack_batch(labs)};
}

inline bool all_finite(const ParamMap& m) {
    for (const auto& [_, t] : m)
        for (double v : t)
            if (!std::isfinite(v)) return false;
    return true;
}

} // namespace detail

/// Confusion matrix of `net` over a sample list.
inline ConfusionMatrix evaluate(SegNet& net, const std::vector<SegSample>& samples,
                                ConvBackend backend = ConvBackend::bit_kernels) {
    ConfusionMatrix cm(net.num_classes);
    for (const auto& s : samples) accumulate_confusion(predict(net, s.image, backend), s.labels, cm);
    return cm;
}

/// One SGD phase of `iters` iterations on the segmentation loss at the
/// network's current bit-widths. Returns the mean loss over the last quarter
/// (at least the last iteration).
/// Iterations with a non-finite loss skip the update; `patience` consecutive
/// ones raise DivergenceDetected.
inline double train_phase(TrainState& st, const std::vector<SegSample>& data, const TrainConfig& cfg,
                          std::size_t iters, double lr, const std::vector<std::size_t>& stage_schedule,
                          const std::string& phase) {
    require(!data.empty(), ErrorKind::bad_config, "no training samples");
    detail::BatchSampler sampler(data.size(), sub_seed(st.seed, "batch/" + phase));
    const std::uint64_t aug_seed = sub_seed(st.seed, "augment/" + phase);
    std::size_t bad_run = 0;
    double tail_sum = 0;
    std::size_t tail_n = 0;
    const std::string bits = bits_label(st.net);
    for (std::size_t it = 0; it < iters; ++it, ++st.iteration) {
        const auto scales = active_scales(st.net, stage_schedule, iters, it);
        const auto batch = detail::make_batch(data, sampler.next(cfg.batch), cfg.augment, sub_seed(aug_seed, "it", it));
        ForwardOptions opt;
        opt.mode = Mode::train;
        ForwardResult fwd = forward(st.net, batch.images, opt);
        LossResult loss = stagewise_loss(scale_logits(st.net, fwd, scales), batch.labels, scales, st.class_w);
        if (st.log)
            *st.log << st.iteration << '\t' << bits << '\t' << detail::join_scales(scales) << '\t' << loss.loss << '\t'
                    << lr << '\n';
        if (!std::isfinite(loss.loss)) {
            if (++bad_run >= cfg.divergence_patience)
                fail(ErrorKind::divergence_detected, "loss non-finite for " + std::to_string(bad_run) +
                                                         " consecutive iterations at bits " + bits);
            continue;
        }
        bad_run = 0;
        ParamMap grads = backward(st.net, fwd, logit_upstream(st.net, loss));
        if (!detail::all_finite(grads)) continue;
        sgd_momentum_step(st.net.params, grads, st.velocity, lr, cfg.momentum);
        if (it >= iters - std::min(iters, std::max<std::size_t>(1, iters / 4))) {
            tail_sum += loss.loss;
            ++tail_n;
        }
    }
    return tail_n ? tail_sum / static_cast<double>(tail_n) : std::numeric_limits<double>::quiet_NaN();
}

/// New training state around `net`, with class weights from the training
/// split's pixel frequencies.
inline TrainState make_train_state(SegNet net, const Dataset& data, const TrainConfig& cfg, std::uint64_t seed,
                                   std::ostream* log = nullptr) {
    cfg.validate();
    TrainState st;
    st.class_w = class_weights(class_frequencies(data.train, net.num_classes), cfg.class_weight_c);
    st.net = std::move(net);
    st.seed = seed;
    st.log = log;
    return st;
}

/// Full-precision pretraining of the FCN with the stage-wise loss schedule.
inline double pretrain_full_precision(TrainState& st, const Dataset& data, const TrainConfig& cfg) {
    set_bit_widths(st.net, full_precision, full_precision);
    return train_phase(st, data.train, cfg, cfg.iters, cfg.lr, cfg.stage_schedule, "fp");
}

/// Steps 2-5 of bit-width decay: for each (k_w, k_a) in turn, requantize and
/// fine-tune with every scale active. The first layer keeps 8 bits.
inline std::vector<StepMetrics> run_bit_width_decay(TrainState& st, const std::vector<std::pair<int, int>>& steps,
                                                    std::size_t fine_tune_iters, const Dataset& data,
                                                    const TrainConfig& cfg,
                                                    const std::function<void(const StepMetrics&)>& on_step = {}) {
    std::vector<StepMetrics> metrics;
    const std::vector<std::size_t> all_on(st.net.scales.size(), 0);
    for (const auto& [kw, ka] : steps) {
        set_bit_widths(st.net, kw, ka);
        StepMetrics m;
        m.k_w = kw;
        m.k_a = ka;
        m.iters = fine_tune_iters;
        m.train_loss = train_phase(st, data.train, cfg, fine_tune_iters, cfg.finetune_lr, all_on,
                                   "decay/" + std::to_string(kw) + "-" + std::to_string(ka));
        m.val_miou = data.val.empty() ? 0.0 : mean_iou(evaluate(st.net, data.val));
        metrics.push_back(m);
        if (on_step) on_step(m);
    }
    return metrics;
}

inline std::vector<StepMetrics> run_bit_width_decay(TrainState& st, const DecaySchedule& sched, const Dataset& data,
                                                    const TrainConfig& cfg) {
    std::vector<std::pair<int, int>> steps;
    for (int k : decay_sequence(sched)) steps.emplace_back(k, k);
    return run_bit_width_decay(st, steps, sched.fine_tune_iters, data, cfg);
}

// --- route P2: low bit-width classifier pretraining ------------------------------------------

namespace detail {

inline std::vector<double> class_presence(const LabelMap& labels, std::size_t n, std::size_t num_classes) {
    std::vector<double> y(num_classes, 0.0);
    const std::size_t plane = labels.shape().h * labels.shape().w;
    for (std::size_t p = 0; p < plane; ++p) {
        const auto t = labels.at(n, 0, 0, p);
        if (t < num_classes) y[t] = 1.0;
    }
    return y;
}

} // namespace detail

/// Train the extractor of `st.net` as a multi-label classifier (global
/// average pool + full-precision linear layer + sigmoid cross-entropy on
/// class presence) at the network's current bit-widths. The classifier
/// parameters live outside the network and are discarded afterwards.
inline double pretrain_classifier(TrainState& st, const std::vector<SegSample>& data, const TrainConfig& cfg,
                                  std::size_t iters) {
    require(!data.empty(), ErrorKind::bad_config, "no training samples");
    const std::size_t feat = st.net.layer(extractor_output()).geom.out_ch;
    const std::size_t nc = st.net.num_classes;
    ParamMap cls;
    {
        Rng rng(sub_seed(st.seed, "classifier-init"));
        RealTensor w({nc, feat, 1, 1});
        for (auto& v : w) v = std::sqrt(1.0 / static_cast<double>(feat)) * rng.normal();
        cls["fc.w"] = std::move(w);
        cls["fc.b"] = RealTensor({nc, 1, 1, 1}, 0.0);
    }
    ParamMap cls_velocity;
    detail::BatchSampler sampler(data.size(), sub_seed(st.seed, "batch/classifier"));
    const std::uint64_t aug_seed = sub_seed(st.seed, "augment/classifier");
    double tail_sum = 0;
    std::size_t tail_n = 0, bad_run = 0;
    const std::string bits = bits_label(st.net);
    for (std::size_t it = 0; it < iters; ++it, ++st.iteration) {
        const auto batch = detail::make_batch(data, sampler.next(cfg.batch), cfg.augment, sub_seed(aug_seed, "it", it));
        ForwardOptions opt;
        opt.mode = Mode::train;
        opt.targets = {extractor_output()};
        ForwardResult fwd = forward(st.net, batch.images, opt);
        const RealTensor& f = fwd.outputs.at(extractor_output());
        const Shape4 fs = f.shape();
        const double hw = static_cast<double>(fs.plane());
        RealTensor dfeat(fs, 0.0);
        ParamMap cls_grads{{"fc.w", RealTensor(cls["fc.w"].shape(), 0.0)}, {"fc.b", RealTensor({nc, 1, 1, 1}, 0.0)}};
        double loss = 0;
        std::vector<double> pooled(feat);
        for (std::size_t n = 0; n < fs.n; ++n) {
            for (std::size_t c = 0; c < feat; ++c) {
                double s = 0;
                for (std::size_t p = 0; p < fs.plane(); ++p) s += f.at(n, c, 0, p);
                pooled[c] = s / hw;
            }
            const auto y = detail::class_presence(batch.labels, n, nc);
            for (std::size_t k = 0; k < nc; ++k) {
                double z = cls["fc.b"][k];
                for (std::size_t c = 0; c < feat; ++c) z += cls["fc.w"].at(k, c, 0, 0) * pooled[c];
                // numerically stable sigmoid cross-entropy
                loss += std::max(z, 0.0) - z * y[k] + std::log1p(std::exp(-std::abs(z)));
                const double dz = (1.0 / (1.0 + std::exp(-z)) - y[k]) / static_cast<double>(fs.n * nc);
                cls_grads["fc.b"][k] += dz;
                for (std::size_t c = 0; c < feat; ++c) {
                    cls_grads["fc.w"].at(k, c, 0, 0) += dz * pooled[c];
                    const double dp = dz * cls["fc.w"].at(k, c, 0, 0) / hw;
                    for (std::size_t p = 0; p < fs.plane(); ++p) dfeat.at(n, c, 0, p) += dp;
                }
            }
        }
        loss /= static_cast<double>(fs.n * nc);
        if (st.log) *st.log << st.iteration << '\t' << bits << "\tcls\t" << loss << '\t' << cfg.lr << '\n';
        if (!std::isfinite(loss)) {
            if (++bad_run >= cfg.divergence_patience)
                fail(ErrorKind::divergence_detected, "classifier loss non-finite");
            continue;
        }
        bad_run = 0;
        ParamMap grads = backward(st.net, fwd, {{extractor_output(), dfeat}});
        if (!detail::all_finite(grads)) continue;
        sgd_momentum_step(st.net.params, grads, st.velocity, cfg.lr, cfg.momentum);
        sgd_momentum_step(cls, cls_grads, cls_velocity, cfg.lr, cfg.momentum);
        if (it >= iters - std::min(iters, std::max<std::size_t>(1, iters / 4))) {
            tail_sum += loss;
            ++tail_n;
        }
    }
    return tail_n ? tail_sum / static_cast<double>(tail_n) : std::numeric_limits<double>::quiet_NaN();
}

/// Copy the extractor parameters and statistics of `from` into `to`.
inline void transplant_extractor(const SegNet& from, SegNet& to) {
    for (const auto& name : extractor_layers()) {
        const std::string prefix = name + ".";
        for (const auto* maps : {&from.params, &from.buffers}) {
            ParamMap& dst = maps == &from.params ? to.params : to.buffers;
            for (const auto& [k, v] : *maps)
                if (k.rfind(prefix, 0) == 0) {
                    require(dst.contains(k) && dst.at(k).shape() == v.shape(), ErrorKind::shape_mismatch,
                            "extractor tensor " + k + " does not fit");
                    dst[k] = v;
                }
        }
    }
}

// --- routes --------------------------------------------------------------------------------------

/// Networks a route may start from.
struct RouteAssets {
    const SegNet* full_precision_fcn = nullptr;    // P1, P1-8bit
    const SegNet* low_bit_extractor = nullptr;     // P2
};

/// Network ready for the low bit-width stage of a route. P1 and P1-8bit start
/// from the full-precision FCN; P2 takes the pretrained low bit-width
/// extractor and fresh reconstruction branches from `fresh`.
inline SegNet init_route(Route route, const RouteAssets& assets, const SegNet& fresh) {
    switch (route) {
    case Route::p1:
    case Route::p1_8bit:
        require(assets.full_precision_fcn != nullptr, ErrorKind::missing_asset,
                "route " + to_string(route) + " needs a full-precision FCN");
        return *assets.full_precision_fcn;
    case Route::p2: {
        require(assets.low_bit_extractor != nullptr, ErrorKind::missing_asset,
                "route p2 needs a low bit-width pretrained extractor");
        SegNet net = fresh;
        transplant_extractor(*assets.low_bit_extractor, net);
        return net;
    }
    }
    fail(ErrorKind::bad_config, "unknown route");
}

/// Bit-width steps of the low-bit stage of a route. `decay_rate` 0 means no
/// intermediate steps between 8 bits and the target.
inline std::vector<std::pair<int, int>> route_steps(Route route, int k_w, int k_a, int decay_rate) {
    const bool quantized = !is_full_precision(k_w) || !is_full_precision(k_a);
    if (!quantized) return {};
    if (route == Route::p1 || route == Route::p2) return {{k_w, k_a}};
    const int lo = std::min(k_w, k_a);
    DecaySchedule s;
    s.c = 8;
    s.r = decay_rate > 0 ? decay_rate : std::max(1, 8 - lo);
    return decay_pairs(s, is_full_precision(k_w) ? 8 : k_w, is_full_precision(k_a) ? 8 : k_a);
}

struct RunResult {
    SegNet net;
    ParamMap velocity;
    double fp_loss = 0.0;
    std::vector<StepMetrics> steps;
};

/// Complete training run for one route:
///   P1       full-precision FCN, then quantize to the target and fine-tune.
///   P1-8bit  full-precision FCN, 8-bit stage, then decay to the target.
///   P2       extractor pretrained as a classifier at the target bits, then
///            the FCN at the target bits.
/// The single-step routes fine-tune for as many iterations as P1-8bit spends
/// over all its steps at the same decay rate, so all routes share one budget.
/// Pass k = 32 for a purely full-precision run.
inline RunResult train_route(SegNet init, const Dataset& data, const TrainConfig& cfg, int k_w, int k_a,
                             int decay_rate, std::size_t decay_iters, std::uint64_t seed, std::ostream* log = nullptr,
                             const std::function<void(const StepMetrics&)>& on_step = {}) {
    const auto steps = route_steps(cfg.route, k_w, k_a, decay_rate);
    if (cfg.route != Route::p1_8bit) decay_iters *= route_steps(Route::p1_8bit, k_w, k_a, decay_rate).size();
    RunResult res;
    TrainState st = make_train_state(init, data, cfg, seed, log);
    if (cfg.route == Route::p2 && !steps.empty()) {
        SegNet extractor = init;
        set_bit_widths(extractor, k_w, k_a);
        TrainState pre = make_train_state(std::move(extractor), data, cfg, sub_seed(seed, "p2"), log);
        res.fp_loss = pretrain_classifier(pre, data.train, cfg, cfg.iters);
        RouteAssets assets;
        assets.low_bit_extractor = &pre.net;
        st.net = init_route(Route::p2, assets, init);
        st.iteration = pre.iteration;
        res.steps = run_bit_width_decay(st, steps, decay_iters, data, cfg, on_step);
    } else {
        res.fp_loss = pretrain_full_precision(st, data, cfg);
        if (!steps.empty()) {
            RouteAssets assets;
            assets.full_precision_fcn = &st.net;
            st.net = init_route(cfg.route, assets, init);
            res.steps = run_bit_width_decay(st, steps, decay_iters, data, cfg, on_step);
        }
    }
    res.net = std::move(st.net);
    res.velocity = std::move(st.velocity);
    return res;
}

// --- checkpoints ------------------------------------------------------------------------------------

/// Model file followed by the velocity tensors (same encoding as parameters).
inline void save_checkpoint(const std::string& path, const SegNet& net, const ParamMap& velocity) {
    std::ofstream os(path, std::ios::binary);
    require(static_cast<bool>(os), ErrorKind::io_error, "cannot open " + path + " for writing");
    write_model(os, net);
    detail::write_tensor_map(os, velocity);
    require(static_cast<bool>(os), ErrorKind::io_error, "write failed for " + path);
}

inline std::pair<SegNet, ParamMap> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(static_cast<bool>(is), ErrorKind::io_error, "cannot open " + path);
    SegNet net = read_model(is);
    ParamMap velocity;
    if (is.peek() != std::char_traits<char>::eof()) velocity = detail::read_tensor_map(is);
    return {std::move(net), std::move(velocity)};
}

} // namespace bfcn
