#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "bfcn/trainer.hpp"

using namespace bfcn;

namespace {

ParamMap scalar_map(double v) { return {{"p", RealTensor({1, 1, 1, 1}, v)}}; }

ErrorKind kind_of(auto&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.kind();
    }
    return ErrorKind::format_error;
}

Dataset tiny_dataset(std::uint64_t seed) {
    DatasetConfig cfg;
    cfg.train = 12;
    cfg.val = 4;
    cfg.h = cfg.w = 32;
    return generate_dataset(seed, cfg);
}

TrainConfig tiny_config() {
    TrainConfig cfg;
    cfg.batch = 2;
    cfg.iters = 4;
    cfg.augment = false;
    return cfg;
}

} // namespace

TEST(Sgd, ZeroMomentumIsPlainGradientDescent) {
    auto p = scalar_map(1.5);
    ParamMap v;
    sgd_momentum_step(p, scalar_map(0.25), v, 0.1, 0.0);
    EXPECT_EQ(p["p"][0], 1.5 - 0.1 * 0.25);
}

TEST(Sgd, VelocityDecaysGeometricallyWithZeroGradient) {
    auto p = scalar_map(0.0);
    ParamMap v = scalar_map(2.0);
    for (int i = 1; i <= 6; ++i) {
        sgd_momentum_step(p, scalar_map(0.0), v, 0.1, 0.5);
        EXPECT_EQ(v["p"][0], 2.0 * std::pow(0.5, i));
    }
}

TEST(Sgd, QuadraticMatchesScalarRecurrence) {
    // f(p) = a/2 (p - b)^2, gradient a (p - b)
    const double a = 3.0, b = -0.7, lr = 0.05, m = 0.9;
    auto p = scalar_map(2.0);
    ParamMap v;
    double sp = 2.0, sv = 0.0;
    for (int i = 0; i < 100; ++i) {
        sgd_momentum_step(p, scalar_map(a * (p["p"][0] - b)), v, lr, m);
        const double g = a * (sp - b);
        sv = m * sv + g;
        sp = sp - lr * sv;
        ASSERT_EQ(p["p"][0], sp) << "step " << i;
    }
    EXPECT_LT(std::abs(sp - b), std::abs(2.0 - b) / 100); // and it converges
}

TEST(Sgd, Errors) {
    auto p = scalar_map(0.0);
    ParamMap v;
    EXPECT_EQ(kind_of([&] { sgd_momentum_step(p, {{"p", RealTensor({1, 1, 1, 2})}}, v, 0.1, 0.9); }),
              ErrorKind::shape_mismatch);
    EXPECT_EQ(kind_of([&] { sgd_momentum_step(p, scalar_map(1), v, 0.0, 0.9); }), ErrorKind::bad_config);
    EXPECT_EQ(kind_of([&] { sgd_momentum_step(p, scalar_map(1), v, 0.1, 1.0); }), ErrorKind::bad_config);
}

TEST(Decay, Examples) {
    EXPECT_EQ(decay_sequence({8, 2, 2}), (std::vector<int>{8, 6, 4, 2}));
    EXPECT_EQ(decay_sequence({8, 3, 2}), (std::vector<int>{8, 5, 2}));
    EXPECT_EQ(decay_sequence({8, 1, 8}), (std::vector<int>{8}));
    EXPECT_EQ(decay_sequence({8, 1, 2}), (std::vector<int>{8, 7, 6, 5, 4, 3, 2}));
    EXPECT_EQ(decay_sequence({8, 4, 1}), (std::vector<int>{8, 4, 1}));
    EXPECT_EQ(decay_sequence({8, 5, 2}), (std::vector<int>{8, 3, 2}));
}

TEST(Decay, FollowsLinearFormulaThenClamps) {
    for (int c = 1; c <= 8; ++c)
        for (int target = 1; target <= c; ++target)
            for (int r = 1; r <= 8; ++r) {
                const auto seq = decay_sequence({c, r, target});
                ASSERT_EQ(seq.front(), c);
                ASSERT_EQ(seq.back(), target);
                for (std::size_t t = 0; t + 1 < seq.size(); ++t) ASSERT_EQ(seq[t], c - r * static_cast<int>(t));
                for (std::size_t t = 1; t < seq.size(); ++t) ASSERT_LT(seq[t], seq[t - 1]);
            }
}

TEST(Decay, Errors) {
    EXPECT_EQ(kind_of([] { decay_sequence({4, 1, 6}); }), ErrorKind::bad_schedule);
    EXPECT_EQ(kind_of([] { decay_sequence({8, 0, 2}); }), ErrorKind::bad_schedule);
    EXPECT_EQ(kind_of([] { decay_sequence({8, 1, 0}); }), ErrorKind::bad_schedule);
}

TEST(Decay, UnequalTargetPairs) {
    using P = std::pair<int, int>;
    const auto pairs = decay_pairs({8, 1, 2}, 1, 2);
    EXPECT_EQ(pairs.front(), (P{8, 8}));
    EXPECT_EQ(pairs[pairs.size() - 2], (P{2, 2}));
    EXPECT_EQ(pairs.back(), (P{1, 2}));
    EXPECT_EQ(pairs.size(), 8u);
    EXPECT_EQ(decay_pairs({8, 2, 2}, 4, 2), (std::vector<P>{{8, 8}, {6, 6}, {4, 4}, {4, 2}}));
}

TEST(ClassWeights, ExamplesAndBounds) {
    const auto w = class_weights({0.0, 1.0}, 1.4);
    EXPECT_NEAR(w[0], 2.9720, 5e-5);
    EXPECT_NEAR(w[1], 1.14225, 5e-5); // 1 / 0.875469
    std::vector<double> ps;
    for (int i = 0; i <= 100; ++i) ps.push_back(i / 100.0);
    const auto all = class_weights(ps, 1.4);
    for (std::size_t i = 0; i < all.size(); ++i) {
        EXPECT_GE(all[i], 1.0);
        EXPECT_LE(all[i], 3.0);
        if (i) {
            EXPECT_LT(all[i], all[i - 1]);
        }
    }
    EXPECT_EQ(kind_of([] { class_weights({0.1}, 1.0); }), ErrorKind::bad_constant);
    EXPECT_EQ(kind_of([] { class_weights({0.1}, 0.5); }), ErrorKind::bad_constant);
}

TEST(Allocation, ErrorExamples) {
    EXPECT_EQ(allocation_error(2, 2), 0.5);
    EXPECT_EQ(allocation_error(1, 4), 0.5625);
    EXPECT_EQ(allocation_error(4, 1), 0.5625);
}

TEST(Allocation, OptimalExamples) {
    using P = std::pair<int, int>;
    EXPECT_EQ(optimal_allocation(4), (P{2, 2}));
    EXPECT_EQ(optimal_allocation(16), (P{4, 4}));
    EXPECT_EQ(optimal_allocation(2), (P{1, 2}));
    for (int k = 1; k <= 8; ++k) EXPECT_EQ(optimal_allocation(k * k), (P{k, k}));
}

TEST(Allocation, BalancedMinimizesExhaustively) {
    for (int k = 1; k <= 8; ++k)
        for (int a = 1; a <= k * k; ++a)
            if ((k * k) % a == 0) {
                EXPECT_LE(allocation_error(k, k), allocation_error(a, k * k / a));
            }
    for (int c = 1; c <= 64; ++c) {
        const auto [kw, ka] = optimal_allocation(c);
        ASSERT_LE(kw * ka, c);
        for (int a = 1; a <= c; ++a)
            for (int b = 1; a * b <= c; ++b) ASSERT_LE(allocation_error(kw, ka), allocation_error(a, b));
    }
}

TEST(Routes, ParseAndSteps) {
    using P = std::pair<int, int>;
    EXPECT_EQ(parse_route("p1-8bit"), Route::p1_8bit);
    EXPECT_EQ(to_string(parse_route("p2")), "p2");
    EXPECT_EQ(kind_of([] { parse_route("p3"); }), ErrorKind::bad_config);
    EXPECT_TRUE(route_steps(Route::p1, 32, 32, 1).empty());
    EXPECT_EQ(route_steps(Route::p1, 2, 2, 1), (std::vector<P>{{2, 2}}));
    EXPECT_EQ(route_steps(Route::p2, 2, 2, 1), (std::vector<P>{{2, 2}}));
    const auto decayed = route_steps(Route::p1_8bit, 2, 2, 1);
    EXPECT_EQ(decayed.size(), 7u);
    EXPECT_EQ(decayed.front(), (P{8, 8}));
    EXPECT_EQ(route_steps(Route::p1_8bit, 2, 2, 0), (std::vector<P>{{8, 8}, {2, 2}}));
    EXPECT_EQ(route_steps(Route::p1_8bit, 2, 2, 2), (std::vector<P>{{8, 8}, {6, 6}, {4, 4}, {2, 2}}));
}

TEST(Routes, MissingAssets) {
    auto fresh = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32);
    for (auto r : {Route::p1, Route::p1_8bit, Route::p2})
        EXPECT_EQ(kind_of([&] { init_route(r, {}, fresh); }), ErrorKind::missing_asset);
}

TEST(Routes, P1StartsFullPrecisionAndP2KeepsFreshHeads) {
    auto fp = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1);
    auto fresh = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 2);
    RouteAssets a;
    a.full_precision_fcn = &fp;
    auto p1 = init_route(Route::p1, a, fresh);
    for (const auto& l : p1.layers) {
        EXPECT_EQ(l.quant.k_w, 32);
        EXPECT_EQ(l.quant.k_a, 32);
    }
    auto low = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 2, 2, 3);
    RouteAssets b;
    b.low_bit_extractor = &low;
    auto p2 = init_route(Route::p2, b, fresh);
    EXPECT_EQ(p2.params.at("stage2.conv1.w"), low.params.at("stage2.conv1.w"));
    EXPECT_EQ(p2.params.at("head4.w"), fresh.params.at("head4.w"));
}

TEST(Schedule, ActiveScalesEqualSplits) {
    auto net = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32);
    EXPECT_EQ(active_scales(net, {}, 100, 0), (std::vector<std::size_t>{8}));
    EXPECT_EQ(active_scales(net, {}, 100, 49), (std::vector<std::size_t>{8}));
    EXPECT_EQ(active_scales(net, {}, 100, 50), (std::vector<std::size_t>{8, 4}));
    EXPECT_EQ(active_scales(net, {0, 10}, 100, 10), (std::vector<std::size_t>{8, 4}));
}

TEST(Training, LogHasOneTabSeparatedLinePerIteration) {
    const auto data = tiny_dataset(1);
    auto cfg = tiny_config();
    std::ostringstream log;
    auto st = make_train_state(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1), data, cfg, 7, &log);
    pretrain_full_precision(st, data, cfg);
    std::istringstream in(log.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        std::size_t tabs = std::count(line.begin(), line.end(), '\t');
        EXPECT_EQ(tabs, 4u) << line;
        EXPECT_EQ(line.substr(0, line.find('\t')), std::to_string(n));
        ++n;
    }
    EXPECT_EQ(n, cfg.iters);
}

TEST(Training, DeterministicForSeed) {
    const auto data = tiny_dataset(2);
    auto cfg = tiny_config();
    cfg.augment = true;
    auto run = [&] {
        return train_route(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 4), data, cfg, 2, 2, 3, 2, 9);
    };
    auto a = run(), b = run();
    EXPECT_EQ(a.net.params, b.net.params);
    ASSERT_EQ(a.steps.size(), b.steps.size());
    for (std::size_t i = 0; i < a.steps.size(); ++i) EXPECT_EQ(a.steps[i].val_miou, b.steps[i].val_miou);
}

TEST(Training, DecayLogsSequenceAndKeepsFirstLayerAtEightBits) {
    const auto data = tiny_dataset(3);
    auto cfg = tiny_config();
    std::vector<std::pair<int, int>> seen;
    auto res = train_route(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 5), data, cfg, 2, 2, 2, 1, 3,
                           nullptr, [&](const StepMetrics& m) { seen.emplace_back(m.k_w, m.k_a); });
    std::vector<std::pair<int, int>> expect;
    for (int k : decay_sequence({8, 2, 2})) expect.emplace_back(k, k);
    EXPECT_EQ(seen, expect);
    EXPECT_EQ(res.net.layer("stem").quant.k_w, 8);
    EXPECT_EQ(res.net.layer("stem").quant.k_a, 8);
    EXPECT_EQ(bits_label(res.net), "2-2");
}

TEST(Training, DecayChainPrefixEqualsRunToIntermediateTarget) {
    const auto data = tiny_dataset(8);
    auto cfg = tiny_config();
    cfg.augment = true;
    const auto init = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 12);
    const auto chain = train_route(init, data, cfg, 1, 2, 1, 2, 21).steps;
    ASSERT_EQ(chain.size(), 8u);
    for (int k : {8, 4, 2}) {
        const auto direct = train_route(init, data, cfg, k, k, 1, 2, 21).steps;
        ASSERT_EQ(direct.size(), static_cast<std::size_t>(9 - k));
        for (std::size_t i = 0; i < direct.size(); ++i) {
            EXPECT_EQ(direct[i].k_w, chain[i].k_w);
            EXPECT_EQ(direct[i].train_loss, chain[i].train_loss);
            EXPECT_EQ(direct[i].val_miou, chain[i].val_miou);
        }
    }
}

TEST(Training, DecayWithTargetEqualToStartIsPlainFineTuning) {
    const auto data = tiny_dataset(4);
    auto cfg = tiny_config();
    auto base = build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 8, 8, 6);
    auto st1 = make_train_state(base, data, cfg, 11);
    run_bit_width_decay(st1, DecaySchedule{8, 1, 8, 3}, data, cfg);
    auto st2 = make_train_state(base, data, cfg, 11);
    std::vector<std::size_t> all_on(base.scales.size(), 0);
    train_phase(st2, data.train, cfg, 3, cfg.finetune_lr, all_on, "decay/8-8");
    EXPECT_EQ(st1.net.params, st2.net.params);
}

TEST(Training, DivergenceGuardFiresOnInfiniteStep) {
    const auto data = tiny_dataset(5);
    auto cfg = tiny_config();
    cfg.lr = std::numeric_limits<double>::infinity();
    cfg.iters = 40;
    std::ostringstream log;
    EXPECT_EQ(kind_of([&] {
                  train_route(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1), data, cfg, 32, 32, 1,
                              1, 1, &log);
              }),
              ErrorKind::divergence_detected);
    std::istringstream in(log.str());
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) ++n;
    EXPECT_LT(n, cfg.iters);
}

TEST(Training, DivergenceGuardWaitsForPatience) {
    auto data = tiny_dataset(6);
    for (auto& s : data.train) s.image[0] = std::numeric_limits<double>::quiet_NaN();
    auto cfg = tiny_config();
    cfg.iters = 12;
    cfg.divergence_patience = 12;
    std::ostringstream log;
    auto st = make_train_state(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1), data, cfg, 1, &log);
    const auto before = st.net.params;
    EXPECT_EQ(kind_of([&] { pretrain_full_precision(st, data, cfg); }), ErrorKind::divergence_detected);
    EXPECT_EQ(st.net.params, before); // non-finite iterations never update
    cfg.divergence_patience = 13;
    auto st2 = make_train_state(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1), data, cfg, 1);
    EXPECT_NO_THROW(pretrain_full_precision(st2, data, cfg));
}

TEST(Training, P2RouteRuns) {
    const auto data = tiny_dataset(6);
    auto cfg = tiny_config();
    cfg.route = Route::p2;
    auto res = train_route(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 2), data, cfg, 2, 2, 1, 1, 4);
    ASSERT_EQ(res.steps.size(), 1u);
    EXPECT_EQ(res.steps[0].iters, 7u); // same budget as the 7-step decay
    EXPECT_TRUE(std::isfinite(res.fp_loss));
    EXPECT_EQ(bits_label(res.net), "2-2");
}

TEST(Checkpoint, RoundTrip) {
    const auto data = tiny_dataset(7);
    auto cfg = tiny_config();
    auto st = make_train_state(build_toy_bfcn(3, 5, 8, ReconVariant::residual_block, 32, 32, 1), data, cfg, 2);
    pretrain_full_precision(st, data, cfg);
    const auto path = testing::TempDir() + "trainer_ckpt.bfcn";
    save_checkpoint(path, st.net, st.velocity);
    auto [net, vel] = load_checkpoint(path);
    ASSERT_EQ(vel.size(), st.velocity.size());
    for (const auto& [k, v] : st.velocity)
        for (std::size_t i = 0; i < v.size(); ++i) ASSERT_EQ(vel.at(k)[i], static_cast<double>(static_cast<float>(v[i])));
    EXPECT_EQ(net.layers.size(), st.net.layers.size());
}

TEST(Config, Validation) {
    TrainConfig cfg;
    cfg.momentum = 1.0;
    EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::bad_config);
    cfg = {};
    cfg.lr = -1;
    EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::bad_config);
    cfg = {};
    cfg.class_weight_c = 1.0;
    EXPECT_EQ(kind_of([&] { cfg.validate(); }), ErrorKind::bad_constant);
}
