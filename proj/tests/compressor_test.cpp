// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "funnelprune/compressor.hpp"
#include "funnelprune/cost_model.hpp"
#include "funnelprune/error.hpp"
#include "test_util.hpp"

namespace fp {
namespace {

using testing::random_tensor;

double norm_of_column(const Tensor& m, std::size_t c) {
    double acc = 0.0;
    for (std::size_t r = 0; r < m.extent(0); ++r) {
        acc += m.at({r, c}) * m.at({r, c});
    }
    return std::sqrt(acc);
}

TEST(InitGatesTest, GatesAreFactorNorms) {
    Tucker2Conv l{random_tensor({4, 3}, 1), random_tensor({3, 3, 3, 2}, 2), random_tensor({5, 2}, 3),
                  random_tensor({5}, 4), std::nullopt, 1, 1};
    const Tucker2Conv orig = l;
    const Tensor x = random_tensor({5, 5, 4}, 5);
    const Tensor ungated = layer_forward(Layer{l}, x, nullptr);
    const GateSet g = init_gates(l);
    for (std::size_t r = 0; r < 3; ++r) {
        EXPECT_NEAR(g.g3[r], norm_of_column(orig.u3, r), 1e-12);
    }
    for (std::size_t r4 = 0; r4 < 2; ++r4) {
        double acc = 0.0;
        for (std::size_t i = r4; i < orig.core.size(); i += 2) {
            acc += orig.core[i] * orig.core[i];
        }
        EXPECT_NEAR(g.gc[r4], std::sqrt(acc), 1e-12);
    }
    for (std::size_t t = 0; t < 5; ++t) {
        EXPECT_NEAR(g.g4[t], std::hypot(orig.u4.at({t, 0}), orig.u4.at({t, 1})), 1e-12);
    }
    EXPECT_LE(max_abs_diff(layer_forward(Layer{l}, x, nullptr), ungated), 1e-10);
}

TEST(InitGatesTest, OrthonormalFactorsAndScaledSlice) {
    const Tensor k = random_tensor({3, 3, 4, 6}, 6);
    Layer layer = decompose_conv(Conv2d{k, Tensor::zeros({6}), 1, 1}, {});
    const auto& t = std::get<Tucker2Conv>(layer);
    for (std::size_t r = 0; r < t.rank3(); ++r) {
        EXPECT_NEAR(t.gates->g3[r], 1.0, 1e-12);
    }
    Tucker2Conv raw = t;
    raw.gates.reset();
    Tucker2Conv doubled = raw;
    for (std::size_t i = 0; i < doubled.core.size(); i += doubled.rank4()) {
        doubled.core[i] *= 2.0;
    }
    const GateSet a = init_gates(raw);
    const GateSet b = init_gates(doubled);
    EXPECT_NEAR(b.gc[0], 2.0 * a.gc[0], 1e-12);
    EXPECT_NEAR(b.gc[1], a.gc[1], 1e-12);
}

TEST(DecomposeTest, FullRankBackendsPreserveOutputs) {
    const Conv2d conv{random_tensor({3, 3, 3, 5}, 7), random_tensor({5}, 8), 1, 1};
    const Tensor x = random_tensor({6, 6, 3}, 9);
    const Tensor ref = layer_forward(Layer{conv}, x, nullptr);
    for (const Backend b : {Backend::tucker2, Backend::svd}) {
        DecomposeOptions opt;
        opt.backend = b;
        const Layer l = decompose_conv(conv, opt);
        EXPECT_TRUE(has_gates(l));
        EXPECT_LE(relative_error(ref, layer_forward(l, x, nullptr)), 1e-10) << to_string(b);
        EXPECT_LE(relative_error(conv.kernel, reconstruct_kernel(l)), 1e-12) << to_string(b);
    }
}

TEST(DecomposeTest, CpdRecoversRankOneKernel) {
    Tensor k({3, 3, 2, 4});
    testing::for_each_index(k.shape(), [&](const Shape& i, std::size_t flat) {
        k[flat] = (1.0 + double(i[0])) * (2.0 - double(i[1])) * (0.5 + double(i[2])) * (1.0 - 0.3 * double(i[3]));
    });
    DecomposeOptions opt;
    opt.backend = Backend::cpd;
    opt.cpd_rank = 1;
    const Layer l = decompose_conv(Conv2d{k, Tensor::zeros({4}), 1, 1}, opt);
    EXPECT_LE(relative_error(k, reconstruct_kernel(l)), 1e-10);
}

TEST(DecomposeTest, EligibilityAndModelPass) {
    ModelGraph g({6, 6, 1});
    g.add(Conv2d{random_tensor({3, 3, 1, 4}, 10), Tensor::zeros({4}), 1, 1});
    g.add(Conv2d{random_tensor({1, 1, 4, 4}, 11), Tensor::zeros({4}), 1, 0});
    g.add(Conv2d{random_tensor({3, 3, 4, 4}, 12), Tensor::zeros({4}), 1, 1});
    g.add(Flatten{});
    g.add(Dense{random_tensor({144, 2}, 13), Tensor::zeros({2})});
    const auto records = decompose_model(g, {});
    ASSERT_EQ(records.size(), 3u);
    EXPECT_EQ(records[0].outcome, "ineligible");
    EXPECT_EQ(records[1].outcome, "ineligible");
    EXPECT_EQ(records[2].outcome, "decomposed");
    EXPECT_TRUE(std::holds_alternative<Conv2d>(g.layers()[1]));
    EXPECT_TRUE(std::holds_alternative<Tucker2Conv>(g.layers()[2]));
}

TEST(DecomposeTest, FailureLeavesLayerDense) {
    ModelGraph g({6, 6, 2});
    Tensor k = random_tensor({3, 3, 2, 2}, 14);
    k[5] = std::numeric_limits<double>::quiet_NaN();
    g.add(Conv2d{k, Tensor::zeros({2}), 1, 1});
    g.add(Flatten{});
    g.add(Dense{random_tensor({72, 2}, 15), Tensor::zeros({2})});
    const auto records = decompose_model(g, {});
    ASSERT_EQ(records.size(), 1u);
    EXPECT_EQ(records[0].outcome.rfind("failed", 0), 0u);
    EXPECT_TRUE(std::holds_alternative<Conv2d>(g.layers()[0]));
}

// ---------------------------------------------------------------------------

ModelGraph gated_model(std::uint64_t seed, double scale = 1.0) {
    ModelGraph g({6, 6, 3});
    g.add(decompose_conv(Conv2d{random_tensor({3, 3, 3, 5}, seed, scale), random_tensor({5}, seed + 1, scale), 1, 1},
                         {}));
    g.add(Relu{});
    g.add(decompose_conv(Conv2d{random_tensor({3, 3, 5, 4}, seed + 2, scale), random_tensor({4}, seed + 3, scale), 1, 1},
                         {}));
    g.add(MaxPool{2});
    g.add(Flatten{});
    g.add(Dense{random_tensor({36, 3}, seed + 4, scale), random_tensor({3}, seed + 5, scale)});
    return g;
}

TEST(SurvivorsTest, MatchesScan) {
    const Tensor gates = random_tensor({31}, 20);
    std::vector<double> mags(gates.data().begin(), gates.data().end());
    for (auto& m : mags) {
        m = std::abs(m);
    }
    std::vector<double> sorted = mags;
    std::sort(sorted.begin(), sorted.end());
    const double median = sorted[15];
    const auto keep = surviving_indices(gates.data(), median, 1);
    std::vector<std::size_t> scan;
    for (std::size_t i = 0; i < mags.size(); ++i) {
        if (!(mags[i] < median)) {
            scan.push_back(i);
        }
    }
    EXPECT_EQ(keep, scan);
    EXPECT_EQ(keep.size(), 16u);
}

TEST(SurvivorsTest, TiesKeptAndFloor) {
    const std::vector<double> g{0.5, -1e-3, 1e-4, -2e-4, 3e-5};
    EXPECT_EQ(surviving_indices(g, 1e-3, 1), (std::vector<std::size_t>{0, 1}));
    EXPECT_EQ(surviving_indices(g, 10.0, 1), (std::vector<std::size_t>{0}));
    EXPECT_EQ(surviving_indices(g, 10.0, 3), (std::vector<std::size_t>{0, 1, 3}));
    EXPECT_EQ(surviving_indices(g, 10.0, 9).size(), 5u);
}

TEST(PruneTest, ThresholdBelowAllGatesIsNoop) {
    ModelGraph g = gated_model(30);
    const ModelGraph before = g;
    PruneConfig cfg;
    cfg.threshold = 1e-9;
    const PruneResult r = prune(g, cfg);
    EXPECT_EQ(r.stats.removed, 0u);
    EXPECT_TRUE(g == before);
}

TEST(PruneTest, ZeroGatesRemovedWithoutChangingOutputs) {
    ModelGraph g = gated_model(40);
    auto& a = std::get<Tucker2Conv>(g.layers()[0]);
    auto& b = std::get<Tucker2Conv>(g.layers()[2]);
    a.gates->g3[1] = 0.0;
    a.gates->gc[3] = 0.0;
    b.gates->gc[0] = 0.0;
    std::vector<Tensor> inputs;
    std::vector<Tensor> outputs;
    for (std::uint64_t s = 0; s < 10; ++s) {
        inputs.push_back(random_tensor({6, 6, 3}, 100 + s));
        outputs.push_back(forward(g, inputs.back()));
    }
    const PruneResult r = prune(g, PruneConfig{});
    EXPECT_EQ(r.stats.removed, 3u);
    EXPECT_EQ(r.layers[0].keep3, (std::vector<std::size_t>{0, 2}));
    EXPECT_EQ(r.layers[0].keep4, (std::vector<std::size_t>{0, 1, 2, 4}));
    EXPECT_EQ(std::get<Tucker2Conv>(g.layers()[0]).rank3(), 2u);
    EXPECT_EQ(std::get<Tucker2Conv>(g.layers()[2]).rank4(), 3u);
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        EXPECT_LE(max_abs_diff(forward(g, inputs[i]), outputs[i]), 1e-10);
    }
}

TEST(PruneTest, OutputChannelPruningPropagates) {
    ModelGraph g = gated_model(50);
    auto& a = std::get<Tucker2Conv>(g.layers()[0]);
    a.gates->g4[2] = 0.0;
    a.bias[2] = 0.0;  // a removed channel must carry nothing downstream
    auto& b = std::get<Tucker2Conv>(g.layers()[2]);
    b.gates->g4[1] = 0.0;
    b.bias[1] = 0.0;
    const Tensor x = random_tensor({6, 6, 3}, 51);
    const Tensor before = forward(g, x);
    PruneConfig cfg;
    cfg.prune_g4 = true;
    const PruneResult r = prune(g, cfg);
    EXPECT_EQ(r.layers[0].keep_out, (std::vector<std::size_t>{0, 1, 3, 4}));
    EXPECT_EQ(std::get<Tucker2Conv>(g.layers()[0]).out_channels(), 4u);
    EXPECT_EQ(std::get<Tucker2Conv>(g.layers()[2]).in_channels(), 4u);
    EXPECT_EQ(std::get<Dense>(g.layers()[5]).weight.extent(0), 27u);
    EXPECT_LE(max_abs_diff(forward(g, x), before), 1e-10);
}

TEST(PruneTest, MonotoneInThreshold) {
    for (std::uint64_t seed = 60; seed < 65; ++seed) {
        ModelGraph base = gated_model(seed);
        for (auto& l : base.layers()) {
            if (auto* t = std::get_if<Tucker2Conv>(&l)) {
                t->gates->g3 = random_tensor(t->gates->g3.shape(), seed * 7);
                t->gates->gc = random_tensor(t->gates->gc.shape(), seed * 11);
            }
        }
        ModelGraph lo = base;
        ModelGraph hi = base;
        const PruneResult a = prune(lo, PruneConfig{0.3, 1, false});
        const PruneResult b = prune(hi, PruneConfig{0.9, 1, false});
        for (std::size_t i = 0; i < a.layers.size(); ++i) {
            EXPECT_TRUE(std::includes(a.layers[i].keep3.begin(), a.layers[i].keep3.end(), b.layers[i].keep3.begin(),
                                      b.layers[i].keep3.end()));
            EXPECT_TRUE(std::includes(a.layers[i].keep4.begin(), a.layers[i].keep4.end(), b.layers[i].keep4.begin(),
                                      b.layers[i].keep4.end()));
        }
        EXPECT_LE(a.stats.below, b.stats.below);
    }
}

TEST(PruneTest, StatsCountPrunableFamilies) {
    ModelGraph g = gated_model(70);
    const PruneStats s = pruning_stats(g, PruneConfig{});
    EXPECT_EQ(s.gates, (3u + 5u) + (5u + 4u));
    PruneConfig with_g4;
    with_g4.prune_g4 = true;
    EXPECT_EQ(pruning_stats(g, with_g4).gates, s.gates + 5u + 4u);
    EXPECT_THROW(pruning_stats(g, PruneConfig{0.0, 1, false}), RangeError);
}

// ---------------------------------------------------------------------------

Tucker2Conv sized_tucker(std::size_t d, std::size_t s, std::size_t t, std::size_t r3, std::size_t r4) {
    return Tucker2Conv{Tensor({s, r3}), Tensor({d, d, r3, r4}), Tensor({t, r4}), Tensor({t}), std::nullopt, 1,
                       (d - 1) / 2};
}

TEST(FateTest, WorkedExamples) {
    const LayerFate kept = decide_layer_fate(Layer{sized_tucker(3, 16, 32, 4, 8)}, {8, 8, 16});
    EXPECT_EQ(kept.cost_original, 294912u);
    EXPECT_EQ(kept.cost_decomposed, 38912u);
    EXPECT_EQ(kept.decision, FateDecision::kept_decomposed);

    const LayerFate full = decide_layer_fate(Layer{sized_tucker(3, 16, 16, 16, 16)}, {8, 8, 16});
    EXPECT_EQ(full.cost_original, 64u * 2304);
    EXPECT_EQ(full.cost_decomposed, 64u * (256 + 2304 + 256));
    EXPECT_EQ(full.decision, FateDecision::reverted);

    const LayerFate pointwise = decide_layer_fate(Layer{sized_tucker(1, 8, 8, 8, 8)}, {4, 4, 8});
    EXPECT_EQ(pointwise.decision, FateDecision::reverted);
}

TEST(FoldTest, UnitGatesLeaveFactorsAlone) {
    Layer l = decompose_conv(Conv2d{random_tensor({3, 3, 2, 3}, 80), Tensor::zeros({3}), 1, 1}, {});
    auto& t = std::get<Tucker2Conv>(l);
    t.gates = GateSet{Tensor::filled({2}, 1.0), Tensor::filled({3}, 1.0), Tensor::filled({3}, 1.0)};
    const Tucker2Conv before = t;
    fold_gates(l);
    EXPECT_FALSE(has_gates(l));
    EXPECT_EQ(std::get<Tucker2Conv>(l).u3, before.u3);
    EXPECT_EQ(std::get<Tucker2Conv>(l).core, before.core);
    EXPECT_EQ(std::get<Tucker2Conv>(l).u4, before.u4);
}

TEST(FoldTest, PreservesOutputsAndKernel) {
    Tucker2Conv t{random_tensor({3, 2}, 81), random_tensor({3, 3, 2, 3}, 82), random_tensor({4, 3}, 83),
                  random_tensor({4}, 84), GateSet{random_tensor({2}, 85), random_tensor({3}, 86), random_tensor({4}, 87)},
                  1, 1};
    // Kernel with every gate multiplied in, summed term by term.
    Tensor expected({3, 3, 3, 4});
    testing::for_each_index(expected.shape(), [&](const Shape& i, std::size_t flat) {
        double acc = 0.0;
        for (std::size_t a = 0; a < 2; ++a) {
            for (std::size_t b = 0; b < 3; ++b) {
                acc += t.gates->g3[a] * t.u3.at({i[2], a}) * t.gates->gc[b] * t.core.at({i[0], i[1], a, b}) *
                       t.gates->g4[i[3]] * t.u4.at({i[3], b});
            }
        }
        expected[flat] = acc;
    });
    Layer l = t;
    const Tensor x = random_tensor({5, 5, 3}, 88);
    const Tensor before = layer_forward(l, x, nullptr);
    EXPECT_LE(max_abs_diff(reconstruct_kernel(l), expected), 1e-12);
    fold_gates(l);
    EXPECT_LE(max_abs_diff(layer_forward(l, x, nullptr), before), 1e-10);
    EXPECT_LE(max_abs_diff(reconstruct_kernel(l), expected), 1e-12);
}

TEST(FinalizeTest, ShipsCheaperFormWithoutGates) {
    ModelGraph g({8, 8, 16});
    Layer small = decompose_conv(Conv2d{random_tensor({3, 3, 16, 32}, 90), random_tensor({32}, 91), 1, 1}, {});
    auto& t = std::get<Tucker2Conv>(small);
    for (std::size_t r = 4; r < 16; ++r) {
        t.gates->g3[r] = 0.0;
    }
    for (std::size_t r = 8; r < 32; ++r) {
        t.gates->gc[r] = 0.0;
    }
    g.add(small);
    g.add(Relu{});
    g.add(decompose_conv(Conv2d{random_tensor({3, 3, 32, 16}, 92), random_tensor({16}, 93), 1, 1}, {}));
    g.add(Flatten{});
    g.add(Dense{random_tensor({1024, 2}, 94), Tensor::zeros({2})});
    const Tensor x = random_tensor({8, 8, 16}, 95);
    const Tensor before = forward(g, x);
    prune(g, PruneConfig{});
    const auto shapes = g.shapes();
    const auto fates = finalize_layers(g);
    ASSERT_EQ(fates.size(), 2u);
    EXPECT_EQ(fates[0].decision, FateDecision::kept_decomposed);
    EXPECT_EQ(fates[1].decision, FateDecision::reverted);
    EXPECT_TRUE(std::holds_alternative<Tucker2Conv>(g.layers()[0]));
    EXPECT_TRUE(std::holds_alternative<Conv2d>(g.layers()[2]));
    EXPECT_EQ(g.gate_count(), 0u);
    for (const auto& f : fates) {
        EXPECT_EQ(layer_macs(g.layers()[f.layer], shapes[f.layer]), std::min(f.cost_original, f.cost_decomposed));
    }
    EXPECT_LE(relative_error(before, forward(g, x)), 1e-10);
}

// ---------------------------------------------------------------------------

Dataset small_data() {
    SynthSpec s;
    s.size = 30;
    s.side = 6;
    s.classes = 3;
    s.channels = 3;
    return synth_dataset(s);
}

TEST(CompressTrainTest, ZeroLambdaMatchesPlainTraining) {
    const Dataset d = small_data();
    ModelGraph a = gated_model(100, 0.2);
    ModelGraph b = a;
    RegConfig cfg;
    cfg.lambda = 0.0;
    TrainOptions opt;
    opt.lr = 0.01;
    opt.batch_size = 5;
    const CompressTrace trace = compress_train(a, d, cfg, 2, opt);
    for (std::size_t e = 0; e < 2; ++e) {
        train_epoch(b, d, opt, e);
    }
    EXPECT_TRUE(a == b);
    ASSERT_EQ(trace.epochs.size(), 2u);
    EXPECT_EQ(trace.epochs[0].stats.reg_penalty, 0.0);
    EXPECT_EQ(trace.before.size(), 6u);
}

TEST(CompressTrainTest, PenaltyShrinksGates) {
    const Dataset d = small_data();
    ModelGraph g = gated_model(110, 0.2);
    RegConfig cfg;
    cfg.kind = RegKind::l1;
    cfg.lambda = 0.5;
    TrainOptions opt;
    opt.lr = 0.01;
    opt.batch_size = 5;
    const CompressTrace trace = compress_train(g, d, cfg, 3, opt);
    double before = 0.0;
    double after = 0.0;
    for (std::size_t i = 0; i < trace.before.size(); ++i) {
        for (std::size_t r = 0; r < trace.before[i].values.size(); ++r) {
            before += std::abs(trace.before[i].values[r]);
            after += std::abs(trace.after[i].values[r]);
        }
    }
    EXPECT_LT(after, before);
    std::size_t total = 0;
    for (const auto c : trace.epochs.back().histogram) {
        total += c;
    }
    EXPECT_EQ(total, g.gate_count());

    std::ostringstream dump;
    write_gate_dump(dump, trace);
    const std::string text = dump.str();
    EXPECT_EQ(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')), g.gate_count() + 1);
}

TEST(CompressTrainTest, DivergenceRestoresLastGoodEpoch) {
    const Dataset d = small_data();
    ModelGraph g = gated_model(120);
    RegConfig cfg;
    cfg.kind = RegKind::l2;
    cfg.lambda = 1e300;
    TrainOptions opt;
    opt.lr = 1e10;
    opt.batch_size = 5;
    const ModelGraph before = g;
    EXPECT_THROW(compress_train(g, d, cfg, 3, opt), NumericError);
    EXPECT_TRUE(g == before);
}

}  // namespace
}  // namespace fp
