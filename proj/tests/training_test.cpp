// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numeric>

#include "funnelprune/compressor.hpp"
#include "funnelprune/error.hpp"
#include "funnelprune/training.hpp"
#include "test_util.hpp"

namespace fp {
namespace {

using testing::random_tensor;

Tucker2Conv random_gated(uint64_t seed) {
    Tucker2Conv l{random_tensor({3, 2}, seed), random_tensor({3, 3, 2, 4}, seed + 1), random_tensor({5, 4}, seed + 2),
                  random_tensor({5}, seed + 3), GateSet{random_tensor({2}, seed + 4), random_tensor({4}, seed + 5),
                                                        random_tensor({5}, seed + 6)},
                  1, 1};
    return l;
}

double max_unit_defect(const Layer& layer) {
    double worst = 0.0;
    const auto params = layer_params(layer);
    for (const auto& f : unit_families(layer)) {
        for (std::size_t r = 0; r < params[f.gate].value->size(); ++r) {
            worst = std::max(worst, std::abs(unit_norm(*params[f.value].value, f.columns, r) - 1.0));
        }
    }
    return worst;
}

TEST(RenormalizeTest, UnitNormsAndInvariantOutput) {
    Layer layer = random_gated(1);
    const Tensor x = random_tensor({4, 4, 3}, 9);
    const Tensor before = layer_forward(layer, x, nullptr);
    EXPECT_EQ(renormalize_factors(layer), 0u);
    EXPECT_LE(max_unit_defect(layer), 1e-12);
    EXPECT_LE(max_abs_diff(layer_forward(layer, x, nullptr), before), 1e-10);

    // Second pass is a no-op.
    const Layer once = layer;
    renormalize_factors(layer);
    const auto a = layer_params(once);
    const auto b = layer_params(layer);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_LE(max_abs_diff(*a[i].value, *b[i].value), 1e-12) << a[i].name;
    }
}

TEST(RenormalizeTest, ScaledColumnMovesIntoGate) {
    Layer layer = random_gated(2);
    renormalize_factors(layer);
    auto& t = std::get<Tucker2Conv>(layer);
    const double g = t.gates->g3[1];
    const Tensor x = random_tensor({4, 4, 3}, 10);
    const Tensor before = layer_forward(layer, x, nullptr);
    scale_unit(t.u3, true, 1, 5.0);
    renormalize_factors(layer);
    EXPECT_NEAR(t.gates->g3[1], 5.0 * g, 1e-12);
    // Scaling the unit changed the layer; undo through the gate to compare.
    t.gates->g3[1] = g;
    EXPECT_LE(max_abs_diff(layer_forward(layer, x, nullptr), before), 1e-10);
}

TEST(RenormalizeTest, GateTimesUnitReproducesParameter) {
    Layer layer = random_gated(3);
    const Tucker2Conv orig = std::get<Tucker2Conv>(layer);
    renormalize_factors(layer);
    const auto& t = std::get<Tucker2Conv>(layer);
    for (std::size_t s = 0; s < 3; ++s) {
        for (std::size_t r = 0; r < 2; ++r) {
            EXPECT_NEAR(t.u3.at({s, r}) * t.gates->g3[r] / orig.gates->g3[r], orig.u3.at({s, r}), 1e-12);
        }
    }
    for (std::size_t o = 0; o < 5; ++o) {
        for (std::size_t r = 0; r < 4; ++r) {
            EXPECT_NEAR(t.u4.at({o, r}) * t.gates->g4[o] / orig.gates->g4[o], orig.u4.at({o, r}), 1e-12);
        }
    }
    for (std::size_t i = 0; i < t.core.size(); ++i) {
        const std::size_t r4 = i % 4;
        EXPECT_NEAR(t.core[i] * t.gates->gc[r4] / orig.gates->gc[r4], orig.core[i], 1e-12);
    }
}

TEST(RenormalizeTest, TinyUnitsAreFlaggedAndLeftAlone) {
    Layer layer = random_gated(4);
    auto& t = std::get<Tucker2Conv>(layer);
    for (std::size_t s = 0; s < 3; ++s) {
        t.u3.at({s, 0}) = 1e-14;
    }
    const double g = t.gates->g3[0];
    EXPECT_EQ(renormalize_factors(layer), 1u);
    EXPECT_EQ(t.gates->g3[0], g);
    EXPECT_EQ(t.u3.at({0, 0}), 1e-14);
}

TEST(RenormalizeTest, SvdAndCpdShareGatesAcrossFamilies) {
    Layer svd = SvdConv{random_tensor({3, 3, 2, 3}, 5), random_tensor({3, 4}, 6), random_tensor({4}, 7),
                        Tensor::filled({3}, 1.0), 1, 1};
    Layer cpd = CpdConv{random_tensor({2, 3}, 8), random_tensor({3, 3}, 9), random_tensor({3, 3}, 10),
                        random_tensor({4, 3}, 11), random_tensor({4}, 12), Tensor::filled({3}, 1.0), 1, 1};
    for (Layer* layer : {&svd, &cpd}) {
        const Tensor x = random_tensor({5, 5, 2}, 13);
        const Tensor before = layer_forward(*layer, x, nullptr);
        renormalize_factors(*layer);
        EXPECT_LE(max_unit_defect(*layer), 1e-12);
        EXPECT_LE(max_abs_diff(layer_forward(*layer, x, nullptr), before), 1e-10);
    }
}

TEST(ProjectionTest, RemovesComponentAlongUnits) {
    Layer layer = random_gated(5);
    renormalize_factors(layer);
    const auto params = layer_params(layer);
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < params.size(); ++i) {
        grads.push_back(random_tensor(params[i].value->shape(), 100 + i));
    }
    const std::vector<Tensor> raw = grads;
    project_direction_grads(layer, grads);
    for (const auto& f : unit_families(layer)) {
        Tensor dot_check = grads[f.value];
        const Tensor& v = *params[f.value].value;
        for (std::size_t r = 0; r < params[f.gate].value->size(); ++r) {
            // ‖g + v‖² − ‖g‖² − ‖v‖² = 2 g·v, which must vanish.
            Tensor sum = dot_check;
            for (std::size_t i = 0; i < sum.size(); ++i) {
                sum[i] += v[i];
            }
            const double gv = (std::pow(unit_norm(sum, f.columns, r), 2) - std::pow(unit_norm(dot_check, f.columns, r), 2) -
                               std::pow(unit_norm(v, f.columns, r), 2)) /
                              2.0;
            EXPECT_NEAR(gv, 0.0, 1e-12);
        }
    }
    // Gate and bias gradients are untouched.
    EXPECT_EQ(grads[3], raw[3]);
    EXPECT_EQ(grads[4], raw[4]);
}

Dataset tiny_data(uint64_t seed) {
    SynthSpec s;
    s.seed = seed;
    s.size = 40;
    s.side = 8;
    s.classes = 4;
    return synth_dataset(s);
}

ModelGraph tiny_model(uint64_t seed) {
    ModelGraph g({8, 8, 1});
    g.add(Conv2d{Tensor({3, 3, 1, 4}), Tensor({4}), 1, 1});
    g.add(Relu{});
    g.add(MaxPool{2});
    g.add(Conv2d{Tensor({3, 3, 4, 4}), Tensor({4}), 1, 1});
    g.add(Relu{});
    g.add(MaxPool{2});
    g.add(Flatten{});
    g.add(Dense{Tensor({16, 4}), Tensor({4})});
    init_weights(g, seed);
    return g;
}

TEST(SgdTest, ZeroLearningRateIsIdentity) {
    ModelGraph g = tiny_model(1);
    decompose_model(g, {});
    const ModelGraph before = g;
    const Dataset d = tiny_data(1);
    TrainOptions opt;
    opt.lr = 0.0;
    opt.batch_size = 8;
    train_epoch(g, d, opt, 0);
    // Renormalization of already-unit factors may move the last bit.
    const auto a = before.params();
    const auto b = g.params();
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_LE(max_abs_diff(*a[i].value, *b[i].value), 1e-12) << a[i].name;
    }
}

TEST(SgdTest, SmallStepDecreasesBatchLoss) {
    for (const bool decomposed : {false, true}) {
        ModelGraph g = tiny_model(2);
        if (decomposed) {
            decompose_model(g, {});
        }
        const Dataset d = tiny_data(2);
        std::vector<std::size_t> idx(d.size());
        std::iota(idx.begin(), idx.end(), std::size_t{0});
        Gradients grads = Gradients::zeros_like(g);
        const double before = forward_backward(g, d, idx, grads).loss;
        sgd_step(g, grads, {1e-3, true});
        Gradients unused = Gradients::zeros_like(g);
        const double after = forward_backward(g, d, idx, unused).loss;
        EXPECT_LT(after, before) << (decomposed ? "decomposed" : "dense");
    }
}

TEST(SgdTest, SeededTrainingIsBitwiseDeterministic) {
    const Dataset d = tiny_data(3);
    TrainOptions opt;
    opt.lr = 0.05;
    opt.batch_size = 8;
    opt.seed = 11;
    ModelGraph a = tiny_model(3);
    decompose_model(a, {});
    ModelGraph b = a;
    for (std::size_t e = 0; e < 3; ++e) {
        train_epoch(a, d, opt, e);
        train_epoch(b, d, opt, e);
    }
    EXPECT_TRUE(a == b);
}

TEST(SgdTest, NonFiniteLossAborts) {
    ModelGraph g = tiny_model(4);
    std::get<Dense>(g.layers().back()).bias[0] = std::numeric_limits<double>::quiet_NaN();
    TrainOptions opt;
    EXPECT_THROW(train_epoch(g, tiny_data(4), opt, 0), NumericError);
}

TEST(EvaluateTest, CountsCorrectPredictions) {
    const ModelGraph g = tiny_model(5);
    const Dataset d = tiny_data(5);
    const Evaluation ev = evaluate(g, d, true);
    ASSERT_EQ(ev.predictions.size(), d.size());
    ASSERT_EQ(ev.logits.size(), d.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& l = ev.logits[i];
        std::size_t best = 0;
        for (std::size_t k = 1; k < l.size(); ++k) {
            if (l[k] > l[best]) {
                best = k;
            }
        }
        EXPECT_EQ(ev.predictions[i], best);
        correct += best == d.labels[i] ? 1 : 0;
    }
    EXPECT_DOUBLE_EQ(ev.accuracy, static_cast<double>(correct) / static_cast<double>(d.size()));
}

ModelGraph single_gated(uint64_t seed) {
    ModelGraph g({4, 4, 3});
    Layer l = random_gated(seed);
    renormalize_factors(l);
    g.add(std::move(l));
    g.add(Flatten{});
    g.add(Dense{random_tensor({80, 2}, seed + 20), Tensor::zeros({2})});
    return g;
}

TEST(TruncatedGateTest, PenaltyStepStopsAtZero) {
    ModelGraph g = single_gated(30);
    auto& t = std::get<Tucker2Conv>(g.layers()[0]);
    t.gates->g3[0] = 1e-4;
    t.gates->g3[1] = -0.5;
    RegConfig l1;
    l1.kind = RegKind::l1;
    l1.lambda = 1.0;
    const GatePenalty pen = make_gate_penalty(l1, 0);
    Gradients grads = Gradients::zeros_like(g);
    sgd_step(g, grads, {1e-3, true}, &pen);
    EXPECT_EQ(t.gates->g3[0], 0.0);
    EXPECT_NEAR(t.gates->g3[1], -0.5 + 1e-3, 1e-12);
    // A zero gate stays at zero under penalty alone.
    Gradients again = Gradients::zeros_like(g);
    sgd_step(g, again, {1e-3, true}, &pen);
    EXPECT_EQ(t.gates->g3[0], 0.0);
}

TEST(TruncatedGateTest, LossGradientCanReviveZeroGate) {
    RegConfig l1;
    l1.kind = RegKind::l1;
    l1.lambda = 1.0;
    const GatePenalty pen = make_gate_penalty(l1, 0);
    for (const double push : {0.5, 3.0}) {
        ModelGraph g = single_gated(31);
        auto& t = std::get<Tucker2Conv>(g.layers()[0]);
        t.gates->gc[2] = 0.0;
        Gradients grads = Gradients::zeros_like(g);
        grads.per_layer[0][5][2] = -push;  // gc slot
        sgd_step(g, grads, {0.1, false}, &pen);
        // Loss step 0.1·push, then the L1 step 0.1 back towards zero.
        EXPECT_NEAR(t.gates->gc[2], push > 1.0 ? 0.1 * (push - 1.0) : 0.0, 1e-12) << push;
    }
}

TEST(TruncatedGateTest, MatchesPlainWhenNothingCrosses) {
    const Dataset d = tiny_data(6);
    TrainOptions opt;
    opt.lr = 1e-3;
    opt.batch_size = 8;
    RegConfig l2;
    l2.kind = RegKind::l2;
    l2.lambda = 1e-3;
    ModelGraph a = tiny_model(6);
    decompose_model(a, {});
    ModelGraph b = a;
    opt.gate_update = GateUpdate::plain;
    train_epoch(a, d, opt, 0, make_gate_penalty(l2, 0));
    opt.gate_update = GateUpdate::truncated;
    train_epoch(b, d, opt, 0, make_gate_penalty(l2, 0));
    // Same step up to where the penalty gradient is evaluated.
    const auto pa = a.params();
    const auto pb = b.params();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        EXPECT_LE(max_abs_diff(*pa[i].value, *pb[i].value), 1e-6) << pa[i].name;
    }
}

TEST(TruncatedGateTest, ParsesNames) {
    EXPECT_EQ(parse_gate_update("plain"), GateUpdate::plain);
    EXPECT_EQ(parse_gate_update(to_string(GateUpdate::truncated)), GateUpdate::truncated);
    EXPECT_THROW(parse_gate_update("prox"), FormatError);
}

}  // namespace
}  // namespace fp
