// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "funnelprune/dataset.hpp"
#include "funnelprune/model.hpp"

namespace fp {

/// Smallest unit norm that renormalization will divide by.
inline constexpr double kUnitNormEpsilon = 1e-12;

/**
 * A family of structural units sharing one gate vector: slice r of the value
 * parameter is scaled by gate[r]. Slices are columns (last axis) or rows
 * (first axis). Indices refer to layer_params() order.
 */
struct UnitFamily {
    std::size_t value = 0;
    std::size_t gate = 0;
    bool columns = true;
};

/// Unit families of a gated layer (empty for ungated layers).
std::vector<UnitFamily> unit_families(const Layer& layer);

/// Norm of slice r of `t` as laid out by `columns`.
double unit_norm(const Tensor& t, bool columns, std::size_t r);
/// Multiplies slice r of `t` by `factor`.
void scale_unit(Tensor& t, bool columns, std::size_t r, double factor);

/**
 * Rescales every structural unit of a gated layer (Tucker-2: u3 columns,
 * u4 rows, core mode-4 slices) to unit norm and multiplies the removed norm
 * into the unit's gate. Units with norm below kUnitNormEpsilon are left
 * alone. Returns the number of such flagged units. No-op on ungated layers.
 */
std::size_t renormalize_factors(Layer& layer);

/// Removes from each unit's gradient its component along the unit.
void project_direction_grads(const Layer& layer, std::span<Tensor> grads);

/// Every gate vector in the graph with its location.
struct GateView {
    std::size_t layer = 0;
    std::size_t param = 0;  // index into layer_params(layer)
    const Tensor* gate = nullptr;
};
std::vector<GateView> gate_views(const ModelGraph& g);

struct SgdOptions {
    double lr = 1e-3;
    /// Strip the gradient component along each gated unit before stepping.
    bool project = true;
};

/**
 * Weighted gate regularizer λ·ΣF(g) over one gate vector: `value` returns
 * the penalty, `grad` writes λ·dF/dg element-wise.
 */
struct GatePenalty {
    std::function<double(std::span<const double>)> value;
    std::function<void(std::span<const double>, std::span<double>)> grad;

    explicit operator bool() const { return static_cast<bool>(value); }
};

/**
 * How the regularizer enters the gate update.
 *
 * plain: the penalty gradient is added to the loss gradient and every
 * parameter takes θ ← θ − lr·∇θ.
 *
 * truncated: gates first take the loss step v = g − lr·∇L; the penalty step
 * v − lr·λF'(v) is then clipped at zero, so a gate the penalty would carry
 * across zero lands exactly on zero and a zero gate stays there until the
 * loss gradient alone moves it.
 */
enum class GateUpdate { plain, truncated };

std::string to_string(GateUpdate u);
GateUpdate parse_gate_update(const std::string& s);

/**
 * θ ← θ − lr·∇θ, then renormalize_factors on every gated layer. With a
 * penalty given, gates use the truncated update and `grads` must hold the
 * loss gradient only.
 */
std::size_t sgd_step(ModelGraph& g, Gradients& grads, const SgdOptions& opt, const GatePenalty* truncated = nullptr);

struct BatchStats {
    double loss = 0.0;  // mean classification loss
    std::size_t correct = 0;
    std::size_t count = 0;
};

/// Mean cross-entropy gradients over the listed examples, accumulated into grads.
BatchStats forward_backward(const ModelGraph& g, const Dataset& data, std::span<const std::size_t> indices,
                            Gradients& grads);

struct Evaluation {
    double loss = 0.0;
    double accuracy = 0.0;
    std::vector<std::uint32_t> predictions;
    std::vector<Tensor> logits;  // filled when requested
};

Evaluation evaluate(const ModelGraph& g, const Dataset& data, bool keep_logits = false);

struct TrainOptions {
    std::size_t batch_size = 32;
    double lr = 1e-3;
    bool project = true;
    std::uint64_t seed = 0;
    GateUpdate gate_update = GateUpdate::plain;
};

struct EpochStats {
    double class_loss = 0.0;
    double reg_penalty = 0.0;
    double train_accuracy = 0.0;
    std::size_t flagged_units = 0;
};

/**
 * One pass over `data` in a seeded shuffled order (seed, epoch). Throws
 * NumericError as soon as the loss or any parameter becomes non-finite.
 */
EpochStats train_epoch(ModelGraph& g, const Dataset& data, const TrainOptions& opt, std::size_t epoch,
                       const GatePenalty& penalty = {});

/// He-normal kernels, zero biases; deterministic per seed.
void init_weights(ModelGraph& g, std::uint64_t seed);

}  // namespace fp
