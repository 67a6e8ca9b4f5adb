// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "funnelprune/decomposition.hpp"
#include "funnelprune/model.hpp"
#include "funnelprune/regularizers.hpp"
#include "funnelprune/training.hpp"

namespace fp {

// ---------------------------------------------------------------------------
// Decomposition of dense layers

enum class Backend { tucker2, cpd, svd };

std::string to_string(Backend b);
Backend parse_backend(const std::string& s);

struct DecomposeOptions {
    Backend backend = Backend::tucker2;
    /// CP rank; 0 selects max(S, T).
    std::size_t cpd_rank = 0;
    std::size_t cpd_iters = 200;
    double cpd_tol = 1e-9;
    std::uint64_t seed = 0;
};

/// Spatial kernels wider than 1 with at least two input and output channels.
bool decomposition_eligible(const Conv2d& conv);

/// Sets gates from the current factor norms and renormalizes the factors.
GateSet init_gates(Tucker2Conv& layer);
/// Attaches gates to any factorized layer (ones, then renormalized).
void attach_gates(Layer& layer);

/// Full-rank gated factorized form of a dense convolution.
Layer decompose_conv(const Conv2d& conv, const DecomposeOptions& opt);

struct DecomposeRecord {
    std::size_t layer = 0;
    std::string outcome;  // "decomposed", "ineligible" or "failed: <reason>"
};

/// Replaces every eligible dense convolution; failures leave the layer dense.
std::vector<DecomposeRecord> decompose_model(ModelGraph& g, const DecomposeOptions& opt);

// ---------------------------------------------------------------------------
// Regularized compression training

/// Weighted gate regularizer lambda·F at the given epoch.
GatePenalty make_gate_penalty(const RegConfig& cfg, std::size_t epoch);

struct GateSnapshot {
    std::size_t layer = 0;
    std::string family;  // g3, gc, g4 or gate
    std::vector<double> values;
};

std::vector<GateSnapshot> snapshot_gates(const ModelGraph& g);

/// Counts of |gate| per decade: < 1e-5, [1e-5, 1e-4), ..., [1, 10), >= 10.
inline constexpr std::size_t kHistogramBins = 8;
std::vector<std::size_t> gate_histogram(const ModelGraph& g);

struct EpochRecord {
    std::size_t epoch = 0;
    double c = 0.0;  // funnel parameter, 0 for other regularizers
    EpochStats stats;
    std::vector<std::size_t> histogram;
};

struct CompressTrace {
    std::vector<GateSnapshot> before;
    std::vector<GateSnapshot> after;
    std::vector<EpochRecord> epochs;
};

using EpochCallback = std::function<void(const EpochRecord&, const ModelGraph&)>;

/**
 * Trains with L = L_class + lambda·Σ F(gates) for `epochs` epochs. On a
 * non-finite loss the graph is restored to its state after the last
 * completed epoch and NumericError is rethrown.
 */
CompressTrace compress_train(ModelGraph& g, const Dataset& data, const RegConfig& cfg, std::size_t epochs,
                             const TrainOptions& opt, const EpochCallback& on_epoch = {});

/// Sorted (descending) gate values per layer and family, before and after.
void write_gate_dump(std::ostream& out, const CompressTrace& trace);

// ---------------------------------------------------------------------------
// Pruning, fate and folding

struct PruneConfig {
    double threshold = 1e-3;
    std::size_t min_rank = 1;
    bool prune_g4 = false;

    void validate() const;
};

/// Indices i with |gates[i]| >= threshold; the min_rank largest |gates| survive regardless.
std::vector<std::size_t> surviving_indices(std::span<const double> gates, double threshold, std::size_t min_rank);

struct PruneStats {
    std::size_t gates = 0;        // prunable gates considered
    std::size_t below = 0;        // of which |gate| < threshold
    std::size_t removed = 0;      // actually removed (after the min_rank floor)

    double ratio() const { return gates == 0 ? 0.0 : static_cast<double>(below) / static_cast<double>(gates); }
};

/// Fraction of prunable gates under the threshold, without modifying the graph.
PruneStats pruning_stats(const ModelGraph& g, const PruneConfig& cfg);

struct LayerPrune {
    std::size_t layer = 0;
    std::vector<std::size_t> keep3;  // surviving rank-3 (or CP/SVD rank) indices
    std::vector<std::size_t> keep4;  // surviving rank-4 indices
    std::vector<std::size_t> keep_out;  // surviving output channels (prune_g4 only)
};

struct PruneResult {
    PruneStats stats;
    std::vector<LayerPrune> layers;
};

/// Removes sub-threshold slices from every gated layer.
PruneResult prune(ModelGraph& g, const PruneConfig& cfg);

enum class FateDecision { kept_decomposed, reverted };

struct LayerFate {
    std::size_t layer = 0;
    FateDecision decision = FateDecision::reverted;
    std::uint64_t cost_original = 0;
    std::uint64_t cost_decomposed = 0;
    std::size_t r3 = 0;
    std::size_t r4 = 0;
};

std::string to_string(FateDecision d);

/// Compares dense and factorized MACs for a factorized layer at input shape `in`.
LayerFate decide_layer_fate(const Layer& layer, const ActShape& in);

/// Multiplies every gate into its factor and removes the gates.
void fold_gates(Layer& layer);

/// Dense kernel (D, D, S, T) realised by a factorized layer, gates included.
Tensor reconstruct_kernel(const Layer& layer);

/**
 * Decides each factorized layer's fate, folds its gates, and replaces it by
 * a dense convolution when that is not more expensive.
 */
std::vector<LayerFate> finalize_layers(ModelGraph& g);

struct FinetuneRecord {
    std::size_t epoch = 0;
    EpochStats stats;
};

/// Classification-loss-only training.
std::vector<FinetuneRecord> finetune(ModelGraph& g, const Dataset& data, std::size_t epochs, const TrainOptions& opt);

}  // namespace fp
