// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "funnelprune/model.hpp"

namespace fp {

// MAC counts use the output spatial size (oh, ow); biases never count as MACs.

/// Dense convolution: oh·ow·D²·S·T.
std::uint64_t conv_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t);
/// Tucker-2 factorized convolution: oh·ow·(S·R3 + R3·D²·R4 + R4·T).
std::uint64_t tucker2_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t,
                           std::size_t r3, std::size_t r4);
/// Two-matrix factorization: oh·ow·(D²·S·R + R·T).
std::uint64_t svd_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t, std::size_t r);
/// CP factorization: oh·ow·(S·R + 2·D·R + R·T).
std::uint64_t cpd_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t, std::size_t r);

std::uint64_t layer_macs(const Layer& layer, const ActShape& in);
/// Weights, biases and gates.
std::uint64_t layer_param_count(const Layer& layer);
std::uint64_t param_count(const ModelGraph& g);

struct LayerCost {
    std::string kind;
    std::string detail;
    ActShape in;
    ActShape out;
    std::uint64_t macs = 0;
    std::uint64_t params = 0;
};

struct CostReport {
    std::vector<LayerCost> layers;
    std::uint64_t total_macs = 0;
    std::uint64_t total_params = 0;
    /// GMAC of the reference model; speed_up = baseline / this model.
    double baseline_gmac = 0.0;
    double speed_up = 1.0;

    double gmac() const { return static_cast<double>(total_macs) / 1e9; }
    double mparams() const { return static_cast<double>(total_params) / 1e6; }
};

/// baseline / compressed; throws RangeError when compressed is zero.
double speed_up(double baseline_gmac, double compressed_gmac);

CostReport model_cost(const ModelGraph& g, std::optional<double> baseline_gmac = std::nullopt);

// ---------------------------------------------------------------------------
// Architecture descriptors

enum class ArchOp { conv, tucker2, bn, relu, maxpool, avgpool, add, flatten, dense };

struct ArchLayer {
    ArchOp op = ArchOp::relu;
    std::size_t out = 0;  // conv/tucker2 output channels, dense units
    std::size_t k = 1;    // kernel or pool window
    std::size_t stride = 1;
    std::size_t pad = 0;
    std::size_t r3 = 0;
    std::size_t r4 = 0;
    bool bias = true;
    std::optional<ActShape> in;  // explicit input shape (branches)
    std::size_t line = 0;
};

struct ArchDescriptor {
    std::string name;
    ActShape input;
    std::vector<ArchLayer> layers;
};

/**
 * Parses the line-oriented descriptor format:
 *
 *   name resnet18
 *   input 224 224 3
 *   conv 64 7 stride=2 pad=3 bias=0
 *   tucker2 64 3 16 16 pad=1
 *   bn | relu | add | flatten
 *   maxpool 3 stride=2 pad=1
 *   avgpool            (global)
 *   dense 1000
 *
 * Any layer accepts in=HxWxC to restart from an explicit shape, which
 * describes residual branches for costing. '#' starts a comment.
 * "same" as a pad value selects (k-1)/2.
 */
ArchDescriptor parse_arch(const std::string& text);
ArchDescriptor load_arch(const std::filesystem::path& path);

CostReport arch_cost(const ArchDescriptor& a, std::optional<double> baseline_gmac = std::nullopt);

/**
 * Builds a trainable graph from a sequential descriptor (conv, relu,
 * maxpool with stride == window and no padding, flatten, dense). Weights
 * are He-initialized from `seed`. Throws FormatError on cost-only layers.
 */
ModelGraph build_model(const ArchDescriptor& a, std::uint64_t seed);

void write_cost_table(std::ostream& out, const CostReport& r);
void write_cost_csv(std::ostream& out, const CostReport& r);

}  // namespace fp
