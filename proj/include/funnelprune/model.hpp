// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "funnelprune/ops.hpp"
#include "funnelprune/tensor.hpp"

namespace fp {

/// Feature-map shape (H, W, C). Dense activations use (1, 1, features).
struct ActShape {
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t c = 1;

    std::size_t size() const { return h * w * c; }
    Shape shape() const { return {h, w, c}; }
    friend bool operator==(const ActShape&, const ActShape&) = default;
};

std::string to_string(const ActShape& s);

/**
 * Geometry of one convolution: input map H x W with S channels, T output
 * channels, a D x D kernel (D odd), stride and zero padding.
 */
struct LayerDims {
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t s = 1;
    std::size_t t = 1;
    std::size_t d = 1;
    std::size_t stride = 1;
    std::size_t padding = 0;

    /// "same" padding for stride 1.
    static LayerDims same(std::size_t h, std::size_t w, std::size_t s, std::size_t t, std::size_t d);

    void validate() const;
    std::size_t out_h() const;
    std::size_t out_w() const;
    ops::ConvGeom geom() const;
};

/// Gates of a Tucker-2 layer: g3 over R3, gc over R4, g4 over T.
struct GateSet {
    Tensor g3;
    Tensor gc;
    Tensor g4;

    friend bool operator==(const GateSet&, const GateSet&) = default;
};

// ---------------------------------------------------------------------------
// Layers

struct Conv2d {
    Tensor kernel;  // (D, D, S, T)
    Tensor bias;    // (T)
    std::size_t stride = 1;
    std::size_t padding = 0;

    friend bool operator==(const Conv2d&, const Conv2d&) = default;
};

/**
 * Tucker-2 factorized convolution: a 1x1 projection S -> R3 (u3), a D x D
 * core convolution R3 -> R4, and a 1x1 expansion R4 -> T (u4ᵀ), each stage
 * optionally scaled by its gate vector. The bias is added after the last
 * stage and is never gated.
 */
struct Tucker2Conv {
    Tensor u3;    // (S, R3)
    Tensor core;  // (D, D, R3, R4)
    Tensor u4;    // (T, R4)
    Tensor bias;  // (T)
    std::optional<GateSet> gates;
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t in_channels() const { return u3.extent(0); }
    std::size_t rank3() const { return u3.extent(1); }
    std::size_t rank4() const { return u4.extent(1); }
    std::size_t out_channels() const { return u4.extent(0); }
    std::size_t kernel_size() const { return core.extent(0); }

    friend bool operator==(const Tucker2Conv&, const Tucker2Conv&) = default;
};

/// Two-matrix factorization: D x D conv S -> R, gate over R, 1x1 conv R -> T.
struct SvdConv {
    Tensor first;   // (D, D, S, R)
    Tensor second;  // (R, T)
    Tensor bias;    // (T)
    std::optional<Tensor> gate;  // (R)
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t rank() const { return second.extent(0); }

    friend bool operator==(const SvdConv&, const SvdConv&) = default;
};

/// CP factorization: 1x1 S -> R, D x 1 and 1 x D depthwise, gate, 1x1 R -> T.
struct CpdConv {
    Tensor in;     // (S, R)
    Tensor vert;   // (D, R)
    Tensor horz;   // (D, R)
    Tensor out;    // (T, R)
    Tensor bias;   // (T)
    std::optional<Tensor> gate;  // (R)
    std::size_t stride = 1;
    std::size_t padding = 0;

    std::size_t rank() const { return in.extent(1); }

    friend bool operator==(const CpdConv&, const CpdConv&) = default;
};

struct Relu {
    friend bool operator==(const Relu&, const Relu&) = default;
};

struct MaxPool {
    std::size_t size = 2;

    friend bool operator==(const MaxPool&, const MaxPool&) = default;
};

struct Flatten {
    friend bool operator==(const Flatten&, const Flatten&) = default;
};

struct Dense {
    Tensor weight;  // (in, out)
    Tensor bias;    // (out)

    friend bool operator==(const Dense&, const Dense&) = default;
};

using Layer = std::variant<Conv2d, Tucker2Conv, SvdConv, CpdConv, Relu, MaxPool, Flatten, Dense>;

std::string layer_kind(const Layer& layer);
/// Output shape for a given input shape; throws ShapeError on mismatch.
ActShape layer_output_shape(const Layer& layer, const ActShape& in);
bool is_conv_like(const Layer& layer);
bool has_gates(const Layer& layer);

enum class ParamKind : std::uint8_t { weight, bias, gate };

struct ParamRef {
    std::string name;
    Tensor* value = nullptr;
    ParamKind kind = ParamKind::weight;
};

struct ConstParamRef {
    std::string name;
    const Tensor* value = nullptr;
    ParamKind kind = ParamKind::weight;
};

/// Parameters of one layer in a fixed order.
std::vector<ParamRef> layer_params(Layer& layer);
std::vector<ConstParamRef> layer_params(const Layer& layer);

/**
 * Plain sequential CNN ending in a dense classification head. The softmax
 * cross-entropy loss is implied after the last layer.
 */
class ModelGraph {
public:
    ModelGraph() = default;
    explicit ModelGraph(ActShape input) : input_(input) {}

    const ActShape& input_shape() const noexcept { return input_; }
    std::vector<Layer>& layers() noexcept { return layers_; }
    const std::vector<Layer>& layers() const noexcept { return layers_; }
    void add(Layer layer) { layers_.push_back(std::move(layer)); }

    /// Per-layer input shapes plus the final output shape (size layers+1).
    std::vector<ActShape> shapes() const;
    /// Throws ShapeError unless shapes propagate and the graph ends in Dense.
    void validate() const;
    std::size_t num_classes() const;

    std::vector<ParamRef> params();
    std::vector<ConstParamRef> params() const;
    std::size_t gate_count() const;

    friend bool operator==(const ModelGraph& a, const ModelGraph& b);

private:
    ActShape input_;
    std::vector<Layer> layers_;
};

// ---------------------------------------------------------------------------
// Forward / backward

/// Gradients laid out like ModelGraph::params(): [layer][param].
struct Gradients {
    std::vector<std::vector<Tensor>> per_layer;

    static Gradients zeros_like(const ModelGraph& g);
    void zero();
    void scale(double factor);
};

struct LayerCache {
    std::vector<Tensor> saved;
    std::vector<std::size_t> indices;
};

struct Tape {
    std::vector<Tensor> activations;  // input of layer i; back() is the logits
    std::vector<LayerCache> caches;
};

Tensor layer_forward(const Layer& layer, const Tensor& x, LayerCache* cache);
/// Accumulates parameter gradients into `grads`; returns dL/dx when requested.
Tensor layer_backward(const Layer& layer, const Tensor& x, const LayerCache& cache, const Tensor& dy,
                      std::span<Tensor> grads, bool need_dx);

/// Logits for one example; fills the tape when given.
Tensor forward(const ModelGraph& g, const Tensor& x, Tape* tape = nullptr);
/// Accumulates dL/dθ given dL/dlogits for the example recorded in `tape`.
void backward(const ModelGraph& g, const Tape& tape, const Tensor& dlogits, Gradients& grads);

// ---------------------------------------------------------------------------
// Loss

struct LossResult {
    double loss = 0.0;
    std::vector<double> dlogits;
};

/// Softmax cross-entropy with log-sum-exp stabilization.
LossResult cross_entropy(std::span<const double> logits, std::size_t label);

}  // namespace fp
