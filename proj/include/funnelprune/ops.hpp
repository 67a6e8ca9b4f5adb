// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "funnelprune/tensor.hpp"

// Single-example kernels over channel-last feature maps (H, W, C).

namespace fp::ops {

struct ConvGeom {
    std::size_t kh = 1;
    std::size_t kw = 1;
    std::size_t sh = 1;
    std::size_t sw = 1;
    std::size_t ph = 0;
    std::size_t pw = 0;

    std::size_t out_h(std::size_t h) const;
    std::size_t out_w(std::size_t w) const;
};

/// y[oh,ow,t] = Σ_{i,j,s} k[i,j,s,t] · x[oh·sh + i − ph, ow·sw + j − pw, s], zero outside.
Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeom& g);

/// Accumulates into dk and dx; either may be null.
void conv2d_backward(const Tensor& x, const Tensor& k, const ConvGeom& g, const Tensor& dy, Tensor* dx, Tensor* dk);

/// Per-channel spatial filter: k has shape (kh, kw, C).
Tensor depthwise2d(const Tensor& x, const Tensor& k, const ConvGeom& g);
void depthwise2d_backward(const Tensor& x, const Tensor& k, const ConvGeom& g, const Tensor& dy, Tensor* dx,
                          Tensor* dk);

/// Multiplies the last axis by g in place.
void scale_channels(Tensor& x, std::span<const double> g);
/// dg[c] += Σ x[..., c] · dy[..., c].
void scale_channels_grad(const Tensor& x, const Tensor& dy, std::span<double> dg);

void add_bias(Tensor& y, std::span<const double> bias);
void bias_grad(const Tensor& dy, std::span<double> db);

Tensor max_pool(const Tensor& x, std::size_t size, std::vector<std::size_t>& argmax);
Tensor max_pool_backward(const Shape& x_shape, const std::vector<std::size_t>& argmax, const Tensor& dy);

/// (R, C) matrix transposed to (C, R), optionally viewed as a 1x1 conv kernel.
Tensor transpose2d(const Tensor& m);
Tensor as_pointwise_kernel(const Tensor& m);

}  // namespace fp::ops
