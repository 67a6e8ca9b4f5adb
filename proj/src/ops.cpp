// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/ops.hpp"

#include <limits>
#include <string>

namespace fp::ops {

namespace {

// Index of the input row/col hit by output position `o` and tap `k`, or
// npos when it falls in the zero padding.
constexpr std::size_t kOutside = std::numeric_limits<std::size_t>::max();

inline std::size_t tap(std::size_t o, std::size_t stride, std::size_t k, std::size_t pad, std::size_t extent) {
    const std::size_t pos = o * stride + k;
    if (pos < pad || pos - pad >= extent) {
        return kOutside;
    }
    return pos - pad;
}

void check_hwc(const Tensor& x, const char* what) {
    if (x.order() != 3) {
        throw ShapeError(std::string(what) + ": expected (H, W, C) input, got " + shape_string(x.shape()));
    }
}

}  // namespace

std::size_t ConvGeom::out_h(std::size_t h) const {
    if (h + 2 * ph < kh || sh == 0) {
        throw ShapeError("conv: kernel height exceeds padded input");
    }
    return (h + 2 * ph - kh) / sh + 1;
}

std::size_t ConvGeom::out_w(std::size_t w) const {
    if (w + 2 * pw < kw || sw == 0) {
        throw ShapeError("conv: kernel width exceeds padded input");
    }
    return (w + 2 * pw - kw) / sw + 1;
}

Tensor conv2d(const Tensor& x, const Tensor& k, const ConvGeom& g) {
    check_hwc(x, "conv2d");
    if (k.order() != 4 || k.extent(0) != g.kh || k.extent(1) != g.kw || k.extent(2) != x.extent(2)) {
        throw ShapeError("conv2d: kernel " + shape_string(k.shape()) + " incompatible with input " +
                         shape_string(x.shape()));
    }
    const std::size_t h = x.extent(0);
    const std::size_t w = x.extent(1);
    const std::size_t s = x.extent(2);
    const std::size_t t = k.extent(3);
    const std::size_t oh_n = g.out_h(h);
    const std::size_t ow_n = g.out_w(w);
    Tensor y({oh_n, ow_n, t});
    const double* xp = x.ptr();
    const double* kp = k.ptr();
    double* yp = y.ptr();
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
            double* yrow = yp + (oh * ow_n + ow) * t;
            for (std::size_t i = 0; i < g.kh; ++i) {
                const std::size_t ih = tap(oh, g.sh, i, g.ph, h);
                if (ih == kOutside) {
                    continue;
                }
                for (std::size_t j = 0; j < g.kw; ++j) {
                    const std::size_t iw = tap(ow, g.sw, j, g.pw, w);
                    if (iw == kOutside) {
                        continue;
                    }
                    const double* xin = xp + (ih * w + iw) * s;
                    const double* ktap = kp + (i * g.kw + j) * s * t;
                    for (std::size_t c = 0; c < s; ++c) {
                        const double xv = xin[c];
                        if (xv == 0.0) {
                            continue;
                        }
                        const double* kr = ktap + c * t;
                        for (std::size_t o = 0; o < t; ++o) {
                            yrow[o] += xv * kr[o];
                        }
                    }
                }
            }
        }
    }
    return y;
}

void conv2d_backward(const Tensor& x, const Tensor& k, const ConvGeom& g, const Tensor& dy, Tensor* dx, Tensor* dk) {
    const std::size_t h = x.extent(0);
    const std::size_t w = x.extent(1);
    const std::size_t s = x.extent(2);
    const std::size_t t = k.extent(3);
    const std::size_t oh_n = dy.extent(0);
    const std::size_t ow_n = dy.extent(1);
    if (dx && dx->shape() != x.shape()) {
        throw ShapeError("conv2d_backward: dx shape mismatch");
    }
    if (dk && dk->shape() != k.shape()) {
        throw ShapeError("conv2d_backward: dk shape mismatch");
    }
    const double* xp = x.ptr();
    const double* kp = k.ptr();
    const double* dyp = dy.ptr();
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const double* dyrow = dyp + (oh * ow_n + ow) * t;
            for (std::size_t i = 0; i < g.kh; ++i) {
                const std::size_t ih = tap(oh, g.sh, i, g.ph, h);
                if (ih == kOutside) {
                    continue;
                }
                for (std::size_t j = 0; j < g.kw; ++j) {
                    const std::size_t iw = tap(ow, g.sw, j, g.pw, w);
                    if (iw == kOutside) {
                        continue;
                    }
                    const std::size_t tap_off = (i * g.kw + j) * s * t;
                    const std::size_t in_off = (ih * w + iw) * s;
                    if (dk) {
                        double* dkp = dk->ptr() + tap_off;
                        for (std::size_t c = 0; c < s; ++c) {
                            const double xv = xp[in_off + c];
                            if (xv == 0.0) {
                                continue;
                            }
                            double* dkr = dkp + c * t;
                            for (std::size_t o = 0; o < t; ++o) {
                                dkr[o] += xv * dyrow[o];
                            }
                        }
                    }
                    if (dx) {
                        double* dxin = dx->ptr() + in_off;
                        const double* ktap = kp + tap_off;
                        for (std::size_t c = 0; c < s; ++c) {
                            const double* kr = ktap + c * t;
                            double acc = 0.0;
                            for (std::size_t o = 0; o < t; ++o) {
                                acc += kr[o] * dyrow[o];
                            }
                            dxin[c] += acc;
                        }
                    }
                }
            }
        }
    }
}

Tensor depthwise2d(const Tensor& x, const Tensor& k, const ConvGeom& g) {
    check_hwc(x, "depthwise2d");
    if (k.order() != 3 || k.extent(0) != g.kh || k.extent(1) != g.kw || k.extent(2) != x.extent(2)) {
        throw ShapeError("depthwise2d: kernel " + shape_string(k.shape()) + " incompatible with input " +
                         shape_string(x.shape()));
    }
    const std::size_t h = x.extent(0);
    const std::size_t w = x.extent(1);
    const std::size_t c = x.extent(2);
    const std::size_t oh_n = g.out_h(h);
    const std::size_t ow_n = g.out_w(w);
    Tensor y({oh_n, ow_n, c});
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
            double* yrow = y.ptr() + (oh * ow_n + ow) * c;
            for (std::size_t i = 0; i < g.kh; ++i) {
                const std::size_t ih = tap(oh, g.sh, i, g.ph, h);
                if (ih == kOutside) {
                    continue;
                }
                for (std::size_t j = 0; j < g.kw; ++j) {
                    const std::size_t iw = tap(ow, g.sw, j, g.pw, w);
                    if (iw == kOutside) {
                        continue;
                    }
                    const double* xin = x.ptr() + (ih * w + iw) * c;
                    const double* kr = k.ptr() + (i * g.kw + j) * c;
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        yrow[ch] += xin[ch] * kr[ch];
                    }
                }
            }
        }
    }
    return y;
}

void depthwise2d_backward(const Tensor& x, const Tensor& k, const ConvGeom& g, const Tensor& dy, Tensor* dx,
                          Tensor* dk) {
    const std::size_t h = x.extent(0);
    const std::size_t w = x.extent(1);
    const std::size_t c = x.extent(2);
    const std::size_t oh_n = dy.extent(0);
    const std::size_t ow_n = dy.extent(1);
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
            const double* dyrow = dy.ptr() + (oh * ow_n + ow) * c;
            for (std::size_t i = 0; i < g.kh; ++i) {
                const std::size_t ih = tap(oh, g.sh, i, g.ph, h);
                if (ih == kOutside) {
                    continue;
                }
                for (std::size_t j = 0; j < g.kw; ++j) {
                    const std::size_t iw = tap(ow, g.sw, j, g.pw, w);
                    if (iw == kOutside) {
                        continue;
                    }
                    const std::size_t in_off = (ih * w + iw) * c;
                    const std::size_t k_off = (i * g.kw + j) * c;
                    if (dk) {
                        double* dkr = dk->ptr() + k_off;
                        const double* xin = x.ptr() + in_off;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            dkr[ch] += xin[ch] * dyrow[ch];
                        }
                    }
                    if (dx) {
                        double* dxin = dx->ptr() + in_off;
                        const double* kr = k.ptr() + k_off;
                        for (std::size_t ch = 0; ch < c; ++ch) {
                            dxin[ch] += kr[ch] * dyrow[ch];
                        }
                    }
                }
            }
        }
    }
}

void scale_channels(Tensor& x, std::span<const double> g) {
    const std::size_t c = g.size();
    if (c == 0 || x.size() % c != 0 || x.shape().back() != c) {
        throw ShapeError("scale_channels: gate length does not match channel count");
    }
    double* p = x.ptr();
    for (std::size_t base = 0; base < x.size(); base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            p[base + ch] *= g[ch];
        }
    }
}

void scale_channels_grad(const Tensor& x, const Tensor& dy, std::span<double> dg) {
    const std::size_t c = dg.size();
    for (std::size_t base = 0; base < x.size(); base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            dg[ch] += x[base + ch] * dy[base + ch];
        }
    }
}

void add_bias(Tensor& y, std::span<const double> bias) {
    const std::size_t c = bias.size();
    if (c == 0 || y.shape().back() != c) {
        throw ShapeError("add_bias: bias length does not match channel count");
    }
    double* p = y.ptr();
    for (std::size_t base = 0; base < y.size(); base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            p[base + ch] += bias[ch];
        }
    }
}

void bias_grad(const Tensor& dy, std::span<double> db) {
    const std::size_t c = db.size();
    for (std::size_t base = 0; base < dy.size(); base += c) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            db[ch] += dy[base + ch];
        }
    }
}

Tensor max_pool(const Tensor& x, std::size_t size, std::vector<std::size_t>& argmax) {
    check_hwc(x, "max_pool");
    const std::size_t h = x.extent(0);
    const std::size_t w = x.extent(1);
    const std::size_t c = x.extent(2);
    if (size == 0 || h < size || w < size) {
        throw ShapeError("max_pool: window larger than input " + shape_string(x.shape()));
    }
    const std::size_t oh_n = h / size;
    const std::size_t ow_n = w / size;
    Tensor y({oh_n, ow_n, c});
    argmax.assign(y.size(), 0);
    for (std::size_t oh = 0; oh < oh_n; ++oh) {
        for (std::size_t ow = 0; ow < ow_n; ++ow) {
            for (std::size_t ch = 0; ch < c; ++ch) {
                std::size_t best = ((oh * size) * w + ow * size) * c + ch;
                for (std::size_t i = 0; i < size; ++i) {
                    for (std::size_t j = 0; j < size; ++j) {
                        const std::size_t idx = ((oh * size + i) * w + (ow * size + j)) * c + ch;
                        if (x[idx] > x[best]) {
                            best = idx;
                        }
                    }
                }
                const std::size_t out = (oh * ow_n + ow) * c + ch;
                y[out] = x[best];
                argmax[out] = best;
            }
        }
    }
    return y;
}

Tensor max_pool_backward(const Shape& x_shape, const std::vector<std::size_t>& argmax, const Tensor& dy) {
    Tensor dx(x_shape);
    for (std::size_t i = 0; i < dy.size(); ++i) {
        dx[argmax[i]] += dy[i];
    }
    return dx;
}

Tensor transpose2d(const Tensor& m) {
    if (m.order() != 2) {
        throw ShapeError("transpose2d: expected a matrix, got " + shape_string(m.shape()));
    }
    const std::size_t r = m.extent(0);
    const std::size_t c = m.extent(1);
    Tensor out({c, r});
    for (std::size_t i = 0; i < r; ++i) {
        for (std::size_t j = 0; j < c; ++j) {
            out[j * r + i] = m[i * c + j];
        }
    }
    return out;
}

Tensor as_pointwise_kernel(const Tensor& m) {
    return m.reshaped({1, 1, m.extent(0), m.extent(1)});
}

}  // namespace fp::ops
