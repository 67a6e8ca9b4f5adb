// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/model.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace fp {

template <class... Ts>
struct Overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::string to_string(const ActShape& s) {
    std::ostringstream os;
    os << s.h << 'x' << s.w << 'x' << s.c;
    return os.str();
}

// ---------------------------------------------------------------------------
// LayerDims

LayerDims LayerDims::same(std::size_t h, std::size_t w, std::size_t s, std::size_t t, std::size_t d) {
    LayerDims dims{h, w, s, t, d, 1, d / 2};
    dims.validate();
    return dims;
}

void LayerDims::validate() const {
    if (h < 1 || w < 1 || s < 1 || t < 1 || d < 1 || stride < 1) {
        throw ShapeError("LayerDims: all extents must be >= 1");
    }
    if (d % 2 == 0) {
        throw ShapeError("LayerDims: kernel size must be odd, got " + std::to_string(d));
    }
    geom().out_h(h);
    geom().out_w(w);
}

std::size_t LayerDims::out_h() const {
    return geom().out_h(h);
}

std::size_t LayerDims::out_w() const {
    return geom().out_w(w);
}

ops::ConvGeom LayerDims::geom() const {
    return {d, d, stride, stride, padding, padding};
}

// ---------------------------------------------------------------------------
// Layer metadata

namespace {

ops::ConvGeom square_geom(std::size_t d, std::size_t stride, std::size_t padding) {
    return {d, d, stride, stride, padding, padding};
}

constexpr ops::ConvGeom kPointwise{};

void require(bool ok, const std::string& msg) {
    if (!ok) {
        throw ShapeError(msg);
    }
}

void require_vector(const Tensor& v, std::size_t n, const std::string& what) {
    require(v.order() == 1 && v.extent(0) == n,
            what + ": expected length " + std::to_string(n) + ", got " + shape_string(v.shape()));
}

}  // namespace

std::string layer_kind(const Layer& layer) {
    return std::visit(Overloaded{
                          [](const Conv2d&) { return std::string("conv"); },
                          [](const Tucker2Conv&) { return std::string("tucker2"); },
                          [](const SvdConv&) { return std::string("svd"); },
                          [](const CpdConv&) { return std::string("cpd"); },
                          [](const Relu&) { return std::string("relu"); },
                          [](const MaxPool&) { return std::string("maxpool"); },
                          [](const Flatten&) { return std::string("flatten"); },
                          [](const Dense&) { return std::string("dense"); },
                      },
                      layer);
}

bool is_conv_like(const Layer& layer) {
    return std::holds_alternative<Conv2d>(layer) || std::holds_alternative<Tucker2Conv>(layer) ||
           std::holds_alternative<SvdConv>(layer) || std::holds_alternative<CpdConv>(layer);
}

bool has_gates(const Layer& layer) {
    if (const auto* t = std::get_if<Tucker2Conv>(&layer)) {
        return t->gates.has_value();
    }
    if (const auto* s = std::get_if<SvdConv>(&layer)) {
        return s->gate.has_value();
    }
    if (const auto* c = std::get_if<CpdConv>(&layer)) {
        return c->gate.has_value();
    }
    return false;
}

ActShape layer_output_shape(const Layer& layer, const ActShape& in) {
    return std::visit(
        Overloaded{
            [&](const Conv2d& l) {
                require(l.kernel.order() == 4 && l.kernel.extent(0) == l.kernel.extent(1),
                        "conv: kernel must be (D, D, S, T)");
                require(l.kernel.extent(2) == in.c, "conv: kernel expects " + std::to_string(l.kernel.extent(2)) +
                                                        " input channels, got " + std::to_string(in.c));
                require_vector(l.bias, l.kernel.extent(3), "conv bias");
                const auto g = square_geom(l.kernel.extent(0), l.stride, l.padding);
                return ActShape{g.out_h(in.h), g.out_w(in.w), l.kernel.extent(3)};
            },
            [&](const Tucker2Conv& l) {
                require(l.u3.order() == 2 && l.core.order() == 4 && l.u4.order() == 2, "tucker2: bad factor orders");
                require(l.u3.extent(0) == in.c, "tucker2: u3 expects " + std::to_string(l.u3.extent(0)) +
                                                    " input channels, got " + std::to_string(in.c));
                require(l.core.extent(2) == l.rank3() && l.core.extent(3) == l.rank4(),
                        "tucker2: core " + shape_string(l.core.shape()) + " does not match ranks");
                require(l.core.extent(0) == l.core.extent(1), "tucker2: core must be square spatially");
                require_vector(l.bias, l.out_channels(), "tucker2 bias");
                if (l.gates) {
                    require_vector(l.gates->g3, l.rank3(), "tucker2 g3");
                    require_vector(l.gates->gc, l.rank4(), "tucker2 gc");
                    require_vector(l.gates->g4, l.out_channels(), "tucker2 g4");
                }
                const auto g = square_geom(l.kernel_size(), l.stride, l.padding);
                return ActShape{g.out_h(in.h), g.out_w(in.w), l.out_channels()};
            },
            [&](const SvdConv& l) {
                require(l.first.order() == 4 && l.second.order() == 2, "svd: bad factor orders");
                require(l.first.extent(2) == in.c, "svd: first factor expects " +
                                                       std::to_string(l.first.extent(2)) + " input channels");
                require(l.first.extent(3) == l.rank(), "svd: factor ranks disagree");
                require_vector(l.bias, l.second.extent(1), "svd bias");
                if (l.gate) {
                    require_vector(*l.gate, l.rank(), "svd gate");
                }
                const auto g = square_geom(l.first.extent(0), l.stride, l.padding);
                return ActShape{g.out_h(in.h), g.out_w(in.w), l.second.extent(1)};
            },
            [&](const CpdConv& l) {
                require(l.in.order() == 2 && l.vert.order() == 2 && l.horz.order() == 2 && l.out.order() == 2,
                        "cpd: bad factor orders");
                require(l.in.extent(0) == in.c, "cpd: input factor expects " + std::to_string(l.in.extent(0)) +
                                                    " input channels");
                const std::size_t r = l.rank();
                require(l.vert.extent(1) == r && l.horz.extent(1) == r && l.out.extent(1) == r,
                        "cpd: factor ranks disagree");
                require(l.vert.extent(0) == l.horz.extent(0), "cpd: spatial factors differ in size");
                require_vector(l.bias, l.out.extent(0), "cpd bias");
                if (l.gate) {
                    require_vector(*l.gate, r, "cpd gate");
                }
                const auto g = square_geom(l.vert.extent(0), l.stride, l.padding);
                return ActShape{g.out_h(in.h), g.out_w(in.w), l.out.extent(0)};
            },
            [&](const Relu&) { return in; },
            [&](const MaxPool& l) {
                require(l.size >= 1 && in.h >= l.size && in.w >= l.size, "maxpool: window larger than input");
                return ActShape{in.h / l.size, in.w / l.size, in.c};
            },
            [&](const Flatten&) { return ActShape{1, 1, in.size()}; },
            [&](const Dense& l) {
                require(in.h == 1 && in.w == 1, "dense: input must be flattened, got " + to_string(in));
                require(l.weight.order() == 2 && l.weight.extent(0) == in.c,
                        "dense: weight " + shape_string(l.weight.shape()) + " does not accept " +
                            std::to_string(in.c) + " features");
                require_vector(l.bias, l.weight.extent(1), "dense bias");
                return ActShape{1, 1, l.weight.extent(1)};
            },
        },
        layer);
}

namespace {

template <typename Ref, typename LayerT>
std::vector<Ref> params_of(LayerT& layer) {
    std::vector<Ref> out;
    std::visit(Overloaded{
                   [&](auto& l) {
                       using L = std::decay_t<decltype(l)>;
                       if constexpr (std::is_same_v<L, Conv2d>) {
                           out.push_back({"kernel", &l.kernel, ParamKind::weight});
                           out.push_back({"bias", &l.bias, ParamKind::bias});
                       } else if constexpr (std::is_same_v<L, Tucker2Conv>) {
                           out.push_back({"u3", &l.u3, ParamKind::weight});
                           out.push_back({"core", &l.core, ParamKind::weight});
                           out.push_back({"u4", &l.u4, ParamKind::weight});
                           out.push_back({"bias", &l.bias, ParamKind::bias});
                           if (l.gates) {
                               out.push_back({"g3", &l.gates->g3, ParamKind::gate});
                               out.push_back({"gc", &l.gates->gc, ParamKind::gate});
                               out.push_back({"g4", &l.gates->g4, ParamKind::gate});
                           }
                       } else if constexpr (std::is_same_v<L, SvdConv>) {
                           out.push_back({"first", &l.first, ParamKind::weight});
                           out.push_back({"second", &l.second, ParamKind::weight});
                           out.push_back({"bias", &l.bias, ParamKind::bias});
                           if (l.gate) {
                               out.push_back({"gate", &*l.gate, ParamKind::gate});
                           }
                       } else if constexpr (std::is_same_v<L, CpdConv>) {
                           out.push_back({"in", &l.in, ParamKind::weight});
                           out.push_back({"vert", &l.vert, ParamKind::weight});
                           out.push_back({"horz", &l.horz, ParamKind::weight});
                           out.push_back({"out", &l.out, ParamKind::weight});
                           out.push_back({"bias", &l.bias, ParamKind::bias});
                           if (l.gate) {
                               out.push_back({"gate", &*l.gate, ParamKind::gate});
                           }
                       } else if constexpr (std::is_same_v<L, Dense>) {
                           out.push_back({"weight", &l.weight, ParamKind::weight});
                           out.push_back({"bias", &l.bias, ParamKind::bias});
                       }
                   },
               },
               layer);
    return out;
}

}  // namespace

std::vector<ParamRef> layer_params(Layer& layer) {
    return params_of<ParamRef>(layer);
}

std::vector<ConstParamRef> layer_params(const Layer& layer) {
    return params_of<ConstParamRef>(layer);
}

// ---------------------------------------------------------------------------
// ModelGraph

std::vector<ActShape> ModelGraph::shapes() const {
    std::vector<ActShape> out;
    out.reserve(layers_.size() + 1);
    out.push_back(input_);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        try {
            out.push_back(layer_output_shape(layers_[i], out.back()));
        } catch (const ShapeError& e) {
            throw ShapeError("layer " + std::to_string(i) + " (" + layer_kind(layers_[i]) + "): " + e.what());
        }
    }
    return out;
}

void ModelGraph::validate() const {
    if (layers_.empty() || !std::holds_alternative<Dense>(layers_.back())) {
        throw ShapeError("model must end in a dense classification head");
    }
    shapes();
}

std::size_t ModelGraph::num_classes() const {
    return shapes().back().c;
}

std::vector<ParamRef> ModelGraph::params() {
    std::vector<ParamRef> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        for (auto p : layer_params(layers_[i])) {
            p.name = "L" + std::to_string(i) + "." + p.name;
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::vector<ConstParamRef> ModelGraph::params() const {
    std::vector<ConstParamRef> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        for (auto p : layer_params(layers_[i])) {
            p.name = "L" + std::to_string(i) + "." + p.name;
            out.push_back(std::move(p));
        }
    }
    return out;
}

std::size_t ModelGraph::gate_count() const {
    std::size_t n = 0;
    for (const auto& p : params()) {
        if (p.kind == ParamKind::gate) {
            n += p.value->size();
        }
    }
    return n;
}

bool operator==(const ModelGraph& a, const ModelGraph& b) {
    return a.input_ == b.input_ && a.layers_ == b.layers_;
}

Gradients Gradients::zeros_like(const ModelGraph& g) {
    Gradients grads;
    grads.per_layer.reserve(g.layers().size());
    for (const auto& layer : g.layers()) {
        std::vector<Tensor> slots;
        for (const auto& p : layer_params(layer)) {
            slots.emplace_back(p.value->shape());
        }
        grads.per_layer.push_back(std::move(slots));
    }
    return grads;
}

void Gradients::zero() {
    for (auto& layer : per_layer) {
        for (auto& t : layer) {
            t.fill(0.0);
        }
    }
}

void Gradients::scale(double factor) {
    for (auto& layer : per_layer) {
        for (auto& t : layer) {
            for (auto& v : t.data()) {
                v *= factor;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward

namespace {

void add_into(Tensor& dst, const Tensor& src) {
    for (std::size_t i = 0; i < dst.size(); ++i) {
        dst[i] += src[i];
    }
}

Tensor scaled(Tensor x, const Tensor& gate) {
    ops::scale_channels(x, gate.data());
    return x;
}

Tensor u4_kernel(const Tucker2Conv& l) {
    return ops::as_pointwise_kernel(ops::transpose2d(l.u4));
}

ops::ConvGeom vertical_geom(const CpdConv& l) {
    return {l.vert.extent(0), 1, l.stride, 1, l.padding, 0};
}

ops::ConvGeom horizontal_geom(const CpdConv& l) {
    return {1, l.horz.extent(0), 1, l.stride, 0, l.padding};
}

}  // namespace

Tensor layer_forward(const Layer& layer, const Tensor& x, LayerCache* cache) {
    return std::visit(
        Overloaded{
            [&](const Conv2d& l) {
                Tensor y = ops::conv2d(x, l.kernel, square_geom(l.kernel.extent(0), l.stride, l.padding));
                ops::add_bias(y, l.bias.data());
                return y;
            },
            [&](const Tucker2Conv& l) {
                Tensor a = ops::conv2d(x, ops::as_pointwise_kernel(l.u3), kPointwise);
                Tensor z = l.gates ? scaled(a, l.gates->g3) : a;
                Tensor b = ops::conv2d(z, l.core, square_geom(l.kernel_size(), l.stride, l.padding));
                Tensor zp = l.gates ? scaled(b, l.gates->gc) : b;
                Tensor c = ops::conv2d(zp, u4_kernel(l), kPointwise);
                Tensor y = l.gates ? scaled(c, l.gates->g4) : c;
                ops::add_bias(y, l.bias.data());
                if (cache) {
                    cache->saved = {std::move(a), std::move(z), std::move(b), std::move(zp), std::move(c)};
                }
                return y;
            },
            [&](const SvdConv& l) {
                Tensor z = ops::conv2d(x, l.first, square_geom(l.first.extent(0), l.stride, l.padding));
                Tensor zg = l.gate ? scaled(z, *l.gate) : z;
                Tensor y = ops::conv2d(zg, ops::as_pointwise_kernel(l.second), kPointwise);
                ops::add_bias(y, l.bias.data());
                if (cache) {
                    cache->saved = {std::move(z), std::move(zg)};
                }
                return y;
            },
            [&](const CpdConv& l) {
                const std::size_t r = l.rank();
                const std::size_t d = l.vert.extent(0);
                Tensor z1 = ops::conv2d(x, ops::as_pointwise_kernel(l.in), kPointwise);
                Tensor z2 = ops::depthwise2d(z1, l.vert.reshaped({d, 1, r}), vertical_geom(l));
                Tensor z3 = ops::depthwise2d(z2, l.horz.reshaped({1, d, r}), horizontal_geom(l));
                Tensor z4 = l.gate ? scaled(z3, *l.gate) : z3;
                Tensor y = ops::conv2d(z4, ops::as_pointwise_kernel(ops::transpose2d(l.out)), kPointwise);
                ops::add_bias(y, l.bias.data());
                if (cache) {
                    cache->saved = {std::move(z1), std::move(z2), std::move(z3), std::move(z4)};
                }
                return y;
            },
            [&](const Relu&) {
                Tensor y = x;
                for (auto& v : y.data()) {
                    v = v > 0.0 ? v : 0.0;
                }
                return y;
            },
            [&](const MaxPool& l) {
                std::vector<std::size_t> argmax;
                Tensor y = ops::max_pool(x, l.size, argmax);
                if (cache) {
                    cache->indices = std::move(argmax);
                }
                return y;
            },
            [&](const Flatten&) { return x.reshaped({1, 1, x.size()}); },
            [&](const Dense& l) {
                const std::size_t in = l.weight.extent(0);
                const std::size_t out = l.weight.extent(1);
                if (x.size() != in) {
                    throw ShapeError("dense: input has " + std::to_string(x.size()) + " features, expected " +
                                     std::to_string(in));
                }
                Tensor y({1, 1, out}, l.bias.values());
                for (std::size_t i = 0; i < in; ++i) {
                    const double xv = x[i];
                    if (xv == 0.0) {
                        continue;
                    }
                    const double* wr = l.weight.ptr() + i * out;
                    for (std::size_t o = 0; o < out; ++o) {
                        y[o] += xv * wr[o];
                    }
                }
                return y;
            },
        },
        layer);
}

// ---------------------------------------------------------------------------
// Backward

Tensor layer_backward(const Layer& layer, const Tensor& x, const LayerCache& cache, const Tensor& dy,
                      std::span<Tensor> grads, bool need_dx) {
    return std::visit(
        Overloaded{
            [&](const Conv2d& l) {
                ops::bias_grad(dy, grads[1].data());
                Tensor dx(x.shape());
                ops::conv2d_backward(x, l.kernel, square_geom(l.kernel.extent(0), l.stride, l.padding), dy,
                                     need_dx ? &dx : nullptr, &grads[0]);
                return dx;
            },
            [&](const Tucker2Conv& l) {
                const auto& s = cache.saved;  // a, z, b, zp, c
                ops::bias_grad(dy, grads[3].data());
                Tensor dc = dy;
                if (l.gates) {
                    ops::scale_channels_grad(s[4], dy, grads[6].data());
                    ops::scale_channels(dc, l.gates->g4.data());
                }
                Tensor dzp(s[3].shape());
                Tensor du4k({1, 1, l.rank4(), l.out_channels()});
                ops::conv2d_backward(s[3], u4_kernel(l), kPointwise, dc, &dzp, &du4k);
                add_into(grads[2], ops::transpose2d(du4k.reshaped({l.rank4(), l.out_channels()})));

                Tensor db = std::move(dzp);
                if (l.gates) {
                    ops::scale_channels_grad(s[2], db, grads[5].data());
                    ops::scale_channels(db, l.gates->gc.data());
                }
                Tensor dz(s[1].shape());
                ops::conv2d_backward(s[1], l.core, square_geom(l.kernel_size(), l.stride, l.padding), db, &dz,
                                     &grads[1]);

                Tensor da = std::move(dz);
                if (l.gates) {
                    ops::scale_channels_grad(s[0], da, grads[4].data());
                    ops::scale_channels(da, l.gates->g3.data());
                }
                Tensor dx(x.shape());
                Tensor du3k({1, 1, l.in_channels(), l.rank3()});
                ops::conv2d_backward(x, ops::as_pointwise_kernel(l.u3), kPointwise, da, need_dx ? &dx : nullptr,
                                     &du3k);
                add_into(grads[0], du3k);
                return dx;
            },
            [&](const SvdConv& l) {
                const auto& s = cache.saved;  // z, zg
                ops::bias_grad(dy, grads[2].data());
                Tensor dzg(s[1].shape());
                Tensor dsk({1, 1, l.rank(), l.second.extent(1)});
                ops::conv2d_backward(s[1], ops::as_pointwise_kernel(l.second), kPointwise, dy, &dzg, &dsk);
                add_into(grads[1], dsk);
                if (l.gate) {
                    ops::scale_channels_grad(s[0], dzg, grads[3].data());
                    ops::scale_channels(dzg, l.gate->data());
                }
                Tensor dx(x.shape());
                ops::conv2d_backward(x, l.first, square_geom(l.first.extent(0), l.stride, l.padding), dzg,
                                     need_dx ? &dx : nullptr, &grads[0]);
                return dx;
            },
            [&](const CpdConv& l) {
                const auto& s = cache.saved;  // z1, z2, z3, z4
                const std::size_t r = l.rank();
                const std::size_t d = l.vert.extent(0);
                const std::size_t t = l.out.extent(0);
                ops::bias_grad(dy, grads[4].data());
                Tensor dz4(s[3].shape());
                Tensor dok({1, 1, r, t});
                ops::conv2d_backward(s[3], ops::as_pointwise_kernel(ops::transpose2d(l.out)), kPointwise, dy, &dz4,
                                     &dok);
                add_into(grads[3], ops::transpose2d(dok.reshaped({r, t})));
                if (l.gate) {
                    ops::scale_channels_grad(s[2], dz4, grads[5].data());
                    ops::scale_channels(dz4, l.gate->data());
                }
                Tensor dz2(s[1].shape());
                Tensor dhk({1, d, r});
                ops::depthwise2d_backward(s[1], l.horz.reshaped({1, d, r}), horizontal_geom(l), dz4, &dz2, &dhk);
                add_into(grads[2], dhk);
                Tensor dz1(s[0].shape());
                Tensor dvk({d, 1, r});
                ops::depthwise2d_backward(s[0], l.vert.reshaped({d, 1, r}), vertical_geom(l), dz2, &dz1, &dvk);
                add_into(grads[1], dvk);
                Tensor dx(x.shape());
                Tensor dik({1, 1, l.in.extent(0), r});
                ops::conv2d_backward(x, ops::as_pointwise_kernel(l.in), kPointwise, dz1, need_dx ? &dx : nullptr,
                                     &dik);
                add_into(grads[0], dik);
                return dx;
            },
            [&](const Relu&) {
                Tensor dx = dy;
                for (std::size_t i = 0; i < dx.size(); ++i) {
                    if (!(x[i] > 0.0)) {
                        dx[i] = 0.0;
                    }
                }
                return dx;
            },
            [&](const MaxPool&) { return ops::max_pool_backward(x.shape(), cache.indices, dy); },
            [&](const Flatten&) { return dy.reshaped(x.shape()); },
            [&](const Dense& l) {
                const std::size_t in = l.weight.extent(0);
                const std::size_t out = l.weight.extent(1);
                ops::bias_grad(dy, grads[1].data());
                Tensor dx(x.shape());
                for (std::size_t i = 0; i < in; ++i) {
                    const double xv = x[i];
                    const double* wr = l.weight.ptr() + i * out;
                    double* gr = grads[0].ptr() + i * out;
                    double acc = 0.0;
                    for (std::size_t o = 0; o < out; ++o) {
                        gr[o] += xv * dy[o];
                        acc += wr[o] * dy[o];
                    }
                    dx[i] = acc;
                }
                return dx;
            },
        },
        layer);
}

Tensor forward(const ModelGraph& g, const Tensor& x, Tape* tape) {
    if (x.shape() != g.input_shape().shape()) {
        throw ShapeError("forward: input " + shape_string(x.shape()) + " does not match model input " +
                         to_string(g.input_shape()));
    }
    const auto& layers = g.layers();
    if (tape) {
        tape->activations.clear();
        tape->caches.assign(layers.size(), LayerCache{});
        tape->activations.reserve(layers.size() + 1);
        tape->activations.push_back(x);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            tape->activations.push_back(layer_forward(layers[i], tape->activations.back(), &tape->caches[i]));
        }
        return tape->activations.back();
    }
    Tensor cur = x;
    for (const auto& layer : layers) {
        cur = layer_forward(layer, cur, nullptr);
    }
    return cur;
}

void backward(const ModelGraph& g, const Tape& tape, const Tensor& dlogits, Gradients& grads) {
    const auto& layers = g.layers();
    if (tape.activations.size() != layers.size() + 1 || grads.per_layer.size() != layers.size()) {
        throw ShapeError("backward: tape or gradient registry does not match the model");
    }
    Tensor d = dlogits;
    for (std::size_t i = layers.size(); i-- > 0;) {
        d = layer_backward(layers[i], tape.activations[i], tape.caches[i], d, grads.per_layer[i], i > 0);
    }
}

LossResult cross_entropy(std::span<const double> logits, std::size_t label) {
    if (label >= logits.size()) {
        throw RangeError("cross_entropy: label " + std::to_string(label) + " out of range");
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) {
        sum += std::exp(v - m);
    }
    const double lse = m + std::log(sum);
    LossResult r;
    r.loss = lse - logits[label];
    r.dlogits.resize(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        r.dlogits[i] = std::exp(logits[i] - lse);
    }
    r.dlogits[label] -= 1.0;
    if (!std::isfinite(r.loss)) {
        throw NumericError("cross_entropy: non-finite loss");
    }
    return r;
}

}  // namespace fp
