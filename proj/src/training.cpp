// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "funnelprune/error.hpp"

namespace fp {

namespace {

// Slice r of t viewed as (rows, count) for columns, or (count, cols) for rows.
struct SliceLayout {
    std::size_t count = 0;   // number of units
    std::size_t length = 0;  // elements per unit
    std::size_t stride = 0;  // distance between consecutive elements of a unit
    std::size_t step = 0;    // distance between the first elements of units r and r+1
};

SliceLayout slice_layout(const Tensor& t, bool columns) {
    if (t.order() == 0 || t.size() == 0) {
        throw ShapeError("unit slice of an empty tensor");
    }
    if (columns) {
        const std::size_t r = t.extent(t.order() - 1);
        return {r, t.size() / r, r, 1};
    }
    const std::size_t r = t.extent(0);
    return {r, t.size() / r, 1, t.size() / r};
}

double slice_dot(const Tensor& a, const Tensor& b, const SliceLayout& s, std::size_t r) {
    double acc = 0.0;
    const double* pa = a.ptr() + r * s.step;
    const double* pb = b.ptr() + r * s.step;
    for (std::size_t i = 0; i < s.length; ++i) {
        acc += pa[i * s.stride] * pb[i * s.stride];
    }
    return acc;
}

}  // namespace

std::vector<UnitFamily> unit_families(const Layer& layer) {
    if (const auto* t = std::get_if<Tucker2Conv>(&layer); t && t->gates) {
        return {{0, 4, true}, {1, 5, true}, {2, 6, false}};
    }
    if (const auto* s = std::get_if<SvdConv>(&layer); s && s->gate) {
        return {{0, 3, true}, {1, 3, false}};
    }
    if (const auto* c = std::get_if<CpdConv>(&layer); c && c->gate) {
        return {{0, 5, true}, {1, 5, true}, {2, 5, true}, {3, 5, true}};
    }
    return {};
}

double unit_norm(const Tensor& t, bool columns, std::size_t r) {
    const SliceLayout s = slice_layout(t, columns);
    if (r >= s.count) {
        throw RangeError("unit index out of range");
    }
    return std::sqrt(slice_dot(t, t, s, r));
}

void scale_unit(Tensor& t, bool columns, std::size_t r, double factor) {
    const SliceLayout s = slice_layout(t, columns);
    if (r >= s.count) {
        throw RangeError("unit index out of range");
    }
    double* p = t.ptr() + r * s.step;
    for (std::size_t i = 0; i < s.length; ++i) {
        p[i * s.stride] *= factor;
    }
}

std::size_t renormalize_factors(Layer& layer) {
    std::size_t flagged = 0;
    auto params = layer_params(layer);
    for (const UnitFamily& f : unit_families(layer)) {
        Tensor& value = *params[f.value].value;
        Tensor& gate = *params[f.gate].value;
        for (std::size_t r = 0; r < gate.size(); ++r) {
            const double norm = unit_norm(value, f.columns, r);
            if (norm < kUnitNormEpsilon) {
                ++flagged;
                continue;
            }
            scale_unit(value, f.columns, r, 1.0 / norm);
            gate[r] *= norm;
        }
    }
    return flagged;
}

void project_direction_grads(const Layer& layer, std::span<Tensor> grads) {
    const auto params = layer_params(layer);
    for (const UnitFamily& f : unit_families(layer)) {
        const Tensor& value = *params[f.value].value;
        Tensor& grad = grads[f.value];
        const SliceLayout s = slice_layout(value, f.columns);
        for (std::size_t r = 0; r < s.count; ++r) {
            const double vv = slice_dot(value, value, s, r);
            if (vv < kUnitNormEpsilon * kUnitNormEpsilon) {
                continue;
            }
            const double coef = slice_dot(value, grad, s, r) / vv;
            const double* pv = value.ptr() + r * s.step;
            double* pg = grad.ptr() + r * s.step;
            for (std::size_t i = 0; i < s.length; ++i) {
                pg[i * s.stride] -= coef * pv[i * s.stride];
            }
        }
    }
}

std::vector<GateView> gate_views(const ModelGraph& g) {
    std::vector<GateView> out;
    for (std::size_t li = 0; li < g.layers().size(); ++li) {
        const auto params = layer_params(g.layers()[li]);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            if (params[pi].kind == ParamKind::gate) {
                out.push_back({li, pi, params[pi].value});
            }
        }
    }
    return out;
}

std::string to_string(GateUpdate u) { return u == GateUpdate::plain ? "plain" : "truncated"; }

GateUpdate parse_gate_update(const std::string& s) {
    if (s == "plain") {
        return GateUpdate::plain;
    }
    if (s == "truncated") {
        return GateUpdate::truncated;
    }
    throw FormatError("unknown gate update '" + s + "' (expected plain or truncated)");
}

namespace {

void truncated_gate_step(Tensor& gate, const Tensor& d, double lr, const GatePenalty& penalty) {
    std::vector<double> v(gate.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = gate[i] - lr * d[i];
    }
    std::vector<double> r(v.size(), 0.0);
    penalty.grad(v, r);
    for (std::size_t i = 0; i < v.size(); ++i) {
        const double w = v[i] - lr * r[i];
        gate[i] = (v[i] == 0.0 || std::signbit(w) != std::signbit(v[i])) ? 0.0 : w;
    }
}

}  // namespace

std::size_t sgd_step(ModelGraph& g, Gradients& grads, const SgdOptions& opt, const GatePenalty* truncated) {
    std::size_t flagged = 0;
    for (std::size_t li = 0; li < g.layers().size(); ++li) {
        Layer& layer = g.layers()[li];
        if (opt.project) {
            project_direction_grads(layer, grads.per_layer[li]);
        }
        auto params = layer_params(layer);
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor& p = *params[pi].value;
            const Tensor& d = grads.per_layer[li][pi];
            if (truncated && params[pi].kind == ParamKind::gate) {
                truncated_gate_step(p, d, opt.lr, *truncated);
                continue;
            }
            for (std::size_t i = 0; i < p.size(); ++i) {
                p[i] -= opt.lr * d[i];
            }
        }
        flagged += renormalize_factors(layer);
    }
    return flagged;
}

BatchStats forward_backward(const ModelGraph& g, const Dataset& data, std::span<const std::size_t> indices,
                            Gradients& grads) {
    BatchStats stats;
    if (indices.empty()) {
        return stats;
    }
    const double inv = 1.0 / static_cast<double>(indices.size());
    Tape tape;
    for (const std::size_t idx : indices) {
        const Tensor x = data.example(idx);
        const Tensor logits = forward(g, x, &tape);
        const std::size_t label = data.labels[idx];
        LossResult lr = cross_entropy(logits.data(), label);
        stats.loss += lr.loss * inv;
        const auto best = std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin();
        stats.correct += static_cast<std::size_t>(best) == label ? 1 : 0;
        for (auto& v : lr.dlogits) {
            v *= inv;
        }
        backward(g, tape, Tensor(logits.shape(), std::move(lr.dlogits)), grads);
    }
    stats.count = indices.size();
    return stats;
}

Evaluation evaluate(const ModelGraph& g, const Dataset& data, bool keep_logits) {
    Evaluation ev;
    ev.predictions.reserve(data.size());
    std::size_t correct = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
        Tensor logits = forward(g, data.example(i));
        ev.loss += cross_entropy(logits.data(), data.labels[i]).loss;
        const auto best = std::max_element(logits.data().begin(), logits.data().end()) - logits.data().begin();
        ev.predictions.push_back(static_cast<std::uint32_t>(best));
        correct += ev.predictions.back() == data.labels[i] ? 1 : 0;
        if (keep_logits) {
            ev.logits.push_back(std::move(logits));
        }
    }
    if (data.size() > 0) {
        ev.loss /= static_cast<double>(data.size());
        ev.accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    }
    return ev;
}

namespace {

void require_finite_params(const ModelGraph& g) {
    for (const auto& p : g.params()) {
        if (!p.value->all_finite()) {
            throw NumericError("parameter " + p.name + " became non-finite");
        }
    }
}

}  // namespace

EpochStats train_epoch(ModelGraph& g, const Dataset& data, const TrainOptions& opt, std::size_t epoch,
                       const GatePenalty& penalty) {
    if (opt.batch_size == 0) {
        throw RangeError("batch size must be positive");
    }
    EpochStats stats;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::seed_seq seq{static_cast<std::uint32_t>(opt.seed), static_cast<std::uint32_t>(opt.seed >> 32),
                      static_cast<std::uint32_t>(epoch)};
    std::mt19937_64 rng(seq);
    std::shuffle(order.begin(), order.end(), rng);

    Gradients grads = Gradients::zeros_like(g);
    const SgdOptions sgd{opt.lr, opt.project};
    std::size_t batches = 0;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < order.size(); start += opt.batch_size) {
        const std::size_t end = std::min(order.size(), start + opt.batch_size);
        grads.zero();
        const BatchStats b =
            forward_backward(g, data, std::span<const std::size_t>(order.data() + start, end - start), grads);
        double reg = 0.0;
        if (penalty) {
            for (const GateView& v : gate_views(g)) {
                reg += penalty.value(v.gate->data());
                if (opt.gate_update == GateUpdate::plain) {
                    std::vector<double> r(v.gate->size(), 0.0);
                    penalty.grad(v.gate->data(), r);
                    Tensor& slot = grads.per_layer[v.layer][v.param];
                    for (std::size_t i = 0; i < r.size(); ++i) {
                        slot[i] += r[i];
                    }
                }
            }
        }
        if (!std::isfinite(b.loss) || !std::isfinite(reg)) {
            throw NumericError("training loss became non-finite at epoch " + std::to_string(epoch));
        }
        stats.class_loss += b.loss;
        stats.reg_penalty += reg;
        correct += b.correct;
        ++batches;
        const bool truncate = penalty && opt.gate_update == GateUpdate::truncated;
        stats.flagged_units += sgd_step(g, grads, sgd, truncate ? &penalty : nullptr);
    }
    require_finite_params(g);
    if (batches > 0) {
        stats.class_loss /= static_cast<double>(batches);
        stats.reg_penalty /= static_cast<double>(batches);
        stats.train_accuracy = static_cast<double>(correct) / static_cast<double>(data.size());
    }
    return stats;
}

void init_weights(ModelGraph& g, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (Layer& layer : g.layers()) {
        if (auto* c = std::get_if<Conv2d>(&layer)) {
            const double fan_in = static_cast<double>(c->kernel.extent(0) * c->kernel.extent(1) * c->kernel.extent(2));
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : c->kernel.data()) {
                v = normal(rng);
            }
            c->bias.fill(0.0);
        } else if (auto* d = std::get_if<Dense>(&layer)) {
            const double fan_in = static_cast<double>(d->weight.extent(0));
            std::normal_distribution<double> normal(0.0, std::sqrt(2.0 / fan_in));
            for (auto& v : d->weight.data()) {
                v = normal(rng);
            }
            d->bias.fill(0.0);
        }
    }
}

}  // namespace fp
