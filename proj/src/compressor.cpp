// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/compressor.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "funnelprune/cost_model.hpp"
#include "funnelprune/error.hpp"

namespace fp {

std::string to_string(Backend b) {
    switch (b) {
    case Backend::tucker2:
        return "tucker2";
    case Backend::cpd:
        return "cpd";
    case Backend::svd:
        return "svd";
    }
    return "?";
}

Backend parse_backend(const std::string& s) {
    if (s == "tucker2") {
        return Backend::tucker2;
    }
    if (s == "cpd") {
        return Backend::cpd;
    }
    if (s == "svd") {
        return Backend::svd;
    }
    throw FormatError("unknown decomposition backend '" + s + "'");
}

namespace {

// Copy of t keeping only `idx` along `axis`.
Tensor take(const Tensor& t, std::size_t axis, const std::vector<std::size_t>& idx) {
    Shape shape = t.shape();
    std::size_t outer = 1;
    for (std::size_t a = 0; a < axis; ++a) {
        outer *= shape[a];
    }
    std::size_t inner = 1;
    for (std::size_t a = axis + 1; a < shape.size(); ++a) {
        inner *= shape[a];
    }
    const std::size_t n = shape[axis];
    shape[axis] = idx.size();
    Tensor out(shape);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (idx[k] >= n) {
                throw RangeError("slice index out of range");
            }
            const double* src = t.ptr() + (o * n + idx[k]) * inner;
            std::copy(src, src + inner, out.ptr() + (o * idx.size() + k) * inner);
        }
    }
    return out;
}

Tensor vector_tensor(const Vector& v) {
    Tensor t({static_cast<std::size_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) {
        t[static_cast<std::size_t>(i)] = v(i);
    }
    return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Decomposition

bool decomposition_eligible(const Conv2d& conv) {
    return conv.kernel.extent(0) > 1 && conv.kernel.extent(2) >= 2 && conv.kernel.extent(3) >= 2;
}

void attach_gates(Layer& layer) {
    if (auto* t = std::get_if<Tucker2Conv>(&layer)) {
        t->gates = GateSet{Tensor::filled({t->rank3()}, 1.0), Tensor::filled({t->rank4()}, 1.0),
                           Tensor::filled({t->out_channels()}, 1.0)};
    } else if (auto* s = std::get_if<SvdConv>(&layer)) {
        s->gate = Tensor::filled({s->rank()}, 1.0);
    } else if (auto* c = std::get_if<CpdConv>(&layer)) {
        c->gate = Tensor::filled({c->rank()}, 1.0);
    } else {
        throw ShapeError("attach_gates: layer " + layer_kind(layer) + " is not factorized");
    }
    renormalize_factors(layer);
}

GateSet init_gates(Tucker2Conv& layer) {
    Layer tmp = std::move(layer);
    attach_gates(tmp);
    layer = std::move(std::get<Tucker2Conv>(tmp));
    return *layer.gates;
}

Layer decompose_conv(const Conv2d& conv, const DecomposeOptions& opt) {
    const Tensor& k = conv.kernel;
    const std::size_t d = k.extent(0);
    const std::size_t s = k.extent(2);
    const std::size_t t = k.extent(3);
    Layer out;
    switch (opt.backend) {
    case Backend::tucker2: {
        const Tucker2Factors f = tucker2_decompose(k, s, t);
        out = Tucker2Conv{to_tensor(f.u3), f.core, to_tensor(f.u4), conv.bias, std::nullopt, conv.stride,
                          conv.padding};
        break;
    }
    case Backend::svd: {
        const SvdResult r = svd(to_matrix(k.reshaped({d * k.extent(1) * s, t})));
        const std::size_t rank = static_cast<std::size_t>(r.s.size());
        SvdConv l;
        l.first = to_tensor(r.u).reshaped({d, k.extent(1), s, rank});
        l.second = to_tensor(r.v.transpose());
        l.bias = conv.bias;
        l.gate = vector_tensor(r.s);
        l.stride = conv.stride;
        l.padding = conv.padding;
        out = std::move(l);
        break;
    }
    case Backend::cpd: {
        const std::size_t rank = opt.cpd_rank == 0 ? std::max(s, t) : opt.cpd_rank;
        const CpdFactors f = cpd_als(k, rank, opt.cpd_iters, opt.cpd_tol, opt.seed);
        CpdConv l;
        l.vert = to_tensor(f.factors[0]);
        l.horz = to_tensor(f.factors[1]);
        l.in = to_tensor(f.factors[2]);
        l.out = to_tensor(f.factors[3]);
        l.bias = conv.bias;
        l.gate = vector_tensor(f.weights);
        l.stride = conv.stride;
        l.padding = conv.padding;
        out = std::move(l);
        break;
    }
    }
    for (const auto& p : layer_params(out)) {
        if (!p.value->all_finite()) {
            throw NumericError("decomposition produced non-finite " + p.name);
        }
    }
    if (std::holds_alternative<Tucker2Conv>(out)) {
        attach_gates(out);
    } else {
        renormalize_factors(out);
    }
    return out;
}

std::vector<DecomposeRecord> decompose_model(ModelGraph& g, const DecomposeOptions& opt) {
    std::vector<DecomposeRecord> records;
    for (std::size_t i = 0; i < g.layers().size(); ++i) {
        const auto* conv = std::get_if<Conv2d>(&g.layers()[i]);
        if (conv == nullptr) {
            continue;
        }
        if (!decomposition_eligible(*conv)) {
            records.push_back({i, "ineligible"});
            continue;
        }
        try {
            g.layers()[i] = decompose_conv(*conv, opt);
            records.push_back({i, "decomposed"});
        } catch (const Error& e) {
            records.push_back({i, std::string("failed: ") + e.what()});
        }
    }
    return records;
}

// ---------------------------------------------------------------------------
// Compression training

GatePenalty make_gate_penalty(const RegConfig& cfg, std::size_t epoch) {
    cfg.validate();
    GatePenalty p;
    p.value = [cfg, epoch](std::span<const double> gates) {
        return cfg.lambda == 0.0 ? 0.0 : cfg.lambda * reg_penalty(gates, cfg, epoch).value;
    };
    p.grad = [cfg, epoch](std::span<const double> gates, std::span<double> out) {
        if (cfg.lambda == 0.0) {
            std::fill(out.begin(), out.end(), 0.0);
            return;
        }
        const Penalty r = reg_penalty(gates, cfg, epoch);
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = cfg.lambda * r.grad[i];
        }
    };
    return p;
}

std::vector<GateSnapshot> snapshot_gates(const ModelGraph& g) {
    std::vector<GateSnapshot> out;
    for (const GateView& v : gate_views(g)) {
        const auto params = layer_params(g.layers()[v.layer]);
        out.push_back({v.layer, params[v.param].name,
                       std::vector<double>(v.gate->data().begin(), v.gate->data().end())});
    }
    return out;
}

std::vector<std::size_t> gate_histogram(const ModelGraph& g) {
    std::vector<std::size_t> bins(kHistogramBins, 0);
    for (const GateView& v : gate_views(g)) {
        for (const double x : v.gate->data()) {
            const double a = std::abs(x);
            std::size_t b = 0;
            for (double edge = 1e-5; b + 1 < kHistogramBins && a >= edge; edge *= 10.0) {
                ++b;
            }
            ++bins[b];
        }
    }
    return bins;
}

CompressTrace compress_train(ModelGraph& g, const Dataset& data, const RegConfig& cfg, std::size_t epochs,
                             const TrainOptions& opt, const EpochCallback& on_epoch) {
    cfg.validate();
    CompressTrace trace;
    trace.before = snapshot_gates(g);
    for (std::size_t e = 0; e < epochs; ++e) {
        ModelGraph last_good = g;
        EpochRecord rec;
        rec.epoch = e;
        rec.c = cfg.kind == RegKind::funnel ? schedule_c(cfg.schedule, e) : 0.0;
        try {
            rec.stats = train_epoch(g, data, opt, e, make_gate_penalty(cfg, e));
        } catch (const NumericError&) {
            g = std::move(last_good);
            trace.after = snapshot_gates(g);
            throw;
        }
        rec.histogram = gate_histogram(g);
        if (on_epoch) {
            on_epoch(rec, g);
        }
        trace.epochs.push_back(std::move(rec));
    }
    trace.after = snapshot_gates(g);
    return trace;
}

void write_gate_dump(std::ostream& out, const CompressTrace& trace) {
    fmt::print(out, "# {:>5} {:<6} {:>5} {:>16} {:>16}\n", "layer", "family", "rank", "before", "after");
    for (std::size_t i = 0; i < trace.before.size(); ++i) {
        std::vector<double> before = trace.before[i].values;
        std::vector<double> after = i < trace.after.size() ? trace.after[i].values : std::vector<double>{};
        std::sort(before.begin(), before.end(), std::greater<>());
        std::sort(after.begin(), after.end(), std::greater<>());
        for (std::size_t r = 0; r < std::max(before.size(), after.size()); ++r) {
            fmt::print(out, "  {:>5} {:<6} {:>5} {:>16} {:>16}\n", trace.before[i].layer, trace.before[i].family, r,
                       r < before.size() ? fmt::format("{:.8e}", before[r]) : "-",
                       r < after.size() ? fmt::format("{:.8e}", after[r]) : "-");
        }
    }
}

// ---------------------------------------------------------------------------
// Pruning

void PruneConfig::validate() const {
    if (!(threshold > 0.0) || !std::isfinite(threshold)) {
        throw RangeError("prune: threshold must be positive");
    }
    if (min_rank < 1) {
        throw RangeError("prune: min_rank must be at least 1");
    }
}

std::vector<std::size_t> surviving_indices(std::span<const double> gates, double threshold, std::size_t min_rank) {
    std::vector<std::size_t> keep;
    for (std::size_t i = 0; i < gates.size(); ++i) {
        if (std::abs(gates[i]) >= threshold) {
            keep.push_back(i);
        }
    }
    const std::size_t floor = std::min(min_rank, gates.size());
    if (keep.size() >= floor) {
        return keep;
    }
    std::vector<std::size_t> order(gates.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return std::abs(gates[a]) > std::abs(gates[b]); });
    order.resize(floor);
    std::sort(order.begin(), order.end());
    return order;
}

namespace {

bool prunable_family(const std::string& name, const PruneConfig& cfg) {
    return name != "g4" || cfg.prune_g4;
}

// Drops input channels of the first channel-consuming layer after `from`.
void propagate_channels(ModelGraph& g, std::size_t from, const std::vector<std::size_t>& keep,
                        const std::vector<ActShape>& shapes) {
    for (std::size_t j = from + 1; j < g.layers().size(); ++j) {
        Layer& l = g.layers()[j];
        if (std::holds_alternative<Relu>(l) || std::holds_alternative<MaxPool>(l)) {
            continue;
        }
        if (auto* c = std::get_if<Conv2d>(&l)) {
            c->kernel = take(c->kernel, 2, keep);
            return;
        }
        if (auto* t = std::get_if<Tucker2Conv>(&l)) {
            t->u3 = take(t->u3, 0, keep);
            return;
        }
        if (auto* s = std::get_if<SvdConv>(&l)) {
            s->first = take(s->first, 2, keep);
            return;
        }
        if (auto* p = std::get_if<CpdConv>(&l)) {
            p->in = take(p->in, 0, keep);
            return;
        }
        if (std::holds_alternative<Flatten>(l) && j + 1 < g.layers().size()) {
            if (auto* d = std::get_if<Dense>(&g.layers()[j + 1])) {
                const ActShape s = shapes[j];
                std::vector<std::size_t> rows;
                for (std::size_t p = 0; p < s.h * s.w; ++p) {
                    for (const auto ch : keep) {
                        rows.push_back(p * s.c + ch);
                    }
                }
                d->weight = take(d->weight, 0, rows);
                return;
            }
        }
        break;
    }
    throw ShapeError("prune: cannot propagate output-channel removal past layer " + std::to_string(from));
}

}  // namespace

PruneStats pruning_stats(const ModelGraph& g, const PruneConfig& cfg) {
    cfg.validate();
    PruneStats st;
    for (const auto& snap : snapshot_gates(g)) {
        if (!prunable_family(snap.family, cfg)) {
            continue;
        }
        st.gates += snap.values.size();
        for (const double v : snap.values) {
            st.below += std::abs(v) < cfg.threshold ? 1 : 0;
        }
    }
    return st;
}

PruneResult prune(ModelGraph& g, const PruneConfig& cfg) {
    PruneResult res;
    res.stats = pruning_stats(g, cfg);
    for (std::size_t li = 0; li < g.layers().size(); ++li) {
        Layer& layer = g.layers()[li];
        if (!has_gates(layer)) {
            continue;
        }
        LayerPrune lp;
        lp.layer = li;
        if (auto* t = std::get_if<Tucker2Conv>(&layer)) {
            const std::vector<ActShape> shapes = g.shapes();
            GateSet& gs = *t->gates;
            lp.keep3 = surviving_indices(gs.g3.data(), cfg.threshold, cfg.min_rank);
            lp.keep4 = surviving_indices(gs.gc.data(), cfg.threshold, cfg.min_rank);
            res.stats.removed += (t->rank3() - lp.keep3.size()) + (t->rank4() - lp.keep4.size());
            t->u3 = take(t->u3, 1, lp.keep3);
            t->core = take(take(t->core, 2, lp.keep3), 3, lp.keep4);
            t->u4 = take(t->u4, 1, lp.keep4);
            gs.g3 = take(gs.g3, 0, lp.keep3);
            gs.gc = take(gs.gc, 0, lp.keep4);
            if (cfg.prune_g4) {
                lp.keep_out = surviving_indices(gs.g4.data(), cfg.threshold, cfg.min_rank);
                if (lp.keep_out.size() != t->out_channels()) {
                    res.stats.removed += t->out_channels() - lp.keep_out.size();
                    t->u4 = take(t->u4, 0, lp.keep_out);
                    t->bias = take(t->bias, 0, lp.keep_out);
                    gs.g4 = take(gs.g4, 0, lp.keep_out);
                    propagate_channels(g, li, lp.keep_out, shapes);
                }
            }
        } else if (auto* s = std::get_if<SvdConv>(&layer)) {
            lp.keep3 = surviving_indices(s->gate->data(), cfg.threshold, cfg.min_rank);
            res.stats.removed += s->rank() - lp.keep3.size();
            s->first = take(s->first, 3, lp.keep3);
            s->second = take(s->second, 0, lp.keep3);
            s->gate = take(*s->gate, 0, lp.keep3);
        } else if (auto* c = std::get_if<CpdConv>(&layer)) {
            lp.keep3 = surviving_indices(c->gate->data(), cfg.threshold, cfg.min_rank);
            res.stats.removed += c->rank() - lp.keep3.size();
            c->in = take(c->in, 1, lp.keep3);
            c->vert = take(c->vert, 1, lp.keep3);
            c->horz = take(c->horz, 1, lp.keep3);
            c->out = take(c->out, 1, lp.keep3);
            c->gate = take(*c->gate, 0, lp.keep3);
        }
        lp.keep4 = lp.keep4.empty() ? lp.keep3 : lp.keep4;
        res.layers.push_back(std::move(lp));
    }
    g.validate();
    return res;
}

// ---------------------------------------------------------------------------
// Fate and folding

std::string to_string(FateDecision d) {
    return d == FateDecision::kept_decomposed ? "kept_decomposed" : "reverted";
}

LayerFate decide_layer_fate(const Layer& layer, const ActShape& in) {
    const ActShape out = layer_output_shape(layer, in);
    LayerFate f;
    if (const auto* t = std::get_if<Tucker2Conv>(&layer)) {
        f.cost_original = conv_macs(out.h, out.w, t->kernel_size(), t->in_channels(), t->out_channels());
        f.cost_decomposed = tucker2_macs(out.h, out.w, t->kernel_size(), t->in_channels(), t->out_channels(),
                                         t->rank3(), t->rank4());
        f.r3 = t->rank3();
        f.r4 = t->rank4();
    } else if (const auto* s = std::get_if<SvdConv>(&layer)) {
        const std::size_t d = s->first.extent(0);
        f.cost_original = conv_macs(out.h, out.w, d, s->first.extent(2), s->second.extent(1));
        f.cost_decomposed = svd_macs(out.h, out.w, d, s->first.extent(2), s->second.extent(1), s->rank());
        f.r3 = f.r4 = s->rank();
    } else if (const auto* c = std::get_if<CpdConv>(&layer)) {
        const std::size_t d = c->vert.extent(0);
        f.cost_original = conv_macs(out.h, out.w, d, c->in.extent(0), c->out.extent(0));
        f.cost_decomposed = cpd_macs(out.h, out.w, d, c->in.extent(0), c->out.extent(0), c->rank());
        f.r3 = f.r4 = c->rank();
    } else {
        throw ShapeError("decide_layer_fate: layer " + layer_kind(layer) + " is not factorized");
    }
    f.decision = f.cost_decomposed < f.cost_original ? FateDecision::kept_decomposed : FateDecision::reverted;
    return f;
}

void fold_gates(Layer& layer) {
    if (!has_gates(layer)) {
        return;
    }
    auto params = layer_params(layer);
    std::vector<bool> folded(params.size(), false);
    for (const UnitFamily& f : unit_families(layer)) {
        if (folded[f.gate]) {
            continue;
        }
        const Tensor& gate = *params[f.gate].value;
        for (std::size_t r = 0; r < gate.size(); ++r) {
            scale_unit(*params[f.value].value, f.columns, r, gate[r]);
        }
        folded[f.gate] = true;
    }
    if (auto* t = std::get_if<Tucker2Conv>(&layer)) {
        t->gates.reset();
    } else if (auto* s = std::get_if<SvdConv>(&layer)) {
        s->gate.reset();
    } else if (auto* c = std::get_if<CpdConv>(&layer)) {
        c->gate.reset();
    }
}

Tensor reconstruct_kernel(const Layer& layer) {
    Layer folded = layer;
    fold_gates(folded);
    if (const auto* t = std::get_if<Tucker2Conv>(&folded)) {
        return tucker2_reconstruct(Tucker2Factors{t->core, to_matrix(t->u3), to_matrix(t->u4)});
    }
    if (const auto* s = std::get_if<SvdConv>(&folded)) {
        const std::size_t d = s->first.extent(0);
        const std::size_t in = s->first.extent(2);
        const Matrix first = to_matrix(s->first.reshaped({d * s->first.extent(1) * in, s->rank()}));
        return to_tensor(first * to_matrix(s->second)).reshaped({d, s->first.extent(1), in, s->second.extent(1)});
    }
    if (const auto* c = std::get_if<CpdConv>(&folded)) {
        CpdFactors f;
        f.rank = c->rank();
        f.factors = {to_matrix(c->vert), to_matrix(c->horz), to_matrix(c->in), to_matrix(c->out)};
        f.weights = Vector::Ones(static_cast<Eigen::Index>(c->rank()));
        f.shape = {c->vert.extent(0), c->horz.extent(0), c->in.extent(0), c->out.extent(0)};
        return cpd_reconstruct(f);
    }
    throw ShapeError("reconstruct_kernel: layer " + layer_kind(layer) + " is not factorized");
}

std::vector<LayerFate> finalize_layers(ModelGraph& g) {
    std::vector<LayerFate> fates;
    const std::vector<ActShape> shapes = g.shapes();
    for (std::size_t i = 0; i < g.layers().size(); ++i) {
        Layer& l = g.layers()[i];
        if (!std::holds_alternative<Tucker2Conv>(l) && !std::holds_alternative<SvdConv>(l) &&
            !std::holds_alternative<CpdConv>(l)) {
            continue;
        }
        LayerFate f = decide_layer_fate(l, shapes[i]);
        f.layer = i;
        fold_gates(l);
        if (f.decision == FateDecision::reverted) {
            Conv2d dense;
            dense.kernel = reconstruct_kernel(l);
            std::visit(
                [&](const auto& x) {
                    if constexpr (requires { x.bias; x.stride; x.padding; }) {
                        dense.bias = x.bias;
                        dense.stride = x.stride;
                        dense.padding = x.padding;
                    }
                },
                l);
            l = std::move(dense);
        }
        fates.push_back(f);
    }
    return fates;
}

std::vector<FinetuneRecord> finetune(ModelGraph& g, const Dataset& data, std::size_t epochs, const TrainOptions& opt) {
    std::vector<FinetuneRecord> out;
    for (std::size_t e = 0; e < epochs; ++e) {
        out.push_back({e, train_epoch(g, data, opt, e)});
    }
    return out;
}

}  // namespace fp
