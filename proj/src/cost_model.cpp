// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/cost_model.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <charconv>
#include <fstream>
#include <sstream>

#include "funnelprune/error.hpp"
#include "funnelprune/training.hpp"

namespace fp {

namespace {

using u64 = std::uint64_t;

u64 U(std::size_t v) {
    return static_cast<u64>(v);
}

}  // namespace

u64 conv_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t) {
    return U(oh) * U(ow) * U(d) * U(d) * U(s) * U(t);
}

u64 tucker2_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t, std::size_t r3,
                 std::size_t r4) {
    return U(oh) * U(ow) * (U(s) * U(r3) + U(r3) * U(d) * U(d) * U(r4) + U(r4) * U(t));
}

u64 svd_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t, std::size_t r) {
    return U(oh) * U(ow) * (U(d) * U(d) * U(s) * U(r) + U(r) * U(t));
}

u64 cpd_macs(std::size_t oh, std::size_t ow, std::size_t d, std::size_t s, std::size_t t, std::size_t r) {
    return U(oh) * U(ow) * (U(s) * U(r) + 2 * U(d) * U(r) + U(r) * U(t));
}

u64 layer_macs(const Layer& layer, const ActShape& in) {
    const ActShape out = layer_output_shape(layer, in);
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        return conv_macs(out.h, out.w, c->kernel.extent(0), c->kernel.extent(2), c->kernel.extent(3));
    }
    if (const auto* t = std::get_if<Tucker2Conv>(&layer)) {
        return tucker2_macs(out.h, out.w, t->kernel_size(), t->in_channels(), t->out_channels(), t->rank3(),
                            t->rank4());
    }
    if (const auto* s = std::get_if<SvdConv>(&layer)) {
        return svd_macs(out.h, out.w, s->first.extent(0), s->first.extent(2), s->second.extent(1), s->rank());
    }
    if (const auto* p = std::get_if<CpdConv>(&layer)) {
        return cpd_macs(out.h, out.w, p->vert.extent(0), p->in.extent(0), p->out.extent(0), p->rank());
    }
    if (const auto* d = std::get_if<Dense>(&layer)) {
        return U(d->weight.extent(0)) * U(d->weight.extent(1));
    }
    return 0;
}

u64 layer_param_count(const Layer& layer) {
    u64 n = 0;
    for (const auto& p : layer_params(layer)) {
        n += U(p.value->size());
    }
    return n;
}

u64 param_count(const ModelGraph& g) {
    u64 n = 0;
    for (const auto& l : g.layers()) {
        n += layer_param_count(l);
    }
    return n;
}

double speed_up(double baseline_gmac, double compressed_gmac) {
    if (!(compressed_gmac > 0.0)) {
        throw RangeError("speed-up undefined for a zero-cost model");
    }
    return baseline_gmac / compressed_gmac;
}

namespace {

std::string layer_detail(const Layer& layer) {
    if (const auto* c = std::get_if<Conv2d>(&layer)) {
        return fmt::format("{}x{} {}->{} s{}", c->kernel.extent(0), c->kernel.extent(1), c->kernel.extent(2),
                           c->kernel.extent(3), c->stride);
    }
    if (const auto* t = std::get_if<Tucker2Conv>(&layer)) {
        return fmt::format("{}x{} {}->{} R3={} R4={}{}", t->kernel_size(), t->kernel_size(), t->in_channels(),
                           t->out_channels(), t->rank3(), t->rank4(), t->gates ? " gated" : "");
    }
    if (const auto* s = std::get_if<SvdConv>(&layer)) {
        return fmt::format("{}x{} {}->{} R={}", s->first.extent(0), s->first.extent(1), s->first.extent(2),
                           s->second.extent(1), s->rank());
    }
    if (const auto* p = std::get_if<CpdConv>(&layer)) {
        return fmt::format("{}x{} {}->{} R={}", p->vert.extent(0), p->horz.extent(0), p->in.extent(0),
                           p->out.extent(0), p->rank());
    }
    if (const auto* d = std::get_if<Dense>(&layer)) {
        return fmt::format("{}->{}", d->weight.extent(0), d->weight.extent(1));
    }
    if (const auto* m = std::get_if<MaxPool>(&layer)) {
        return fmt::format("{}x{}", m->size, m->size);
    }
    return "";
}

void finish(CostReport& r, std::optional<double> baseline_gmac) {
    r.total_macs = 0;
    r.total_params = 0;
    for (const auto& l : r.layers) {
        r.total_macs += l.macs;
        r.total_params += l.params;
    }
    r.baseline_gmac = baseline_gmac.value_or(r.gmac());
    r.speed_up = r.total_macs > 0 ? speed_up(r.baseline_gmac, r.gmac()) : 1.0;
}

}  // namespace

CostReport model_cost(const ModelGraph& g, std::optional<double> baseline_gmac) {
    CostReport r;
    const auto shapes = g.shapes();
    for (std::size_t i = 0; i < g.layers().size(); ++i) {
        const Layer& l = g.layers()[i];
        r.layers.push_back({layer_kind(l), layer_detail(l), shapes[i], shapes[i + 1], layer_macs(l, shapes[i]),
                            layer_param_count(l)});
    }
    finish(r, baseline_gmac);
    return r;
}

// ---------------------------------------------------------------------------
// Descriptor parsing

namespace {

[[noreturn]] void parse_fail(std::size_t line, const std::string& msg) {
    throw FormatError("architecture line " + std::to_string(line) + ": " + msg);
}

std::size_t to_size(const std::string& s, std::size_t line) {
    std::size_t v = 0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
        parse_fail(line, "expected a non-negative integer, got '" + s + "'");
    }
    return v;
}

ActShape parse_shape(const std::string& s, std::size_t line) {
    std::vector<std::size_t> dims;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t x = s.find('x', start);
        dims.push_back(to_size(s.substr(start, x == std::string::npos ? std::string::npos : x - start), line));
        if (x == std::string::npos) {
            break;
        }
        start = x + 1;
    }
    if (dims.size() != 3 || dims[0] == 0 || dims[1] == 0 || dims[2] == 0) {
        parse_fail(line, "shape must be HxWxC with positive extents");
    }
    return {dims[0], dims[1], dims[2]};
}

const std::pair<const char*, ArchOp> kOps[] = {
    {"conv", ArchOp::conv},       {"tucker2", ArchOp::tucker2}, {"bn", ArchOp::bn},
    {"relu", ArchOp::relu},       {"maxpool", ArchOp::maxpool}, {"avgpool", ArchOp::avgpool},
    {"add", ArchOp::add},         {"flatten", ArchOp::flatten}, {"dense", ArchOp::dense},
};

std::size_t positional_count(ArchOp op) {
    switch (op) {
    case ArchOp::conv:
        return 2;
    case ArchOp::tucker2:
        return 4;
    case ArchOp::maxpool:
    case ArchOp::dense:
        return 1;
    default:
        return 0;
    }
}

}  // namespace

ArchDescriptor parse_arch(const std::string& text) {
    ArchDescriptor a;
    bool have_input = false;
    std::istringstream in(text);
    std::string raw;
    std::size_t line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (const auto hash = raw.find('#'); hash != std::string::npos) {
            raw.resize(hash);
        }
        std::istringstream ls(raw);
        std::vector<std::string> tok;
        for (std::string t; ls >> t;) {
            tok.push_back(t);
        }
        if (tok.empty()) {
            continue;
        }
        if (tok[0] == "name") {
            if (tok.size() != 2) {
                parse_fail(line, "name takes one word");
            }
            a.name = tok[1];
            continue;
        }
        if (tok[0] == "input") {
            if (tok.size() != 4) {
                parse_fail(line, "input takes H W C");
            }
            a.input = {to_size(tok[1], line), to_size(tok[2], line), to_size(tok[3], line)};
            if (a.input.size() == 0) {
                parse_fail(line, "input extents must be positive");
            }
            have_input = true;
            continue;
        }
        ArchLayer l;
        l.line = line;
        bool known = false;
        for (const auto& [word, op] : kOps) {
            if (tok[0] == word) {
                l.op = op;
                known = true;
            }
        }
        if (!known) {
            parse_fail(line, "unknown layer '" + tok[0] + "'");
        }
        std::vector<std::size_t> pos;
        bool pad_same = false;
        for (std::size_t i = 1; i < tok.size(); ++i) {
            const auto eq = tok[i].find('=');
            if (eq == std::string::npos) {
                pos.push_back(to_size(tok[i], line));
                continue;
            }
            const std::string key = tok[i].substr(0, eq);
            const std::string val = tok[i].substr(eq + 1);
            if (key == "stride") {
                l.stride = to_size(val, line);
            } else if (key == "pad") {
                if (val == "same") {
                    pad_same = true;
                } else {
                    l.pad = to_size(val, line);
                }
            } else if (key == "bias") {
                l.bias = to_size(val, line) != 0;
            } else if (key == "in") {
                l.in = parse_shape(val, line);
            } else {
                parse_fail(line, "unknown option '" + key + "'");
            }
        }
        if (pos.size() != positional_count(l.op)) {
            parse_fail(line, tok[0] + " takes " + std::to_string(positional_count(l.op)) + " positional values");
        }
        switch (l.op) {
        case ArchOp::conv:
            l.out = pos[0];
            l.k = pos[1];
            break;
        case ArchOp::tucker2:
            l.out = pos[0];
            l.k = pos[1];
            l.r3 = pos[2];
            l.r4 = pos[3];
            break;
        case ArchOp::maxpool:
            l.k = pos[0];
            if (l.stride == 1 && l.pad == 0 && !pad_same) {
                l.stride = l.k;
            }
            break;
        case ArchOp::dense:
            l.out = pos[0];
            break;
        default:
            break;
        }
        if (pad_same) {
            l.pad = (l.k - 1) / 2;
        }
        if (l.stride == 0 || l.k == 0) {
            parse_fail(line, "stride and kernel size must be positive");
        }
        if ((l.op == ArchOp::conv || l.op == ArchOp::tucker2 || l.op == ArchOp::dense) && l.out == 0) {
            parse_fail(line, "output width must be positive");
        }
        a.layers.push_back(l);
    }
    if (!have_input) {
        throw FormatError("architecture has no input line");
    }
    return a;
}

ArchDescriptor load_arch(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open architecture file " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    ArchDescriptor a = parse_arch(ss.str());
    if (a.name.empty()) {
        a.name = path.stem().string();
    }
    return a;
}

namespace {

std::size_t window_out(std::size_t n, std::size_t k, std::size_t stride, std::size_t pad, std::size_t line) {
    if (n + 2 * pad < k) {
        parse_fail(line, "window larger than padded input");
    }
    return (n + 2 * pad - k) / stride + 1;
}

}  // namespace

CostReport arch_cost(const ArchDescriptor& a, std::optional<double> baseline_gmac) {
    CostReport r;
    ActShape cur = a.input;
    for (const ArchLayer& l : a.layers) {
        const ActShape in = l.in.value_or(cur);
        LayerCost c;
        c.in = in;
        c.out = in;
        switch (l.op) {
        case ArchOp::conv:
        case ArchOp::tucker2: {
            if (l.k % 2 == 0) {
                parse_fail(l.line, "kernel size must be odd");
            }
            c.out = {window_out(in.h, l.k, l.stride, l.pad, l.line), window_out(in.w, l.k, l.stride, l.pad, l.line),
                     l.out};
            const u64 b = l.bias ? U(l.out) : 0;
            if (l.op == ArchOp::conv) {
                c.kind = "conv";
                c.detail = fmt::format("{}x{} {}->{} s{}", l.k, l.k, in.c, l.out, l.stride);
                c.macs = conv_macs(c.out.h, c.out.w, l.k, in.c, l.out);
                c.params = U(l.k) * U(l.k) * U(in.c) * U(l.out) + b;
            } else {
                c.kind = "tucker2";
                c.detail = fmt::format("{}x{} {}->{} R3={} R4={}", l.k, l.k, in.c, l.out, l.r3, l.r4);
                c.macs = tucker2_macs(c.out.h, c.out.w, l.k, in.c, l.out, l.r3, l.r4);
                c.params = U(in.c) * U(l.r3) + U(l.k) * U(l.k) * U(l.r3) * U(l.r4) + U(l.r4) * U(l.out) + b;
            }
            break;
        }
        case ArchOp::bn:
            c.kind = "bn";
            c.params = 2 * U(in.c);
            break;
        case ArchOp::relu:
            c.kind = "relu";
            break;
        case ArchOp::add:
            c.kind = "add";
            break;
        case ArchOp::maxpool:
            c.kind = "maxpool";
            c.detail = fmt::format("{}x{} s{}", l.k, l.k, l.stride);
            c.out = {window_out(in.h, l.k, l.stride, l.pad, l.line), window_out(in.w, l.k, l.stride, l.pad, l.line),
                     in.c};
            break;
        case ArchOp::avgpool:
            c.kind = "avgpool";
            c.out = {1, 1, in.c};
            break;
        case ArchOp::flatten:
            c.kind = "flatten";
            c.out = {1, 1, in.size()};
            break;
        case ArchOp::dense:
            c.kind = "dense";
            c.detail = fmt::format("{}->{}", in.size(), l.out);
            c.out = {1, 1, l.out};
            c.macs = U(in.size()) * U(l.out);
            c.params = c.macs + (l.bias ? U(l.out) : 0);
            break;
        }
        cur = c.out;
        r.layers.push_back(std::move(c));
    }
    finish(r, baseline_gmac);
    return r;
}

ModelGraph build_model(const ArchDescriptor& a, std::uint64_t seed) {
    ModelGraph g(a.input);
    ActShape cur = a.input;
    for (const ArchLayer& l : a.layers) {
        if (l.in) {
            parse_fail(l.line, "explicit input shapes are cost-only");
        }
        switch (l.op) {
        case ArchOp::conv:
            if (!l.bias) {
                parse_fail(l.line, "trainable convolutions carry a bias");
            }
            g.add(Conv2d{Tensor({l.k, l.k, cur.c, l.out}), Tensor({l.out}), l.stride, l.pad});
            break;
        case ArchOp::relu:
            g.add(Relu{});
            break;
        case ArchOp::maxpool:
            if (l.stride != l.k || l.pad != 0) {
                parse_fail(l.line, "trainable max pooling needs stride == window and no padding");
            }
            g.add(MaxPool{l.k});
            break;
        case ArchOp::flatten:
            g.add(Flatten{});
            break;
        case ArchOp::dense:
            g.add(Dense{Tensor({cur.size(), l.out}), Tensor({l.out})});
            break;
        default:
            parse_fail(l.line, "layer is cost-only and cannot be trained");
        }
        try {
            cur = layer_output_shape(g.layers().back(), cur);
        } catch (const ShapeError& e) {
            parse_fail(l.line, e.what());
        }
    }
    g.validate();
    init_weights(g, seed);
    return g;
}

void write_cost_table(std::ostream& out, const CostReport& r) {
    fmt::print(out, "{:>3}  {:<10} {:<24} {:>14} {:>14} {:>14} {:>12}\n", "#", "layer", "config", "input", "output",
               "MACs", "params");
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        const auto& l = r.layers[i];
        fmt::print(out, "{:>3}  {:<10} {:<24} {:>14} {:>14} {:>14} {:>12}\n", i, l.kind, l.detail, to_string(l.in),
                   to_string(l.out), l.macs, l.params);
    }
    fmt::print(out, "total: {:.4f} GMAC, {:.4f} M params, speed-up {:.3f}x vs {:.4f} GMAC\n", r.gmac(), r.mparams(),
               r.speed_up, r.baseline_gmac);
}

void write_cost_csv(std::ostream& out, const CostReport& r) {
    out << "index,kind,config,in_h,in_w,in_c,out_h,out_w,out_c,macs,params\n";
    for (std::size_t i = 0; i < r.layers.size(); ++i) {
        const auto& l = r.layers[i];
        fmt::print(out, "{},{},\"{}\",{},{},{},{},{},{},{},{}\n", i, l.kind, l.detail, l.in.h, l.in.w, l.in.c, l.out.h,
                   l.out.w, l.out.c, l.macs, l.params);
    }
}

}  // namespace fp
