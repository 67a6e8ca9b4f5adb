// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>

#include "funnelprune/error.hpp"

namespace fp {

Tensor Dataset::example(std::size_t i) const {
    if (i >= size()) {
        throw RangeError("example index " + std::to_string(i) + " out of range");
    }
    const std::size_t n = example_size();
    const auto first = images.begin() + static_cast<std::ptrdiff_t>(i * n);
    return Tensor({h, w, c}, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(n)));
}

Dataset Dataset::head(std::size_t n) const {
    Dataset out = *this;
    n = std::min(n, size());
    out.labels.resize(n);
    out.images.resize(n * example_size());
    return out;
}

std::vector<std::size_t> Dataset::class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (const auto l : labels) {
        ++counts.at(l);
    }
    return counts;
}

Normalization channel_stats(const Dataset& d) {
    Normalization n;
    n.mean.assign(d.c, 0.0);
    n.stddev.assign(d.c, 0.0);
    const std::size_t pixels = d.size() * d.h * d.w;
    if (pixels == 0) {
        n.stddev.assign(d.c, 1.0);
        return n;
    }
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        n.mean[i % d.c] += d.images[i];
    }
    for (auto& m : n.mean) {
        m /= static_cast<double>(pixels);
    }
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const double e = d.images[i] - n.mean[i % d.c];
        n.stddev[i % d.c] += e * e;
    }
    for (auto& s : n.stddev) {
        s = std::sqrt(s / static_cast<double>(pixels));
        if (s < 1e-12) {
            s = 1.0;
        }
    }
    return n;
}

void normalize(Dataset& d, const Normalization& n) {
    if (n.mean.size() != d.c || n.stddev.size() != d.c) {
        throw ShapeError("normalization statistics do not match channel count");
    }
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        const std::size_t ch = i % d.c;
        d.images[i] = (d.images[i] - n.mean[ch]) / n.stddev[ch];
    }
}

// ---------------------------------------------------------------------------
// IDX

namespace {

std::vector<unsigned char> slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + p.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t at, const std::filesystem::path& p) {
    if (at + 4 > b.size()) {
        throw FormatError(p.string() + ": truncated IDX header");
    }
    return (std::uint32_t{b[at]} << 24) | (std::uint32_t{b[at + 1]} << 16) | (std::uint32_t{b[at + 2]} << 8) |
           std::uint32_t{b[at + 3]};
}

}  // namespace

Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes) {
    const auto ib = slurp(images);
    const auto lb = slurp(labels);
    if (be32(ib, 0, images) != 0x00000803u) {
        throw FormatError(images.string() + ": bad IDX image magic");
    }
    if (be32(lb, 0, labels) != 0x00000801u) {
        throw FormatError(labels.string() + ": bad IDX label magic");
    }
    const std::size_t n = be32(ib, 4, images);
    const std::size_t rows = be32(ib, 8, images);
    const std::size_t cols = be32(ib, 12, images);
    const std::size_t nl = be32(lb, 4, labels);
    if (rows == 0 || cols == 0) {
        throw FormatError(images.string() + ": zero image dimension");
    }
    if (ib.size() != 16 + n * rows * cols) {
        throw FormatError(images.string() + ": payload size does not match header");
    }
    if (lb.size() != 8 + nl) {
        throw FormatError(labels.string() + ": payload size does not match header");
    }
    if (n != nl) {
        throw FormatError("image count " + std::to_string(n) + " != label count " + std::to_string(nl));
    }
    Dataset d;
    d.h = rows;
    d.w = cols;
    d.c = 1;
    d.images.resize(n * rows * cols);
    for (std::size_t i = 0; i < d.images.size(); ++i) {
        d.images[i] = static_cast<double>(ib[16 + i]) / 255.0;
    }
    d.labels.resize(n);
    std::uint32_t max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        d.labels[i] = lb[8 + i];
        max_label = std::max(max_label, d.labels[i]);
    }
    d.num_classes = num_classes == 0 ? static_cast<std::size_t>(max_label) + 1 : num_classes;
    if (n > 0 && max_label >= d.num_classes) {
        throw FormatError(labels.string() + ": label " + std::to_string(max_label) + " exceeds class count");
    }
    return d;
}

// ---------------------------------------------------------------------------
// Synthetic

namespace {

struct Stroke {
    double x0, y0, x1, y1, width, weight;
};

double segment_distance2(double px, double py, const Stroke& s, double dx, double dy) {
    const double ax = s.x0 + dx;
    const double ay = s.y0 + dy;
    const double bx = s.x1 + dx;
    const double by = s.y1 + dy;
    const double vx = bx - ax;
    const double vy = by - ay;
    const double len2 = vx * vx + vy * vy;
    double t = len2 > 0.0 ? ((px - ax) * vx + (py - ay) * vy) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const double qx = ax + t * vx - px;
    const double qy = ay + t * vy - py;
    return qx * qx + qy * qy;
}

std::vector<std::vector<Stroke>> make_prototypes(const SynthSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    const double side = static_cast<double>(spec.side);
    std::uniform_real_distribution<double> pos(0.2 * side, 0.8 * side);
    std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
    std::uniform_real_distribution<double> length(0.25 * side, 0.6 * side);
    std::uniform_real_distribution<double> width(0.6, 1.4);
    std::uniform_real_distribution<double> weight(0.6, 1.0);
    std::vector<std::vector<Stroke>> protos(spec.classes);
    for (auto& p : protos) {
        const int strokes = 2 + static_cast<int>(rng() % 2);
        for (int k = 0; k < strokes; ++k) {
            const double cx = pos(rng);
            const double cy = pos(rng);
            const double a = angle(rng);
            const double half = 0.5 * length(rng);
            p.push_back({cx - half * std::cos(a), cy - half * std::sin(a), cx + half * std::cos(a),
                         cy + half * std::sin(a), width(rng), weight(rng)});
        }
    }
    return protos;
}

}  // namespace

Dataset synth_dataset(const SynthSpec& spec) {
    if (spec.classes < 2 || spec.side < 4 || spec.channels == 0) {
        throw RangeError("synthetic dataset needs at least 2 classes, side >= 4 and a channel");
    }
    const auto protos = make_prototypes(spec);
    Dataset d;
    d.h = spec.side;
    d.w = spec.side;
    d.c = spec.channels;
    d.num_classes = spec.classes;
    d.images.assign(spec.size * d.example_size(), 0.0);
    d.labels.resize(spec.size);

    std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                      static_cast<std::uint32_t>(spec.split), 0x5eedu};
    std::mt19937_64 rng(seq);
    const int max_shift = static_cast<int>(spec.max_shift);
    std::uniform_int_distribution<int> shift(-max_shift, max_shift);
    std::uniform_real_distribution<double> amp(0.7, 1.3);
    std::normal_distribution<double> noise(0.0, spec.noise);

    for (std::size_t i = 0; i < spec.size; ++i) {
        const std::size_t label = i % spec.classes;
        d.labels[i] = static_cast<std::uint32_t>(label);
        const double dx = shift(rng);
        const double dy = shift(rng);
        const double a = amp(rng);
        double* img = d.images.data() + i * d.example_size();
        for (std::size_t y = 0; y < spec.side; ++y) {
            for (std::size_t x = 0; x < spec.side; ++x) {
                const double px = static_cast<double>(x) + 0.5;
                const double py = static_cast<double>(y) + 0.5;
                double v = 0.0;
                for (const Stroke& s : protos[label]) {
                    const double d2 = segment_distance2(px, py, s, dx, dy);
                    v += s.weight * std::exp(-d2 / (2.0 * s.width * s.width));
                }
                for (std::size_t ch = 0; ch < d.c; ++ch) {
                    img[(y * spec.side + x) * d.c + ch] = a * std::min(v, 1.5) + noise(rng);
                }
            }
        }
    }
    return d;
}

}  // namespace fp
