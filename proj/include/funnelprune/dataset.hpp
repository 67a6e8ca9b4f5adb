// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "funnelprune/tensor.hpp"

namespace fp {

/// Labelled images stored contiguously, each (h, w, c) channel-last.
struct Dataset {
    std::size_t h = 0;
    std::size_t w = 0;
    std::size_t c = 0;
    std::size_t num_classes = 0;
    std::vector<double> images;
    std::vector<std::uint32_t> labels;

    std::size_t size() const { return labels.size(); }
    std::size_t example_size() const { return h * w * c; }
    Tensor example(std::size_t i) const;
    /// First `n` examples (or all when n >= size()).
    Dataset head(std::size_t n) const;
    std::vector<std::size_t> class_counts() const;
};

/// Per-channel standardization statistics.
struct Normalization {
    std::vector<double> mean;
    std::vector<double> stddev;
};

Normalization channel_stats(const Dataset& d);
void normalize(Dataset& d, const Normalization& n);

/**
 * Loads an IDX image file (magic 0x00000803, N x rows x cols u8) and its
 * label file (magic 0x00000801, N u8). Pixels are scaled to [0, 1]; labels
 * must be < num_classes, which is inferred as max(label) + 1 unless given.
 */
Dataset load_idx_dataset(const std::filesystem::path& images, const std::filesystem::path& labels,
                         std::size_t num_classes = 0);

struct SynthSpec {
    std::uint64_t seed = 1;
    std::size_t classes = 10;
    std::size_t size = 1000;
    std::size_t side = 16;
    std::size_t channels = 1;
    /// Selects an independent draw of examples over the same class prototypes.
    std::uint64_t split = 0;
    double noise = 0.35;
    std::size_t max_shift = 2;
};

/**
 * Procedural class-conditional images: each class is a fixed set of
 * oriented strokes and blobs derived from `seed`; examples are shifted,
 * rescaled and noised copies, with independent noise per channel. Classes
 * are balanced (round-robin labels).
 */
Dataset synth_dataset(const SynthSpec& spec);

}  // namespace fp
