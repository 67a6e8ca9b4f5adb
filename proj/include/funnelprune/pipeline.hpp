// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "funnelprune/checkpoint.hpp"
#include "funnelprune/compressor.hpp"
#include "funnelprune/cost_model.hpp"
#include "funnelprune/dataset.hpp"
#include "funnelprune/regularizers.hpp"
#include "funnelprune/training.hpp"

namespace fp {

// ---------------------------------------------------------------------------
// Configuration

struct DatasetConfig {
    enum class Kind { synthetic, idx };
    Kind kind = Kind::synthetic;
    // synthetic
    std::uint64_t seed = 1;
    std::size_t classes = 10;
    std::size_t train_size = 1000;
    std::size_t test_size = 1000;
    std::size_t side = 16;
    std::size_t channels = 1;
    double noise = 0.35;
    std::size_t max_shift = 2;
    // idx
    std::filesystem::path train_images;
    std::filesystem::path train_labels;
    std::filesystem::path test_images;
    std::filesystem::path test_labels;
    std::size_t num_classes = 0;
    /// Standardize channels with training-set statistics.
    bool normalize = true;
};

struct StageOptions {
    std::size_t epochs = 0;
    double lr = 1e-3;
    std::size_t batch_size = 16;
};

/**
 * Everything a pipeline run depends on. Defaults follow the reference
 * ResNet18 setup: lr 1e-3 for the factorized stages, funnel c decaying
 * exponentially from 1 to 1e-4, pruning threshold 1e-3.
 */
struct PipelineConfig {
    std::filesystem::path model;          // architecture descriptor
    std::filesystem::path dense_checkpoint;  // used instead of `model` when set
    DatasetConfig dataset;
    DecomposeOptions decompose;
    StageOptions pretrain{0, 0.05, 16};   // dense training before decomposition
    StageOptions train{5, 1e-3, 16};
    StageOptions compress{50, 1e-3, 16};
    StageOptions finetune{10, 1e-3, 16};
    RegConfig reg = default_reg();
    PruneConfig prune;
    bool project = true;
    GateUpdate gate_update = GateUpdate::truncated;
    std::filesystem::path output = "run";
    std::uint64_t seed = 1;

    static RegConfig default_reg();
    void validate() const;
};

PipelineConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const PipelineConfig& cfg);
PipelineConfig load_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Run bookkeeping

struct Datasets {
    Dataset train;
    Dataset test;
};

Datasets load_datasets(const DatasetConfig& cfg);

/**
 * Append-only record of a run. Every stage entry names its input and output
 * checkpoint hashes, so a chain of entries can be audited against the files.
 */
struct RunManifest {
    nlohmann::json config = nlohmann::json::object();
    nlohmann::json stages = nlohmann::json::array();

    void append(nlohmann::json stage) { stages.push_back(std::move(stage)); }
    const nlohmann::json* find(const std::string& stage) const;
    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

void write_manifest(const std::filesystem::path& path, const RunManifest& m);
RunManifest read_manifest(const std::filesystem::path& path);

/// Compact log line sink for per-epoch progress; may be empty.
using ProgressFn = std::function<void(const std::string&)>;

struct StageContext {
    const PipelineConfig& cfg;
    const Datasets& data;
    RunManifest& manifest;
    ProgressFn progress;
    /// Write checkpoints and dumps to cfg.output.
    bool write_files = true;
};

// ---------------------------------------------------------------------------
// Stages

Checkpoint stage_decompose(StageContext& ctx);
Checkpoint stage_train(const Checkpoint& in, StageContext& ctx);
Checkpoint stage_compress(const Checkpoint& in, StageContext& ctx);
Checkpoint stage_finetune(const Checkpoint& in, StageContext& ctx);

/// Chains the four stages; the returned manifest is also written to disk.
RunManifest run_all(const PipelineConfig& cfg, ProgressFn progress = {});

/// Checkpoint file names inside the output directory.
std::filesystem::path stage_checkpoint_path(const PipelineConfig& cfg, const std::string& stage);

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
    std::string method;
    std::optional<double> top1;
    std::optional<double> gmac;
    std::optional<double> mparams;
    std::optional<double> pruning_ratio;
    std::optional<double> speed_up;
};

/// Aligned text table; empty columns are left out.
void write_report_table(std::ostream& out, const std::string& title, const std::vector<ReportRow>& rows);

/// One row per stage of a finished run, then the final per-layer cost table.
void write_run_report(std::ostream& out, const RunManifest& m);

}  // namespace fp
