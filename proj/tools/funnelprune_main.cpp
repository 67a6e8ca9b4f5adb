// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "funnelprune/checkpoint.hpp"
#include "funnelprune/cost_model.hpp"
#include "funnelprune/pipeline.hpp"

namespace {

using fp::PipelineConfig;

/// Command-line overrides; unset fields leave the config untouched.
struct Overrides {
    std::string config;
    std::optional<std::string> model;
    std::optional<std::string> dense_checkpoint;
    std::optional<std::string> output;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> dataset;
    std::optional<std::uint64_t> data_seed;
    std::optional<std::size_t> train_size;
    std::optional<std::size_t> test_size;
    std::optional<std::string> train_images, train_labels, test_images, test_labels;
    std::optional<std::string> backend;
    std::optional<std::size_t> pretrain_epochs, train_epochs, compress_epochs, finetune_epochs;
    std::optional<double> pretrain_lr, train_lr, compress_lr, finetune_lr;
    std::optional<std::size_t> batch_size;
    std::optional<std::string> reg;
    std::optional<double> lambda;
    std::optional<std::string> schedule;
    std::optional<double> c1, c2, n, sigma, floor;
    std::optional<std::size_t> m;
    std::optional<double> threshold;
    std::optional<std::size_t> min_rank;
    bool prune_g4 = false;
    bool no_project = false;
    std::optional<std::string> gate_update;
    std::string input;
};

void add_overrides(CLI::App* app, Overrides& o) {
    app->add_option("-c,--config", o.config, "JSON pipeline config");
    app->add_option("--model", o.model, "architecture descriptor");
    app->add_option("--dense-checkpoint", o.dense_checkpoint, "start from a dense checkpoint");
    app->add_option("-o,--output", o.output, "output directory");
    app->add_option("--seed", o.seed, "run seed");
    app->add_option("--dataset", o.dataset, "synthetic or idx")->check(CLI::IsMember({"synthetic", "idx"}));
    app->add_option("--data-seed", o.data_seed, "synthetic dataset seed");
    app->add_option("--train-size", o.train_size, "synthetic training examples");
    app->add_option("--test-size", o.test_size, "synthetic test examples");
    app->add_option("--train-images", o.train_images, "IDX training images");
    app->add_option("--train-labels", o.train_labels, "IDX training labels");
    app->add_option("--test-images", o.test_images, "IDX test images");
    app->add_option("--test-labels", o.test_labels, "IDX test labels");
    app->add_option("--backend", o.backend, "tucker2, cpd or svd")->check(CLI::IsMember({"tucker2", "cpd", "svd"}));
    app->add_option("--pretrain-epochs", o.pretrain_epochs);
    app->add_option("--train-epochs", o.train_epochs);
    app->add_option("--compress-epochs", o.compress_epochs);
    app->add_option("--finetune-epochs", o.finetune_epochs);
    app->add_option("--pretrain-lr", o.pretrain_lr);
    app->add_option("--train-lr", o.train_lr);
    app->add_option("--compress-lr", o.compress_lr);
    app->add_option("--finetune-lr", o.finetune_lr);
    app->add_option("--batch-size", o.batch_size, "batch size for every stage");
    app->add_option("--reg", o.reg, "funnel, l1 or l2")->check(CLI::IsMember({"funnel", "l1", "l2"}));
    app->add_option("--lambda", o.lambda, "regularization weight");
    app->add_option("--schedule", o.schedule, "constant, linear or exponential")
        ->check(CLI::IsMember({"constant", "linear", "exponential"}));
    app->add_option("--c1", o.c1, "initial funnel c");
    app->add_option("--c2", o.c2, "final funnel c (linear)");
    app->add_option("--n", o.n, "epochs to reach c2 (linear)");
    app->add_option("--sigma", o.sigma, "decay factor (exponential)");
    app->add_option("--m", o.m, "decay period in epochs (exponential)");
    app->add_option("--floor", o.floor, "minimum c");
    app->add_option("--threshold", o.threshold, "pruning threshold on |gate|");
    app->add_option("--min-rank", o.min_rank, "surviving slices per mode");
    app->add_flag("--prune-g4", o.prune_g4, "also prune output channels");
    app->add_flag("--no-project", o.no_project, "disable projected direction gradients");
    app->add_option("--gate-update", o.gate_update, "plain or truncated regularizer step on gates")
        ->check(CLI::IsMember({"plain", "truncated"}));
}

template <typename T, typename U>
void apply(const std::optional<T>& v, U& target) {
    if (v) {
        target = *v;
    }
}

PipelineConfig resolve_config(const Overrides& o) {
    PipelineConfig c = o.config.empty() ? PipelineConfig{} : fp::load_config(o.config);
    apply(o.model, c.model);
    apply(o.dense_checkpoint, c.dense_checkpoint);
    apply(o.output, c.output);
    apply(o.seed, c.seed);
    if (o.dataset) {
        c.dataset.kind = *o.dataset == "idx" ? fp::DatasetConfig::Kind::idx : fp::DatasetConfig::Kind::synthetic;
    }
    apply(o.data_seed, c.dataset.seed);
    apply(o.train_size, c.dataset.train_size);
    apply(o.test_size, c.dataset.test_size);
    apply(o.train_images, c.dataset.train_images);
    apply(o.train_labels, c.dataset.train_labels);
    apply(o.test_images, c.dataset.test_images);
    apply(o.test_labels, c.dataset.test_labels);
    if (o.backend) {
        c.decompose.backend = fp::parse_backend(*o.backend);
    }
    apply(o.pretrain_epochs, c.pretrain.epochs);
    apply(o.train_epochs, c.train.epochs);
    apply(o.compress_epochs, c.compress.epochs);
    apply(o.finetune_epochs, c.finetune.epochs);
    apply(o.pretrain_lr, c.pretrain.lr);
    apply(o.train_lr, c.train.lr);
    apply(o.compress_lr, c.compress.lr);
    apply(o.finetune_lr, c.finetune.lr);
    if (o.batch_size) {
        c.pretrain.batch_size = c.train.batch_size = c.compress.batch_size = c.finetune.batch_size = *o.batch_size;
    }
    if (o.reg) {
        c.reg.kind = fp::parse_reg_kind(*o.reg);
    }
    apply(o.lambda, c.reg.lambda);
    if (o.schedule) {
        c.reg.schedule.kind = fp::parse_schedule_kind(*o.schedule);
    }
    apply(o.c1, c.reg.schedule.c1);
    apply(o.c2, c.reg.schedule.c2);
    apply(o.n, c.reg.schedule.n);
    apply(o.sigma, c.reg.schedule.sigma);
    apply(o.m, c.reg.schedule.m);
    apply(o.floor, c.reg.schedule.floor);
    apply(o.threshold, c.prune.threshold);
    apply(o.min_rank, c.prune.min_rank);
    if (o.prune_g4) {
        c.prune.prune_g4 = true;
    }
    if (o.no_project) {
        c.project = false;
    }
    if (o.gate_update) {
        c.gate_update = fp::parse_gate_update(*o.gate_update);
    }
    c.validate();
    return c;
}

void log_line(const std::string& s) { spdlog::info("{}", s); }

fp::RunManifest open_manifest(const PipelineConfig& cfg) {
    const auto path = cfg.output / "manifest.json";
    if (std::filesystem::exists(path)) {
        return fp::read_manifest(path);
    }
    fp::RunManifest m;
    m.config = fp::config_to_json(cfg);
    return m;
}

using StageFn = fp::Checkpoint (*)(const fp::Checkpoint&, fp::StageContext&);

int run_stage(const Overrides& o, const std::string& input_stage, StageFn fn) {
    const PipelineConfig cfg = resolve_config(o);
    const auto in_path = o.input.empty() ? fp::stage_checkpoint_path(cfg, input_stage) : std::filesystem::path(o.input);
    spdlog::info("reading {}", in_path.string());
    const fp::Checkpoint in = fp::read_checkpoint(in_path);
    const fp::Datasets data = fp::load_datasets(cfg.dataset);
    fp::RunManifest m = open_manifest(cfg);
    fp::StageContext ctx{cfg, data, m, log_line};
    fn(in, ctx);
    fp::write_manifest(cfg.output / "manifest.json", m);
    return 0;
}

int cmd_decompose(const Overrides& o) {
    const PipelineConfig cfg = resolve_config(o);
    const fp::Datasets data = fp::load_datasets(cfg.dataset);
    fp::RunManifest m;
    m.config = fp::config_to_json(cfg);
    fp::StageContext ctx{cfg, data, m, log_line};
    fp::stage_decompose(ctx);
    fp::write_manifest(cfg.output / "manifest.json", m);
    return 0;
}

int cmd_run_all(const Overrides& o) {
    const PipelineConfig cfg = resolve_config(o);
    const fp::RunManifest m = fp::run_all(cfg, log_line);
    fp::write_run_report(std::cout, m);
    return 0;
}

int cmd_cost(const std::string& path, bool csv, std::optional<double> baseline) {
    fp::CostReport r;
    if (std::filesystem::path(path).extension() == ".fpck") {
        const fp::Checkpoint ck = fp::read_checkpoint(path);
        if (!baseline && ck.meta.contains("baseline_gmac")) {
            baseline = ck.meta["baseline_gmac"].get<double>();
        }
        r = fp::model_cost(ck.graph, baseline);
    } else {
        r = fp::arch_cost(fp::load_arch(path), baseline);
    }
    if (csv) {
        fp::write_cost_csv(std::cout, r);
    } else {
        fp::write_cost_table(std::cout, r);
    }
    return 0;
}

std::string describe_run(const nlohmann::json& cfg) {
    const auto& reg = cfg.at("regularizer");
    const std::string kind = reg.at("kind").get<std::string>();
    std::string label = kind + " lambda=" + fmt::format("{:g}", reg.at("lambda").get<double>());
    if (kind == "funnel") {
        const auto& s = reg.at("schedule");
        const std::string sk = s.at("kind").get<std::string>();
        if (sk == "constant") {
            label += fmt::format(" c={:g}", s.at("c1").get<double>());
        } else if (sk == "linear") {
            label += fmt::format(" c={:g}->{:g}", s.at("c1").get<double>(), s.at("c2").get<double>());
        } else {
            label += fmt::format(" c={:g}*{:g}^(e/{})", s.at("c1").get<double>(), s.at("sigma").get<double>(),
                                 s.at("m").get<std::size_t>());
        }
    }
    return label + " [" + cfg.at("decompose").at("backend").get<std::string>() + "]";
}

int cmd_report(const std::vector<std::string>& dirs) {
    if (dirs.size() == 1) {
        fp::write_run_report(std::cout, fp::read_manifest(std::filesystem::path(dirs[0]) / "manifest.json"));
        return 0;
    }
    std::vector<fp::ReportRow> rows;
    for (const auto& d : dirs) {
        const fp::RunManifest m = fp::read_manifest(std::filesystem::path(d) / "manifest.json");
        fp::ReportRow r;
        r.method = describe_run(m.config);
        if (const auto* c = m.find("compress")) {
            r.pruning_ratio = c->at("prune").at("pruning_ratio").get<double>();
            r.top1 = c->at("post_prune_accuracy").get<double>();
        }
        if (const auto* f = m.find("finetune")) {
            r.top1 = f->at("test_accuracy").get<double>();
            r.gmac = f->at("cost").at("gmac").get<double>();
            r.mparams = f->at("cost").at("mparams").get<double>();
            r.speed_up = f->at("cost").at("speed_up").get<double>();
        }
        rows.push_back(r);
    }
    fp::write_report_table(std::cout, "Run comparison", rows);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    spdlog::set_default_logger(spdlog::stderr_color_mt("funnelprune"));
    spdlog::set_pattern("[%H:%M:%S] %v");

    CLI::App app{"Gate-regularized tensor decomposition compression for CNNs"};
    app.require_subcommand(1);
    bool quiet = false;
    app.add_flag("-q,--quiet", quiet, "only log warnings and errors");

    Overrides o;
    auto* decompose = app.add_subcommand("decompose", "build or load the dense model and decompose it at full rank");
    add_overrides(decompose, o);
    auto* train = app.add_subcommand("train", "train the decomposed model on the classification loss");
    add_overrides(train, o);
    train->add_option("-i,--input", o.input, "input checkpoint (default: <output>/decompose.fpck)");
    auto* compress = app.add_subcommand("compress", "regularized gate training, pruning and layer fate");
    add_overrides(compress, o);
    compress->add_option("-i,--input", o.input, "input checkpoint (default: <output>/train.fpck)");
    auto* finetune = app.add_subcommand("finetune", "fine-tune the compressed model");
    add_overrides(finetune, o);
    finetune->add_option("-i,--input", o.input, "input checkpoint (default: <output>/compress.fpck)");
    auto* run_all = app.add_subcommand("run-all", "run all four stages");
    add_overrides(run_all, o);

    std::string cost_path;
    bool cost_csv = false;
    std::optional<double> cost_baseline;
    auto* cost = app.add_subcommand("cost", "per-layer MAC and parameter table of a descriptor or checkpoint");
    cost->add_option("path", cost_path, "architecture descriptor or .fpck checkpoint")->required();
    cost->add_flag("--csv", cost_csv, "machine-readable output");
    cost->add_option("--baseline", cost_baseline, "baseline GMAC for the speed-up column");

    std::vector<std::string> report_dirs;
    auto* report = app.add_subcommand("report", "summarize one run, or compare several runs in one table");
    report->add_option("dirs", report_dirs, "run output directories")->required();

    CLI11_PARSE(app, argc, argv);
    if (quiet) {
        spdlog::set_level(spdlog::level::warn);
    }
    try {
        if (*decompose) return cmd_decompose(o);
        if (*train) return run_stage(o, "decompose", fp::stage_train);
        if (*compress) return run_stage(o, "train", fp::stage_compress);
        if (*finetune) return run_stage(o, "compress", fp::stage_finetune);
        if (*run_all) return cmd_run_all(o);
        if (*cost) return cmd_cost(cost_path, cost_csv, cost_baseline);
        if (*report) return cmd_report(report_dirs);
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 2;
}
