// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "funnelprune/error.hpp"
#include "funnelprune/training.hpp"

namespace fp {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Configuration

RegConfig PipelineConfig::default_reg() {
    RegConfig r;
    r.kind = RegKind::funnel;
    r.lambda = 1e-3;
    r.schedule.kind = ScheduleKind::exponential;
    r.schedule.c1 = 1.0;
    r.schedule.sigma = 0.1;
    r.schedule.m = 5;
    r.schedule.floor = 1e-4;
    return r;
}

namespace {

void validate_stage(const StageOptions& s, const char* name) {
    if (!(s.lr >= 0.0) || !std::isfinite(s.lr)) {
        throw RangeError(fmt::format("{}: lr must be finite and non-negative", name));
    }
    if (s.batch_size == 0) {
        throw RangeError(fmt::format("{}: batch_size must be positive", name));
    }
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
    if (!j.is_object()) {
        throw FormatError(where + ": expected an object");
    }
    const std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) {
            throw FormatError(where + ": unknown key '" + k + "'");
        }
    }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) {
        return;
    }
    try {
        out = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw FormatError(where + "." + key + ": " + e.what());
    }
}

void read_path(const json& j, const char* key, std::filesystem::path& out, const std::string& where) {
    std::string s = out.string();
    read(j, key, s, where);
    out = s;
}

StageOptions stage_from_json(const json& j, StageOptions s, const std::string& where) {
    reject_unknown(j, {"epochs", "lr", "batch_size"}, where);
    read(j, "epochs", s.epochs, where);
    read(j, "lr", s.lr, where);
    read(j, "batch_size", s.batch_size, where);
    return s;
}

json stage_to_json(const StageOptions& s) { return {{"epochs", s.epochs}, {"lr", s.lr}, {"batch_size", s.batch_size}}; }

}  // namespace

void PipelineConfig::validate() const {
    validate_stage(pretrain, "pretrain");
    validate_stage(train, "train");
    validate_stage(compress, "compress");
    validate_stage(finetune, "finetune");
    reg.validate();
    prune.validate();
    if (dataset.kind == DatasetConfig::Kind::synthetic) {
        if (dataset.train_size == 0 || dataset.test_size == 0) {
            throw RangeError("dataset: synthetic sizes must be positive");
        }
    } else if (dataset.train_images.empty() || dataset.train_labels.empty() || dataset.test_images.empty() ||
               dataset.test_labels.empty()) {
        throw RangeError("dataset: idx needs train/test image and label paths");
    }
}

PipelineConfig config_from_json(const json& j) {
    PipelineConfig c;
    const std::string top = "config";
    reject_unknown(j,
                   {"model", "dense_checkpoint", "dataset", "decompose", "pretrain", "train", "compress", "finetune",
                    "regularizer", "prune", "project", "gate_update", "output", "seed"},
                   top);
    read_path(j, "model", c.model, top);
    read_path(j, "dense_checkpoint", c.dense_checkpoint, top);
    read_path(j, "output", c.output, top);
    read(j, "seed", c.seed, top);
    read(j, "project", c.project, top);
    if (j.contains("gate_update")) {
        std::string u;
        read(j, "gate_update", u, top);
        c.gate_update = parse_gate_update(u);
    }

    if (j.contains("dataset")) {
        const json& d = j["dataset"];
        const std::string w = "dataset";
        reject_unknown(d,
                       {"kind", "seed", "classes", "train_size", "test_size", "side", "channels", "noise", "max_shift",
                        "train_images", "train_labels", "test_images", "test_labels", "num_classes", "normalize"},
                       w);
        std::string kind = "synthetic";
        read(d, "kind", kind, w);
        if (kind == "synthetic") {
            c.dataset.kind = DatasetConfig::Kind::synthetic;
        } else if (kind == "idx") {
            c.dataset.kind = DatasetConfig::Kind::idx;
        } else {
            throw FormatError("dataset.kind: expected synthetic or idx, got '" + kind + "'");
        }
        read(d, "seed", c.dataset.seed, w);
        read(d, "classes", c.dataset.classes, w);
        read(d, "train_size", c.dataset.train_size, w);
        read(d, "test_size", c.dataset.test_size, w);
        read(d, "side", c.dataset.side, w);
        read(d, "channels", c.dataset.channels, w);
        read(d, "noise", c.dataset.noise, w);
        read(d, "max_shift", c.dataset.max_shift, w);
        read_path(d, "train_images", c.dataset.train_images, w);
        read_path(d, "train_labels", c.dataset.train_labels, w);
        read_path(d, "test_images", c.dataset.test_images, w);
        read_path(d, "test_labels", c.dataset.test_labels, w);
        read(d, "num_classes", c.dataset.num_classes, w);
        read(d, "normalize", c.dataset.normalize, w);
    }
    if (j.contains("decompose")) {
        const json& d = j["decompose"];
        const std::string w = "decompose";
        reject_unknown(d, {"backend", "cpd_rank", "cpd_iters", "cpd_tol"}, w);
        std::string backend = to_string(c.decompose.backend);
        read(d, "backend", backend, w);
        c.decompose.backend = parse_backend(backend);
        read(d, "cpd_rank", c.decompose.cpd_rank, w);
        read(d, "cpd_iters", c.decompose.cpd_iters, w);
        read(d, "cpd_tol", c.decompose.cpd_tol, w);
    }
    if (j.contains("pretrain")) {
        c.pretrain = stage_from_json(j["pretrain"], c.pretrain, "pretrain");
    }
    if (j.contains("train")) {
        c.train = stage_from_json(j["train"], c.train, "train");
    }
    if (j.contains("compress")) {
        c.compress = stage_from_json(j["compress"], c.compress, "compress");
    }
    if (j.contains("finetune")) {
        c.finetune = stage_from_json(j["finetune"], c.finetune, "finetune");
    }
    if (j.contains("regularizer")) {
        const json& r = j["regularizer"];
        const std::string w = "regularizer";
        reject_unknown(r, {"kind", "lambda", "schedule"}, w);
        std::string kind = to_string(c.reg.kind);
        read(r, "kind", kind, w);
        c.reg.kind = parse_reg_kind(kind);
        read(r, "lambda", c.reg.lambda, w);
        if (r.contains("schedule")) {
            const json& s = r["schedule"];
            const std::string ws = "regularizer.schedule";
            reject_unknown(s, {"kind", "c1", "c2", "n", "sigma", "m", "floor"}, ws);
            std::string sk = to_string(c.reg.schedule.kind);
            read(s, "kind", sk, ws);
            c.reg.schedule.kind = parse_schedule_kind(sk);
            read(s, "c1", c.reg.schedule.c1, ws);
            read(s, "c2", c.reg.schedule.c2, ws);
            read(s, "n", c.reg.schedule.n, ws);
            read(s, "sigma", c.reg.schedule.sigma, ws);
            read(s, "m", c.reg.schedule.m, ws);
            read(s, "floor", c.reg.schedule.floor, ws);
        }
    }
    if (j.contains("prune")) {
        const json& p = j["prune"];
        const std::string w = "prune";
        reject_unknown(p, {"threshold", "min_rank", "prune_g4"}, w);
        read(p, "threshold", c.prune.threshold, w);
        read(p, "min_rank", c.prune.min_rank, w);
        read(p, "prune_g4", c.prune.prune_g4, w);
    }
    return c;
}

json config_to_json(const PipelineConfig& c) {
    json j;
    j["model"] = c.model.string();
    j["dense_checkpoint"] = c.dense_checkpoint.string();
    j["output"] = c.output.string();
    j["seed"] = c.seed;
    j["project"] = c.project;
    j["gate_update"] = to_string(c.gate_update);
    json d;
    d["kind"] = c.dataset.kind == DatasetConfig::Kind::synthetic ? "synthetic" : "idx";
    d["seed"] = c.dataset.seed;
    d["classes"] = c.dataset.classes;
    d["train_size"] = c.dataset.train_size;
    d["test_size"] = c.dataset.test_size;
    d["side"] = c.dataset.side;
    d["channels"] = c.dataset.channels;
    d["noise"] = c.dataset.noise;
    d["max_shift"] = c.dataset.max_shift;
    d["train_images"] = c.dataset.train_images.string();
    d["train_labels"] = c.dataset.train_labels.string();
    d["test_images"] = c.dataset.test_images.string();
    d["test_labels"] = c.dataset.test_labels.string();
    d["num_classes"] = c.dataset.num_classes;
    d["normalize"] = c.dataset.normalize;
    j["dataset"] = d;
    j["decompose"] = {{"backend", to_string(c.decompose.backend)},
                      {"cpd_rank", c.decompose.cpd_rank},
                      {"cpd_iters", c.decompose.cpd_iters},
                      {"cpd_tol", c.decompose.cpd_tol}};
    j["pretrain"] = stage_to_json(c.pretrain);
    j["train"] = stage_to_json(c.train);
    j["compress"] = stage_to_json(c.compress);
    j["finetune"] = stage_to_json(c.finetune);
    j["regularizer"] = {{"kind", to_string(c.reg.kind)},
                        {"lambda", c.reg.lambda},
                        {"schedule",
                         {{"kind", to_string(c.reg.schedule.kind)},
                          {"c1", c.reg.schedule.c1},
                          {"c2", c.reg.schedule.c2},
                          {"n", c.reg.schedule.n},
                          {"sigma", c.reg.schedule.sigma},
                          {"m", c.reg.schedule.m},
                          {"floor", c.reg.schedule.floor}}}};
    j["prune"] = {{"threshold", c.prune.threshold}, {"min_rank", c.prune.min_rank}, {"prune_g4", c.prune.prune_g4}};
    return j;
}

PipelineConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open config " + path.string());
    }
    json j;
    try {
        j = json::parse(in, nullptr, true, true);
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
    PipelineConfig c = config_from_json(j);
    const auto base = path.parent_path();
    auto resolve = [&](std::filesystem::path& p) {
        if (!p.empty() && p.is_relative()) {
            p = base / p;
        }
    };
    resolve(c.model);
    resolve(c.dense_checkpoint);
    resolve(c.dataset.train_images);
    resolve(c.dataset.train_labels);
    resolve(c.dataset.test_images);
    resolve(c.dataset.test_labels);
    return c;
}

// ---------------------------------------------------------------------------
// Data

Datasets load_datasets(const DatasetConfig& cfg) {
    Datasets d;
    if (cfg.kind == DatasetConfig::Kind::synthetic) {
        SynthSpec s;
        s.seed = cfg.seed;
        s.classes = cfg.classes;
        s.side = cfg.side;
        s.channels = cfg.channels;
        s.noise = cfg.noise;
        s.max_shift = cfg.max_shift;
        s.size = cfg.train_size;
        s.split = 0;
        d.train = synth_dataset(s);
        s.size = cfg.test_size;
        s.split = 1;
        d.test = synth_dataset(s);
    } else {
        d.train = load_idx_dataset(cfg.train_images, cfg.train_labels, cfg.num_classes);
        d.test = load_idx_dataset(cfg.test_images, cfg.test_labels, cfg.num_classes);
        const std::size_t classes = std::max(d.train.num_classes, d.test.num_classes);
        d.train.num_classes = classes;
        d.test.num_classes = classes;
    }
    if (cfg.normalize) {
        const Normalization n = channel_stats(d.train);
        normalize(d.train, n);
        normalize(d.test, n);
    }
    return d;
}

// ---------------------------------------------------------------------------
// Manifest

const json* RunManifest::find(const std::string& stage) const {
    const json* hit = nullptr;
    for (const auto& s : stages) {
        if (s.value("stage", "") == stage) {
            hit = &s;
        }
    }
    return hit;
}

json RunManifest::to_json() const { return {{"config", config}, {"stages", stages}}; }

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.config = j.value("config", json::object());
    m.stages = j.value("stages", json::array());
    if (!m.stages.is_array()) {
        throw FormatError("manifest: stages must be an array");
    }
    return m;
}

void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
    std::ofstream out(path, std::ios::trunc);
    out << m.to_json().dump(2) << '\n';
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
}

RunManifest read_manifest(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw FormatError("cannot open manifest " + path.string());
    }
    try {
        return RunManifest::from_json(json::parse(in));
    } catch (const json::exception& e) {
        throw FormatError(path.string() + ": " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Stages

std::filesystem::path stage_checkpoint_path(const PipelineConfig& cfg, const std::string& stage) {
    return cfg.output / (stage + ".fpck");
}

namespace {

enum StageId : std::uint64_t { kPretrain = 1, kTrain = 2, kCompress = 3, kFinetune = 4 };

TrainOptions train_options(const PipelineConfig& cfg, const StageOptions& s, StageId id) {
    TrainOptions o;
    o.lr = s.lr;
    o.batch_size = s.batch_size;
    o.project = cfg.project;
    o.gate_update = cfg.gate_update;
    o.seed = cfg.seed * 16 + id;
    return o;
}

json cost_json(const CostReport& r) {
    json layers = json::array();
    for (const auto& l : r.layers) {
        layers.push_back({{"kind", l.kind},
                          {"detail", l.detail},
                          {"in", to_string(l.in)},
                          {"out", to_string(l.out)},
                          {"macs", l.macs},
                          {"params", l.params}});
    }
    return {{"layers", layers},
            {"total_macs", r.total_macs},
            {"total_params", r.total_params},
            {"gmac", r.gmac()},
            {"mparams", r.mparams()},
            {"baseline_gmac", r.baseline_gmac},
            {"speed_up", r.speed_up}};
}

json epoch_json(std::size_t epoch, const EpochStats& s) {
    return {{"epoch", epoch},
            {"class_loss", s.class_loss},
            {"reg_penalty", s.reg_penalty},
            {"train_accuracy", s.train_accuracy},
            {"flagged_units", s.flagged_units}};
}

std::string hash_of(const Checkpoint& c) { return sha256_hex(serialize_checkpoint(c)); }

double baseline_of(const Checkpoint& c) {
    if (!c.meta.contains("baseline_gmac")) {
        throw FormatError("checkpoint carries no baseline_gmac; was it produced by the decompose stage?");
    }
    return c.meta["baseline_gmac"].get<double>();
}

std::string emit(StageContext& ctx, const std::string& stage, const Checkpoint& out) {
    if (!ctx.write_files) {
        return hash_of(out);
    }
    std::filesystem::create_directories(ctx.cfg.output);
    return write_checkpoint(stage_checkpoint_path(ctx.cfg, stage), out);
}

void say(StageContext& ctx, const std::string& line) {
    if (ctx.progress) {
        ctx.progress(line);
    }
}

Checkpoint next_checkpoint(const Checkpoint& in, const std::string& stage, const std::string& parent) {
    Checkpoint out;
    out.meta = in.meta;
    out.meta["stage"] = stage;
    out.meta["parent"] = parent;
    return out;
}

void check_input(const Checkpoint& in, const Datasets& data) {
    in.graph.validate();
    const ActShape& s = in.graph.input_shape();
    if (s.h != data.train.h || s.w != data.train.w || s.c != data.train.c) {
        throw ShapeError(fmt::format("model input {} does not match dataset {}x{}x{}", to_string(s), data.train.h,
                                     data.train.w, data.train.c));
    }
    if (in.graph.num_classes() != data.train.num_classes) {
        throw ShapeError(fmt::format("model has {} classes, dataset has {}", in.graph.num_classes(),
                                     data.train.num_classes));
    }
}

}  // namespace

Checkpoint stage_decompose(StageContext& ctx) {
    const PipelineConfig& cfg = ctx.cfg;
    Checkpoint dense;
    json record;
    record["stage"] = "decompose";
    if (cfg.model.empty() && cfg.dense_checkpoint.empty()) {
        throw RangeError("decompose: either model or dense_checkpoint is required");
    }
    if (!cfg.dense_checkpoint.empty()) {
        dense = read_checkpoint(cfg.dense_checkpoint);
        record["source"] = cfg.dense_checkpoint.string();
    } else {
        dense.graph = build_model(load_arch(cfg.model), cfg.seed);
        record["source"] = cfg.model.string();
    }
    check_input(dense, ctx.data);

    json pre = json::array();
    const TrainOptions po = train_options(cfg, cfg.pretrain, kPretrain);
    for (std::size_t e = 0; e < cfg.pretrain.epochs; ++e) {
        const EpochStats s = train_epoch(dense.graph, ctx.data.train, po, e);
        pre.push_back(epoch_json(e, s));
        say(ctx, fmt::format("pretrain epoch {:>3}  loss {:.4f}  train acc {:.4f}", e, s.class_loss, s.train_accuracy));
    }
    record["pretrain_epochs"] = pre;

    const CostReport dense_cost = model_cost(dense.graph);
    const double baseline = dense.meta.contains("baseline_gmac") ? baseline_of(dense) : dense_cost.gmac();
    dense.meta["stage"] = "dense";
    dense.meta["baseline_gmac"] = baseline;
    dense.meta["seed"] = cfg.seed;
    const Evaluation dense_eval = evaluate(dense.graph, ctx.data.test);
    const std::string dense_hash = emit(ctx, "dense", dense);
    record["dense"] = {{"hash", dense_hash},
                       {"test_accuracy", dense_eval.accuracy},
                       {"test_loss", dense_eval.loss},
                       {"cost", cost_json(model_cost(dense.graph, baseline))}};
    say(ctx, fmt::format("dense model  test acc {:.4f}  {:.6f} GMAC", dense_eval.accuracy, dense_cost.gmac()));

    Checkpoint out = next_checkpoint(dense, "decompose", dense_hash);
    out.graph = dense.graph;
    DecomposeOptions dopt = cfg.decompose;
    dopt.seed = cfg.seed;
    const auto records = decompose_model(out.graph, dopt);
    json layers = json::array();
    for (const auto& r : records) {
        layers.push_back({{"layer", r.layer}, {"outcome", r.outcome}});
        say(ctx, fmt::format("layer {:>2}: {}", r.layer, r.outcome));
    }
    const Evaluation ev = evaluate(out.graph, ctx.data.test);
    std::size_t changed = 0;
    for (std::size_t i = 0; i < ev.predictions.size(); ++i) {
        changed += ev.predictions[i] != dense_eval.predictions[i] ? 1 : 0;
    }
    record["input_hash"] = dense_hash;
    record["backend"] = to_string(cfg.decompose.backend);
    record["layers"] = layers;
    record["test_accuracy"] = ev.accuracy;
    record["test_loss"] = ev.loss;
    record["changed_predictions"] = changed;
    record["cost"] = cost_json(model_cost(out.graph, baseline));
    record["output_hash"] = emit(ctx, "decompose", out);
    ctx.manifest.append(record);
    say(ctx, fmt::format("decomposed   test acc {:.4f}  ({} predictions changed)", ev.accuracy, changed));
    return out;
}

Checkpoint stage_train(const Checkpoint& in, StageContext& ctx) {
    check_input(in, ctx.data);
    const std::string parent = hash_of(in);
    Checkpoint out = next_checkpoint(in, "train", parent);
    out.graph = in.graph;
    const TrainOptions o = train_options(ctx.cfg, ctx.cfg.train, kTrain);
    json epochs = json::array();
    for (std::size_t e = 0; e < ctx.cfg.train.epochs; ++e) {
        const EpochStats s = train_epoch(out.graph, ctx.data.train, o, e);
        epochs.push_back(epoch_json(e, s));
        say(ctx, fmt::format("train epoch {:>3}  loss {:.4f}  train acc {:.4f}", e, s.class_loss, s.train_accuracy));
    }
    const Evaluation ev = evaluate(out.graph, ctx.data.test);
    json record;
    record["stage"] = "train";
    record["input_hash"] = parent;
    record["epochs"] = epochs;
    record["test_accuracy"] = ev.accuracy;
    record["test_loss"] = ev.loss;
    record["cost"] = cost_json(model_cost(out.graph, baseline_of(in)));
    record["output_hash"] = emit(ctx, "train", out);
    ctx.manifest.append(record);
    say(ctx, fmt::format("trained      test acc {:.4f}", ev.accuracy));
    return out;
}

Checkpoint stage_compress(const Checkpoint& in, StageContext& ctx) {
    check_input(in, ctx.data);
    const std::string parent = hash_of(in);
    Checkpoint out = next_checkpoint(in, "compress", parent);
    out.graph = in.graph;
    const TrainOptions o = train_options(ctx.cfg, ctx.cfg.compress, kCompress);
    json epochs = json::array();
    const CompressTrace trace = compress_train(
        out.graph, ctx.data.train, ctx.cfg.reg, ctx.cfg.compress.epochs, o,
        [&](const EpochRecord& r, const ModelGraph&) {
            json j = epoch_json(r.epoch, r.stats);
            j["c"] = r.c;
            j["histogram"] = r.histogram;
            epochs.push_back(j);
            say(ctx, fmt::format("compress epoch {:>3}  c {:.3e}  loss {:.4f}  penalty {:.4f}  train acc {:.4f}",
                                 r.epoch, r.c, r.stats.class_loss, r.stats.reg_penalty, r.stats.train_accuracy));
        });
    if (ctx.write_files) {
        std::filesystem::create_directories(ctx.cfg.output);
        std::ofstream dump(ctx.cfg.output / "gates.txt", std::ios::trunc);
        write_gate_dump(dump, trace);
    }
    const Evaluation before = evaluate(out.graph, ctx.data.test);
    const PruneResult pr = prune(out.graph, ctx.cfg.prune);
    const Evaluation pruned = evaluate(out.graph, ctx.data.test);
    const auto fates = finalize_layers(out.graph);
    const Evaluation folded = evaluate(out.graph, ctx.data.test);

    json layer_fates = json::array();
    for (const auto& f : fates) {
        layer_fates.push_back({{"layer", f.layer},
                               {"decision", to_string(f.decision)},
                               {"cost_original", f.cost_original},
                               {"cost_decomposed", f.cost_decomposed},
                               {"r3", f.r3},
                               {"r4", f.r4}});
    }
    json record;
    record["stage"] = "compress";
    record["input_hash"] = parent;
    record["regularizer"] = to_string(ctx.cfg.reg.kind);
    record["lambda"] = ctx.cfg.reg.lambda;
    record["epochs"] = epochs;
    record["pre_prune_accuracy"] = before.accuracy;
    record["prune"] = {{"threshold", ctx.cfg.prune.threshold},
                       {"gates", pr.stats.gates},
                       {"below", pr.stats.below},
                       {"removed", pr.stats.removed},
                       {"pruning_ratio", pr.stats.ratio()}};
    record["post_prune_accuracy"] = pruned.accuracy;
    record["fates"] = layer_fates;
    record["test_accuracy"] = folded.accuracy;
    record["test_loss"] = folded.loss;
    record["cost"] = cost_json(model_cost(out.graph, baseline_of(in)));
    out.meta["pruning_ratio"] = pr.stats.ratio();
    record["output_hash"] = emit(ctx, "compress", out);
    ctx.manifest.append(record);
    say(ctx, fmt::format("compressed   pruning ratio {:.4f}  acc pre {:.4f}  post {:.4f}  folded {:.4f}",
                         pr.stats.ratio(), before.accuracy, pruned.accuracy, folded.accuracy));
    return out;
}

Checkpoint stage_finetune(const Checkpoint& in, StageContext& ctx) {
    check_input(in, ctx.data);
    const std::string parent = hash_of(in);
    Checkpoint out = next_checkpoint(in, "finetune", parent);
    out.graph = in.graph;
    const TrainOptions o = train_options(ctx.cfg, ctx.cfg.finetune, kFinetune);
    json epochs = json::array();
    for (std::size_t e = 0; e < ctx.cfg.finetune.epochs; ++e) {
        const EpochStats s = train_epoch(out.graph, ctx.data.train, o, e);
        json j = epoch_json(e, s);
        j["test_accuracy"] = evaluate(out.graph, ctx.data.test).accuracy;
        say(ctx, fmt::format("finetune epoch {:>3}  loss {:.4f}  train acc {:.4f}  test acc {:.4f}", e, s.class_loss,
                             s.train_accuracy, j["test_accuracy"].get<double>()));
        epochs.push_back(std::move(j));
    }
    const Evaluation ev = evaluate(out.graph, ctx.data.test);
    const CostReport cost = model_cost(out.graph, baseline_of(in));
    json record;
    record["stage"] = "finetune";
    record["input_hash"] = parent;
    record["epochs"] = epochs;
    record["test_accuracy"] = ev.accuracy;
    record["test_loss"] = ev.loss;
    record["cost"] = cost_json(cost);
    record["gate_count"] = out.graph.gate_count();
    record["output_hash"] = emit(ctx, "final", out);
    ctx.manifest.append(record);
    say(ctx, fmt::format("final        test acc {:.4f}  {:.6f} GMAC  speed-up {:.3f}", ev.accuracy, cost.gmac(),
                         cost.speed_up));
    return out;
}

RunManifest run_all(const PipelineConfig& cfg, ProgressFn progress) {
    cfg.validate();
    const Datasets data = load_datasets(cfg.dataset);
    RunManifest m;
    m.config = config_to_json(cfg);
    StageContext ctx{cfg, data, m, std::move(progress)};
    const Checkpoint d = stage_decompose(ctx);
    const Checkpoint t = stage_train(d, ctx);
    const Checkpoint c = stage_compress(t, ctx);
    stage_finetune(c, ctx);
    std::filesystem::create_directories(cfg.output);
    write_manifest(cfg.output / "manifest.json", m);
    std::ofstream report(cfg.output / "report.txt", std::ios::trunc);
    write_run_report(report, m);
    return m;
}

// ---------------------------------------------------------------------------
// Reports

void write_report_table(std::ostream& out, const std::string& title, const std::vector<ReportRow>& rows) {
    bool top1 = false;
    bool gmac = false;
    bool mparams = false;
    bool ratio = false;
    bool speed = false;
    std::size_t width = 6;
    for (const auto& r : rows) {
        top1 |= r.top1.has_value();
        gmac |= r.gmac.has_value();
        mparams |= r.mparams.has_value();
        ratio |= r.pruning_ratio.has_value();
        speed |= r.speed_up.has_value();
        width = std::max(width, r.method.size());
    }
    auto cell = [](const std::optional<double>& v, const char* spec) {
        return v ? fmt::format(fmt::runtime(spec), *v) : std::string("-");
    };
    fmt::print(out, "{}\n", title);
    std::string header = fmt::format("{:<{}}", "method", width);
    if (top1) header += fmt::format("  {:>8}", "Top-1");
    if (gmac) header += fmt::format("  {:>12}", "GMAC");
    if (mparams) header += fmt::format("  {:>10}", "#Param(M)");
    if (ratio) header += fmt::format("  {:>9}", "pruned");
    if (speed) header += fmt::format("  {:>8}", "speed-up");
    fmt::print(out, "{}\n{}\n", header, std::string(header.size(), '-'));
    for (const auto& r : rows) {
        std::string line = fmt::format("{:<{}}", r.method, width);
        if (top1) line += fmt::format("  {:>8}", cell(r.top1 ? std::optional(*r.top1 * 100.0) : std::nullopt, "{:.2f}"));
        if (gmac) line += fmt::format("  {:>12}", cell(r.gmac, "{:.6f}"));
        if (mparams) line += fmt::format("  {:>10}", cell(r.mparams, "{:.4f}"));
        if (ratio) {
            line += fmt::format("  {:>9}",
                                cell(r.pruning_ratio ? std::optional(*r.pruning_ratio * 100.0) : std::nullopt, "{:.1f}%"));
        }
        if (speed) line += fmt::format("  {:>8}", cell(r.speed_up, "{:.3f}"));
        fmt::print(out, "{}\n", line);
    }
}

void write_run_report(std::ostream& out, const RunManifest& m) {
    std::vector<ReportRow> rows;
    auto cost_row = [](const std::string& name, const json& s) {
        ReportRow r;
        r.method = name;
        r.top1 = s.at("test_accuracy").get<double>();
        r.gmac = s.at("cost").at("gmac").get<double>();
        r.mparams = s.at("cost").at("mparams").get<double>();
        r.speed_up = s.at("cost").at("speed_up").get<double>();
        return r;
    };
    if (const json* d = m.find("decompose")) {
        rows.push_back(cost_row("dense baseline", d->at("dense")));
        rows.push_back(cost_row("decomposed (full rank)", *d));
    }
    if (const json* t = m.find("train")) {
        rows.push_back(cost_row("trained (stage 2)", *t));
    }
    if (const json* c = m.find("compress")) {
        ReportRow r = cost_row("compressed", *c);
        r.pruning_ratio = c->at("prune").at("pruning_ratio").get<double>();
        rows.push_back(r);
    }
    const json* f = m.find("finetune");
    if (f) {
        rows.push_back(cost_row("fine-tuned", *f));
    }
    write_report_table(out, "Run summary", rows);
    if (f) {
        out << "\nFinal model per-layer cost\n";
        const json& cost = f->at("cost");
        fmt::print(out, "{:>3}  {:<8} {:<28} {:>14} {:>10}\n", "#", "kind", "detail", "MACs", "params");
        std::size_t i = 0;
        for (const auto& l : cost.at("layers")) {
            fmt::print(out, "{:>3}  {:<8} {:<28} {:>14} {:>10}\n", i++, l.at("kind").get<std::string>(),
                       l.at("detail").get<std::string>(), l.at("macs").get<std::uint64_t>(),
                       l.at("params").get<std::uint64_t>());
        }
        fmt::print(out, "total {:.6f} GMAC, {:.4f} M params, speed-up {:.3f}\n", cost.at("gmac").get<double>(),
                   cost.at("mparams").get<double>(), cost.at("speed_up").get<double>());
    }
}

}  // namespace fp
