// Copyright 2026 The FunnelPrune Authors
// SPDX-License-Identifier: Apache-2.0

#include "funnelprune/checkpoint.hpp"

#include <array>
#include <fstream>
#include <iterator>
#include <sstream>

#include <openssl/evp.h>

#include "funnelprune/error.hpp"

namespace fp {

using nlohmann::json;

namespace {

constexpr std::array<char, 4> kMagic{'F', 'P', 'C', 'K'};

void put_u64(std::ostream& out, std::uint64_t v) {
    std::array<char, 8> buf{};
    for (std::size_t i = 0; i < 8; ++i) {
        buf[i] = static_cast<char>((v >> (8 * i)) & 0xFFu);
    }
    out.write(buf.data(), buf.size());
}

std::uint64_t get_u64(std::istream& in, std::size_t bytes) {
    std::array<unsigned char, 8> buf{};
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(bytes));
    if (!in) {
        throw FormatError("checkpoint: truncated header");
    }
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < bytes; ++i) {
        v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    }
    return v;
}

json layer_manifest(const Layer& layer) {
    json j;
    j["kind"] = layer_kind(layer);
    std::visit(
        [&](const auto& l) {
            using L = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<L, Conv2d> || std::is_same_v<L, Tucker2Conv> || std::is_same_v<L, SvdConv> ||
                          std::is_same_v<L, CpdConv>) {
                j["stride"] = l.stride;
                j["padding"] = l.padding;
            }
            if constexpr (std::is_same_v<L, MaxPool>) {
                j["size"] = l.size;
            }
        },
        layer);
    if (is_conv_like(layer) && !std::holds_alternative<Conv2d>(layer)) {
        j["gated"] = has_gates(layer);
    }
    return j;
}

std::size_t field(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_number_unsigned()) {
        throw FormatError(std::string("checkpoint: layer field '") + key + "' missing or invalid");
    }
    return j[key].get<std::size_t>();
}

Layer read_layer(const json& j, std::istream& in) {
    const std::string kind = j.at("kind").get<std::string>();
    const bool gated = j.value("gated", false);
    auto next = [&] { return read_tensor(in); };
    if (kind == "conv") {
        Conv2d l;
        l.kernel = next();
        l.bias = next();
        l.stride = field(j, "stride");
        l.padding = field(j, "padding");
        return l;
    }
    if (kind == "tucker2") {
        Tucker2Conv l;
        l.u3 = next();
        l.core = next();
        l.u4 = next();
        l.bias = next();
        if (gated) {
            GateSet g;
            g.g3 = next();
            g.gc = next();
            g.g4 = next();
            l.gates = std::move(g);
        }
        l.stride = field(j, "stride");
        l.padding = field(j, "padding");
        return l;
    }
    if (kind == "svd") {
        SvdConv l;
        l.first = next();
        l.second = next();
        l.bias = next();
        if (gated) {
            l.gate = next();
        }
        l.stride = field(j, "stride");
        l.padding = field(j, "padding");
        return l;
    }
    if (kind == "cpd") {
        CpdConv l;
        l.in = next();
        l.vert = next();
        l.horz = next();
        l.out = next();
        l.bias = next();
        if (gated) {
            l.gate = next();
        }
        l.stride = field(j, "stride");
        l.padding = field(j, "padding");
        return l;
    }
    if (kind == "relu") {
        return Relu{};
    }
    if (kind == "maxpool") {
        return MaxPool{field(j, "size")};
    }
    if (kind == "flatten") {
        return Flatten{};
    }
    if (kind == "dense") {
        Dense l;
        l.weight = next();
        l.bias = next();
        return l;
    }
    throw FormatError("checkpoint: unknown layer kind '" + kind + "'");
}

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    const ModelGraph& g = ckpt.graph;
    json manifest;
    manifest["input"] = {g.input_shape().h, g.input_shape().w, g.input_shape().c};
    manifest["layers"] = json::array();
    for (const auto& l : g.layers()) {
        manifest["layers"].push_back(layer_manifest(l));
    }
    manifest["meta"] = ckpt.meta;
    const std::string text = manifest.dump();

    std::ostringstream out(std::ios::binary);
    out.write(kMagic.data(), kMagic.size());
    std::array<char, 4> version{};
    for (std::size_t i = 0; i < 4; ++i) {
        version[i] = static_cast<char>((kCheckpointVersion >> (8 * i)) & 0xFFu);
    }
    out.write(version.data(), version.size());
    put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& l : g.layers()) {
        for (const auto& p : layer_params(l)) {
            write_tensor(out, *p.value);
        }
    }
    return out.str();
}

Checkpoint parse_checkpoint(std::string_view bytes) {
    std::istringstream in(std::string(bytes), std::ios::binary);
    std::array<char, 4> magic{};
    in.read(magic.data(), magic.size());
    if (!in || magic != kMagic) {
        throw FormatError("checkpoint: bad magic");
    }
    const auto version = get_u64(in, 4);
    if (version != kCheckpointVersion) {
        throw FormatError("checkpoint: unsupported version " + std::to_string(version));
    }
    const auto length = get_u64(in, 8);
    if (length > bytes.size()) {
        throw FormatError("checkpoint: manifest length exceeds file");
    }
    std::string text(length, '\0');
    in.read(text.data(), static_cast<std::streamsize>(length));
    if (!in) {
        throw FormatError("checkpoint: truncated manifest");
    }
    json manifest;
    try {
        manifest = json::parse(text);
    } catch (const json::exception& e) {
        throw FormatError(std::string("checkpoint: manifest: ") + e.what());
    }
    const auto& input = manifest.at("input");
    if (!input.is_array() || input.size() != 3) {
        throw FormatError("checkpoint: input shape must have three extents");
    }
    Checkpoint ckpt;
    ckpt.graph = ModelGraph(ActShape{input[0].get<std::size_t>(), input[1].get<std::size_t>(),
                                     input[2].get<std::size_t>()});
    for (const auto& lj : manifest.at("layers")) {
        ckpt.graph.add(read_layer(lj, in));
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw FormatError("checkpoint: trailing bytes after last record");
    }
    ckpt.meta = manifest.value("meta", json::object());
    try {
        ckpt.graph.validate();
    } catch (const ShapeError& e) {
        throw FormatError(std::string("checkpoint: ") + e.what());
    }
    return ckpt;
}

std::string write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    const std::string bytes = serialize_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    return sha256_hex(bytes);
}

namespace {

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

Checkpoint read_checkpoint(const std::filesystem::path& path) { return parse_checkpoint(slurp(path)); }

std::string sha256_hex(std::string_view bytes) {
    std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1) {
        throw Error("SHA-256 digest failed");
    }
    static constexpr char kHex[] = "0123456789abcdef";
    std::string hex;
    hex.reserve(2 * len);
    for (unsigned int i = 0; i < len; ++i) {
        hex.push_back(kHex[md[i] >> 4]);
        hex.push_back(kHex[md[i] & 0xF]);
    }
    return hex;
}

std::string file_sha256(const std::filesystem::path& path) { return sha256_hex(slurp(path)); }

}  // namespace fp
