// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Checkpoint container: a JSON manifest (name, shape, dtype, offset) plus
// little-endian float32 payloads, one format for experts, router and
// interaction weights alike.
#pragma once

#include <cstdio>
#include <fstream>
#include <map>

#include <json.hpp>

#include "crossmix/tensor.hpp"

namespace crossmix {

struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

namespace detail {
constexpr char kCheckpointMagic[8] = {'C', 'X', 'M', 'C', 'K', 'P', 'T', '1'};

inline void write_f32_le(std::ostream& os, double v) {
    float f = static_cast<float>(v);
    uint32_t bits;
    std::memcpy(&bits, &f, 4);
    char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                 static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
    os.write(b, 4);
}

inline double read_f32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    uint32_t bits = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                    (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    float f;
    std::memcpy(&f, &bits, 4);
    return static_cast<double>(f);
}
}  // namespace detail

inline void save_checkpoint(const std::string& path,
                            const std::vector<std::pair<std::string, Tensor>>& items) {
    nlohmann::json manifest = nlohmann::json::array();
    uint64_t offset = 0;
    for (const auto& [name, t] : items) {
        manifest.push_back({{"name", name},
                            {"shape", t.shape()},
                            {"dtype", "f32"},
                            {"offset", offset},
                            {"count", t.size()}});
        offset += t.size();
    }
    std::ofstream os(path, std::ios::binary);
    require(os.good(), "cannot open checkpoint for writing: " + path);
    os.write(detail::kCheckpointMagic, 8);
    const std::string m = manifest.dump();
    uint64_t mlen = m.size();
    os.write(reinterpret_cast<const char*>(&mlen), 8);
    os.write(m.data(), static_cast<std::streamsize>(m.size()));
    for (const auto& [name, t] : items)
        for (double v : t.values()) detail::write_f32_le(os, v);
    require(os.good(), "checkpoint write failed: " + path);
}

inline std::vector<CheckpointEntry> load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    require(is.good(), "cannot open checkpoint: " + path);
    char magic[8];
    is.read(magic, 8);
    require(is.good() && std::memcmp(magic, detail::kCheckpointMagic, 8) == 0,
            "not a checkpoint file: " + path);
    uint64_t mlen = 0;
    is.read(reinterpret_cast<char*>(&mlen), 8);
    std::string m(mlen, '\0');
    is.read(m.data(), static_cast<std::streamsize>(mlen));
    nlohmann::json manifest = nlohmann::json::parse(m);
    std::vector<CheckpointEntry> out;
    for (const auto& e : manifest) {
        CheckpointEntry ce;
        ce.name = e.at("name").get<std::string>();
        ce.shape = e.at("shape").get<Shape>();
        ce.data.resize(e.at("count").get<size_t>());
        out.push_back(std::move(ce));
    }
    for (auto& ce : out)
        for (auto& v : ce.data) v = detail::read_f32_le(is);
    require(is.good(), "checkpoint payload truncated: " + path);
    return out;
}

// Copy loaded values into an existing parameter list by name.
inline void apply_checkpoint(const std::vector<std::pair<std::string, Tensor>>& params,
                             const std::vector<CheckpointEntry>& loaded, bool require_all = true) {
    std::map<std::string, const CheckpointEntry*> index;
    for (const auto& e : loaded) index[e.name] = &e;
    for (const auto& [name, t] : params) {
        auto it = index.find(name);
        if (it == index.end()) {
            require(!require_all, "checkpoint is missing tensor '" + name + "'");
            continue;
        }
        require(it->second->shape == t.shape(),
                "checkpoint tensor '" + name + "' has shape " + shape_str(it->second->shape) +
                    ", expected " + shape_str(t.shape()));
        t.mutable_values() = it->second->data;
    }
}

}  // namespace crossmix
