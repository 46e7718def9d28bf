// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic skills and the shared toy vocabulary. Four task kinds: copy,
// reverse, modular addition, and fact lookup. Fact tables are disjoint per
// owning expert so that answering another expert's fact requires latent
// collaboration rather than local knowledge.
#pragma once

#include <map>
#include <unordered_map>

#include "crossmix/training.hpp"

namespace crossmix {

struct VocabSpec {
    int payload_symbols = 20;
    int mod_base = 8;
    int fact_keys = 90;
    int fact_values = 16;
};

struct Vocab {
    std::vector<std::string> names;
    std::unordered_map<std::string, int> index;
    int pad = 0, eos = 1, sep = 2, plus = 3;
    int tag_copy = 4, tag_reverse = 5, tag_mod = 6, tag_fact = 7;
    int payload_begin = 0, payload_count = 0;
    int residue_begin = 0, residue_count = 0;
    int key_begin = 0, key_count = 0;
    int value_begin = 0, value_count = 0;

    static Vocab build(const VocabSpec& spec) {
        Vocab v;
        auto push = [&v](const std::string& n) {
            v.index[n] = static_cast<int>(v.names.size());
            v.names.push_back(n);
            return static_cast<int>(v.names.size()) - 1;
        };
        v.pad = push("<pad>");
        v.eos = push("<eos>");
        v.sep = push("<sep>");
        v.plus = push("<plus>");
        v.tag_copy = push("<copy>");
        v.tag_reverse = push("<rev>");
        v.tag_mod = push("<mod>");
        v.tag_fact = push("<fact>");
        v.payload_begin = static_cast<int>(v.names.size());
        v.payload_count = spec.payload_symbols;
        for (int i = 0; i < spec.payload_symbols; ++i) push("s" + std::to_string(i));
        v.residue_begin = static_cast<int>(v.names.size());
        v.residue_count = spec.mod_base;
        for (int i = 0; i < spec.mod_base; ++i) push("r" + std::to_string(i));
        v.key_begin = static_cast<int>(v.names.size());
        v.key_count = spec.fact_keys;
        for (int i = 0; i < spec.fact_keys; ++i) push("k" + std::to_string(i));
        v.value_begin = static_cast<int>(v.names.size());
        v.value_count = spec.fact_values;
        for (int i = 0; i < spec.fact_values; ++i) push("v" + std::to_string(i));
        return v;
    }

    int size() const { return static_cast<int>(names.size()); }

    int id(const std::string& name) const {
        auto it = index.find(name);
        require(it != index.end(), "unknown token '" + name + "'");
        return it->second;
    }

    std::string name(int token) const {
        require(token >= 0 && token < size(), "token id out of range");
        return names[static_cast<size_t>(token)];
    }

    std::vector<int> parse(const std::string& text) const {
        std::vector<int> out;
        std::istringstream is(text);
        std::string word;
        while (is >> word) out.push_back(id(word));
        return out;
    }

    std::string render(const std::vector<int>& tokens) const {
        std::string out;
        for (size_t i = 0; i < tokens.size(); ++i) {
            if (i) out += ' ';
            out += name(tokens[i]);
        }
        return out;
    }
};

enum class TaskKind { copy, reverse, modular_add, fact_lookup };

inline const char* to_string(TaskKind k) {
    switch (k) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::modular_add: return "modular-arithmetic";
        case TaskKind::fact_lookup: return "fact-lookup";
    }
    return "?";
}

inline TaskKind task_kind_from_string(const std::string& s) {
    if (s == "copy") return TaskKind::copy;
    if (s == "reverse") return TaskKind::reverse;
    if (s == "modular-arithmetic" || s == "mod") return TaskKind::modular_add;
    if (s == "fact-lookup" || s == "fact") return TaskKind::fact_lookup;
    fail("unknown task kind '" + s + "'");
}

struct SyntheticTaskSpec {
    std::string name;
    TaskKind kind = TaskKind::copy;
    int len_min = 3, len_max = 6;  // payload length for copy/reverse
    int train_size = 512, heldout_size = 64;
    uint64_t seed = 1;
    // fact-lookup only: the owning expert and its disjoint key slice
    int fact_owner = -1;
    int fact_key_begin = 0, fact_key_count = 0;
    double heldout_fact_fraction = 0.25;
};

struct TaskData {
    SyntheticTaskSpec spec;
    std::vector<TrainExample> train;
    std::vector<TrainExample> heldout;
    // fact tables only: one query per fact (the specialist memorizes these)
    std::vector<TrainExample> memorization;
    std::map<int, int> facts;  // key token -> value token

    // What the task's specialist pretrains on / is gated against. Unseen
    // arbitrary facts are unanswerable, so fact specialists use the full
    // table; everything else uses the honest disjoint split.
    const std::vector<TrainExample>& pretrain_pool() const {
        return spec.kind == TaskKind::fact_lookup ? memorization : train;
    }
    const std::vector<TrainExample>& gate_pool() const {
        return spec.kind == TaskKind::fact_lookup ? memorization : heldout;
    }
};

namespace detail {

inline std::vector<int> random_payload(const Vocab& v, Rng& rng, int len_min, int len_max) {
    const int len = rng.randint(len_min, len_max + 1);
    std::vector<int> p(static_cast<size_t>(len));
    for (auto& t : p) t = v.payload_begin + rng.randint(0, v.payload_count);
    return p;
}

inline TaskData make_sequence_task(const SyntheticTaskSpec& spec, const Vocab& v, bool reversed) {
    TaskData data;
    data.spec = spec;
    Rng rng(spec.seed);
    std::set<std::vector<int>> seen;
    const int want = spec.train_size + spec.heldout_size;
    int guard = 0;
    while (static_cast<int>(seen.size()) < want) {
        require(++guard < want * 200, "task '" + spec.name + "': payload space too small for " +
                                          std::to_string(want) + " distinct examples");
        seen.insert(random_payload(v, rng, spec.len_min, spec.len_max));
    }
    std::vector<std::vector<int>> payloads(seen.begin(), seen.end());
    // set order is deterministic; shuffle so the split is not length-biased
    for (size_t i = payloads.size(); i > 1; --i)
        std::swap(payloads[i - 1], payloads[static_cast<size_t>(rng.randint(0, static_cast<int>(i)))]);
    const int tag = reversed ? v.tag_reverse : v.tag_copy;
    int at = 0;
    for (const auto& p : payloads) {
        TrainExample ex;
        ex.prompt.push_back(tag);
        ex.prompt.insert(ex.prompt.end(), p.begin(), p.end());
        ex.prompt.push_back(v.sep);
        ex.target = p;
        if (reversed) std::reverse(ex.target.begin(), ex.target.end());
        ex.target.push_back(v.eos);
        (at++ < spec.train_size ? data.train : data.heldout).push_back(std::move(ex));
    }
    return data;
}

inline TaskData make_mod_task(const SyntheticTaskSpec& spec, const Vocab& v) {
    TaskData data;
    data.spec = spec;
    const int p = v.residue_count;
    require(spec.train_size + spec.heldout_size <= p * p,
            "task '" + spec.name + "': only " + std::to_string(p * p) + " residue pairs exist");
    Rng rng(spec.seed);
    std::vector<std::pair<int, int>> pairs;
    for (int a = 0; a < p; ++a)
        for (int b2 = 0; b2 < p; ++b2) pairs.emplace_back(a, b2);
    for (size_t i = pairs.size(); i > 1; --i)
        std::swap(pairs[i - 1], pairs[static_cast<size_t>(rng.randint(0, static_cast<int>(i)))]);
    int at = 0;
    for (auto [a, b2] : pairs) {
        if (at >= spec.train_size + spec.heldout_size) break;
        TrainExample ex;
        ex.prompt = {v.tag_mod, v.residue_begin + a, v.plus, v.residue_begin + b2, v.sep};
        ex.target = {v.residue_begin + (a + b2) % p, v.eos};
        (at++ < spec.train_size ? data.train : data.heldout).push_back(std::move(ex));
    }
    return data;
}

inline TaskData make_fact_task(const SyntheticTaskSpec& spec, const Vocab& v) {
    require(spec.fact_key_count > 0 && spec.fact_key_begin >= 0 &&
                spec.fact_key_begin + spec.fact_key_count <= v.key_count,
            "task '" + spec.name + "': fact key slice out of range");
    TaskData data;
    data.spec = spec;
    Rng rng(spec.seed);
    std::vector<int> keys;
    for (int i = 0; i < spec.fact_key_count; ++i)
        keys.push_back(v.key_begin + spec.fact_key_begin + i);
    for (int key : keys) data.facts[key] = v.value_begin + rng.randint(0, v.value_count);
    for (size_t i = keys.size(); i > 1; --i)
        std::swap(keys[i - 1], keys[static_cast<size_t>(rng.randint(0, static_cast<int>(i)))]);
    const int heldout = std::max(1, static_cast<int>(keys.size() * spec.heldout_fact_fraction));
    auto query = [&](int key) {
        TrainExample ex;
        ex.prompt = {v.tag_fact, key, v.sep};
        ex.target = {data.facts.at(key), v.eos};
        return ex;
    };
    for (size_t i = 0; i < keys.size(); ++i) {
        auto ex = query(keys[i]);
        data.memorization.push_back(ex);
        (static_cast<int>(i) < static_cast<int>(keys.size()) - heldout ? data.train : data.heldout)
            .push_back(std::move(ex));
    }
    return data;
}

}  // namespace detail

// Deterministic datasets from specs. Fact tables must be pairwise disjoint
// across owners; overlap is rejected.
inline std::vector<TaskData> make_tasks(const std::vector<SyntheticTaskSpec>& specs, const Vocab& v) {
    std::vector<TaskData> out;
    std::set<int> used_keys;
    for (const auto& spec : specs) {
        switch (spec.kind) {
            case TaskKind::copy: out.push_back(detail::make_sequence_task(spec, v, false)); break;
            case TaskKind::reverse: out.push_back(detail::make_sequence_task(spec, v, true)); break;
            case TaskKind::modular_add: out.push_back(detail::make_mod_task(spec, v)); break;
            case TaskKind::fact_lookup: {
                for (int i = 0; i < spec.fact_key_count; ++i) {
                    const int key = spec.fact_key_begin + i;
                    require(!used_keys.count(key),
                            "fact tables overlap at key index " + std::to_string(key));
                    used_keys.insert(key);
                }
                out.push_back(detail::make_fact_task(spec, v));
                break;
            }
        }
        const auto& t = out.back();
        for (int i = 0; i < static_cast<int>(t.train.size()); ++i)
            require(!t.train[static_cast<size_t>(i)].target.empty(), "empty target generated");
    }
    // assign task indices for joint training
    for (size_t i = 0; i < out.size(); ++i) {
        for (auto& ex : out[i].train) ex.task = static_cast<int>(i);
        for (auto& ex : out[i].heldout) ex.task = static_cast<int>(i);
        for (auto& ex : out[i].memorization) ex.task = static_cast<int>(i);
    }
    return out;
}

}  // namespace crossmix
