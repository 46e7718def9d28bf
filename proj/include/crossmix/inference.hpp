// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Two-phase generation: a routed prefill that builds every cache and emits
// the first output token, then synchronized per-step decoding in which all
// alive active experts advance on their own streams while only the primary
// writes output. A dead expert stops computing; its interaction-cache slots
// keep growing with masked zero padding so block layouts stay aligned.
#pragma once

#include "crossmix/model.hpp"

namespace crossmix {

// Greedy rule used for non-primary experts: their token feeds only their
// own next-step input and never enters the output sequence.
inline int non_primary_token_rule(const Tensor& logits, int row = 0) {
    return argmax_row(logits, row);
}

// Temperature + nucleus sampling for the primary when greedy is off.
inline int sample_token(const std::vector<double>& logits_row, double temperature, double top_p,
                        Rng& rng) {
    require(temperature > 0.0 && top_p > 0.0 && top_p <= 1.0, "sample_token: bad parameters");
    const int v = static_cast<int>(logits_row.size());
    double mx = logits_row[0];
    for (double x : logits_row) mx = std::max(mx, x);
    std::vector<double> p(static_cast<size_t>(v));
    double z = 0;
    for (int i = 0; i < v; ++i) z += (p[static_cast<size_t>(i)] = std::exp((logits_row[static_cast<size_t>(i)] - mx) / temperature));
    for (auto& x : p) x /= z;
    std::vector<int> order(static_cast<size_t>(v));
    for (int i = 0; i < v; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return p[static_cast<size_t>(a)] > p[static_cast<size_t>(b)]; });
    double cum = 0;
    size_t keep = 0;
    while (keep < order.size()) {
        cum += p[static_cast<size_t>(order[keep])];
        ++keep;
        if (cum >= top_p) break;
    }
    const double u = rng.uniform() * cum;
    double acc = 0;
    for (size_t i = 0; i < keep; ++i) {
        acc += p[static_cast<size_t>(order[i])];
        if (u <= acc) return order[i];
    }
    return order[keep - 1];
}

struct GenerateOptions {
    int max_len = 16;  // output-token budget, prefill token included
    int eos_id = 1;
    bool greedy = true;
    double temperature = 0.2;
    double top_p = 0.9;
    uint64_t sample_seed = 0;
    std::set<int> drop;  // experts removed before routing
    std::function<void(int)> on_token;  // streaming sink
    bool record_logits = false;         // keep per-step logits for verification
};

struct ExpertStreamState {
    int expert = -1;
    std::vector<int> consumed;  // tokens this expert has fed through its stacks
    int next_token = -1;        // pending input for the next decode step
    bool alive = true;
    int death_pos = -1;  // consumed-length at the moment of death
    BackboneKVCache cache;
};

struct GenerationState {
    RoutingDecision decision;
    std::vector<ExpertStreamState> streams;  // by active slot
    InteractionKVCache icache;
    std::vector<int> output;
    int prompt_len = 0;
    int step = 0;  // completed decode steps
    bool primary_alive = true;
    GenerateOptions options;
    // recorded per emission: [emission][slot][vocab], empty row for dead slots
    std::vector<std::vector<std::vector<double>>> logits_history;

    int primary_slot() const { return decision.slot_of(decision.primary); }
};

namespace detail {

inline int pick_token(const GenerationState& st, const Tensor& logits, int row, bool primary,
                      Rng& sample_rng) {
    if (!primary || st.options.greedy) return argmax_row(logits, row);
    const int v = logits.dim(logits.rank() - 1);
    std::vector<double> rowv(logits.values().begin() + static_cast<size_t>(row) * v,
                             logits.values().begin() + static_cast<size_t>(row + 1) * v);
    return sample_token(rowv, st.options.temperature, st.options.top_p, sample_rng);
}

inline void record(GenerationState& st, const std::vector<Tensor>& logits) {
    if (!st.options.record_logits) return;
    std::vector<std::vector<double>> rows(logits.size());
    for (size_t s = 0; s < logits.size(); ++s)
        if (logits[s].defined()) {
            const int v = logits[s].dim(1);
            const int last = logits[s].dim(0) - 1;
            rows[s].assign(logits[s].values().begin() + static_cast<size_t>(last) * v,
                           logits[s].values().begin() + static_cast<size_t>(last + 1) * v);
        }
    st.logits_history.push_back(std::move(rows));
}

}  // namespace detail

// Route (noiseless), run all active experts over the prompt with
// interaction layers, fill every cache, emit each expert's first token and
// append the primary's to the output.
inline GenerationState prefill(const Model& model, const std::vector<int>& prompt,
                               const GenerateOptions& options) {
    require(!prompt.empty(), "prefill: empty prompt");
    require(options.max_len >= 1, "prefill: max_len must be at least 1");
    for (const auto& e : model.experts)
        require(static_cast<int>(prompt.size()) + options.max_len <= e.config.max_seq_len,
                "prefill: prompt plus budget exceeds max_seq_len of expert " +
                    std::to_string(e.config.expert_id));

    GenerationState st;
    st.options = options;
    st.prompt_len = static_cast<int>(prompt.size());
    st.decision = model.route(prompt, nullptr, options.drop.empty() ? nullptr : &options.drop);
    const size_t slots = st.decision.active.size();
    st.icache = InteractionKVCache::make(model.config.num_stacks, static_cast<int>(slots));

    std::vector<Model::SlotStream> streams;
    std::vector<BackboneKVCache*> caches;
    for (size_t s = 0; s < slots; ++s) {
        ExpertStreamState ess;
        ess.expert = st.decision.active[s];
        ess.consumed = prompt;
        ess.cache = model.experts[static_cast<size_t>(ess.expert)].make_cache();
        st.streams.push_back(std::move(ess));
    }
    for (size_t s = 0; s < slots; ++s) {
        streams.push_back({prompt, 0});
        caches.push_back(&st.streams[s].cache);
    }
    auto logits = model.joint_forward(st.decision, streams, caches, st.icache, st.prompt_len);
    detail::record(st, logits);

    Rng sample_rng(Rng::mix(options.sample_seed, 0));
    const int primary_slot = st.primary_slot();
    for (size_t s = 0; s < slots; ++s) {
        const bool is_primary = static_cast<int>(s) == primary_slot;
        const int tok = detail::pick_token(st, logits[s], logits[s].dim(0) - 1, is_primary, sample_rng);
        st.streams[s].next_token = tok;
        if (is_primary) {
            st.output.push_back(tok);
            if (options.on_token) options.on_token(tok);
            if (tok == options.eos_id) st.primary_alive = false;
        } else if (tok == options.eos_id) {
            st.streams[s].alive = false;
            st.streams[s].death_pos = static_cast<int>(st.streams[s].consumed.size());
        }
    }
    return st;
}

// One synchronized decode step. Every alive expert consumes its own pending
// token; dead experts contribute masked zero padding to the shared cache.
// Returns false once the primary is done or the budget is exhausted.
inline bool decode_step(const Model& model, GenerationState& st) {
    if (!st.primary_alive || static_cast<int>(st.output.size()) >= st.options.max_len) return false;

    const size_t slots = st.streams.size();
    std::vector<Model::SlotStream> streams(slots);
    std::vector<BackboneKVCache*> caches(slots, nullptr);
    for (size_t s = 0; s < slots; ++s) {
        if (st.streams[s].alive) {
            streams[s] = {{st.streams[s].next_token}, static_cast<int>(st.streams[s].consumed.size())};
            caches[s] = &st.streams[s].cache;
        }
    }
    auto logits = model.joint_forward(st.decision, streams, caches, st.icache, 1);
    detail::record(st, logits);

    Rng sample_rng(Rng::mix(st.options.sample_seed, static_cast<uint64_t>(st.step + 1)));
    const int primary_slot = st.primary_slot();
    for (size_t s = 0; s < slots; ++s) {
        if (!st.streams[s].alive) continue;
        st.streams[s].consumed.push_back(st.streams[s].next_token);
        const bool is_primary = static_cast<int>(s) == primary_slot;
        const int tok = detail::pick_token(st, logits[s], 0, is_primary, sample_rng);
        st.streams[s].next_token = tok;
        if (is_primary) {
            st.output.push_back(tok);
            if (st.options.on_token) st.options.on_token(tok);
            if (tok == st.options.eos_id) st.primary_alive = false;
        } else if (tok == st.options.eos_id) {
            st.streams[s].alive = false;
            st.streams[s].death_pos = static_cast<int>(st.streams[s].consumed.size());
        }
    }
    ++st.step;
    return st.primary_alive && static_cast<int>(st.output.size()) < st.options.max_len;
}

// Mark an expert dead mid-generation (deployment-loss simulation). The
// primary cannot be killed this way; generation ends via its own EOS.
inline void kill_expert(GenerationState& st, int expert) {
    require(expert != st.decision.primary, "kill_expert: cannot kill the primary mid-run");
    for (auto& s : st.streams)
        if (s.expert == expert && s.alive) {
            s.alive = false;
            s.death_pos = static_cast<int>(s.consumed.size());
        }
}

inline std::vector<int> generate(const Model& model, const std::vector<int>& prompt,
                                 const GenerateOptions& options) {
    GenerationState st = prefill(model, prompt, options);
    while (decode_step(model, st)) {
    }
    return st.output;
}

// From-scratch pass over explicit per-slot token prefixes, zero-padding
// slots shorter than total_rows. Reproduces what the incremental path
// computed at the step where the primary had consumed total_rows tokens.
inline std::vector<Tensor> replay_full_forward(const Model& model, const RoutingDecision& decision,
                                               const std::vector<std::vector<int>>& slot_tokens,
                                               int total_rows) {
    const size_t slots = decision.active.size();
    require(slot_tokens.size() == slots, "replay: one token prefix per active slot");
    InteractionKVCache icache = InteractionKVCache::make(model.config.num_stacks,
                                                         static_cast<int>(slots));
    std::vector<BackboneKVCache> caches(slots);
    std::vector<BackboneKVCache*> cache_ptrs;
    std::vector<Model::SlotStream> streams;
    for (size_t s = 0; s < slots; ++s) {
        caches[s] = model.experts[static_cast<size_t>(decision.active[s])].make_cache();
        cache_ptrs.push_back(&caches[s]);
        streams.push_back({slot_tokens[s], 0});
    }
    return model.joint_forward(decision, streams, cache_ptrs, icache, total_rows);
}

}  // namespace crossmix
