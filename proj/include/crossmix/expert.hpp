// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Toy decoder-only transformer backbones. A backbone is partitioned into
// contiguous stacks; the collaboration layers run at stack boundaries, so
// everything here is written so a stack can be advanced independently with
// a KV cache and the walk can pause between stacks.
#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crossmix/tensor.hpp"

namespace crossmix {

enum class Placement { uniform, shallow, intermediate, deep };

inline const char* to_string(Placement p) {
    switch (p) {
        case Placement::uniform: return "uniform";
        case Placement::shallow: return "shallow";
        case Placement::intermediate: return "intermediate";
        case Placement::deep: return "deep";
    }
    return "?";
}

inline Placement placement_from_string(const std::string& s) {
    if (s == "uniform") return Placement::uniform;
    if (s == "shallow") return Placement::shallow;
    if (s == "intermediate") return Placement::intermediate;
    if (s == "deep") return Placement::deep;
    fail("unknown placement '" + s + "'");
}

struct LayerRange {
    int begin = 0;
    int end = 0;  // half-open
    int size() const { return end - begin; }
};

// Q contiguous stacks; an interaction point sits after each stack. Layers
// after the last interaction point (non-uniform placements) run in `tail`.
struct StackPlan {
    std::vector<LayerRange> stacks;
    LayerRange tail{0, 0};
    Placement placement = Placement::uniform;
};

inline StackPlan plan_stacks(int num_layers, int num_stacks, Placement placement) {
    require(num_stacks >= 1, "plan_stacks: need at least one stack");
    require(num_stacks <= num_layers,
            "plan_stacks: " + std::to_string(num_stacks) + " stacks exceed " +
                std::to_string(num_layers) + " layers");
    StackPlan plan;
    plan.placement = placement;
    if (placement == Placement::uniform) {
        // Near-equal contiguous stacks; the remainder goes to the earliest.
        const int base = num_layers / num_stacks, rem = num_layers % num_stacks;
        int at = 0;
        for (int q = 0; q < num_stacks; ++q) {
            const int len = base + (q < rem ? 1 : 0);
            plan.stacks.push_back({at, at + len});
            at += len;
        }
        plan.tail = {num_layers, num_layers};
        return plan;
    }
    const int half = (num_layers + 1) / 2;
    require(num_stacks <= half,
            "plan_stacks: " + std::string(to_string(placement)) + " placement fits at most " +
                std::to_string(half) + " interaction points in " + std::to_string(num_layers) + " layers");
    int span_begin = 0;  // 0-based first layer of the chosen half
    if (placement == Placement::deep) span_begin = num_layers - half;
    if (placement == Placement::intermediate) span_begin = (num_layers - half) / 2;
    int prev = 0;
    for (int q = 0; q < num_stacks; ++q) {
        // Evenly spaced interaction points inside the span.
        const int boundary = span_begin + ((q + 1) * half + num_stacks - 1) / num_stacks;
        require(boundary > prev, "plan_stacks: degenerate empty stack");
        plan.stacks.push_back({prev, boundary});
        prev = boundary;
    }
    plan.tail = {prev, num_layers};
    return plan;
}

struct ExpertConfig {
    int expert_id = 0;
    int num_layers = 4;
    int hidden_dim = 64;
    int num_heads = 4;
    int vocab_size = 32;
    int max_seq_len = 64;
    double mlp_ratio = 4.0;
};

// Additive causal mask: query row i (absolute position offset+i) may attend
// to key columns j <= offset+i.
inline Tensor causal_mask(int n_queries, int n_keys, int offset) {
    const double ninf = -std::numeric_limits<double>::infinity();
    std::vector<double> m(static_cast<size_t>(n_queries) * n_keys, 0.0);
    for (int i = 0; i < n_queries; ++i)
        for (int j = 0; j < n_keys; ++j)
            if (j > offset + i) m[static_cast<size_t>(i) * n_keys + j] = ninf;
    return Tensor::from_data({n_queries, n_keys}, std::move(m));
}

struct LayerKV {
    Tensor keys, vals;  // [cached_len, dim]
    int length() const { return keys.defined() ? keys.dim(0) : 0; }
};

struct BackboneKVCache {
    std::vector<LayerKV> layers;
};

// Pre-norm block: x += Attn(LN(x)); x += MLP(LN(x)). Used both causally
// (expert backbones) and bidirectionally (the frozen prompt encoder).
struct TransformerBlock {
    Tensor ln1_gain, ln1_bias, ln2_gain, ln2_bias;
    Tensor attn_query_w, attn_query_b, attn_key_w, attn_key_b;
    Tensor attn_value_w, attn_value_b, attn_out_w, attn_out_b;
    Tensor mlp_in_w, mlp_in_b, mlp_out_w, mlp_out_b;

    static TransformerBlock init(int dim, int mlp_dim, Rng& rng, double stddev = 0.08) {
        TransformerBlock b;
        b.ln1_gain = Tensor::full({dim}, 1.0, true);
        b.ln1_bias = Tensor::zeros({dim}, true);
        b.ln2_gain = Tensor::full({dim}, 1.0, true);
        b.ln2_bias = Tensor::zeros({dim}, true);
        b.attn_query_w = randn_init({dim, dim}, rng, stddev);
        b.attn_query_b = Tensor::zeros({dim}, true);
        b.attn_key_w = randn_init({dim, dim}, rng, stddev);
        b.attn_key_b = Tensor::zeros({dim}, true);
        b.attn_value_w = randn_init({dim, dim}, rng, stddev);
        b.attn_value_b = Tensor::zeros({dim}, true);
        b.attn_out_w = randn_init({dim, dim}, rng, stddev);
        b.attn_out_b = Tensor::zeros({dim}, true);
        b.mlp_in_w = randn_init({dim, mlp_dim}, rng, stddev);
        b.mlp_in_b = Tensor::zeros({mlp_dim}, true);
        b.mlp_out_w = randn_init({mlp_dim, dim}, rng, stddev);
        b.mlp_out_b = Tensor::zeros({dim}, true);
        return b;
    }

    // `cache == nullptr` runs the block uncached (requires pos_offset == 0).
    Tensor forward(const Tensor& x, int heads, LayerKV* cache, int pos_offset, bool causal) const {
        const int dim = x.dim(1);
        const int head_dim = dim / heads;
        Tensor xn = layer_norm(x, ln1_gain, ln1_bias, 1e-5);
        Tensor q = add_rowwise(matmul(xn, attn_query_w), attn_query_b);
        Tensor k = add_rowwise(matmul(xn, attn_key_w), attn_key_b);
        Tensor v = add_rowwise(matmul(xn, attn_value_w), attn_value_b);
        if (cache) {
            require(cache->length() == pos_offset,
                    "backbone cache holds " + std::to_string(cache->length()) +
                        " positions but forward starts at " + std::to_string(pos_offset));
            if (cache->keys.defined()) {
                k = concat({cache->keys, k}, 0);
                v = concat({cache->vals, v}, 0);
            }
            cache->keys = k;
            cache->vals = v;
        } else {
            require(pos_offset == 0, "uncached block forward must start at position 0");
        }
        Tensor qh = split_heads(q, heads);
        Tensor kh = split_heads(k, heads);
        Tensor vh = split_heads(v, heads);
        Tensor scores = scale(matmul(qh, transpose_last(kh)), 1.0 / std::sqrt(static_cast<double>(head_dim)));
        Tensor probs;
        if (causal) {
            Tensor mask = causal_mask(x.dim(0), k.dim(0), pos_offset);
            probs = softmax_last(scores, &mask);
        } else {
            probs = softmax_last(scores);
        }
        Tensor ctx = merge_heads(matmul(probs, vh));
        Tensor y = add(x, add_rowwise(matmul(ctx, attn_out_w), attn_out_b));
        Tensor yn = layer_norm(y, ln2_gain, ln2_bias, 1e-5);
        Tensor h = add_rowwise(matmul(yn, mlp_in_w), mlp_in_b);
        return add(y, add_rowwise(matmul(gelu(h), mlp_out_w), mlp_out_b));
    }

    void collect(std::vector<std::pair<std::string, Tensor>>& out, const std::string& prefix) const {
        out.emplace_back(prefix + "ln1_gain", ln1_gain);
        out.emplace_back(prefix + "ln1_bias", ln1_bias);
        out.emplace_back(prefix + "ln2_gain", ln2_gain);
        out.emplace_back(prefix + "ln2_bias", ln2_bias);
        out.emplace_back(prefix + "attn_query_w", attn_query_w);
        out.emplace_back(prefix + "attn_query_b", attn_query_b);
        out.emplace_back(prefix + "attn_key_w", attn_key_w);
        out.emplace_back(prefix + "attn_key_b", attn_key_b);
        out.emplace_back(prefix + "attn_value_w", attn_value_w);
        out.emplace_back(prefix + "attn_value_b", attn_value_b);
        out.emplace_back(prefix + "attn_out_w", attn_out_w);
        out.emplace_back(prefix + "attn_out_b", attn_out_b);
        out.emplace_back(prefix + "mlp_in_w", mlp_in_w);
        out.emplace_back(prefix + "mlp_in_b", mlp_in_b);
        out.emplace_back(prefix + "mlp_out_w", mlp_out_w);
        out.emplace_back(prefix + "mlp_out_b", mlp_out_b);
    }
};

class ExpertBackbone {
public:
    ExpertConfig config;
    Tensor token_embedding;     // [V, d]
    Tensor position_embedding;  // [N_max, d]
    std::vector<TransformerBlock> blocks;
    Tensor final_gain, final_bias;
    Tensor head;  // [d, V], bias-free
    bool frozen = false;

    static ExpertBackbone init(const ExpertConfig& cfg, uint64_t seed) {
        require(cfg.hidden_dim % cfg.num_heads == 0,
                "expert " + std::to_string(cfg.expert_id) + ": hidden_dim " +
                    std::to_string(cfg.hidden_dim) + " not divisible by heads " +
                    std::to_string(cfg.num_heads));
        require(cfg.num_layers >= 1 && cfg.vocab_size >= 2 && cfg.max_seq_len >= 1,
                "expert config out of range");
        ExpertBackbone e;
        e.config = cfg;
        Rng rng(seed);
        e.token_embedding = randn_init({cfg.vocab_size, cfg.hidden_dim}, rng, 0.05);
        e.position_embedding = randn_init({cfg.max_seq_len, cfg.hidden_dim}, rng, 0.05);
        const int mlp_dim = static_cast<int>(cfg.hidden_dim * cfg.mlp_ratio);
        for (int l = 0; l < cfg.num_layers; ++l)
            e.blocks.push_back(TransformerBlock::init(cfg.hidden_dim, mlp_dim, rng));
        e.final_gain = Tensor::full({cfg.hidden_dim}, 1.0, true);
        e.final_bias = Tensor::zeros({cfg.hidden_dim}, true);
        e.head = randn_init({cfg.hidden_dim, cfg.vocab_size}, rng, 0.05);
        return e;
    }

    BackboneKVCache make_cache() const {
        BackboneKVCache c;
        c.layers.resize(blocks.size());
        return c;
    }

    // Token + position embeddings for new tokens starting at pos_offset.
    Tensor embed(const std::vector<int>& tokens, int pos_offset = 0) const {
        require(pos_offset >= 0 &&
                    pos_offset + static_cast<int>(tokens.size()) <= config.max_seq_len,
                "sequence overflows max_seq_len " + std::to_string(config.max_seq_len));
        std::vector<int> positions(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) positions[i] = pos_offset + static_cast<int>(i);
        return add(embedding(token_embedding, tokens), embedding(position_embedding, positions));
    }

    // Advance hidden states through the layers of one stack, extending the
    // per-layer KV cache. Position bookkeeping is validated per layer.
    Tensor forward_stack(Tensor h, const LayerRange& range, BackboneKVCache* cache, int pos_offset) const {
        for (int l = range.begin; l < range.end; ++l)
            h = blocks[static_cast<size_t>(l)].forward(
                h, config.num_heads, cache ? &cache->layers[static_cast<size_t>(l)] : nullptr,
                pos_offset, /*causal=*/true);
        return h;
    }

    Tensor final_norm(const Tensor& h) const { return layer_norm(h, final_gain, final_bias, 1e-5); }

    Tensor lm_head(const Tensor& h) const { return matmul(h, head); }

    // Whole-backbone uncached pass (used standalone, without interaction).
    Tensor full_forward(const std::vector<int>& tokens) const {
        Tensor h = embed(tokens, 0);
        h = forward_stack(h, {0, config.num_layers}, nullptr, 0);
        return lm_head(final_norm(h));
    }

    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back(prefix + "token_embedding", token_embedding);
        out.emplace_back(prefix + "position_embedding", position_embedding);
        for (size_t l = 0; l < blocks.size(); ++l)
            blocks[l].collect(out, prefix + "block" + std::to_string(l) + "/");
        out.emplace_back(prefix + "final_gain", final_gain);
        out.emplace_back(prefix + "final_bias", final_bias);
        out.emplace_back(prefix + "head", head);
        return out;
    }

    void freeze() {
        for (auto& [name, t] : parameters("")) t.set_requires_grad(false);
        frozen = true;
    }

    uint64_t weights_hash() const {
        uint64_t h = 1469598103934665603ull;  // FNV-1a
        for (const auto& [name, t] : parameters("")) {
            for (double v : t.values()) {
                uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                for (int i = 0; i < 8; ++i) {
                    h ^= (bits >> (8 * i)) & 0xff;
                    h *= 1099511628211ull;
                }
            }
        }
        return h;
    }
};

// Greedy generation with the backbone alone; the zero-interaction reduction
// of the full system must match this token for token.
inline std::vector<int> backbone_generate(const ExpertBackbone& e, const std::vector<int>& prompt,
                                          int max_new_tokens, int eos_id) {
    require(!prompt.empty(), "backbone_generate: empty prompt");
    std::vector<int> out;
    BackboneKVCache cache = e.make_cache();
    Tensor h = e.embed(prompt, 0);
    h = e.forward_stack(h, {0, e.config.num_layers}, &cache, 0);
    Tensor logits = e.lm_head(e.final_norm(h));
    int token = argmax_row(logits, logits.dim(0) - 1);
    out.push_back(token);
    int pos = static_cast<int>(prompt.size());
    while (token != eos_id && static_cast<int>(out.size()) < max_new_tokens &&
           pos < e.config.max_seq_len) {
        Tensor hh = e.embed({token}, pos);
        hh = e.forward_stack(hh, {0, e.config.num_layers}, &cache, pos);
        Tensor lg = e.lm_head(e.final_norm(hh));
        token = argmax_row(lg, 0);
        out.push_back(token);
        ++pos;
    }
    return out;
}

}  // namespace crossmix
