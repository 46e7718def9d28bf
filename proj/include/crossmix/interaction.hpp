// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Latent collaboration at stack boundaries. Every active expert projects
// its hidden states into a shared width; only the primary expert runs
// cross-attention over the concatenated per-expert key/value blocks under
// a block-causal mask, and every active expert folds a reverse-projected
// residual back into its own stream. Projectors and attention maps are
// bias-free so the parameter accounting stays weight-only exact.
#pragma once

#include "crossmix/router.hpp"

namespace crossmix {

struct InteractionConfig {
    int shared_dim = 32;  // width of the shared latent space
    int heads = 4;
    double dropout = 0.0;        // attention dropout, training only
    bool per_head_scale = true;  // false: literal 1/sqrt(shared_dim)
    bool use_cross_attention = true;
};

// One expert's slice of the shared key/value history at one interaction
// layer. Padding marks positions contributed by dead experts (or beyond an
// expert's real stream during replay); padded entries are zero and masked.
struct InteractionBlockCache {
    Tensor keys, vals;  // [len, shared_dim]
    std::vector<uint8_t> padding;

    int length() const { return keys.defined() ? keys.dim(0) : 0; }

    void append(const Tensor& k, const Tensor& v, const std::vector<uint8_t>& pad) {
        require(k.dim(0) == v.dim(0) && static_cast<size_t>(k.dim(0)) == pad.size(),
                "interaction cache: k/v/pad length mismatch");
        keys = keys.defined() ? concat({keys, k}, 0) : k;
        vals = vals.defined() ? concat({vals, v}, 0) : v;
        padding.insert(padding.end(), pad.begin(), pad.end());
    }
};

struct InteractionKVCache {
    std::vector<std::vector<InteractionBlockCache>> layers;  // [stack][active slot]

    static InteractionKVCache make(int num_stacks, int num_slots) {
        InteractionKVCache c;
        c.layers.assign(static_cast<size_t>(num_stacks),
                        std::vector<InteractionBlockCache>(static_cast<size_t>(num_slots)));
        return c;
    }
};

struct BlockView {
    int length = 0;
    std::vector<uint8_t> padding;  // empty means no padded positions
};

// Additive mask of shape [n_queries, sum(block lengths)]. The query at
// absolute position query_offset + i may attend, inside every block, to
// that block's positions <= query_offset + i; later positions and padded
// positions get -inf.
inline Tensor build_block_causal_mask(int n_queries, const std::vector<BlockView>& blocks,
                                      int query_offset) {
    require(n_queries >= 1 && query_offset >= 0, "block mask: bad query range");
    require(!blocks.empty(), "block mask: no blocks");
    const double ninf = -std::numeric_limits<double>::infinity();
    int total = 0;
    for (const auto& b : blocks) {
        require(b.padding.empty() || static_cast<int>(b.padding.size()) == b.length,
                "block mask: padding flags do not cover the block");
        require(b.length >= query_offset + n_queries,
                "block mask: block of length " + std::to_string(b.length) +
                    " cannot serve queries up to position " +
                    std::to_string(query_offset + n_queries - 1) + " without padding flags");
        total += b.length;
    }
    std::vector<double> m(static_cast<size_t>(n_queries) * total, ninf);
    for (int i = 0; i < n_queries; ++i) {
        const int visible = query_offset + i;
        int col = 0;
        for (const auto& b : blocks) {
            for (int p = 0; p < b.length; ++p, ++col) {
                if (p > visible) continue;
                if (!b.padding.empty() && b.padding[static_cast<size_t>(p)]) continue;
                m[static_cast<size_t>(i) * total + col] = 0.0;
            }
        }
    }
    return Tensor::from_data({n_queries, total}, std::move(m));
}

class InteractionLayer {
public:
    int layer_index = 0;
    std::vector<Tensor> forward_proj;  // per expert [d_m, shared]
    std::vector<Tensor> reverse_proj;  // per expert [shared, d_m]
    Tensor w_query, w_key, w_value, w_out;  // [shared, shared] when cross-attention is on

    static InteractionLayer init(const std::vector<int>& expert_dims, int layer_index,
                                 const InteractionConfig& cfg, Rng& rng) {
        require(cfg.shared_dim % cfg.heads == 0,
                "interaction: shared_dim " + std::to_string(cfg.shared_dim) +
                    " not divisible by heads " + std::to_string(cfg.heads));
        InteractionLayer l;
        l.layer_index = layer_index;
        for (int d : expert_dims) {
            l.forward_proj.push_back(randn_init({d, cfg.shared_dim}, rng, 0.08));
            // Reverse projectors start at zero: a freshly assembled system
            // behaves exactly like the routed standalone primary until the
            // adapters move off the origin.
            l.reverse_proj.push_back(Tensor::zeros({cfg.shared_dim, d}, true));
        }
        if (cfg.use_cross_attention) {
            l.w_query = randn_init({cfg.shared_dim, cfg.shared_dim}, rng, 0.08);
            l.w_key = randn_init({cfg.shared_dim, cfg.shared_dim}, rng, 0.08);
            l.w_value = randn_init({cfg.shared_dim, cfg.shared_dim}, rng, 0.08);
            l.w_out = randn_init({cfg.shared_dim, cfg.shared_dim}, rng, 0.08);
        }
        return l;
    }

    Tensor project_forward(const Tensor& hidden, int expert) const {
        return matmul(hidden, forward_proj[static_cast<size_t>(expert)]);
    }

    // Multi-head cross-attention of the primary's projected states over the
    // concatenated per-expert blocks (which include the primary's own).
    Tensor primary_cross_attend(const Tensor& query_latent,
                                const std::vector<InteractionBlockCache>& blocks,
                                const Tensor& mask, const InteractionConfig& cfg,
                                bool training, Rng* rng) const {
        require(w_query.defined(), "cross-attention weights absent in this configuration");
        std::vector<Tensor> ks, vs;
        for (const auto& b : blocks) {
            require(b.keys.defined(), "cross-attention: empty key/value block");
            ks.push_back(b.keys);
            vs.push_back(b.vals);
        }
        Tensor q = matmul(query_latent, w_query);
        Tensor k = concat(ks, 0);
        Tensor v = concat(vs, 0);
        const int head_dim = cfg.shared_dim / cfg.heads;
        const double denom = cfg.per_head_scale ? std::sqrt(static_cast<double>(head_dim))
                                                : std::sqrt(static_cast<double>(cfg.shared_dim));
        Tensor qh = split_heads(q, cfg.heads);
        Tensor kh = split_heads(k, cfg.heads);
        Tensor vh = split_heads(v, cfg.heads);
        Tensor scores = scale(matmul(qh, transpose_last(kh)), 1.0 / denom);
        Tensor probs = softmax_last(scores, &mask);
        if (training && cfg.dropout > 0.0) {
            require(rng != nullptr, "dropout requires an rng");
            probs = dropout(probs, cfg.dropout, *rng);
        }
        Tensor ctx = merge_heads(matmul(probs, vh));
        return matmul(ctx, w_out);
    }

    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (size_t m = 0; m < forward_proj.size(); ++m) {
            out.emplace_back(prefix + "expert" + std::to_string(m) + "/forward_proj", forward_proj[m]);
            out.emplace_back(prefix + "expert" + std::to_string(m) + "/reverse_proj", reverse_proj[m]);
        }
        if (w_query.defined()) {
            out.emplace_back(prefix + "attn_query_w", w_query);
            out.emplace_back(prefix + "attn_key_w", w_key);
            out.emplace_back(prefix + "attn_value_w", w_value);
            out.emplace_back(prefix + "attn_out_w", w_out);
        }
        return out;
    }

    size_t weight_count() const {
        size_t n = 0;
        for (const auto& [name, t] : parameters("")) n += t.size();
        return n;
    }
};

// Context for one synchronized pass through an interaction layer.
struct InteractionContext {
    const RoutingDecision* decision = nullptr;
    int total_rows = 0;    // key/value rows appended per slot in this call
    int query_offset = 0;  // absolute position of the primary's first query
    bool training = false; // straight-through scaling + dropout only when training
    Rng* rng = nullptr;
};

// One interaction step: project, extend the shared cache (zero-padding
// absent experts so block lengths stay aligned), cross-attend for the
// primary, residual-update every present expert. `hiddens` is indexed by
// active slot; an undefined entry means that expert is dead this step.
inline void apply_interaction(const InteractionLayer& layer, const InteractionConfig& cfg,
                              std::vector<Tensor>& hiddens,
                              std::vector<InteractionBlockCache>& cache_blocks,
                              const InteractionContext& ctx) {
    const auto& d = *ctx.decision;
    require(hiddens.size() == d.active.size(),
            "apply_interaction: hidden for every active expert required (" +
                std::to_string(hiddens.size()) + " given, " + std::to_string(d.active.size()) +
                " active)");
    require(cache_blocks.size() == d.active.size(), "apply_interaction: cache slot mismatch");

    const int primary_slot = d.slot_of(d.primary);
    require(hiddens[static_cast<size_t>(primary_slot)].defined(),
            "apply_interaction: primary expert has no hidden state");

    // Project and extend every slot's block, padding to total_rows. During
    // training each expert's projected contribution is scaled by its
    // straight-through weight (value exactly 1, gradient the soft score):
    // everything the expert feeds into the collaboration — its key/value
    // block and its reverse-projected residual — carries the router's
    // selection gradient.
    std::vector<Tensor> latents(hiddens.size());
    for (size_t slot = 0; slot < hiddens.size(); ++slot) {
        const int expert = d.active[slot];
        const int n_real = hiddens[slot].defined() ? hiddens[slot].dim(0) : 0;
        require(n_real <= ctx.total_rows, "apply_interaction: slot exceeds row budget");
        if (n_real > 0) {
            latents[slot] = layer.project_forward(hiddens[slot], expert);
            if (ctx.training)
                latents[slot] = mul_scalar(latents[slot], straight_through_weight(d, expert));
        }
        if (!cfg.use_cross_attention) continue;
        std::vector<uint8_t> pad(static_cast<size_t>(ctx.total_rows), 0);
        for (int i = n_real; i < ctx.total_rows; ++i) pad[static_cast<size_t>(i)] = 1;
        Tensor k, v;
        if (n_real == ctx.total_rows) {
            k = matmul(latents[slot], layer.w_key);
            v = matmul(latents[slot], layer.w_value);
        } else if (n_real == 0) {
            k = Tensor::zeros({ctx.total_rows, cfg.shared_dim});
            v = Tensor::zeros({ctx.total_rows, cfg.shared_dim});
        } else {
            Tensor zk = matmul(latents[slot], layer.w_key);
            Tensor zv = matmul(latents[slot], layer.w_value);
            Tensor fill = Tensor::zeros({ctx.total_rows - n_real, cfg.shared_dim});
            k = concat({zk, fill}, 0);
            v = concat({zv, fill}, 0);
        }
        cache_blocks[slot].append(k, v, pad);
    }

    // Primary residual: cross-attention output (or plain pass-through when
    // the attention module is ablated away).
    Tensor primary_residual;
    if (cfg.use_cross_attention) {
        std::vector<BlockView> views;
        for (const auto& b : cache_blocks) views.push_back({b.length(), b.padding});
        Tensor mask = build_block_causal_mask(hiddens[static_cast<size_t>(primary_slot)].dim(0),
                                              views, ctx.query_offset);
        Tensor o = layer.primary_cross_attend(latents[static_cast<size_t>(primary_slot)],
                                              cache_blocks, mask, cfg, ctx.training, ctx.rng);
        primary_residual = matmul(o, layer.reverse_proj[static_cast<size_t>(d.primary)]);
    } else {
        primary_residual = matmul(latents[static_cast<size_t>(primary_slot)],
                                  layer.reverse_proj[static_cast<size_t>(d.primary)]);
    }

    for (size_t slot = 0; slot < hiddens.size(); ++slot) {
        if (!hiddens[slot].defined()) continue;
        const int expert = d.active[slot];
        Tensor residual =
            static_cast<int>(slot) == primary_slot
                ? primary_residual
                : matmul(latents[slot], layer.reverse_proj[static_cast<size_t>(expert)]);
        hiddens[slot] = add(hiddens[slot], residual);
    }
}

}  // namespace crossmix
