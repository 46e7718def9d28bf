// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// The assembled system: a pool of frozen backbones, the frozen prompt
// encoder, the trainable router, and one interaction layer per stack
// boundary. joint_forward is the single walk shared by training (whole
// teacher-forced sequences, fresh caches) and inference (incremental with
// persistent caches): per-expert streams advance stack by stack and
// synchronize at every interaction layer.
#pragma once

#include "crossmix/interaction.hpp"

namespace crossmix {

struct ModelConfig {
    int num_stacks = 2;        // interaction layers / stacks per expert
    int shared_dim = 32;
    int heads = 4;
    int top_k = 2;
    double temperature = 1.0;
    double dropout = 0.1;      // interaction attention dropout, training only
    Placement placement = Placement::uniform;
    bool per_head_scale = true;
    bool use_cross_attention = true;
};

class Model {
public:
    std::vector<ExpertBackbone> experts;
    PromptEncoder encoder;
    Router router;
    RouterConfig router_config;
    ModelConfig config;
    std::vector<InteractionLayer> interactions;
    std::vector<StackPlan> plans;

    InteractionConfig interaction_config() const {
        return {config.shared_dim, config.heads, config.dropout, config.per_head_scale,
                config.use_cross_attention};
    }

    static Model assemble(std::vector<ExpertBackbone> pool, PromptEncoder enc,
                          const ModelConfig& cfg, const RouterConfig& rcfg, uint64_t seed) {
        require(!pool.empty(), "assemble: empty expert pool");
        require(rcfg.num_experts == static_cast<int>(pool.size()),
                "assemble: router sized for " + std::to_string(rcfg.num_experts) + " experts, pool has " +
                    std::to_string(pool.size()));
        require(rcfg.encoder_dim == enc.config.dim, "assemble: router/encoder dim mismatch");
        const int vocab = pool[0].config.vocab_size;
        for (const auto& e : pool)
            require(e.config.vocab_size == vocab, "assemble: experts must share the vocabulary");
        Model m;
        m.experts = std::move(pool);
        m.encoder = std::move(enc);
        m.router_config = rcfg;
        m.config = cfg;
        Rng rng(seed);
        m.router = Router::init(rcfg, rng.next_u64());
        std::vector<int> dims;
        for (const auto& e : m.experts) dims.push_back(e.config.hidden_dim);
        const InteractionConfig icfg = m.interaction_config();
        for (int q = 0; q < cfg.num_stacks; ++q)
            m.interactions.push_back(InteractionLayer::init(dims, q, icfg, rng));
        for (const auto& e : m.experts)
            m.plans.push_back(plan_stacks(e.config.num_layers, cfg.num_stacks, cfg.placement));
        return m;
    }

    int num_experts() const { return static_cast<int>(experts.size()); }
    int vocab_size() const { return experts[0].config.vocab_size; }

    RoutingDecision route(const std::vector<int>& prompt, const std::vector<double>* gumbel,
                          const std::set<int>* dead = nullptr) const {
        Tensor z = encoder.encode(prompt);
        Tensor s = router.score(z);
        return select_topk(s, config.top_k, gumbel, config.temperature, dead);
    }

    // Trainable surface: router/ and interaction/ prefixes only.
    std::vector<std::pair<std::string, Tensor>> trainable_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out = router.parameters("router/");
        for (size_t q = 0; q < interactions.size(); ++q) {
            auto ps = interactions[q].parameters("interaction/layer" + std::to_string(q) + "/");
            out.insert(out.end(), ps.begin(), ps.end());
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> all_parameters() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (size_t m = 0; m < experts.size(); ++m) {
            auto ps = experts[m].parameters("expert" + std::to_string(m) + "/");
            out.insert(out.end(), ps.begin(), ps.end());
        }
        auto enc = encoder.parameters("encoder/");
        out.insert(out.end(), enc.begin(), enc.end());
        auto t = trainable_parameters();
        out.insert(out.end(), t.begin(), t.end());
        return out;
    }

    void zero_interaction_weights() {
        for (auto& layer : interactions)
            for (auto& [name, t] : layer.parameters(""))
                std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
    }

    // One expert's contribution to a synchronized pass: the tokens it
    // consumes this call and the absolute position of the first one. An
    // empty stream marks a dead slot (zero-padded in the shared cache).
    struct SlotStream {
        std::vector<int> tokens;
        int start_pos = 0;
    };

    // Advance all active experts by `total_rows` positions. Every slot's
    // interaction block grows by exactly total_rows entries (real rows
    // first, zero padding after), so block lengths stay aligned across the
    // pool. Returns per-slot logits ([n_slot, V]; undefined for dead slots).
    std::vector<Tensor> joint_forward(const RoutingDecision& decision,
                                      const std::vector<SlotStream>& streams,
                                      std::vector<BackboneKVCache*> bb_caches,
                                      InteractionKVCache& icache, int total_rows,
                                      bool training = false, Rng* rng = nullptr) const {
        const size_t slots = decision.active.size();
        require(streams.size() == slots && bb_caches.size() == slots,
                "joint_forward: one stream and cache per active expert required");
        require(static_cast<int>(icache.layers.size()) == config.num_stacks,
                "joint_forward: interaction cache sized for a different stack count");
        const int primary_slot = decision.slot_of(decision.primary);
        require(static_cast<int>(streams[static_cast<size_t>(primary_slot)].tokens.size()) == total_rows,
                "joint_forward: primary stream must cover every row of the step");

        std::vector<Tensor> hiddens(slots);
        for (size_t slot = 0; slot < slots; ++slot) {
            if (streams[slot].tokens.empty()) continue;
            require(bb_caches[slot] != nullptr, "joint_forward: live slot without backbone cache");
            hiddens[slot] = experts[static_cast<size_t>(decision.active[slot])].embed(
                streams[slot].tokens, streams[slot].start_pos);
        }

        const InteractionConfig icfg = interaction_config();
        InteractionContext ctx;
        ctx.decision = &decision;
        ctx.total_rows = total_rows;
        ctx.query_offset = streams[static_cast<size_t>(primary_slot)].start_pos;
        ctx.training = training;
        ctx.rng = rng;

        for (int q = 0; q < config.num_stacks; ++q) {
            for (size_t slot = 0; slot < slots; ++slot) {
                if (!hiddens[slot].defined()) continue;
                const int expert = decision.active[slot];
                hiddens[slot] = experts[static_cast<size_t>(expert)].forward_stack(
                    hiddens[slot], plans[static_cast<size_t>(expert)].stacks[static_cast<size_t>(q)],
                    bb_caches[slot], streams[slot].start_pos);
            }
            apply_interaction(interactions[static_cast<size_t>(q)], icfg, hiddens,
                              icache.layers[static_cast<size_t>(q)], ctx);
        }

        std::vector<Tensor> logits(slots);
        for (size_t slot = 0; slot < slots; ++slot) {
            if (!hiddens[slot].defined()) continue;
            const int expert = decision.active[slot];
            const auto& e = experts[static_cast<size_t>(expert)];
            Tensor h = e.forward_stack(hiddens[slot], plans[static_cast<size_t>(expert)].tail,
                                       bb_caches[slot], streams[slot].start_pos);
            logits[slot] = e.lm_head(e.final_norm(h));
        }
        return logits;
    }
};

}  // namespace crossmix
