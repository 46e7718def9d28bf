// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "crossmix/model.hpp"

namespace crossmix::testing {

// Fill the (zero-initialized) reverse projectors with random values so unit
// tests exercise dense gradient paths through every interaction tensor.
inline void randomize_interaction(Model& model, uint64_t seed) {
    Rng rng(seed);
    for (auto& layer : model.interactions)
        for (auto& t : layer.reverse_proj)
            for (auto& v : t.mutable_values()) v = rng.normal(0.0, 0.08);
}

// Small heterogeneous frozen pool + assembled model for unit tests.
inline Model mini_model(int num_experts = 2, int top_k = 2, int num_stacks = 2, int shared_dim = 8,
                        uint64_t seed = 100, double dropout = 0.0,
                        bool use_cross_attention = true,
                        Placement placement = Placement::uniform) {
    const int vocab = 11, max_seq = 32;
    std::vector<int> layer_counts = {2, 3, 2, 3, 2, 3, 2};
    std::vector<int> dims = {8, 12, 16, 8, 12, 16, 8};
    std::vector<ExpertBackbone> pool;
    for (int m = 0; m < num_experts; ++m) {
        ExpertConfig cfg;
        cfg.expert_id = m;
        cfg.num_layers = layer_counts[static_cast<size_t>(m)];
        cfg.hidden_dim = dims[static_cast<size_t>(m)];
        cfg.num_heads = 2;
        cfg.vocab_size = vocab;
        cfg.max_seq_len = max_seq;
        cfg.mlp_ratio = 2.0;
        auto e = ExpertBackbone::init(cfg, seed + static_cast<uint64_t>(m));
        e.freeze();
        pool.push_back(std::move(e));
    }
    EncoderConfig ecfg;
    ecfg.dim = 12;
    ecfg.layers = 1;
    ecfg.heads = 2;
    ecfg.vocab_size = vocab;
    ecfg.max_seq_len = max_seq;
    ecfg.seed = seed + 50;
    RouterConfig rcfg;
    rcfg.encoder_dim = 12;
    rcfg.hidden_dim = 6;
    rcfg.num_experts = num_experts;
    rcfg.top_k = top_k;
    ModelConfig mcfg;
    mcfg.num_stacks = num_stacks;
    mcfg.shared_dim = shared_dim;
    mcfg.heads = 2;
    mcfg.top_k = top_k;
    mcfg.dropout = dropout;
    mcfg.placement = placement;
    mcfg.use_cross_attention = use_cross_attention;
    Model m = Model::assemble(std::move(pool), PromptEncoder::init(ecfg), mcfg, rcfg, seed + 99);
    randomize_interaction(m, seed + 123);
    return m;
}

}  // namespace crossmix::testing
