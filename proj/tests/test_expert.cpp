// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include "crossmix/expert.hpp"

using namespace crossmix;

namespace {

std::vector<int> stack_sizes(const StackPlan& p) {
    std::vector<int> s;
    for (auto& r : p.stacks) s.push_back(r.size());
    return s;
}

ExpertBackbone tiny_expert(uint64_t seed, int layers = 3, int dim = 16, int heads = 2) {
    ExpertConfig cfg;
    cfg.num_layers = layers;
    cfg.hidden_dim = dim;
    cfg.num_heads = heads;
    cfg.vocab_size = 13;
    cfg.max_seq_len = 24;
    cfg.mlp_ratio = 2.0;
    return ExpertBackbone::init(cfg, seed);
}

void zero_all(ExpertBackbone& e) {
    for (auto& [name, t] : e.parameters(""))
        std::fill(t.mutable_values().begin(), t.mutable_values().end(), 0.0);
}

}  // namespace

TEST_CASE("plan_stacks uniform splits") {
    REQUIRE(stack_sizes(plan_stacks(8, 4, Placement::uniform)) == std::vector<int>{2, 2, 2, 2});
    REQUIRE(stack_sizes(plan_stacks(7, 4, Placement::uniform)) == std::vector<int>{2, 2, 2, 1});
    auto p = plan_stacks(8, 4, Placement::uniform);
    REQUIRE(p.tail.size() == 0);
    // covers all layers exactly once
    int at = 0;
    for (auto& r : p.stacks) {
        REQUIRE(r.begin == at);
        at = r.end;
    }
    REQUIRE(at == 8);
}

TEST_CASE("plan_stacks placement policies") {
    auto deep = plan_stacks(8, 4, Placement::deep);
    std::vector<int> ends;
    for (auto& r : deep.stacks) ends.push_back(r.end);
    REQUIRE(ends == std::vector<int>{5, 6, 7, 8});  // points after layers 5,6,7,8
    REQUIRE(deep.tail.size() == 0);

    auto shallow = plan_stacks(8, 4, Placement::shallow);
    ends.clear();
    for (auto& r : shallow.stacks) ends.push_back(r.end);
    REQUIRE(ends == std::vector<int>{1, 2, 3, 4});
    REQUIRE(shallow.tail.begin == 4);
    REQUIRE(shallow.tail.end == 8);

    auto mid = plan_stacks(8, 4, Placement::intermediate);
    ends.clear();
    for (auto& r : mid.stacks) ends.push_back(r.end);
    REQUIRE(ends == std::vector<int>{3, 4, 5, 6});

    REQUIRE_THROWS_AS(plan_stacks(3, 4, Placement::uniform), std::invalid_argument);
    REQUIRE_THROWS_AS(plan_stacks(6, 4, Placement::deep), std::invalid_argument);
    REQUIRE_THROWS_AS(plan_stacks(5, 0, Placement::uniform), std::invalid_argument);
}

TEST_CASE("embed edge cases") {
    auto e = tiny_expert(1);
    auto empty = e.embed({}, 0);
    REQUIRE(empty.shape() == Shape{0, 16});

    ExpertBackbone z = tiny_expert(2);
    zero_all(z);
    auto row = z.embed({5}, 0);
    for (double v : row.values()) REQUIRE(v == 0.0);

    REQUIRE_THROWS_AS(e.embed(std::vector<int>(25, 1), 0), std::invalid_argument);
    REQUIRE_THROWS_AS(e.embed({13}, 0), std::invalid_argument);
}

TEST_CASE("identity-like embedding and head recover the token") {
    ExpertConfig cfg;
    cfg.num_layers = 1;
    cfg.hidden_dim = 13;
    cfg.num_heads = 1;
    cfg.vocab_size = 13;
    cfg.max_seq_len = 8;
    auto e = ExpertBackbone::init(cfg, 3);
    zero_all(e);
    // one-hot embeddings, transposed-identity head, zero-weight blocks
    for (int v = 0; v < 13; ++v) e.token_embedding.mutable_values()[v * 13 + v] = 1.0;
    for (int v = 0; v < 13; ++v) e.head.mutable_values()[v * 13 + v] = 1.0;
    std::fill(e.final_gain.mutable_values().begin(), e.final_gain.mutable_values().end(), 1.0);
    for (int tok : {0, 4, 12}) {
        auto logits = e.full_forward({tok});
        REQUIRE(argmax_row(logits, 0) == tok);
    }
}

TEST_CASE("zero-weight block is identity on the residual stream") {
    auto e = tiny_expert(4, 1);
    zero_all(e);
    std::fill(e.final_gain.mutable_values().begin(), e.final_gain.mutable_values().end(), 1.0);
    Rng rng(5);
    auto h = randn_init({1, 16}, rng, 1.0, false);
    auto cache = e.make_cache();
    auto out = e.forward_stack(h, {0, 1}, &cache, 0);
    REQUIRE(out.values() == h.values());
}

TEST_CASE("KV-cached incremental forward equals full recompute") {
    auto e = tiny_expert(6, 3);
    std::vector<int> tokens = {3, 1, 4, 1, 5, 9, 2, 6};

    auto full_cache = e.make_cache();
    Tensor h_full = e.embed(tokens, 0);
    h_full = e.forward_stack(h_full, {0, 3}, &full_cache, 0);
    Tensor full = e.lm_head(e.final_norm(h_full));

    auto inc_cache = e.make_cache();
    std::vector<double> last_rows;
    for (size_t t = 0; t < tokens.size(); ++t) {
        Tensor h = e.embed({tokens[t]}, static_cast<int>(t));
        h = e.forward_stack(h, {0, 3}, &inc_cache, static_cast<int>(t));
        Tensor lg = e.lm_head(e.final_norm(h));
        for (double v : lg.values()) last_rows.push_back(v);
    }
    REQUIRE(last_rows.size() == full.size());
    double max_diff = 0;
    for (size_t i = 0; i < last_rows.size(); ++i)
        max_diff = std::max(max_diff, std::abs(last_rows[i] - full.values()[i]));
    INFO("max diff " << max_diff);
    REQUIRE(max_diff < 1e-10);
}

TEST_CASE("cache position inconsistency is rejected") {
    auto e = tiny_expert(7, 2);
    auto cache = e.make_cache();
    Tensor h = e.embed({1, 2}, 0);
    e.forward_stack(h, {0, 2}, &cache, 0);
    Tensor h2 = e.embed({3}, 2);
    REQUIRE_THROWS_AS(e.forward_stack(h2, {0, 2}, &cache, 5), std::invalid_argument);
}

TEST_CASE("causal self-attention ignores future perturbations") {
    auto e = tiny_expert(8, 2);
    std::vector<int> tokens = {1, 2, 3, 4, 5};
    auto base = e.full_forward(tokens);
    for (size_t t = 0; t + 1 < tokens.size(); ++t) {
        auto perturbed = tokens;
        perturbed[t + 1] = (perturbed[t + 1] + 3) % 13;
        auto out = e.full_forward(perturbed);
        for (size_t i = 0; i <= t; ++i)
            for (int j = 0; j < 13; ++j)
                REQUIRE(out.values()[i * 13 + j] == base.values()[i * 13 + j]);
    }
}

TEST_CASE("lm_head basics") {
    auto e = tiny_expert(9, 1);
    auto zero_logits = e.lm_head(Tensor::zeros({2, 16}));
    for (double v : zero_logits.values()) REQUIRE(v == 0.0);  // bias-free head

    auto logits = e.full_forward({1, 2, 3});
    auto probs = softmax_last(logits);
    for (int r = 0; r < 3; ++r) {
        double s = 0;
        for (int j = 0; j < 13; ++j) s += probs.values()[r * 13 + j];
        REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
}

TEST_CASE("freeze clears requires_grad and keeps the hash stable") {
    auto e = tiny_expert(10);
    const uint64_t before = e.weights_hash();
    e.freeze();
    REQUIRE(e.frozen);
    for (auto& [name, t] : e.parameters("")) REQUIRE_FALSE(t.requires_grad());
    REQUIRE(e.weights_hash() == before);

    // frozen weights record no graph
    auto out = e.full_forward({1, 2});
    REQUIRE_FALSE(out.node()->needs_grad);

    auto same = tiny_expert(10);
    REQUIRE(same.weights_hash() == before);
    auto other = tiny_expert(11);
    REQUIRE(other.weights_hash() != before);
}

TEST_CASE("backbone_generate is deterministic and terminates") {
    auto e = tiny_expert(12);
    auto a = backbone_generate(e, {1, 2, 3}, 10, /*eos=*/1);
    auto b = backbone_generate(e, {1, 2, 3}, 10, /*eos=*/1);
    REQUIRE(a == b);
    REQUIRE(a.size() <= 10);
    REQUIRE_FALSE(a.empty());
}
