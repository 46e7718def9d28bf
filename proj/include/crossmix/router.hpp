// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Global per-query expert selection. A frozen randomly-initialized
// encoder maps the prompt to a fixed-size embedding; a trainable 2-layer
// MLP scores the pool; hard Top-K runs the forward pass while gradients
// travel through the softmax of the (optionally Gumbel-perturbed) scores.
#pragma once

#include <algorithm>
#include <optional>
#include <set>

#include "crossmix/expert.hpp"

namespace crossmix {

struct EncoderConfig {
    int dim = 64;  // embedding size fed to the router
    int layers = 2;
    int heads = 4;
    int vocab_size = 32;
    int max_seq_len = 64;
    double mlp_ratio = 2.0;
    uint64_t seed = 7;
};

// Frozen bidirectional transformer, mean-pooled over positions. Stands in
// for a pretrained sentence encoder at this scale; position embeddings keep
// it order-aware.
class PromptEncoder {
public:
    EncoderConfig config;
    Tensor token_embedding, position_embedding;
    std::vector<TransformerBlock> blocks;
    Tensor final_gain, final_bias;

    static PromptEncoder init(const EncoderConfig& cfg) {
        require(cfg.dim % cfg.heads == 0, "encoder dim not divisible by heads");
        PromptEncoder e;
        e.config = cfg;
        Rng rng(cfg.seed);
        e.token_embedding = randn_init({cfg.vocab_size, cfg.dim}, rng, 0.1, false);
        e.position_embedding = randn_init({cfg.max_seq_len, cfg.dim}, rng, 0.1, false);
        const int mlp = static_cast<int>(cfg.dim * cfg.mlp_ratio);
        for (int l = 0; l < cfg.layers; ++l)
            e.blocks.push_back(TransformerBlock::init(cfg.dim, mlp, rng));
        e.final_gain = Tensor::full({cfg.dim}, 1.0, false);
        e.final_bias = Tensor::zeros({cfg.dim}, false);
        // frozen from birth
        std::vector<std::pair<std::string, Tensor>> ps;
        for (size_t l = 0; l < e.blocks.size(); ++l) e.blocks[l].collect(ps, "");
        for (auto& [name, t] : ps) t.set_requires_grad(false);
        return e;
    }

    // Mean-pooled embedding of a nonempty prompt.
    Tensor encode(const std::vector<int>& tokens) const {
        require(!tokens.empty(), "encode_prompt: empty prompt");
        require(static_cast<int>(tokens.size()) <= config.max_seq_len,
                "encode_prompt: prompt longer than encoder max_seq_len");
        std::vector<int> positions(tokens.size());
        for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);
        Tensor h = add(embedding(token_embedding, tokens), embedding(position_embedding, positions));
        for (const auto& b : blocks)
            h = b.forward(h, config.heads, nullptr, 0, /*causal=*/false);
        h = layer_norm(h, final_gain, final_bias, 1e-5);
        // mean over positions
        const int n = h.dim(0), d = h.dim(1);
        Tensor pooled = scale(matmul(Tensor::full({1, n}, 1.0), h), 1.0 / n);
        return reshape(pooled, {d});
    }

    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out;
        out.emplace_back(prefix + "token_embedding", token_embedding);
        out.emplace_back(prefix + "position_embedding", position_embedding);
        for (size_t l = 0; l < blocks.size(); ++l)
            blocks[l].collect(out, prefix + "block" + std::to_string(l) + "/");
        out.emplace_back(prefix + "final_gain", final_gain);
        out.emplace_back(prefix + "final_bias", final_bias);
        return out;
    }

    uint64_t weights_hash() const {
        uint64_t h = 1469598103934665603ull;
        for (const auto& [name, t] : parameters(""))
            for (double v : t.values()) {
                uint64_t bits;
                std::memcpy(&bits, &v, sizeof(bits));
                h = (h ^ bits) * 1099511628211ull;
            }
        return h;
    }
};

struct RouterConfig {
    int encoder_dim = 64;
    int hidden_dim = 32;   // router MLP width
    int num_experts = 3;
    int top_k = 2;
    double temperature = 1.0;

    void validate() const {
        require(top_k >= 1 && top_k <= num_experts, "router: need 1 <= K <= M");
        require(temperature > 0.0, "router: temperature must be positive");
    }
};

// Trainable 2-layer scorer. Weight-only parameter count is
// encoder_dim*hidden + hidden*num_experts; biases exist but are excluded
// from the overhead accounting.
struct Router {
    Tensor w_in, b_in, w_out, b_out;

    static Router init(const RouterConfig& cfg, uint64_t seed) {
        cfg.validate();
        Router r;
        Rng rng(seed);
        r.w_in = randn_init({cfg.encoder_dim, cfg.hidden_dim}, rng, 0.2);
        r.b_in = Tensor::zeros({cfg.hidden_dim}, true);
        r.w_out = randn_init({cfg.hidden_dim, cfg.num_experts}, rng, 0.2);
        r.b_out = Tensor::zeros({cfg.num_experts}, true);
        return r;
    }

    Tensor score(const Tensor& z) const {
        require(z.rank() == 1 && z.dim(0) == w_in.dim(0),
                "router score: embedding shape " + shape_str(z.shape()) + " does not match " +
                    shape_str(w_in.shape()));
        Tensor h = gelu(add_rowwise(matmul(reshape(z, {1, z.dim(0)}), w_in), b_in));
        Tensor s = add_rowwise(matmul(h, w_out), b_out);
        return reshape(s, {s.dim(1)});
    }

    std::vector<std::pair<std::string, Tensor>> parameters(const std::string& prefix) const {
        return {{prefix + "weight_in", w_in},
                {prefix + "bias_in", b_in},
                {prefix + "weight_out", w_out},
                {prefix + "bias_out", b_out}};
    }
};

// g_i = -ln(-ln u_i), u uniform on (0,1).
inline std::vector<double> sample_gumbel(int m, Rng& rng) {
    std::vector<double> g(static_cast<size_t>(m));
    for (auto& v : g) v = -std::log(-std::log(rng.uniform()));
    return g;
}

struct RoutingDecision {
    Tensor scores;          // s
    Tensor perturbed;       // s + g (g = 0 at inference)
    Tensor soft_weights;    // softmax((s+g)/tau) over the full pool
    std::vector<int> active;  // K selected experts, ascending (block layout order)
    int primary = -1;         // argmax of perturbed scores within the active set
    std::vector<int> dead;    // experts masked out before selection

    bool is_active(int m) const {
        return std::find(active.begin(), active.end(), m) != active.end();
    }
    int slot_of(int m) const {
        auto it = std::find(active.begin(), active.end(), m);
        require(it != active.end(), "expert " + std::to_string(m) + " is not active");
        return static_cast<int>(it - active.begin());
    }
};

// Hard Top-K of the perturbed scores; soft weights for the backward path.
// Ties break toward the lower expert index. Dead experts are masked to
// -inf before selection and K is clamped to the number of survivors.
inline RoutingDecision select_topk(const Tensor& scores, int k,
                                   const std::vector<double>* gumbel, double tau,
                                   const std::set<int>* dead_experts = nullptr) {
    const int m = scores.dim(0);
    require(scores.rank() == 1, "select_topk: scores must be a vector");
    require(k >= 1 && k <= m, "select_topk: need 1 <= K <= M, got K=" + std::to_string(k) +
                                  " M=" + std::to_string(m));
    require(tau > 0.0, "select_topk: temperature must be positive");
    if (gumbel) require(static_cast<int>(gumbel->size()) == m, "select_topk: gumbel size mismatch");

    RoutingDecision d;
    d.scores = scores;

    std::vector<double> noise(static_cast<size_t>(m), 0.0);
    if (gumbel) noise = *gumbel;
    const double ninf = -std::numeric_limits<double>::infinity();
    int survivors = m;
    if (dead_experts) {
        for (int dm : *dead_experts) {
            require(dm >= 0 && dm < m, "drop_experts: bad expert id " + std::to_string(dm));
            d.dead.push_back(dm);
        }
        survivors = m - static_cast<int>(dead_experts->size());
        require(survivors >= 1, "drop_experts: all experts dead");
    }
    const int effective_k = std::min(k, survivors);

    Tensor noise_t = Tensor::from_data({m}, noise);
    d.perturbed = add(scores, noise_t);
    std::vector<double> masked = d.perturbed.values();
    if (dead_experts)
        for (int dm : *dead_experts) masked[static_cast<size_t>(dm)] = ninf;

    std::vector<int> order(static_cast<size_t>(m));
    for (int i = 0; i < m; ++i) order[static_cast<size_t>(i)] = i;
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        if (masked[static_cast<size_t>(a)] != masked[static_cast<size_t>(b)])
            return masked[static_cast<size_t>(a)] > masked[static_cast<size_t>(b)];
        return a < b;
    });
    d.active.assign(order.begin(), order.begin() + effective_k);
    d.primary = d.active[0];  // highest perturbed score; ties already break low
    std::sort(d.active.begin(), d.active.end());

    // Soft weights from the same perturbed scores (constants where dead).
    Tensor st = d.perturbed;
    if (dead_experts) {
        std::vector<double> mask_add(static_cast<size_t>(m), 0.0);
        for (int dm : *dead_experts) mask_add[static_cast<size_t>(dm)] = ninf;
        Tensor mt = Tensor::from_data({m}, mask_add);
        d.soft_weights = softmax_last(scale(st, 1.0 / tau), &mt);
    } else {
        d.soft_weights = softmax_last(scale(st, 1.0 / tau));
    }
    return d;
}

// Straight-through factor for one active expert: evaluates to exactly 1,
// carries the gradient of the soft weight.
inline Tensor straight_through_weight(const RoutingDecision& d, int expert) {
    Tensor p = select(d.soft_weights, expert);
    return div(p, detach(p));
}

}  // namespace crossmix
