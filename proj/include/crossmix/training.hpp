// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// The joint objective over router + interaction parameters and the
// single-batch training step: route with Gumbel noise, teacher-forced
// primary pass for the LM loss, entropy of the raw scores, batch balance
// of hard activations (straight-through to the soft scores), a second
// independently perturbed pass for the consistency loss, AdamW on the
// trainable surface only.
#pragma once

#include "crossmix/model.hpp"

namespace crossmix {

struct LossWeights {
    double entropy = 0.01;
    double balance = 0.01;
    double consistency = 0.05;
};

struct LossBreakdown {
    double lm = 0.0;
    double entropy = 0.0;
    double balance = 0.0;
    double consistency = 0.0;
    double total = 0.0;
    std::vector<double> activation_freq;  // hard per-expert frequency over the batch
    double lr = 0.0;                      // effective learning rate of the applied update
    bool aborted = false;
    std::string abort_reason;

    // Same association order and rounding as the recorded graph
    // (mul stored, then add; contraction is off project-wide).
    double recombine(const LossWeights& w) const {
        const double te = entropy * w.entropy;
        const double tb = balance * w.balance;
        const double tc = consistency * w.consistency;
        double acc = lm + te;
        acc = acc + tb;
        acc = acc + tc;
        return acc;
    }
};

// Mean NLL of the primary expert over the target span.
inline Tensor lm_loss(const Tensor& target_logits, const std::vector<int>& targets) {
    return cross_entropy(target_logits, targets);
}

// Negative Shannon entropy (nats) of softmax(scores / tau).
inline Tensor entropy_loss(const Tensor& scores, double tau) {
    require(tau > 0.0, "entropy_loss: temperature must be positive");
    Tensor p = softmax_last(scale(scores, 1.0 / tau));
    return sum_all(mul(p, log(p)));
}

// Squared coefficient of variation of the activation-frequency vector
// (population standard deviation, so a batch of one is still defined).
inline Tensor balance_loss(const Tensor& freq) {
    const int m = freq.dim(0);
    require(freq.rank() == 1 && m >= 1, "balance_loss: need a frequency vector");
    double total = 0.0;
    for (double v : freq.values()) {
        // NaN passes through and poisons the loss, which aborts the step.
        require(!(v < 0.0), "balance_loss: negative frequency");
        total += v;
    }
    require(!(total <= 0.0), "balance_loss: mean frequency must be positive");
    Tensor mean = scale(sum_all(freq), 1.0 / m);
    Tensor dev = sub(freq, mul_scalar(Tensor::full({m}, 1.0), mean));
    Tensor var = scale(sum_all(mul(dev, dev)), 1.0 / m);
    return div(var, mul(mean, mean));
}

// Symmetric token-wise KL between two prediction streams, averaged as
// (1/2T) sum_t [KL(p0||p1) + KL(p1||p0)], with a 1e-12 floor inside logs.
inline Tensor consistency_loss(const Tensor& p0, const Tensor& p1) {
    require(p0.shape() == p1.shape() && p0.rank() == 2,
            "consistency_loss: distribution shapes differ: " + shape_str(p0.shape()) + " vs " +
                shape_str(p1.shape()));
    const int t = p0.dim(0);
    Tensor lp0 = log(add_constant(p0, 1e-12));
    Tensor lp1 = log(add_constant(p1, 1e-12));
    Tensor kl01 = sum_all(mul(p0, sub(lp0, lp1)));
    Tensor kl10 = sum_all(mul(p1, sub(lp1, lp0)));
    return scale(add(kl01, kl10), 1.0 / (2.0 * t));
}

// AdamW with decoupled weight decay, global-norm clipping and linear
// warmup from zero. Moment buffers are keyed by position in the parameter
// list, which is stable for a given model.
struct AdamW {
    double lr = 3e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip = 1.0;
    int warmup = 100;
    int64_t steps_taken = 0;
    std::vector<std::vector<double>> moment1, moment2;

    double effective_lr() const {
        if (warmup <= 0) return lr;
        const double f = static_cast<double>(steps_taken) / warmup;
        return lr * std::min(1.0, f);
    }

    // Applies one update from the grads already populated on `params`.
    // Returns the effective learning rate used.
    double update(const std::vector<std::pair<std::string, Tensor>>& params) {
        if (moment1.empty()) {
            for (const auto& [name, t] : params) {
                moment1.emplace_back(t.size(), 0.0);
                moment2.emplace_back(t.size(), 0.0);
            }
        }
        require(moment1.size() == params.size(), "adamw: parameter list changed size");

        double sq = 0.0;
        for (const auto& [name, t] : params) {
            if (!t.has_grad()) continue;
            for (double g : t.grad()) {
                require(std::isfinite(g), "adamw: non-finite gradient in " + name);
                sq += g * g;
            }
        }
        const double norm = std::sqrt(sq);
        const double clip_factor = (clip > 0.0 && norm > clip) ? clip / norm : 1.0;

        const double step_lr = effective_lr();
        const int64_t t_bias = steps_taken + 1;
        const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_bias));
        const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_bias));

        for (size_t p = 0; p < params.size(); ++p) {
            auto& theta = params[p].second.mutable_values();
            auto& m1 = moment1[p];
            auto& m2 = moment2[p];
            const bool has_grad = params[p].second.has_grad();
            for (size_t i = 0; i < theta.size(); ++i) {
                const double g = has_grad ? params[p].second.grad()[i] * clip_factor : 0.0;
                m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                const double mhat = m1[i] / bc1;
                const double vhat = m2[i] / bc2;
                theta[i] -= step_lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * theta[i]);
            }
        }
        ++steps_taken;
        return step_lr;
    }
};

struct TrainExample {
    std::vector<int> prompt;
    std::vector<int> target;
    int task = -1;
};

struct TrainBatch {
    std::vector<TrainExample> items;
};

struct RoutedPass {
    RoutingDecision decision;
    Tensor target_logits;  // primary logits over the target span [T, V]
};

// Teacher-forced pass of all active experts over prompt ++ target with
// interaction layers; returns the primary's logits aligned to the target.
inline RoutedPass routed_teacher_pass(const Model& model, const TrainExample& ex,
                                      const std::vector<double>* gumbel, bool training,
                                      Rng* rng, const std::set<int>* dead = nullptr) {
    require(!ex.prompt.empty() && !ex.target.empty(), "routed pass: empty prompt or target");
    RoutedPass out;
    out.decision = model.route(ex.prompt, gumbel, dead);

    std::vector<int> input = ex.prompt;
    input.insert(input.end(), ex.target.begin(), ex.target.end());
    input.pop_back();  // logits at row i predict input token i+1

    const size_t slots = out.decision.active.size();
    InteractionKVCache icache = InteractionKVCache::make(model.config.num_stacks,
                                                         static_cast<int>(slots));
    std::vector<BackboneKVCache> caches(slots);
    std::vector<BackboneKVCache*> cache_ptrs;
    std::vector<Model::SlotStream> streams;
    for (size_t s = 0; s < slots; ++s) {
        caches[s] = model.experts[static_cast<size_t>(out.decision.active[s])].make_cache();
        cache_ptrs.push_back(&caches[s]);
        streams.push_back({input, 0});
    }
    auto logits = model.joint_forward(out.decision, streams, cache_ptrs, icache,
                                      static_cast<int>(input.size()), training, rng);
    const int primary_slot = out.decision.slot_of(out.decision.primary);
    const int prompt_len = static_cast<int>(ex.prompt.size());
    out.target_logits = slice_rows(logits[static_cast<size_t>(primary_slot)], prompt_len - 1,
                                   prompt_len - 1 + static_cast<int>(ex.target.size()));
    return out;
}

struct BatchLoss {
    Tensor total;
    LossBreakdown breakdown;
};

// Everything of one training step except the parameter update. The step
// RNG is derived from (seed, step_index), so a step is reproducible and
// re-runs of the same step use identical Gumbel draws and dropout masks.
inline BatchLoss compute_batch_loss(const Model& model, const TrainBatch& batch,
                                    const LossWeights& weights, uint64_t seed,
                                    int64_t step_index) {
    require(!batch.items.empty(), "train step: empty batch");
    for (const auto& e : model.experts)
        require(e.frozen, "train step: expert backbones must be frozen");

    Rng rng(Rng::mix(seed, static_cast<uint64_t>(step_index)));
    const int m = model.num_experts();
    const double b = static_cast<double>(batch.items.size());

    Tensor lm_acc, ent_acc, con_acc, soft_acc;
    std::vector<double> counts(static_cast<size_t>(m), 0.0);
    for (const auto& ex : batch.items) {
        auto g0 = sample_gumbel(m, rng);
        auto g1 = sample_gumbel(m, rng);
        auto pass0 = routed_teacher_pass(model, ex, &g0, true, &rng);
        Tensor lm_i = lm_loss(pass0.target_logits, ex.target);
        Tensor ent_i = entropy_loss(pass0.decision.scores, model.config.temperature);
        auto pass1 = routed_teacher_pass(model, ex, &g1, true, &rng);
        Tensor con_i = consistency_loss(softmax_last(pass0.target_logits),
                                        softmax_last(pass1.target_logits));
        for (int am : pass0.decision.active) counts[static_cast<size_t>(am)] += 1.0;
        lm_acc = lm_acc.defined() ? add(lm_acc, lm_i) : lm_i;
        ent_acc = ent_acc.defined() ? add(ent_acc, ent_i) : ent_i;
        con_acc = con_acc.defined() ? add(con_acc, con_i) : con_i;
        soft_acc = soft_acc.defined() ? add(soft_acc, pass0.decision.soft_weights)
                                      : pass0.decision.soft_weights;
    }

    Tensor lm = scale(lm_acc, 1.0 / b);
    Tensor ent = scale(ent_acc, 1.0 / b);
    Tensor con = scale(con_acc, 1.0 / b);

    // f: hard activation frequencies in value, soft scores in gradient.
    std::vector<double> hard(counts);
    for (auto& v : hard) v /= b;
    Tensor f_soft = scale(soft_acc, 1.0 / b);
    Tensor f = add(Tensor::from_data({m}, hard), sub(f_soft, detach(f_soft)));
    Tensor bal = balance_loss(f);

    Tensor total = add(add(add(lm, scale(ent, weights.entropy)), scale(bal, weights.balance)),
                       scale(con, weights.consistency));

    BatchLoss out;
    out.total = total;
    out.breakdown.lm = lm.item();
    out.breakdown.entropy = ent.item();
    out.breakdown.balance = bal.item();
    out.breakdown.consistency = con.item();
    out.breakdown.total = total.item();
    out.breakdown.activation_freq = hard;
    return out;
}

// Algorithm: route with one Gumbel draw, primary pass and LM loss, entropy
// and balance regularizers, an independent second draw and pass for the
// consistency term, then one AdamW update on router + interaction only.
// A non-finite loss aborts the step and leaves the optimizer untouched.
inline LossBreakdown train_step(Model& model, const TrainBatch& batch, const LossWeights& weights,
                                AdamW& optimizer, uint64_t seed, int64_t step_index) {
    BatchLoss bl = compute_batch_loss(model, batch, weights, seed, step_index);
    if (!std::isfinite(bl.breakdown.total)) {
        bl.breakdown.aborted = true;
        bl.breakdown.abort_reason = "non-finite loss";
        return bl.breakdown;
    }
    auto params = model.trainable_parameters();
    for (auto& [name, t] : params) t.zero_grad();
    bl.total.backward();
    bl.breakdown.lr = optimizer.update(params);
    return bl.breakdown;
}

}  // namespace crossmix
