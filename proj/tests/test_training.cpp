// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "crossmix/gradcheck.hpp"
#include "crossmix/training.hpp"
#include "fixtures.hpp"

using namespace crossmix;

namespace {

TrainBatch tiny_batch() {
    TrainBatch b;
    b.items.push_back({{1, 2, 3}, {4, 5}, 0});
    b.items.push_back({{5, 6}, {7, 1}, 1});
    return b;
}

std::vector<double> snapshot(const std::vector<std::pair<std::string, Tensor>>& params) {
    std::vector<double> v;
    for (const auto& [name, t] : params) v.insert(v.end(), t.values().begin(), t.values().end());
    return v;
}

}  // namespace

TEST_CASE("entropy_loss oracles") {
    auto uniform = entropy_loss(Tensor::from_data({4}, {1, 1, 1, 1}), 1.0);
    REQUIRE_THAT(uniform.item(), Catch::Matchers::WithinAbs(-std::log(4.0), 1e-12));

    // direct evaluation oracle for a peaked score vector
    std::vector<double> s = {10, 0, 0, 0};
    double mx = 10, z = 0;
    std::vector<double> p(4);
    for (int i = 0; i < 4; ++i) z += (p[static_cast<size_t>(i)] = std::exp(s[static_cast<size_t>(i)] - mx));
    double want = 0;
    for (int i = 0; i < 4; ++i) {
        p[static_cast<size_t>(i)] /= z;
        want += p[static_cast<size_t>(i)] * std::log(p[static_cast<size_t>(i)]);
    }
    auto peaked = entropy_loss(Tensor::from_data({4}, s), 1.0);
    REQUIRE_THAT(peaked.item(), Catch::Matchers::WithinAbs(want, 1e-12));
    // near-zero entropy; direct evaluation gives -0.0014980
    REQUIRE_THAT(peaked.item(), Catch::Matchers::WithinAbs(-0.0014980, 1e-6));

    // invariant under adding a constant
    auto shifted = entropy_loss(Tensor::from_data({4}, {13, 3, 3, 3}), 1.0);
    REQUIRE_THAT(shifted.item(), Catch::Matchers::WithinAbs(peaked.item(), 1e-9));

    REQUIRE_THROWS_AS(entropy_loss(Tensor::from_data({4}, s), 0.0), std::invalid_argument);
}

TEST_CASE("balance_loss oracles") {
    auto uniform = balance_loss(Tensor::from_data({3}, {0.5, 0.5, 0.5}));
    REQUIRE_THAT(uniform.item(), Catch::Matchers::WithinAbs(0.0, 1e-12));

    // M=2, K=1, B=4, all queries to expert 0: f=[1,0], mean .5, pop std .5
    auto skew = balance_loss(Tensor::from_data({2}, {1.0, 0.0}));
    REQUIRE_THAT(skew.item(), Catch::Matchers::WithinAbs(1.0, 1e-12));

    auto all_on = balance_loss(Tensor::from_data({5}, {1, 1, 1, 1, 1}));
    REQUIRE_THAT(all_on.item(), Catch::Matchers::WithinAbs(0.0, 1e-12));

    REQUIRE_THROWS_AS(balance_loss(Tensor::from_data({2}, {0.0, 0.0})), std::invalid_argument);
}

TEST_CASE("consistency_loss oracles") {
    auto same = consistency_loss(Tensor::from_data({1, 2}, {0.3, 0.7}),
                                 Tensor::from_data({1, 2}, {0.3, 0.7}));
    REQUIRE_THAT(same.item(), Catch::Matchers::WithinAbs(0.0, 1e-12));

    // hand-computed symmetric KL pair for [0.5,0.5] vs [0.9,0.1]
    const double kl01 = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
    const double kl10 = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    auto p0 = Tensor::from_data({1, 2}, {0.5, 0.5});
    auto p1 = Tensor::from_data({1, 2}, {0.9, 0.1});
    auto v = consistency_loss(p0, p1);
    REQUIRE_THAT(v.item(), Catch::Matchers::WithinAbs((kl01 + kl10) / 2.0, 1e-6));
    REQUIRE_THAT(v.item(), Catch::Matchers::WithinAbs(0.4394, 1e-3));

    auto swapped = consistency_loss(p1, p0);
    REQUIRE_THAT(swapped.item(), Catch::Matchers::WithinAbs(v.item(), 1e-12));
}

TEST_CASE("adamw warmup, hand-computed step, and decoupled decay") {
    // step 0 of warmup: effective lr 0, parameters unchanged
    {
        auto theta = Tensor::scalar(1.0, true);
        theta.mutable_grad()[0] = 1.0;
        AdamW opt;
        opt.lr = 0.1;
        opt.warmup = 10;
        opt.weight_decay = 0.0;
        const double lr0 = opt.update({{"theta", theta}});
        REQUIRE(lr0 == 0.0);
        REQUIRE(theta.values()[0] == 1.0);
    }
    // first step without warmup: bias-corrected mhat = vhat = 1 -> theta ~ 0.9
    {
        auto theta = Tensor::scalar(1.0, true);
        theta.mutable_grad()[0] = 1.0;
        AdamW opt;
        opt.lr = 0.1;
        opt.warmup = 0;
        opt.weight_decay = 0.0;
        opt.clip = 0.0;  // disable clipping for the hand computation
        opt.update({{"theta", theta}});
        REQUIRE_THAT(theta.values()[0], Catch::Matchers::WithinAbs(0.9, 1e-6));
    }
    // decay applies independently of the gradient
    {
        auto theta = Tensor::scalar(2.0, true);
        theta.mutable_grad()[0] = 0.0;
        AdamW opt;
        opt.lr = 0.5;
        opt.warmup = 0;
        opt.weight_decay = 0.01;
        opt.update({{"theta", theta}});
        REQUIRE_THAT(theta.values()[0], Catch::Matchers::WithinAbs(2.0 - 0.5 * 0.01 * 2.0, 1e-12));
    }
}

TEST_CASE("adamw clips by global norm") {
    auto a = Tensor::scalar(0.0, true);
    auto b = Tensor::scalar(0.0, true);
    a.mutable_grad()[0] = 30.0;
    b.mutable_grad()[0] = 40.0;  // joint norm 50
    AdamW opt;
    opt.lr = 1.0;
    opt.warmup = 0;
    opt.weight_decay = 0.0;
    opt.clip = 1.0;
    opt.update({{"a", a}, {"b", b}});
    // post-clip grads (0.6, 0.8); adam step of unit magnitude preserves sign/ratio via mhat/sqrt(vhat)
    REQUIRE(a.values()[0] < 0.0);
    REQUIRE(b.values()[0] < 0.0);
    // first-step mhat/sqrt(vhat) = g/|g| ~ 1 for both (up to eps), so equal magnitudes
    REQUIRE_THAT(a.values()[0], Catch::Matchers::WithinAbs(b.values()[0], 1e-7));
}

TEST_CASE("zero loss weights make total equal lm bitwise") {
    auto model = testing::mini_model(2, 2, 2, 8, 300);
    LossWeights w{0.0, 0.0, 0.0};
    auto bl = compute_batch_loss(model, tiny_batch(), w, 42, 0);
    REQUIRE(bl.breakdown.total == bl.breakdown.lm);
}

TEST_CASE("loss breakdown recombination identity holds exactly") {
    auto model = testing::mini_model(2, 2, 2, 8, 301);
    LossWeights w;  // defaults 0.01 / 0.01 / 0.05
    auto bl = compute_batch_loss(model, tiny_batch(), w, 43, 7);
    REQUIRE(bl.breakdown.total == bl.breakdown.recombine(w));
}

TEST_CASE("total is affine in each loss weight with slope equal to the raw term") {
    auto model = testing::mini_model(2, 2, 2, 8, 302);
    LossWeights base{0.01, 0.01, 0.05};
    auto b0 = compute_batch_loss(model, tiny_batch(), base, 44, 3).breakdown;
    LossWeights bumped = base;
    bumped.balance += 0.13;
    auto b1 = compute_batch_loss(model, tiny_batch(), bumped, 44, 3).breakdown;
    REQUIRE_THAT(b1.total - b0.total, Catch::Matchers::WithinAbs(0.13 * b0.balance, 1e-12));
    REQUIRE(b1.lm == b0.lm);
    REQUIRE(b1.balance == b0.balance);

    LossWeights bumped_ent = base;
    bumped_ent.entropy += 0.2;
    auto b2 = compute_batch_loss(model, tiny_batch(), bumped_ent, 44, 3).breakdown;
    REQUIRE_THAT(b2.total - b0.total, Catch::Matchers::WithinAbs(0.2 * b0.entropy, 1e-12));

    LossWeights bumped_con = base;
    bumped_con.consistency += 0.11;
    auto b3 = compute_batch_loss(model, tiny_batch(), bumped_con, 44, 3).breakdown;
    REQUIRE_THAT(b3.total - b0.total, Catch::Matchers::WithinAbs(0.11 * b0.consistency, 1e-12));
}

TEST_CASE("activation frequencies are the hard batch counts") {
    auto model = testing::mini_model(2, 2, 2, 8, 303);  // K = M = 2: everyone always active
    auto bl = compute_batch_loss(model, tiny_batch(), LossWeights{}, 45, 0);
    REQUIRE(bl.breakdown.activation_freq == std::vector<double>{1.0, 1.0});
    REQUIRE_THAT(bl.breakdown.balance, Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("identical gumbel draws give zero consistency") {
    auto model = testing::mini_model(2, 1, 2, 8, 304);  // K=1 so selections can differ
    TrainExample ex{{1, 2, 3}, {4, 5}, 0};
    Rng rng(9);
    auto g = sample_gumbel(2, rng);
    auto pass_a = routed_teacher_pass(model, ex, &g, false, nullptr);
    auto pass_b = routed_teacher_pass(model, ex, &g, false, nullptr);
    REQUIRE(pass_a.decision.active == pass_b.decision.active);
    auto con = consistency_loss(softmax_last(pass_a.target_logits),
                                softmax_last(pass_b.target_logits));
    REQUIRE_THAT(con.item(), Catch::Matchers::WithinAbs(0.0, 1e-12));
}

TEST_CASE("differing selections still produce a valid consistency term") {
    auto model = testing::mini_model(3, 1, 2, 8, 305);
    TrainExample ex{{1, 2, 3}, {4, 5}, 0};
    // force different primaries via hand-built noise
    std::vector<double> g0 = {5.0, 0.0, 0.0};
    std::vector<double> g1 = {0.0, 5.0, 0.0};
    auto pass0 = routed_teacher_pass(model, ex, &g0, false, nullptr);
    auto pass1 = routed_teacher_pass(model, ex, &g1, false, nullptr);
    REQUIRE(pass0.decision.primary != pass1.decision.primary);
    auto con = consistency_loss(softmax_last(pass0.target_logits),
                                softmax_last(pass1.target_logits));
    REQUIRE(std::isfinite(con.item()));
    REQUIRE(con.item() > 0.0);
}

TEST_CASE("end-to-end gradient check on a small two-expert configuration") {
    auto model = testing::mini_model(2, 2, 2, 8, 306);
    auto bl = compute_batch_loss(model, tiny_batch(), LossWeights{}, 46, 0);
    auto rep = finite_diff_check(bl.total, model.trainable_parameters(), 1e-5);
    INFO("checked " << rep.coords_checked << " coords, max rel err " << rep.max_rel_err << " at "
                    << rep.worst_param << "[" << rep.worst_index << "] analytic "
                    << rep.worst_analytic << " numeric " << rep.worst_numeric);
    REQUIRE(rep.ok(1e-3));
}

TEST_CASE("train_step updates only router and interaction parameters") {
    auto model = testing::mini_model(2, 2, 2, 8, 307);
    const uint64_t hash0 = model.experts[0].weights_hash();
    const uint64_t hash1 = model.experts[1].weights_hash();
    const uint64_t enc_hash = model.encoder.weights_hash();

    std::vector<double> frozen_before;
    for (auto& [name, t] : model.all_parameters())
        if (name.rfind("expert", 0) == 0 || name.rfind("encoder/", 0) == 0)
            frozen_before.insert(frozen_before.end(), t.values().begin(), t.values().end());
    auto trainable_before = snapshot(model.trainable_parameters());

    AdamW opt;
    opt.warmup = 0;
    LossWeights w;
    for (int step = 0; step < 3; ++step) {
        auto bd = train_step(model, tiny_batch(), w, opt, 47, step);
        REQUIRE_FALSE(bd.aborted);
        for (auto& [name, t] : model.experts[0].parameters("e/")) REQUIRE_FALSE(t.has_grad());
    }

    std::vector<double> frozen_after;
    for (auto& [name, t] : model.all_parameters())
        if (name.rfind("expert", 0) == 0 || name.rfind("encoder/", 0) == 0)
            frozen_after.insert(frozen_after.end(), t.values().begin(), t.values().end());
    REQUIRE(frozen_before == frozen_after);
    REQUIRE(model.experts[0].weights_hash() == hash0);
    REQUIRE(model.experts[1].weights_hash() == hash1);
    REQUIRE(model.encoder.weights_hash() == enc_hash);
    REQUIRE(snapshot(model.trainable_parameters()) != trainable_before);
}

TEST_CASE("non-finite loss aborts the step and leaves the optimizer untouched") {
    auto model = testing::mini_model(2, 2, 2, 8, 308);
    model.router.b_out.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamW opt;
    opt.warmup = 0;
    auto before = snapshot(model.trainable_parameters());
    auto bd = train_step(model, tiny_batch(), LossWeights{}, opt, 48, 0);
    REQUIRE(bd.aborted);
    REQUIRE(bd.abort_reason == "non-finite loss");
    REQUIRE(opt.steps_taken == 0);
    REQUIRE(opt.moment1.empty());
    auto after = snapshot(model.trainable_parameters());
    for (size_t i = 0; i < before.size(); ++i) {
        if (std::isnan(before[i])) {
            REQUIRE(std::isnan(after[i]));
        } else {
            REQUIRE(before[i] == after[i]);
        }
    }
}

TEST_CASE("training steps are bit-deterministic given seed") {
    auto run = [] {
        auto model = testing::mini_model(2, 2, 2, 8, 309);
        AdamW opt;
        opt.warmup = 0;
        LossBreakdown last;
        for (int s = 0; s < 2; ++s) last = train_step(model, tiny_batch(), LossWeights{}, opt, 49, s);
        auto vals = snapshot(model.trainable_parameters());
        return std::make_pair(last, vals);
    };
    auto [b1, v1] = run();
    auto [b2, v2] = run();
    REQUIRE(b1.total == b2.total);
    REQUIRE(b1.lm == b2.lm);
    REQUIRE(v1 == v2);
}
