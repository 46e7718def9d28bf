// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "crossmix/harness.hpp"
#include "fixtures.hpp"

using namespace crossmix;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    fs::path p = fs::temp_directory_path() / ("crossmix_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::vector<SyntheticTaskSpec> three_task_specs() {
    SyntheticTaskSpec copy{"copy", TaskKind::copy, 3, 6, 80, 20, 11};
    SyntheticTaskSpec rev{"rev", TaskKind::reverse, 3, 6, 80, 20, 12};
    SyntheticTaskSpec mod{"mod", TaskKind::modular_add, 0, 0, 50, 12, 13};
    return {copy, rev, mod};
}

// Micro config for structural experiment tests: no learning expected.
RunConfig micro_config(const fs::path& out) {
    RunConfig c;
    c.seed = 5;
    c.out_dir = out.string();
    c.max_seq_len = 32;
    c.vocab.payload_symbols = 10;
    c.vocab.mod_base = 5;
    c.vocab.fact_keys = 20;
    c.vocab.fact_values = 6;
    c.tasks = {{"copy", TaskKind::copy, 3, 4, 30, 8, 11},
               {"rev", TaskKind::reverse, 3, 4, 30, 8, 12}};
    ExpertSpec e1{2, 16, 2, 2.0, {"copy"}, {25, 2e-3, 6, 0, 0.9}};
    ExpertSpec e2{2, 16, 2, 2.0, {"rev"}, {25, 2e-3, 6, 0, 0.9}};
    c.experts = {e1, e2};
    c.model = {2, 8, 2, 2, 1.0, 0.0, Placement::uniform, true, true};
    c.encoder_dim = 12;
    c.encoder_layers = 1;
    c.encoder_heads = 2;
    c.router_hidden = 6;
    c.train = {1e-3, 2, 3, 4, 0.01, 1.0, LossWeights{}};
    return c;
}

}  // namespace

TEST_CASE("vocab parse and render round-trip") {
    Vocab v = Vocab::build({});
    auto ids = v.parse("<copy> s0 s3 <sep>");
    REQUIRE(ids == std::vector<int>{v.tag_copy, v.payload_begin, v.payload_begin + 3, v.sep});
    REQUIRE(v.render(ids) == "<copy> s0 s3 <sep>");
    REQUIRE_THROWS_AS(v.parse("nonsense"), std::invalid_argument);
}

TEST_CASE("make_tasks is deterministic per seed") {
    Vocab v = Vocab::build({});
    auto a = make_tasks(three_task_specs(), v);
    auto b = make_tasks(three_task_specs(), v);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        REQUIRE(a[i].train.size() == b[i].train.size());
        for (size_t j = 0; j < a[i].train.size(); ++j) {
            REQUIRE(a[i].train[j].prompt == b[i].train[j].prompt);
            REQUIRE(a[i].train[j].target == b[i].train[j].target);
        }
    }
}

TEST_CASE("copy task target equals the prompt payload") {
    Vocab v = Vocab::build({});
    auto tasks = make_tasks(three_task_specs(), v);
    for (const auto& ex : tasks[0].train) {
        REQUIRE(ex.prompt.front() == v.tag_copy);
        REQUIRE(ex.prompt.back() == v.sep);
        std::vector<int> payload(ex.prompt.begin() + 1, ex.prompt.end() - 1);
        payload.push_back(v.eos);
        REQUIRE(ex.target == payload);
    }
    // reverse task reverses
    for (const auto& ex : tasks[1].heldout) {
        std::vector<int> payload(ex.prompt.begin() + 1, ex.prompt.end() - 1);
        std::reverse(payload.begin(), payload.end());
        payload.push_back(v.eos);
        REQUIRE(ex.target == payload);
    }
}

TEST_CASE("modular answers verified by direct recomputation") {
    Vocab v = Vocab::build({});
    auto tasks = make_tasks(three_task_specs(), v);
    const auto& mod = tasks[2];
    REQUIRE(mod.train.size() + mod.heldout.size() <= 64u);
    for (const auto* set : {&mod.train, &mod.heldout})
        for (const auto& ex : *set) {
            const int a = ex.prompt[1] - v.residue_begin;
            const int b = ex.prompt[3] - v.residue_begin;
            REQUIRE(ex.target[0] == v.residue_begin + (a + b) % v.residue_count);
            REQUIRE(ex.target[1] == v.eos);
        }
}

TEST_CASE("train and held-out sets are disjoint") {
    Vocab v = Vocab::build({});
    auto tasks = make_tasks(three_task_specs(), v);
    for (const auto& t : tasks) {
        std::set<std::vector<int>> train_prompts;
        for (const auto& ex : t.train) train_prompts.insert(ex.prompt);
        for (const auto& ex : t.heldout) REQUIRE_FALSE(train_prompts.count(ex.prompt));
    }
}

TEST_CASE("fact tables: disjoint slices demanded, rejected otherwise") {
    Vocab v = Vocab::build({});
    SyntheticTaskSpec f0{"f0", TaskKind::fact_lookup, 0, 0, 0, 0, 21};
    f0.fact_owner = 0;
    f0.fact_key_begin = 0;
    f0.fact_key_count = 10;
    SyntheticTaskSpec f1 = f0;
    f1.name = "f1";
    f1.fact_owner = 1;
    f1.fact_key_begin = 10;
    f1.fact_key_count = 10;
    auto ok = make_tasks({f0, f1}, v);
    REQUIRE(ok[0].memorization.size() == 10);
    REQUIRE(ok[0].heldout.size() >= 1);
    REQUIRE(ok[0].train.size() + ok[0].heldout.size() == 10);

    SyntheticTaskSpec overlap = f1;
    overlap.fact_key_begin = 5;
    REQUIRE_THROWS_AS(make_tasks({f0, overlap}, v), std::invalid_argument);
}

TEST_CASE("params_report matches the toy closed form") {
    // M=3, d_m={8,12,16}, d_s=8, Q=2, d_z=4, h_r=5 -> 35 + 1152 + 512 = 1699
    std::vector<ExpertBackbone> pool;
    std::vector<int> dims = {8, 12, 16};
    for (int i = 0; i < 3; ++i) {
        ExpertConfig ec;
        ec.expert_id = i;
        ec.num_layers = 2;
        ec.hidden_dim = dims[static_cast<size_t>(i)];
        ec.num_heads = 2;
        ec.vocab_size = 11;
        ec.max_seq_len = 16;
        auto e = ExpertBackbone::init(ec, 60 + static_cast<uint64_t>(i));
        e.freeze();
        pool.push_back(std::move(e));
    }
    EncoderConfig ecfg;
    ecfg.dim = 4;
    ecfg.layers = 1;
    ecfg.heads = 1;
    ecfg.vocab_size = 11;
    ecfg.max_seq_len = 16;
    RouterConfig rcfg;
    rcfg.encoder_dim = 4;
    rcfg.hidden_dim = 5;
    rcfg.num_experts = 3;
    rcfg.top_k = 2;
    ModelConfig mcfg;
    mcfg.num_stacks = 2;
    mcfg.shared_dim = 8;
    mcfg.heads = 2;
    mcfg.top_k = 2;
    auto model = Model::assemble(pool, PromptEncoder::init(ecfg), mcfg, rcfg, 61);
    auto rep = params_report(model);
    REQUIRE(rep.router == 35u);
    REQUIRE(rep.projectors == 1152u);
    REQUIRE(rep.attention == 512u);
    REQUIRE(rep.total == 1699u);
    REQUIRE(rep.overhead_pct > 0.0);

    // doubling Q doubles proj and attn, router unchanged
    ModelConfig q4 = mcfg;
    q4.num_stacks = 4;  // fits: experts need >= 4 layers
    std::vector<ExpertBackbone> pool4;
    for (int i = 0; i < 3; ++i) {
        ExpertConfig ec;
        ec.expert_id = i;
        ec.num_layers = 4;
        ec.hidden_dim = dims[static_cast<size_t>(i)];
        ec.num_heads = 2;
        ec.vocab_size = 11;
        ec.max_seq_len = 16;
        auto e = ExpertBackbone::init(ec, 70 + static_cast<uint64_t>(i));
        e.freeze();
        pool4.push_back(std::move(e));
    }
    auto model4 = Model::assemble(pool4, PromptEncoder::init(ecfg), q4, rcfg, 62);
    auto rep4 = params_report(model4);
    REQUIRE(rep4.router == rep.router);
    REQUIRE(rep4.projectors == 2 * rep.projectors);
    REQUIRE(rep4.attention == 2 * rep.attention);

    // doubling d_s quadruples the attention count
    ModelConfig wide = mcfg;
    wide.shared_dim = 16;
    auto model_w = Model::assemble(pool, PromptEncoder::init(ecfg), wide, rcfg, 63);
    auto rep_w = params_report(model_w);
    REQUIRE(rep_w.attention == 4 * rep.attention);
    REQUIRE(rep_w.projectors == 2 * rep.projectors);

    // tampering with an instantiated tensor is a hard error
    auto broken = Model::assemble(pool, PromptEncoder::init(ecfg), mcfg, rcfg, 64);
    broken.interactions[0].w_query = Tensor::zeros({4, 4}, true);
    REQUIRE_THROWS_AS(params_report(broken), std::runtime_error);
}

TEST_CASE("checkpoint round-trips through float32 payloads") {
    auto dir = fresh_dir("ckpt");
    Rng rng(9);
    auto a = randn_init({3, 4}, rng, 1.0, true);
    auto b = randn_init({7}, rng, 1.0, true);
    a.set_name("x/a");
    save_checkpoint((dir / "t.ckpt").string(), {{"x/a", a}, {"y/b", b}});
    auto loaded = load_checkpoint((dir / "t.ckpt").string());
    REQUIRE(loaded.size() == 2);
    REQUIRE(loaded[0].name == "x/a");
    REQUIRE(loaded[0].shape == Shape{3, 4});
    for (size_t i = 0; i < a.size(); ++i)
        REQUIRE(loaded[0].data[i] == static_cast<double>(static_cast<float>(a.values()[i])));

    // applying back gives exactly the f32-rounded values
    auto a2 = Tensor::zeros({3, 4}, true);
    auto b2 = Tensor::zeros({7}, true);
    apply_checkpoint({{"x/a", a2}, {"y/b", b2}}, loaded);
    REQUIRE(a2.values() == loaded[0].data);

    // a second save/load of the rounded values is lossless
    save_checkpoint((dir / "t2.ckpt").string(), {{"x/a", a2}, {"y/b", b2}});
    auto again = load_checkpoint((dir / "t2.ckpt").string());
    REQUIRE(again[0].data == a2.values());

    auto bad_shape = Tensor::zeros({4, 3}, true);
    REQUIRE_THROWS_AS(apply_checkpoint({{"x/a", bad_shape}}, loaded), std::invalid_argument);
    REQUIRE_THROWS_AS(apply_checkpoint({{"missing", a2}}, loaded), std::invalid_argument);
}

TEST_CASE("model checkpoints restore behaviour exactly") {
    auto dir = fresh_dir("model_ckpt");
    auto model = testing::mini_model(2, 2, 2, 8, 500);
    auto y1 = generate(model, {1, 2, 3}, [] {
        GenerateOptions o;
        o.max_len = 5;
        o.eos_id = -1;
        return o;
    }());
    save_checkpoint((dir / "m.ckpt").string(), model.all_parameters());

    auto model2 = testing::mini_model(2, 2, 2, 8, 501);  // different init
    apply_checkpoint(model2.all_parameters(), load_checkpoint((dir / "m.ckpt").string()));
    // reload the first model from the same file so both sit on f32-rounded weights
    apply_checkpoint(model.all_parameters(), load_checkpoint((dir / "m.ckpt").string()));
    auto ya = generate(model, {1, 2, 3}, [] {
        GenerateOptions o;
        o.max_len = 5;
        o.eos_id = -1;
        return o;
    }());
    auto yb = generate(model2, {1, 2, 3}, [] {
        GenerateOptions o;
        o.max_len = 5;
        o.eos_id = -1;
        return o;
    }());
    REQUIRE(ya == yb);
}

TEST_CASE("run config JSON round-trip") {
    auto dir = fresh_dir("cfg");
    RunConfig c = micro_config(dir / "out");
    json j = c.to_json();
    RunConfig c2 = RunConfig::from_json(j);
    REQUIRE(c2.to_json() == j);
    REQUIRE(c2.seed == c.seed);
    REQUIRE(c2.tasks.size() == c.tasks.size());
    REQUIRE(c2.experts.size() == c.experts.size());
    REQUIRE(c2.model.shared_dim == c.model.shared_dim);
    REQUIRE(c2.train.weights.consistency == c.train.weights.consistency);
}

TEST_CASE("experiment report round-trips through JSONL") {
    auto dir = fresh_dir("report");
    ExperimentReport rep;
    rep.experiment = "demo";
    rep.seed = 17;
    rep.rows = {{"row a", {{"x", 0.123456789012345}, {"y", 1.0}}},
                {"row b", {{"acc", 2.0 / 3.0}}}};
    const auto path = (dir / "report.jsonl").string();
    write_report(rep, path);
    REQUIRE(read_report(path) == rep);
}

TEST_CASE("untrained routing sits at chance level") {
    // Averaged over router initializations: specialist==primary ~ 1/M and
    // specialist in active set ~ K/M (M=3, K=2).
    Vocab v = Vocab::build({});
    auto tasks = make_tasks(three_task_specs(), v);
    double primary_sum = 0, active_sum = 0;
    int n = 0;
    for (uint64_t seed = 0; seed < 40; ++seed) {
        std::vector<ExpertBackbone> pool;
        for (int m = 0; m < 3; ++m) {
            ExpertConfig ec;
            ec.expert_id = m;
            ec.num_layers = 1;
            ec.hidden_dim = 8;
            ec.num_heads = 1;
            ec.vocab_size = v.size();
            ec.max_seq_len = 32;
            auto e = ExpertBackbone::init(ec, 900 + m);
            e.freeze();
            pool.push_back(std::move(e));
        }
        EncoderConfig ecfg;
        ecfg.dim = 12;
        ecfg.layers = 1;
        ecfg.heads = 2;
        ecfg.vocab_size = v.size();
        ecfg.max_seq_len = 32;
        ecfg.seed = Rng::mix(seed, 1);
        RouterConfig rcfg;
        rcfg.encoder_dim = 12;
        rcfg.hidden_dim = 6;
        rcfg.num_experts = 3;
        rcfg.top_k = 2;
        ModelConfig mcfg;
        mcfg.num_stacks = 1;
        mcfg.shared_dim = 8;
        mcfg.heads = 2;
        mcfg.top_k = 2;
        auto model = Model::assemble(std::move(pool), PromptEncoder::init(ecfg), mcfg, rcfg,
                                     Rng::mix(seed, 2));
        for (int task = 0; task < 3; ++task) {
            const auto& ex = tasks[static_cast<size_t>(task)].heldout[0];
            auto d = model.route(ex.prompt, nullptr);
            primary_sum += d.primary == task ? 1.0 : 0.0;
            active_sum += d.is_active(task) ? 1.0 : 0.0;
            ++n;
        }
    }
    const double primary = primary_sum / n;
    const double active = active_sum / n;
    INFO("primary " << primary << " active " << active);
    REQUIRE_THAT(primary, Catch::Matchers::WithinAbs(1.0 / 3.0, 0.15));
    REQUIRE_THAT(active, Catch::Matchers::WithinAbs(2.0 / 3.0, 0.15));
}

TEST_CASE("pretrained copy specialist clears the gate and beats its alien task") {
    Vocab v = Vocab::build({});
    SyntheticTaskSpec copy{"copy", TaskKind::copy, 3, 6, 400, 50, 31};
    SyntheticTaskSpec rev{"rev", TaskKind::reverse, 3, 6, 200, 50, 32};
    auto tasks = make_tasks({copy, rev}, v);

    ExpertConfig ec;
    ec.expert_id = 0;
    ec.num_layers = 2;
    ec.hidden_dim = 64;
    ec.num_heads = 4;
    ec.vocab_size = v.size();
    ec.max_seq_len = 32;
    auto e = ExpertBackbone::init(ec, 77);

    PretrainOpts opts;
    opts.steps = 900;
    opts.lr = 1e-3;
    opts.batch = 24;
    opts.eval_every = 75;
    auto rep = pretrain_specialist(e, {&tasks[0]}, opts, v.eos, 77, nullptr);
    INFO("copy accuracy " << rep.accuracy << " after " << rep.steps_run << " steps");
    REQUIRE(rep.accuracy >= 0.9);
    REQUIRE(e.frozen);

    const double alien = backbone_exact_match(e, tasks[1].heldout, v.eos);
    INFO("alien (reverse) accuracy " << alien);
    REQUIRE(alien < rep.accuracy);
}

TEST_CASE("build_pool caches pretrained experts on disk") {
    auto dir = fresh_dir("pool");
    RunConfig cfg = micro_config(dir);
    Vocab v = Vocab::build(cfg.vocab);
    auto tasks = make_tasks(cfg.tasks, v);
    auto pool1 = build_pool(cfg, v, tasks);
    REQUIRE(pool1.experts.size() == 2);
    REQUIRE_FALSE(pool1.reports[0].from_cache);
    REQUIRE(pool1.experts[0].frozen);
    REQUIRE(pool1.specialist_of.at("copy") == 0);

    auto pool2 = build_pool(cfg, v, tasks);
    REQUIRE(pool2.reports[0].from_cache);
    REQUIRE(pool2.experts[0].weights_hash() == pool1.experts[0].weights_hash());
    REQUIRE(pool2.reports[0].accuracy == pool1.reports[0].accuracy);
}

TEST_CASE("loss-ablation experiment emits four cumulative rows in order") {
    auto dir = fresh_dir("ablate");
    RunConfig cfg = micro_config(dir);
    auto rep = run_experiment(cfg, "loss-ablation");
    std::vector<std::string> arm_names;
    for (const auto& row : rep.rows)
        if (row.name.rfind("pretrain", 0) != 0) arm_names.push_back(row.name);
    REQUIRE(arm_names == std::vector<std::string>{"lm", "lm+ent", "lm+ent+bal", "lm+ent+bal+con"});
    for (const auto& row : rep.rows)
        for (const auto& [k, val] : row.metrics)
            if (k.rfind("acc_", 0) == 0) {
                REQUIRE(val >= 0.0);
                REQUIRE(val <= 1.0);
            }
    // the report on disk round-trips
    auto reread = read_report((fs::path(output_root(cfg)) / "loss-ablation" / "report.jsonl").string());
    REQUIRE(reread == rep);
}

TEST_CASE("dropout experiment produces one row per drop plus the full row") {
    auto dir = fresh_dir("dropout");
    RunConfig cfg = micro_config(dir);
    auto rep = run_experiment(cfg, "dropout");
    int drops = 0;
    bool full = false;
    for (const auto& row : rep.rows) {
        if (row.name == "all experts") full = true;
        if (row.name.rfind("without expert", 0) == 0) ++drops;
    }
    REQUIRE(full);
    REQUIRE(drops == 2);
}

TEST_CASE("unknown experiment kind is rejected") {
    auto dir = fresh_dir("unknown");
    RunConfig cfg = micro_config(dir);
    REQUIRE_THROWS_AS(run_experiment(cfg, "bogus"), std::invalid_argument);
}
