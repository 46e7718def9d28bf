// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: pool construction (pretraining frozen
// specialists on synthetic skills, with a disk cache), joint training
// runs with JSONL logs, exact-match evaluation with routing metrics, the
// closed-form vs instantiated parameter report, and the desk-scale
// experiment suite (vary-Q, placement, small, no-crossattn, loss-ablation,
// dropout, pool-scaling).
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <json.hpp>

#include "crossmix/checkpoint.hpp"
#include "crossmix/inference.hpp"
#include "crossmix/tasks.hpp"

namespace crossmix {

using nlohmann::json;

// ---------------------------------------------------------------------------
// configuration

struct PretrainOpts {
    int steps = 800;
    double lr = 1e-3;
    int batch = 24;
    int eval_every = 100;
    double target_accuracy = 0.9;
};

struct ExpertSpec {
    int layers = 4;
    int dim = 64;
    int heads = 4;
    double mlp_ratio = 4.0;
    std::vector<std::string> tasks;  // one task: specialist; several: generalist
    PretrainOpts pretrain;
};

struct TrainOpts {
    double lr = 3e-4;
    int warmup = 100;
    int steps = 1000;
    int batch = 16;
    double weight_decay = 0.01;
    double clip = 1.0;
    LossWeights weights;
};

struct RunConfig {
    uint64_t seed = 1;
    std::string out_dir = "runs/out";
    int max_seq_len = 48;
    VocabSpec vocab;
    std::vector<SyntheticTaskSpec> tasks;
    std::vector<ExpertSpec> experts;
    ModelConfig model;
    int encoder_dim = 64;
    int encoder_layers = 2;
    int encoder_heads = 4;
    int router_hidden = 32;
    TrainOpts train;
    std::vector<double> task_mix;  // empty: uniform over tasks

    static RunConfig from_json(const json& j);
    json to_json() const;

    static RunConfig load(const std::string& path) {
        std::ifstream is(path);
        require(is.good(), "cannot open config: " + path);
        json j = json::parse(is, nullptr, /*allow_exceptions=*/true, /*ignore_comments=*/true);
        return from_json(j);
    }
};

inline RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    c.seed = j.value("seed", 1ull);
    c.out_dir = j.value("out_dir", std::string("runs/out"));
    c.max_seq_len = j.value("max_seq_len", 48);
    if (j.contains("vocab")) {
        const auto& v = j.at("vocab");
        c.vocab.payload_symbols = v.value("payload_symbols", 20);
        c.vocab.mod_base = v.value("mod_base", 8);
        c.vocab.fact_keys = v.value("fact_keys", 90);
        c.vocab.fact_values = v.value("fact_values", 16);
    }
    for (const auto& t : j.value("tasks", json::array())) {
        SyntheticTaskSpec s;
        s.name = t.at("name").get<std::string>();
        s.kind = task_kind_from_string(t.at("kind").get<std::string>());
        s.len_min = t.value("len_min", 3);
        s.len_max = t.value("len_max", 6);
        s.train_size = t.value("train", 512);
        s.heldout_size = t.value("heldout", 64);
        s.seed = t.value("seed", 1ull);
        s.fact_owner = t.value("owner", -1);
        s.fact_key_begin = t.value("key_begin", 0);
        s.fact_key_count = t.value("key_count", 0);
        s.heldout_fact_fraction = t.value("heldout_fraction", 0.25);
        c.tasks.push_back(std::move(s));
    }
    for (const auto& e : j.value("experts", json::array())) {
        ExpertSpec s;
        s.layers = e.value("layers", 4);
        s.dim = e.value("dim", 64);
        s.heads = e.value("heads", 4);
        s.mlp_ratio = e.value("mlp_ratio", 4.0);
        s.tasks = e.value("tasks", std::vector<std::string>{});
        if (e.contains("pretrain")) {
            const auto& p = e.at("pretrain");
            s.pretrain.steps = p.value("steps", 800);
            s.pretrain.lr = p.value("lr", 1e-3);
            s.pretrain.batch = p.value("batch", 24);
            s.pretrain.eval_every = p.value("eval_every", 100);
            s.pretrain.target_accuracy = p.value("target_accuracy", 0.9);
        }
        c.experts.push_back(std::move(s));
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        c.model.num_stacks = m.value("stacks", 2);
        c.model.shared_dim = m.value("shared_dim", 32);
        c.model.heads = m.value("heads", 4);
        c.model.top_k = m.value("top_k", 2);
        c.model.temperature = m.value("temperature", 1.0);
        c.model.dropout = m.value("dropout", 0.1);
        c.model.placement = placement_from_string(m.value("placement", std::string("uniform")));
        c.model.per_head_scale = m.value("per_head_scale", true);
        c.model.use_cross_attention = m.value("cross_attention", true);
    }
    if (j.contains("encoder")) {
        const auto& e = j.at("encoder");
        c.encoder_dim = e.value("dim", 64);
        c.encoder_layers = e.value("layers", 2);
        c.encoder_heads = e.value("heads", 4);
    }
    c.router_hidden = j.value("router_hidden", 32);
    if (j.contains("train")) {
        const auto& t = j.at("train");
        c.train.lr = t.value("lr", 3e-4);
        c.train.warmup = t.value("warmup", 100);
        c.train.steps = t.value("steps", 1000);
        c.train.batch = t.value("batch", 16);
        c.train.weight_decay = t.value("weight_decay", 0.01);
        c.train.clip = t.value("clip", 1.0);
        c.train.weights.entropy = t.value("lambda_entropy", 0.01);
        c.train.weights.balance = t.value("lambda_balance", 0.01);
        c.train.weights.consistency = t.value("lambda_consistency", 0.05);
    }
    c.task_mix = j.value("task_mix", std::vector<double>{});
    return c;
}

inline json RunConfig::to_json() const {
    json j;
    j["seed"] = seed;
    j["out_dir"] = out_dir;
    j["max_seq_len"] = max_seq_len;
    j["vocab"] = {{"payload_symbols", vocab.payload_symbols},
                  {"mod_base", vocab.mod_base},
                  {"fact_keys", vocab.fact_keys},
                  {"fact_values", vocab.fact_values}};
    j["tasks"] = json::array();
    for (const auto& t : tasks)
        j["tasks"].push_back({{"name", t.name},
                              {"kind", to_string(t.kind)},
                              {"len_min", t.len_min},
                              {"len_max", t.len_max},
                              {"train", t.train_size},
                              {"heldout", t.heldout_size},
                              {"seed", t.seed},
                              {"owner", t.fact_owner},
                              {"key_begin", t.fact_key_begin},
                              {"key_count", t.fact_key_count},
                              {"heldout_fraction", t.heldout_fact_fraction}});
    j["experts"] = json::array();
    for (const auto& e : experts)
        j["experts"].push_back({{"layers", e.layers},
                                {"dim", e.dim},
                                {"heads", e.heads},
                                {"mlp_ratio", e.mlp_ratio},
                                {"tasks", e.tasks},
                                {"pretrain",
                                 {{"steps", e.pretrain.steps},
                                  {"lr", e.pretrain.lr},
                                  {"batch", e.pretrain.batch},
                                  {"eval_every", e.pretrain.eval_every},
                                  {"target_accuracy", e.pretrain.target_accuracy}}}});
    j["model"] = {{"stacks", model.num_stacks},
                  {"shared_dim", model.shared_dim},
                  {"heads", model.heads},
                  {"top_k", model.top_k},
                  {"temperature", model.temperature},
                  {"dropout", model.dropout},
                  {"placement", to_string(model.placement)},
                  {"per_head_scale", model.per_head_scale},
                  {"cross_attention", model.use_cross_attention}};
    j["encoder"] = {{"dim", encoder_dim}, {"layers", encoder_layers}, {"heads", encoder_heads}};
    j["router_hidden"] = router_hidden;
    j["train"] = {{"lr", train.lr},
                  {"warmup", train.warmup},
                  {"steps", train.steps},
                  {"batch", train.batch},
                  {"weight_decay", train.weight_decay},
                  {"clip", train.clip},
                  {"lambda_entropy", train.weights.entropy},
                  {"lambda_balance", train.weights.balance},
                  {"lambda_consistency", train.weights.consistency}};
    j["task_mix"] = task_mix;
    return j;
}

// Output root: the CROSSMIX_OUTPUT_ROOT environment variable overrides the
// config's out_dir parent.
inline std::filesystem::path output_root(const RunConfig& cfg) {
    if (const char* env = std::getenv("CROSSMIX_OUTPUT_ROOT"))
        return std::filesystem::path(env) / std::filesystem::path(cfg.out_dir).filename();
    return std::filesystem::path(cfg.out_dir);
}

// ---------------------------------------------------------------------------
// specialist pretraining

struct PretrainReport {
    std::string name;
    double accuracy = 0.0;
    bool reached_half = true;
    int steps_run = 0;
    bool from_cache = false;
};

// Greedy exact-match accuracy of a bare backbone on a set of examples.
inline double backbone_exact_match(const ExpertBackbone& e, const std::vector<TrainExample>& set,
                                   int eos_id) {
    if (set.empty()) return 0.0;
    int hits = 0;
    for (const auto& ex : set) {
        auto y = backbone_generate(e, ex.prompt, static_cast<int>(ex.target.size()) + 2, eos_id);
        if (y == ex.target) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(set.size());
}

// Train one unfrozen backbone on its assigned synthetic skill(s) until the
// held-out gate is met or the budget runs out, then freeze it. A specialist
// that cannot reach 0.5 is flagged in the log but the pool stays usable.
inline PretrainReport pretrain_specialist(ExpertBackbone& backbone,
                                          const std::vector<const TaskData*>& skills,
                                          const PretrainOpts& opts, int eos_id, uint64_t seed,
                                          std::ostream* log) {
    require(!backbone.frozen, "pretrain_specialist: backbone already frozen");
    require(!skills.empty(), "pretrain_specialist: no tasks assigned");
    PretrainReport rep;

    auto params = backbone.parameters("");
    AdamW opt;
    opt.lr = opts.lr;
    opt.warmup = std::min(50, std::max(1, opts.steps / 10));
    opt.weight_decay = 0.01;

    std::vector<TrainExample> gate;
    for (const auto* t : skills) {
        const auto& g = t->gate_pool();
        gate.insert(gate.end(), g.begin(), g.end());
    }

    Rng rng(Rng::mix(seed, 0x9e77));
    double acc = 0.0;
    for (int step = 0; step < opts.steps; ++step) {
        Tensor loss_acc;
        for (int i = 0; i < opts.batch; ++i) {
            const auto& pool = skills[static_cast<size_t>(rng.randint(0, static_cast<int>(skills.size())))]
                                   ->pretrain_pool();
            const auto& ex = pool[static_cast<size_t>(rng.randint(0, static_cast<int>(pool.size())))];
            std::vector<int> input = ex.prompt;
            input.insert(input.end(), ex.target.begin(), ex.target.end());
            input.pop_back();
            Tensor logits = backbone.full_forward(input);
            Tensor sliced = slice_rows(logits, static_cast<int>(ex.prompt.size()) - 1,
                                       static_cast<int>(input.size()));
            Tensor li = cross_entropy(sliced, ex.target);
            loss_acc = loss_acc.defined() ? add(loss_acc, li) : li;
        }
        Tensor loss = scale(loss_acc, 1.0 / opts.batch);
        for (auto& [name, t] : params) t.zero_grad();
        loss.backward();
        opt.update(params);
        rep.steps_run = step + 1;
        if (log && (step % 25 == 0 || step + 1 == opts.steps))
            (*log) << json{{"step", step}, {"loss", loss.item()}}.dump() << "\n";
        if (opts.eval_every > 0 && (step + 1) % opts.eval_every == 0) {
            acc = backbone_exact_match(backbone, gate, eos_id);
            if (log) (*log) << json{{"step", step}, {"gate_accuracy", acc}}.dump() << "\n";
            if (acc >= opts.target_accuracy) break;
        }
    }
    backbone.freeze();
    rep.accuracy = backbone_exact_match(backbone, gate, eos_id);
    rep.reached_half = rep.accuracy >= 0.5;
    if (log) {
        (*log) << json{{"final_accuracy", rep.accuracy}, {"steps_run", rep.steps_run}}.dump() << "\n";
        if (!rep.reached_half)
            (*log) << json{{"flag", "specialist below 0.5 accuracy"}, {"accuracy", rep.accuracy}}.dump()
                   << "\n";
    }
    return rep;
}

// ---------------------------------------------------------------------------
// pool construction with a checkpoint cache

struct Pool {
    std::vector<ExpertBackbone> experts;
    std::vector<PretrainReport> reports;
    std::map<std::string, int> specialist_of;  // task name -> expert id (single-task experts)
};

inline const TaskData* find_task(const std::vector<TaskData>& tasks, const std::string& name) {
    for (const auto& t : tasks)
        if (t.spec.name == name) return &t;
    fail("config references unknown task '" + name + "'");
}

inline uint64_t expert_spec_hash(const ExpertSpec& s, uint64_t seed, int vocab_size, int max_seq) {
    uint64_t h = Rng::mix(seed, 0xE5);
    h = Rng::mix(h, static_cast<uint64_t>(s.layers));
    h = Rng::mix(h, static_cast<uint64_t>(s.dim));
    h = Rng::mix(h, static_cast<uint64_t>(s.heads));
    h = Rng::mix(h, static_cast<uint64_t>(s.pretrain.steps));
    h = Rng::mix(h, static_cast<uint64_t>(s.pretrain.batch));
    h = Rng::mix(h, static_cast<uint64_t>(s.pretrain.lr * 1e9));
    h = Rng::mix(h, static_cast<uint64_t>(s.mlp_ratio * 1e6));
    h = Rng::mix(h, static_cast<uint64_t>(vocab_size));
    h = Rng::mix(h, static_cast<uint64_t>(max_seq));
    for (const auto& t : s.tasks)
        for (char ch : t) h = Rng::mix(h, static_cast<uint64_t>(ch));
    return h;
}

inline Pool build_pool(const RunConfig& cfg, const Vocab& vocab, const std::vector<TaskData>& tasks) {
    namespace fs = std::filesystem;
    Pool pool;
    const fs::path root = output_root(cfg) / "pool";
    fs::create_directories(root);
    for (size_t i = 0; i < cfg.experts.size(); ++i) {
        const auto& spec = cfg.experts[i];
        ExpertConfig ecfg;
        ecfg.expert_id = static_cast<int>(i);
        ecfg.num_layers = spec.layers;
        ecfg.hidden_dim = spec.dim;
        ecfg.num_heads = spec.heads;
        ecfg.vocab_size = vocab.size();
        ecfg.max_seq_len = cfg.max_seq_len;
        ecfg.mlp_ratio = spec.mlp_ratio;
        const uint64_t init_seed = Rng::mix(cfg.seed, 1000 + static_cast<uint64_t>(i));
        auto backbone = ExpertBackbone::init(ecfg, init_seed);

        const uint64_t spec_hash = expert_spec_hash(spec, cfg.seed, vocab.size(), cfg.max_seq_len);
        const fs::path ckpt = root / ("expert" + std::to_string(i) + "_" + std::to_string(spec_hash) + ".ckpt");
        const fs::path meta = ckpt.string() + ".json";

        PretrainReport rep;
        if (fs::exists(ckpt) && fs::exists(meta)) {
            apply_checkpoint(backbone.parameters(""), load_checkpoint(ckpt.string()));
            backbone.freeze();
            std::ifstream ms(meta);
            json mj = json::parse(ms);
            rep.name = mj.value("name", "expert" + std::to_string(i));
            rep.accuracy = mj.value("accuracy", 0.0);
            rep.reached_half = mj.value("reached_half", true);
            rep.steps_run = mj.value("steps_run", 0);
            rep.from_cache = true;
        } else {
            std::vector<const TaskData*> skills;
            for (const auto& name : spec.tasks) skills.push_back(find_task(tasks, name));
            std::ofstream log(ckpt.string() + ".train.jsonl");
            rep = pretrain_specialist(backbone, skills, spec.pretrain, vocab.eos, init_seed, &log);
            rep.name = "expert" + std::to_string(i);
            save_checkpoint(ckpt.string(), backbone.parameters(""));
            // re-read so the logged accuracy reflects the f32 round-trip
            apply_checkpoint(backbone.parameters(""), load_checkpoint(ckpt.string()));
            std::vector<TrainExample> gate;
            for (const auto* t : skills) {
                const auto& g = t->gate_pool();
                gate.insert(gate.end(), g.begin(), g.end());
            }
            rep.accuracy = backbone_exact_match(backbone, gate, vocab.eos);
            std::ofstream ms(meta);
            ms << json{{"name", rep.name},
                       {"accuracy", rep.accuracy},
                       {"reached_half", rep.reached_half},
                       {"steps_run", rep.steps_run}}
                      .dump(2);
        }
        if (spec.tasks.size() == 1) pool.specialist_of[spec.tasks[0]] = static_cast<int>(i);
        pool.experts.push_back(std::move(backbone));
        pool.reports.push_back(std::move(rep));
    }
    return pool;
}

// ---------------------------------------------------------------------------
// model assembly, parameter report

inline Model assemble_from_config(const RunConfig& cfg, std::vector<ExpertBackbone> pool,
                                  const Vocab& vocab, uint64_t model_seed) {
    EncoderConfig ecfg;
    ecfg.dim = cfg.encoder_dim;
    ecfg.layers = cfg.encoder_layers;
    ecfg.heads = cfg.encoder_heads;
    ecfg.vocab_size = vocab.size();
    ecfg.max_seq_len = cfg.max_seq_len;
    ecfg.seed = Rng::mix(cfg.seed, 0xE2C0DE);
    RouterConfig rcfg;
    rcfg.encoder_dim = cfg.encoder_dim;
    rcfg.hidden_dim = cfg.router_hidden;
    rcfg.num_experts = static_cast<int>(pool.size());
    rcfg.top_k = cfg.model.top_k;
    rcfg.temperature = cfg.model.temperature;
    return Model::assemble(std::move(pool), PromptEncoder::init(ecfg), cfg.model, rcfg, model_seed);
}

struct ParamsReport {
    size_t router = 0, projectors = 0, attention = 0, total = 0;
    size_t pool_params = 0;
    double overhead_pct = 0.0;
};

// Closed-form trainable-weight counts, cross-checked against the
// instantiated tensors; any disagreement is a hard error. Biases are
// excluded from the count on both sides.
inline ParamsReport params_report(const Model& model) {
    ParamsReport rep;
    const int q = model.config.num_stacks;
    const int ds = model.config.shared_dim;
    size_t dim_sum = 0;
    for (const auto& e : model.experts) dim_sum += static_cast<size_t>(e.config.hidden_dim);
    rep.router = static_cast<size_t>(model.router_config.encoder_dim) *
                     static_cast<size_t>(model.router_config.hidden_dim) +
                 static_cast<size_t>(model.router_config.hidden_dim) *
                     static_cast<size_t>(model.router_config.num_experts);
    rep.projectors = static_cast<size_t>(q) * 2 * static_cast<size_t>(ds) * dim_sum;
    rep.attention = model.config.use_cross_attention
                        ? static_cast<size_t>(q) * 4 * static_cast<size_t>(ds) * static_cast<size_t>(ds)
                        : 0;
    rep.total = rep.router + rep.projectors + rep.attention;

    size_t inst_router = 0, inst_proj = 0, inst_attn = 0;
    for (const auto& [name, t] : model.trainable_parameters()) {
        if (name.find("bias") != std::string::npos) continue;
        if (name.rfind("router/", 0) == 0)
            inst_router += t.size();
        else if (name.find("proj") != std::string::npos)
            inst_proj += t.size();
        else
            inst_attn += t.size();
    }
    if (inst_router != rep.router || inst_proj != rep.projectors || inst_attn != rep.attention)
        throw std::runtime_error(
            "parameter accounting mismatch: closed form (router " + std::to_string(rep.router) +
            ", proj " + std::to_string(rep.projectors) + ", attn " + std::to_string(rep.attention) +
            ") vs instantiated (router " + std::to_string(inst_router) + ", proj " +
            std::to_string(inst_proj) + ", attn " + std::to_string(inst_attn) + ")");

    for (const auto& e : model.experts)
        for (const auto& [name, t] : e.parameters("")) rep.pool_params += t.size();
    rep.overhead_pct = 100.0 * static_cast<double>(rep.total) / static_cast<double>(rep.pool_params);
    return rep;
}

// ---------------------------------------------------------------------------
// joint training and evaluation

struct TrainRunResult {
    std::vector<LossBreakdown> history;
    double seconds = 0.0;
    int aborted_steps = 0;
};

inline TrainBatch sample_batch(const std::vector<TaskData>& tasks, const std::vector<double>& mix,
                               int batch_size, Rng& rng) {
    TrainBatch b;
    std::vector<double> cum;
    double total = 0.0;
    for (size_t i = 0; i < tasks.size(); ++i) {
        total += (i < mix.size() ? mix[i] : 1.0);
        cum.push_back(total);
    }
    for (int i = 0; i < batch_size; ++i) {
        const double u = rng.uniform() * total;
        size_t task = 0;
        while (task + 1 < cum.size() && u > cum[task]) ++task;
        const auto& pool = tasks[task].train;
        b.items.push_back(pool[static_cast<size_t>(rng.randint(0, static_cast<int>(pool.size())))]);
    }
    return b;
}

inline TrainRunResult train_run(Model& model, const std::vector<TaskData>& tasks,
                                const std::vector<double>& mix, const TrainOpts& opts,
                                uint64_t seed, std::ostream* log) {
    TrainRunResult res;
    AdamW opt;
    opt.lr = opts.lr;
    opt.warmup = opts.warmup;
    opt.weight_decay = opts.weight_decay;
    opt.clip = opts.clip;
    Rng batch_rng(Rng::mix(seed, 0xBA7C4));
    const auto t0 = std::chrono::steady_clock::now();
    for (int step = 0; step < opts.steps; ++step) {
        TrainBatch batch = sample_batch(tasks, mix, opts.batch, batch_rng);
        LossBreakdown bd = train_step(model, batch, opts.weights, opt, seed, step);
        if (bd.aborted) ++res.aborted_steps;
        if (log) {
            json rec{{"step", step},          {"lm", bd.lm},
                     {"ent", bd.entropy},     {"bal", bd.balance},
                     {"con", bd.consistency}, {"total", bd.total},
                     {"f", bd.activation_freq}, {"lr", bd.lr}};
            if (bd.aborted) rec["aborted"] = bd.abort_reason;
            (*log) << rec.dump() << "\n";
        }
        res.history.push_back(std::move(bd));
    }
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

struct TaskEval {
    std::string task;
    double exact_match = 0.0;
    double routing_primary = 0.0;  // specialist == designated primary
    double routing_active = 0.0;   // specialist in the active set
    int count = 0;
};

struct EvalReport {
    std::vector<TaskEval> per_task;
    double mean_exact_match = 0.0;
    double mean_routing_primary = 0.0;
    double mean_routing_active = 0.0;
};

// Greedy exact-match over held-out sets, with routing accuracy against the
// task's designated specialist (when the pool has one).
inline EvalReport evaluate_model(const Model& model, const std::vector<TaskData>& tasks,
                                 const Vocab& vocab, const std::map<std::string, int>& specialist_of,
                                 const std::set<int>& drop = {}) {
    EvalReport rep;
    double acc_sum = 0, rp_sum = 0, ra_sum = 0;
    int routed_tasks = 0;
    for (const auto& task : tasks) {
        TaskEval te;
        te.task = task.spec.name;
        te.count = static_cast<int>(task.heldout.size());
        int specialist = -1;
        if (auto it = specialist_of.find(task.spec.name); it != specialist_of.end())
            specialist = it->second;
        if (task.spec.kind == TaskKind::fact_lookup && task.spec.fact_owner >= 0)
            specialist = task.spec.fact_owner;
        int hits = 0, rp = 0, ra = 0;
        for (const auto& ex : task.heldout) {
            GenerateOptions o;
            o.max_len = static_cast<int>(ex.target.size()) + 2;
            o.eos_id = vocab.eos;
            o.drop = drop;
            auto decision = model.route(ex.prompt, nullptr, drop.empty() ? nullptr : &drop);
            if (specialist >= 0 && !drop.count(specialist)) {
                if (decision.primary == specialist) ++rp;
                if (decision.is_active(specialist)) ++ra;
            }
            if (generate(model, ex.prompt, o) == ex.target) ++hits;
        }
        te.exact_match = te.count ? static_cast<double>(hits) / te.count : 0.0;
        te.routing_primary = te.count ? static_cast<double>(rp) / te.count : 0.0;
        te.routing_active = te.count ? static_cast<double>(ra) / te.count : 0.0;
        acc_sum += te.exact_match;
        if (specialist >= 0 && !drop.count(specialist)) {
            rp_sum += te.routing_primary;
            ra_sum += te.routing_active;
            ++routed_tasks;
        }
        rep.per_task.push_back(std::move(te));
    }
    const double n = static_cast<double>(tasks.size());
    rep.mean_exact_match = n > 0 ? acc_sum / n : 0.0;
    rep.mean_routing_primary = routed_tasks ? rp_sum / routed_tasks : 0.0;
    rep.mean_routing_active = routed_tasks ? ra_sum / routed_tasks : 0.0;
    return rep;
}

// ---------------------------------------------------------------------------
// experiment reports

struct ExperimentRow {
    std::string name;
    std::map<std::string, double> metrics;
    bool operator==(const ExperimentRow&) const = default;
};

struct ExperimentReport {
    std::string experiment;
    uint64_t seed = 0;
    std::vector<ExperimentRow> rows;
    bool operator==(const ExperimentReport&) const = default;
};

inline void write_report(const ExperimentReport& rep, const std::string& path) {
    std::ofstream os(path);
    require(os.good(), "cannot write report: " + path);
    os << json{{"experiment", rep.experiment}, {"seed", rep.seed}}.dump() << "\n";
    for (const auto& row : rep.rows)
        os << json{{"name", row.name}, {"metrics", row.metrics}}.dump() << "\n";
}

inline ExperimentReport read_report(const std::string& path) {
    std::ifstream is(path);
    require(is.good(), "cannot read report: " + path);
    ExperimentReport rep;
    std::string line;
    require(static_cast<bool>(std::getline(is, line)), "empty report: " + path);
    json header = json::parse(line);
    rep.experiment = header.at("experiment").get<std::string>();
    rep.seed = header.at("seed").get<uint64_t>();
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ExperimentRow row;
        row.name = j.at("name").get<std::string>();
        row.metrics = j.at("metrics").get<std::map<std::string, double>>();
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

inline std::string summary_table(const ExperimentReport& rep) {
    std::ostringstream os;
    os << "experiment: " << rep.experiment << " (seed " << rep.seed << ")\n";
    for (const auto& row : rep.rows) {
        os << "  " << row.name << ":";
        for (const auto& [k, v] : row.metrics) os << "  " << k << "=" << v;
        os << "\n";
    }
    return os.str();
}

// ---------------------------------------------------------------------------
// experiments

inline std::vector<double> default_mix(const RunConfig& cfg) {
    if (!cfg.task_mix.empty()) return cfg.task_mix;
    return std::vector<double>(cfg.tasks.size(), 1.0);
}

namespace detail {

// Train a fresh model over the pool and evaluate it; shared by most
// experiment arms.
struct ArmResult {
    EvalReport eval;
    double train_seconds = 0.0;
    size_t trainable_weights = 0;
    Model model;
};

inline ArmResult run_arm(const RunConfig& cfg, const Pool& pool, const Vocab& vocab,
                         const std::vector<TaskData>& tasks, const ModelConfig& mcfg,
                         const TrainOpts& topts, uint64_t model_seed, std::ostream* log) {
    RunConfig arm_cfg = cfg;
    arm_cfg.model = mcfg;
    Model model = assemble_from_config(arm_cfg, pool.experts, vocab, model_seed);
    auto tr = train_run(model, tasks, default_mix(cfg), topts, model_seed, log);
    ArmResult res{evaluate_model(model, tasks, vocab, pool.specialist_of), tr.seconds, 0,
                  std::move(model)};
    for (const auto& [name, t] : res.model.trainable_parameters())
        if (name.find("bias") == std::string::npos) res.trainable_weights += t.size();
    return res;
}

inline void eval_rows(ExperimentReport& rep, const std::string& prefix, const EvalReport& ev,
                      std::map<std::string, double> extra = {}) {
    ExperimentRow agg;
    agg.name = prefix;
    agg.metrics["mean_exact_match"] = ev.mean_exact_match;
    agg.metrics["routing_primary"] = ev.mean_routing_primary;
    agg.metrics["routing_active"] = ev.mean_routing_active;
    for (const auto& [k, v] : extra) agg.metrics[k] = v;
    for (const auto& te : ev.per_task) agg.metrics["acc_" + te.task] = te.exact_match;
    rep.rows.push_back(std::move(agg));
}

}  // namespace detail

// Experiment kinds: main, vary-Q, placement, small, no-crossattn,
// loss-ablation, dropout, pool-scaling. Sub-run failures are recorded as
// rows with an "error" metric; remaining sub-runs continue.
inline ExperimentReport run_experiment(const RunConfig& cfg, const std::string& kind) {
    namespace fs = std::filesystem;
    const fs::path out = output_root(cfg) / kind;
    fs::create_directories(out);

    const Vocab vocab = Vocab::build(cfg.vocab);
    const auto tasks = make_tasks(cfg.tasks, vocab);
    const Pool pool = build_pool(cfg, vocab, tasks);

    ExperimentReport rep;
    rep.experiment = kind;
    rep.seed = cfg.seed;
    for (size_t i = 0; i < pool.reports.size(); ++i) {
        ExperimentRow row;
        row.name = "pretrain expert" + std::to_string(i);
        row.metrics["accuracy"] = pool.reports[i].accuracy;
        row.metrics["from_cache"] = pool.reports[i].from_cache ? 1.0 : 0.0;
        rep.rows.push_back(std::move(row));
    }

    auto guarded = [&rep](const std::string& name, auto&& fn) {
        try {
            fn();
        } catch (const std::exception& e) {
            std::cerr << "[" << rep.experiment << "] sub-run '" << name << "' failed: " << e.what()
                      << "\n";
            ExperimentRow row;
            row.name = name;
            row.metrics["error"] = 1.0;
            rep.rows.push_back(std::move(row));
        }
    };

    const uint64_t mseed = Rng::mix(cfg.seed, 0x3D0DE1);

    if (kind == "main") {
        guarded("main", [&] {
            std::ofstream log((out / "train.jsonl").string());
            auto arm = detail::run_arm(cfg, pool, vocab, tasks, cfg.model, cfg.train, mseed, &log);
            auto pr = params_report(arm.model);
            detail::eval_rows(rep, "main", arm.eval,
                              {{"seconds", arm.train_seconds},
                               {"trainable_weights", static_cast<double>(pr.total)},
                               {"overhead_pct", pr.overhead_pct}});
            save_checkpoint((out / "model.ckpt").string(), arm.model.all_parameters());
        });
    } else if (kind == "vary-Q") {
        for (int q : {1, 2, 4}) {
            guarded("Q=" + std::to_string(q), [&] {
                ModelConfig m = cfg.model;
                m.num_stacks = q;
                std::ofstream log((out / ("train_q" + std::to_string(q) + ".jsonl")).string());
                auto arm = detail::run_arm(cfg, pool, vocab, tasks, m, cfg.train,
                                           Rng::mix(mseed, static_cast<uint64_t>(q)), &log);
                detail::eval_rows(rep, "Q=" + std::to_string(q), arm.eval,
                                  {{"seconds", arm.train_seconds},
                                   {"trainable_weights", static_cast<double>(arm.trainable_weights)}});
            });
        }
    } else if (kind == "placement") {
        for (auto p : {Placement::shallow, Placement::intermediate, Placement::deep, Placement::uniform}) {
            guarded(to_string(p), [&] {
                ModelConfig m = cfg.model;
                m.placement = p;
                std::ofstream log((out / (std::string("train_") + to_string(p) + ".jsonl")).string());
                auto arm = detail::run_arm(cfg, pool, vocab, tasks, m, cfg.train,
                                           Rng::mix(mseed, static_cast<uint64_t>(p)), &log);
                detail::eval_rows(rep, to_string(p), arm.eval, {{"seconds", arm.train_seconds}});
            });
        }
    } else if (kind == "small") {
        for (bool small : {false, true}) {
            const std::string name = small ? "small" : "base";
            guarded(name, [&] {
                RunConfig c = cfg;
                ModelConfig m = cfg.model;
                if (small) {
                    m.shared_dim = std::max(8, cfg.model.shared_dim / 2);
                    c.router_hidden = std::max(8, cfg.router_hidden / 4);
                }
                c.model = m;
                std::ofstream log((out / ("train_" + name + ".jsonl")).string());
                Model model = assemble_from_config(c, pool.experts, vocab, mseed);
                auto tr = train_run(model, tasks, default_mix(cfg), cfg.train, mseed, &log);
                auto ev = evaluate_model(model, tasks, vocab, pool.specialist_of);
                auto pr = params_report(model);
                detail::eval_rows(rep, name, ev,
                                  {{"seconds", tr.seconds},
                                   {"trainable_weights", static_cast<double>(pr.total)}});
            });
        }
    } else if (kind == "no-crossattn") {
        for (bool ablated : {false, true}) {
            const std::string name = ablated ? "no-crossattn" : "full";
            guarded(name, [&] {
                ModelConfig m = cfg.model;
                m.use_cross_attention = !ablated;
                std::ofstream log((out / ("train_" + name + ".jsonl")).string());
                auto arm = detail::run_arm(cfg, pool, vocab, tasks, m, cfg.train, mseed, &log);
                detail::eval_rows(rep, name, arm.eval,
                                  {{"seconds", arm.train_seconds},
                                   {"trainable_weights", static_cast<double>(arm.trainable_weights)}});
            });
        }
    } else if (kind == "loss-ablation") {
        const LossWeights full = cfg.train.weights;
        const std::vector<std::pair<std::string, LossWeights>> arms = {
            {"lm", {0.0, 0.0, 0.0}},
            {"lm+ent", {full.entropy, 0.0, 0.0}},
            {"lm+ent+bal", {full.entropy, full.balance, 0.0}},
            {"lm+ent+bal+con", {full.entropy, full.balance, full.consistency}},
        };
        for (const auto& [name, weights] : arms) {
            guarded(name, [&] {
                TrainOpts t = cfg.train;
                t.weights = weights;
                std::ofstream log((out / ("train_" + name + ".jsonl")).string());
                auto arm = detail::run_arm(cfg, pool, vocab, tasks, cfg.model, t, mseed, &log);
                detail::eval_rows(rep, name, arm.eval, {{"seconds", arm.train_seconds}});
            });
        }
    } else if (kind == "dropout") {
        guarded("dropout", [&] {
            std::ofstream log((out / "train.jsonl").string());
            auto arm = detail::run_arm(cfg, pool, vocab, tasks, cfg.model, cfg.train, mseed, &log);
            auto full_eval = evaluate_model(arm.model, tasks, vocab, pool.specialist_of);
            detail::eval_rows(rep, "all experts", full_eval);
            // primary-critical: routed primary for at least half of some task's queries
            std::vector<bool> critical(pool.experts.size(), false);
            for (const auto& task : tasks) {
                std::vector<int> primary_counts(pool.experts.size(), 0);
                for (const auto& ex : task.heldout)
                    ++primary_counts[static_cast<size_t>(arm.model.route(ex.prompt, nullptr).primary)];
                for (size_t m = 0; m < pool.experts.size(); ++m)
                    if (primary_counts[m] * 2 >= static_cast<int>(task.heldout.size()))
                        critical[m] = true;
            }
            for (size_t m = 0; m < pool.experts.size(); ++m) {
                const std::string name = "without expert" + std::to_string(m);
                guarded(name, [&] {
                    auto ev = evaluate_model(arm.model, tasks, vocab, pool.specialist_of,
                                             {static_cast<int>(m)});
                    detail::eval_rows(
                        rep, name, ev,
                        {{"primary_critical", critical[m] ? 1.0 : 0.0},
                         {"degradation", full_eval.mean_exact_match - ev.mean_exact_match}});
                });
            }
        });
    } else if (kind == "pool-scaling") {
        guarded("pool-scaling", [&] {
            std::ofstream log((out / "train.jsonl").string());
            auto arm = detail::run_arm(cfg, pool, vocab, tasks, cfg.model, cfg.train, mseed, &log);
            for (size_t n = 1; n <= pool.experts.size(); ++n) {
                const std::string name = "pool=" + std::to_string(n);
                guarded(name, [&] {
                    std::set<int> drop;
                    for (size_t m = n; m < pool.experts.size(); ++m) drop.insert(static_cast<int>(m));
                    auto ev = evaluate_model(arm.model, tasks, vocab, pool.specialist_of, drop);
                    detail::eval_rows(rep, name, ev);
                });
            }
        });
    } else {
        fail("unknown experiment '" + kind +
             "' (expected main, vary-Q, placement, small, no-crossattn, loss-ablation, dropout, "
             "pool-scaling)");
    }

    write_report(rep, (out / "report.jsonl").string());
    std::ofstream summary((out / "summary.txt").string());
    summary << summary_table(rep);
    return rep;
}

}  // namespace crossmix
