#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "seqlab/model.hpp"
#include "seqlab/optim.hpp"
#include "seqlab/taskgen.hpp"

namespace seqlab {

using ordered_json = nlohmann::ordered_json;

struct RunConfig {
    Family family = Family::Attn;
    int d_model = 128;
    int n_layers = 2;
    int n_heads = 4;
    int n_state = 16;
    int expand = 2;
    int k_conv = 4;
    TaskConfig task;
    double lr = 3e-4;
    uint64_t seed = 0;  // model/embedding init seed; the dataset seed lives in task
    int batch_size = 64;
    int64_t max_steps = 0;  // 0: derived as train_stream_len / batch_size
    double eval_every_frac = 0.01;
    double stop_threshold = 0.95;
    double weight_decay = 0.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 1.0;
    bool cosine_schedule = false;  // constant lr by default for the synthetic runs
    double warmup_frac = 0.03;

    int64_t resolved_max_steps() const {
        if (max_steps > 0) return max_steps;
        return train_stream_len(task) / batch_size;
    }

    void validate() const {
        task.validate();
        if (batch_size < 1) throw std::invalid_argument("run: batch_size must be >= 1");
        if (stop_threshold < 0.0 || stop_threshold > 1.0)
            throw std::invalid_argument("run: stop_threshold outside [0,1]");
        if (eval_every_frac <= 0.0 || eval_every_frac > 1.0)
            throw std::invalid_argument("run: eval_every_frac outside (0,1]");
        if (resolved_max_steps() < 1) throw std::invalid_argument("run: empty training budget");
    }

    std::string run_name() const {
        char lrbuf[32];
        std::snprintf(lrbuf, sizeof lrbuf, "%g", lr);
        return std::string(family_name(family)) + "_" + variant_name(task.variant) + "_s" +
               std::to_string(task.seq_len) + "_lr" + lrbuf + "_seed" + std::to_string(seed);
    }
};

struct EvalPoint {
    int64_t step = 0;
    double overall_acc = 0.0;
    std::vector<double> per_position_acc;  // NaN where a position has no samples
    double train_loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
};

struct RunRecord {
    RunConfig config;
    std::vector<EvalPoint> curve;
    std::optional<int64_t> steps_to_threshold;
    bool terminated_early = false;
    double wall_clock_s = 0.0;
    std::string status = "ok";  // ok | diverged | interrupted
    int64_t failed_step = -1;
    std::size_t param_count = 0;
    int64_t max_steps = 0;
};

// Mean of per-sequence means: every sequence weighs equally regardless of
// its target-token count.
inline Tensor batch_loss(const std::vector<Tensor>& per_sequence_losses) {
    if (per_sequence_losses.empty()) throw std::invalid_argument("batch_loss: empty batch");
    Tensor acc = per_sequence_losses[0];
    for (std::size_t i = 1; i < per_sequence_losses.size(); ++i)
        acc = add(acc, per_sequence_losses[i]);
    return scale(acc, 1.0 / static_cast<double>(per_sequence_losses.size()));
}

// Next-token objective on the final position only.
inline void final_position_targets(const SyntheticExample& ex, std::vector<int>& targets,
                                   std::vector<bool>& mask) {
    std::size_t l = ex.input_ids.size();
    targets.assign(l, 0);
    mask.assign(l, false);
    targets[l - 1] = ex.target_token;
    mask[l - 1] = true;
}

struct EvalResult {
    double overall_acc = 0.0;
    std::vector<double> per_position_acc;
    std::vector<int64_t> per_position_n;
};

inline int argmax_index(const Tensor& logits_row) {
    const double* d = logits_row.data();
    std::size_t n = logits_row.numel();
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (d[i] > d[best]) best = i;
    return static_cast<int>(best);
}

// Full pass over the stratified held-out stream; greedy prediction at the
// final position against the full vocabulary. Touches no RNG state.
inline EvalResult evaluate(const Model& model, const TaskConfig& task,
                           const TrainPairSet* train_pairs) {
    EvalResult res;
    res.per_position_acc.assign(static_cast<std::size_t>(task.seq_len),
                                std::numeric_limits<double>::quiet_NaN());
    res.per_position_n.assign(static_cast<std::size_t>(task.seq_len), 0);
    std::vector<int64_t> correct(static_cast<std::size_t>(task.seq_len), 0);
    int64_t n = eval_stream_len(task);
    int64_t total_correct = 0;
    for (int64_t i = 0; i < n; ++i) {
        SyntheticExample ex = eval_example(task, i, train_pairs);
        Tensor logits = model.forward_last(ex.input_ids);
        bool ok = argmax_index(logits) == ex.target_token;
        res.per_position_n[static_cast<std::size_t>(ex.target_pos)] += 1;
        if (ok) {
            correct[static_cast<std::size_t>(ex.target_pos)] += 1;
            ++total_correct;
        }
    }
    for (std::size_t p = 0; p < correct.size(); ++p)
        if (res.per_position_n[p] > 0)
            res.per_position_acc[p] =
                static_cast<double>(correct[p]) / static_cast<double>(res.per_position_n[p]);
    res.overall_acc = static_cast<double>(total_correct) / static_cast<double>(n);
    return res;
}

inline std::atomic<bool>& interrupt_flag() {
    static std::atomic<bool> f{false};
    return f;
}

using EvalCallback = std::function<void(const EvalPoint&)>;

// One training run: streams stratified batches, per-sequence loss
// normalization, global-norm clip, AdamW, periodic held-out evaluation with
// early stop at the first eval reaching stop_threshold.
inline RunRecord train_run(const RunConfig& cfg, const EvalCallback& on_eval = nullptr) {
    cfg.validate();
    auto t0 = std::chrono::steady_clock::now();

    VocabLayout layout = vocab_layout(cfg.task);
    ModelConfig mc;
    mc.family = cfg.family;
    mc.vocab = layout.vocab_size;
    mc.d_model = cfg.d_model;
    mc.n_layers = cfg.n_layers;
    mc.n_heads = cfg.n_heads;
    mc.n_state = cfg.n_state;
    mc.expand = cfg.expand;
    mc.k_conv = cfg.k_conv;
    mc.seed = cfg.seed;
    std::unique_ptr<Model> model = make_model(mc);
    std::vector<Tensor> params = model->parameters();

    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.beta1 = cfg.beta1;
    oc.beta2 = cfg.beta2;
    oc.eps = cfg.adam_eps;
    oc.weight_decay = cfg.weight_decay;
    AdamWState opt(params, oc);

    TrainPairSet train_pairs = TrainPairSet::build(cfg.task);

    RunRecord rec;
    rec.config = cfg;
    rec.param_count = parameter_count(*model);
    rec.max_steps = cfg.resolved_max_steps();

    int64_t eval_every = static_cast<int64_t>(
        std::ceil(cfg.eval_every_frac * static_cast<double>(rec.max_steps)));
    if (eval_every < 1) eval_every = 1;

    double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
    double interval_loss_sum = 0.0;
    int64_t interval_loss_n = 0;
    double last_grad_norm = 0.0;
    int64_t cursor = 0;
    std::vector<int> targets;
    std::vector<bool> mask;

    for (int64_t step = 1; step <= rec.max_steps; ++step) {
        if (interrupt_flag().load(std::memory_order_relaxed)) {
            rec.status = "interrupted";
            rec.failed_step = step;
            break;
        }
        double lr_now = cfg.cosine_schedule
                            ? lr_schedule(step - 1, rec.max_steps, cfg.lr, cfg.warmup_frac)
                            : cfg.lr;
        double step_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            SyntheticExample ex = train_example(cfg.task, cursor++);
            final_position_targets(ex, targets, mask);
            Tape tape;
            Tape::Scope scope(tape);
            Tensor loss = cross_entropy(model->forward(ex.input_ids), targets, mask);
            step_loss += loss.item();
            backward(scale(loss, inv_batch), tape);
        }
        step_loss *= inv_batch;
        if (!std::isfinite(step_loss)) {
            rec.status = "diverged";
            rec.failed_step = step;
            break;
        }
        interval_loss_sum += step_loss;
        interval_loss_n += 1;
        last_grad_norm = clip_global_norm(params, cfg.grad_clip);
        opt.set_lr(lr_now);
        opt.step();

        if (step % eval_every == 0 || step == rec.max_steps) {
            EvalResult ev = evaluate(*model, cfg.task, &train_pairs);
            EvalPoint pt;
            pt.step = step;
            pt.overall_acc = ev.overall_acc;
            pt.per_position_acc = ev.per_position_acc;
            pt.train_loss = interval_loss_sum / static_cast<double>(interval_loss_n);
            pt.grad_norm = last_grad_norm;
            pt.lr = lr_now;
            rec.curve.push_back(pt);
            if (on_eval) on_eval(pt);
            interval_loss_sum = 0.0;
            interval_loss_n = 0;
            if (ev.overall_acc >= cfg.stop_threshold) {
                rec.steps_to_threshold = step;
                rec.terminated_early = step < rec.max_steps;
                break;
            }
        }
    }

    rec.wall_clock_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rec;
}

// steps_to_threshold / max_steps; DNF stays disengaged (nullopt).
inline std::optional<double> steps_to_threshold_fraction(const RunRecord& rec) {
    if (!rec.steps_to_threshold) return std::nullopt;
    return static_cast<double>(*rec.steps_to_threshold) / static_cast<double>(rec.max_steps);
}

// ---------------------------------------------------------------------------
// persistence
// ---------------------------------------------------------------------------

inline ordered_json run_config_json(const RunConfig& c) {
    ordered_json j;
    j["family"] = family_name(c.family);
    j["d_model"] = c.d_model;
    j["n_layers"] = c.n_layers;
    j["n_heads"] = c.n_heads;
    j["n_state"] = c.n_state;
    j["expand"] = c.expand;
    j["k_conv"] = c.k_conv;
    j["task"] = {{"seq_len", c.task.seq_len},
                 {"variant", variant_name(c.task.variant)},
                 {"n_special", c.task.n_special},
                 {"n_output", c.task.n_output},
                 {"n_train", c.task.n_train},
                 {"n_eval", c.task.n_eval},
                 {"dataset_seed", c.task.seed}};
    j["lr"] = c.lr;
    j["seed"] = c.seed;
    j["batch_size"] = c.batch_size;
    j["max_steps"] = c.resolved_max_steps();
    j["eval_every_frac"] = c.eval_every_frac;
    j["stop_threshold"] = c.stop_threshold;
    j["weight_decay"] = c.weight_decay;
    j["beta1"] = c.beta1;
    j["beta2"] = c.beta2;
    j["adam_eps"] = c.adam_eps;
    j["grad_clip"] = c.grad_clip;
    j["schedule"] = c.cosine_schedule ? "cosine" : "constant";
    j["warmup_frac"] = c.warmup_frac;
    return j;
}

inline ordered_json eval_point_json(const EvalPoint& p) {
    ordered_json j;
    j["step"] = p.step;
    j["overall_acc"] = p.overall_acc;
    ordered_json arr = ordered_json::array();
    for (double v : p.per_position_acc)
        arr.push_back(std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr));
    j["per_position_acc"] = std::move(arr);
    j["train_loss"] = p.train_loss;
    j["grad_norm"] = p.grad_norm;
    j["lr"] = p.lr;
    return j;
}

inline ordered_json run_meta_json(const RunRecord& r) {
    ordered_json j;
    j["config"] = run_config_json(r.config);
    j["status"] = r.status;
    if (r.steps_to_threshold)
        j["steps_to_threshold"] = *r.steps_to_threshold;
    else
        j["steps_to_threshold"] = nullptr;
    auto frac = steps_to_threshold_fraction(r);
    j["fraction_of_budget"] = frac ? ordered_json(*frac) : ordered_json(nullptr);
    j["dnf"] = !r.steps_to_threshold.has_value();
    j["terminated_early"] = r.terminated_early;
    j["max_steps"] = r.max_steps;
    j["param_count"] = r.param_count;
    j["wall_clock_s"] = r.wall_clock_s;
    j["failed_step"] = r.failed_step;
    j["evals"] = r.curve.size();
    return j;
}

// One JSON-lines curve file per run plus a small meta file. The JSONL body
// is a pure function of (config, seeds); wall clock and status live in the
// meta file.
inline void save_run(const RunRecord& rec, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    std::string name = rec.config.run_name();
    {
        std::ofstream out(dir / (name + ".jsonl"), std::ios::trunc);
        for (const EvalPoint& p : rec.curve) out << eval_point_json(p).dump() << "\n";
    }
    std::ofstream meta(dir / (name + ".meta.json"), std::ios::trunc);
    meta << run_meta_json(rec).dump(2) << "\n";
}

// ---------------------------------------------------------------------------
// checkpoints: flat binary of 64-bit arrays + text manifest
// ---------------------------------------------------------------------------

inline void save_checkpoint(const std::filesystem::path& path, const Model& model,
                            const AdamWState& opt) {
    std::vector<Tensor> params = model.parameters();
    std::ofstream bin(path, std::ios::binary | std::ios::trunc);
    if (!bin) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    auto& m1 = const_cast<AdamWState&>(opt).moment1();
    auto& m2 = const_cast<AdamWState&>(opt).moment2();
    for (std::size_t i = 0; i < params.size(); ++i) {
        bin.write(reinterpret_cast<const char*>(params[i].data()),
                  static_cast<std::streamsize>(params[i].numel() * sizeof(double)));
        bin.write(reinterpret_cast<const char*>(m1[i].data()),
                  static_cast<std::streamsize>(m1[i].size() * sizeof(double)));
        bin.write(reinterpret_cast<const char*>(m2[i].data()),
                  static_cast<std::streamsize>(m2[i].size() * sizeof(double)));
    }
    std::ofstream manifest(path.string() + ".manifest", std::ios::trunc);
    manifest << "seqlab-checkpoint v1\n";
    manifest << "step " << opt.step_count() << "\n";
    for (std::size_t i = 0; i < params.size(); ++i) {
        manifest << "param p" << i << " shape " << shape_str(params[i].shape()) << " numel "
                 << params[i].numel() << "\n";
    }
}

inline void load_checkpoint(const std::filesystem::path& path, Model& model, AdamWState& opt) {
    std::vector<Tensor> params = model.parameters();
    std::ifstream bin(path, std::ios::binary);
    if (!bin) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    auto& m1 = opt.moment1();
    auto& m2 = opt.moment2();
    for (std::size_t i = 0; i < params.size(); ++i) {
        bin.read(reinterpret_cast<char*>(params[i].data()),
                 static_cast<std::streamsize>(params[i].numel() * sizeof(double)));
        bin.read(reinterpret_cast<char*>(m1[i].data()),
                 static_cast<std::streamsize>(m1[i].size() * sizeof(double)));
        bin.read(reinterpret_cast<char*>(m2[i].data()),
                 static_cast<std::streamsize>(m2[i].size() * sizeof(double)));
    }
    if (!bin) throw std::runtime_error("load_checkpoint: truncated file " + path.string());
    std::ifstream manifest(path.string() + ".manifest");
    std::string word;
    int64_t step = 0;
    if (manifest >> word >> word >> word >> step) opt.set_step_count(step);
}

// ---------------------------------------------------------------------------
// sweeps: run-level parallelism, one results file per run
// ---------------------------------------------------------------------------

struct SweepResult {
    std::vector<RunRecord> records;
    bool any_failed = false;
};

// Executes the runs on up to `workers` threads. Completed runs found in the
// results directory are reused rather than recomputed (rerunning a sweep
// after an interruption redoes unfinished runs only).
inline SweepResult sweep(const std::vector<RunConfig>& runs, const std::filesystem::path& dir,
                         int workers, bool verbose = true) {
    std::filesystem::create_directories(dir);
    SweepResult result;
    result.records.resize(runs.size());
    std::vector<char> done(runs.size(), 0);
    std::atomic<std::size_t> next{0};
    std::mutex io_mutex;

    auto work = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= runs.size()) return;
            if (interrupt_flag().load(std::memory_order_relaxed)) return;
            const RunConfig& cfg = runs[i];
            std::string name = cfg.run_name();
            auto meta_path = dir / (name + ".meta.json");
            if (std::filesystem::exists(meta_path)) {
                try {
                    std::ifstream in(meta_path);
                    ordered_json j = ordered_json::parse(in);
                    std::string status = j.value("status", "");
                    if (status == "ok" || status == "diverged") {
                        RunRecord rec;
                        rec.config = cfg;
                        rec.status = status;
                        if (!j["steps_to_threshold"].is_null())
                            rec.steps_to_threshold = j["steps_to_threshold"].get<int64_t>();
                        rec.terminated_early = j.value("terminated_early", false);
                        rec.max_steps = j.value("max_steps", cfg.resolved_max_steps());
                        rec.param_count = j.value("param_count", std::size_t{0});
                        rec.wall_clock_s = j.value("wall_clock_s", 0.0);
                        rec.failed_step = j.value("failed_step", int64_t{-1});
                        result.records[i] = rec;
                        done[i] = 1;
                        if (verbose) {
                            std::lock_guard<std::mutex> lk(io_mutex);
                            std::printf("[sweep] %-40s cached (%s)\n", name.c_str(), status.c_str());
                            std::fflush(stdout);
                        }
                        continue;
                    }
                } catch (...) {
                    // unreadable meta: redo the run
                }
            }
            if (verbose) {
                std::lock_guard<std::mutex> lk(io_mutex);
                std::printf("[sweep] %-40s start\n", name.c_str());
                std::fflush(stdout);
            }
            // stream curve lines as they appear so progress is observable
            std::ofstream live(dir / (name + ".jsonl"), std::ios::trunc);
            RunRecord rec = train_run(cfg, [&live](const EvalPoint& p) {
                live << eval_point_json(p).dump() << "\n";
                live.flush();
            });
            live.close();
            std::ofstream meta(meta_path, std::ios::trunc);
            meta << run_meta_json(rec).dump(2) << "\n";
            meta.close();
            result.records[i] = rec;
            done[i] = 1;
            if (verbose) {
                std::lock_guard<std::mutex> lk(io_mutex);
                std::printf("[sweep] %-40s %s steps_to_threshold=%s wall=%.0fs\n", name.c_str(),
                            rec.status.c_str(),
                            rec.steps_to_threshold ? std::to_string(*rec.steps_to_threshold).c_str()
                                                   : "DNF",
                            rec.wall_clock_s);
                std::fflush(stdout);
            }
        }
    };

    int w = std::max(1, workers);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(w));
    for (int t = 0; t < w; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();

    for (std::size_t i = 0; i < runs.size(); ++i) {
        if (!done[i]) {
            result.records[i].config = runs[i];
            result.records[i].status = "interrupted";
            result.any_failed = true;
        } else if (result.records[i].status != "ok") {
            result.any_failed = true;
        }
    }
    return result;
}

inline void save_sweep_summary(const SweepResult& sw, const std::filesystem::path& dir,
                               const std::string& filename = "summary.json") {
    ordered_json runs = ordered_json::array();
    for (const RunRecord& r : sw.records) {
        ordered_json j;
        j["run"] = r.config.run_name();
        j["family"] = family_name(r.config.family);
        j["variant"] = variant_name(r.config.task.variant);
        j["seq_len"] = r.config.task.seq_len;
        j["lr"] = r.config.lr;
        j["seed"] = r.config.seed;
        j["status"] = r.status;
        j["steps_to_threshold"] =
            r.steps_to_threshold ? ordered_json(*r.steps_to_threshold) : ordered_json(nullptr);
        auto frac = steps_to_threshold_fraction(r);
        j["fraction_of_budget"] = frac ? ordered_json(*frac) : ordered_json(nullptr);
        j["max_steps"] = r.max_steps;
        j["param_count"] = r.param_count;
        j["wall_clock_s"] = r.wall_clock_s;
        runs.push_back(std::move(j));
    }
    ordered_json j;
    j["runs"] = std::move(runs);
    std::ofstream out(dir / filename, std::ios::trunc);
    out << j.dump(2) << "\n";
}

}  // namespace seqlab
