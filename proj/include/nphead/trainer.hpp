#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "checkpoint.hpp"
#include "corpus.hpp"
#include "error.hpp"
#include "model.hpp"
#include "rng.hpp"
#include "rouge.hpp"
#include "tokenizer.hpp"

namespace nphead::train {

enum class Schedule { Constant, LinearDecay };

inline std::string to_string(Schedule s) { return s == Schedule::Constant ? "constant" : "linear"; }

inline Schedule schedule_from_string(const std::string& s) {
    if (s == "constant") return Schedule::Constant;
    if (s == "linear" || s == "linear-decay") return Schedule::LinearDecay;
    throw ConfigError("unknown lr schedule '" + s + "' (expected constant or linear)");
}

struct TrainConfig {
    double learning_rate = 5e-4;
    double weight_decay = 0.01;
    std::size_t batch_size = 5;
    std::size_t epochs = 3;
    std::uint64_t seed = 42;
    Schedule schedule = Schedule::LinearDecay;
    std::optional<double> clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t max_source_len = tok::kMaxSourceLen;
    std::size_t max_target_len = tok::kMaxTargetLen;
    // Stop after this many optimizer steps in total (0 = no cap).
    std::size_t max_steps = 0;
    std::size_t eval_threads = 0;  // 0 = hardware concurrency

    void validate() const {
        if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
        if (!(weight_decay >= 0)) throw ConfigError("weight_decay must be non-negative");
        if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (clip_norm && !(*clip_norm > 0)) throw ConfigError("gradient clip norm must be positive");
        if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("adam betas must be in [0, 1)");
        if (!(eps > 0)) throw ConfigError("adam eps must be positive");
        if (max_source_len < 2 || max_source_len > tok::kMaxSourceLen) throw ConfigError("max_source_len must be in [2, 1024]");
        if (max_target_len < 1 || max_target_len > tok::kMaxTargetLen) throw ConfigError("max_target_len must be in [1, 20]");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"learning_rate", c.learning_rate},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"seed", c.seed},
            {"lr_schedule", to_string(c.schedule)},
            {"gradient_clip_norm", c.clip_norm ? nlohmann::json(*c.clip_norm) : nlohmann::json(nullptr)},
            {"beta1", c.beta1},
            {"beta2", c.beta2},
            {"eps", c.eps},
            {"max_source_len", c.max_source_len},
            {"max_target_len", c.max_target_len},
            {"max_steps", c.max_steps},
            {"eval_threads", c.eval_threads}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.seed = j.value("seed", c.seed);
    c.schedule = schedule_from_string(j.value("lr_schedule", to_string(c.schedule)));
    if (j.contains("gradient_clip_norm")) {
        const auto& g = j["gradient_clip_norm"];
        c.clip_norm = g.is_null() ? std::nullopt : std::optional<double>(g.get<double>());
    }
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.eps = j.value("eps", c.eps);
    c.max_source_len = j.value("max_source_len", c.max_source_len);
    c.max_target_len = j.value("max_target_len", c.max_target_len);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.eval_threads = j.value("eval_threads", c.eval_threads);
    c.validate();
    return c;
}

// ------------------------------------------------------------------ optimizer

template <class T>
struct AdamState {
    std::size_t step = 0;
    std::map<std::string, std::vector<double>> m;
    std::map<std::string, std::vector<double>> v;
};

struct AdamHyper {
    double lr = 5e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

template <class T>
void check_finite_grads(const std::map<std::string, num::Tensor<T>>& grads) {
    for (const auto& [name, g] : grads) {
        for (T v : g.data) {
            if (!std::isfinite(static_cast<double>(v))) throw NumericError("non-finite gradient in parameter '" + name + "'");
        }
    }
}

// Scales gradients in place so their global L2 norm is at most `max_norm`.
// Returns the norm before clipping.
template <class T>
double clip_global_norm(std::map<std::string, num::Tensor<T>>& grads, double max_norm) {
    double sq = 0;
    for (const auto& [name, g] : grads)
        for (T v : g.data) sq += static_cast<double>(v) * static_cast<double>(v);
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double c = max_norm / (norm + 1e-6);
        for (auto& [name, g] : grads)
            for (T& v : g.data) v = static_cast<T>(static_cast<double>(v) * c);
    }
    return norm;
}

// Decoupled-decay Adam update. Parameters missing from `grads` are treated as
// having zero gradient.
template <class T>
void optimizer_step(const std::vector<std::pair<std::string, num::Tensor<T>*>>& params,
                    const std::map<std::string, num::Tensor<T>>& grads, AdamState<T>& st, const AdamHyper& h) {
    check_finite_grads(grads);
    st.step += 1;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
    const T decay = static_cast<T>(1.0 - h.lr * h.weight_decay);
    for (const auto& [name, p] : params) {
        const auto git = grads.find(name);
        const num::Tensor<T>* g = git == grads.end() ? nullptr : &git->second;
        if (g && g->shape != p->shape) throw ContractError("optimizer: gradient shape mismatch for '" + name + "'");
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) {
            m.assign(p->size(), 0.0);
            v.assign(p->size(), 0.0);
        }
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double gi = g ? static_cast<double>(g->data[i]) : 0.0;
            m[i] = h.beta1 * m[i] + (1 - h.beta1) * gi;
            v[i] = h.beta2 * v[i] + (1 - h.beta2) * gi * gi;
            const double update = h.lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + h.eps);
            p->data[i] = static_cast<T>(static_cast<double>(p->data[i] * decay) - update);
        }
    }
}

inline double scheduled_lr(const TrainConfig& c, std::size_t step, std::size_t total_steps) {
    if (c.schedule == Schedule::Constant || total_steps == 0) return c.learning_rate;
    const double frac = static_cast<double>(total_steps - std::min(step, total_steps)) / static_cast<double>(total_steps);
    return c.learning_rate * frac;
}

// ------------------------------------------------------------------- batching

inline std::vector<tok::EncodedExample> encode_records(const tok::SubwordTokenizer& tk,
                                                       const std::vector<corpus::ArticleRecord>& recs,
                                                       std::size_t max_source, std::size_t max_target) {
    std::vector<tok::EncodedExample> out;
    out.reserve(recs.size());
    for (const auto& r : recs) out.push_back(tok::encode_example(tk, r.body, r.headline, max_source, max_target));
    return out;
}

// Index order for one epoch: seeded shuffle of 0..n-1 keyed by (seed, epoch).
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Rng rng(counter_hash(seed, 0x7261696eULL, epoch, 0));
    rng.shuffle(idx);
    return idx;
}

inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size, std::uint64_t seed,
                                                           std::size_t epoch) {
    const auto order = epoch_order(n, seed, epoch);
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < n; i += batch_size) {
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + batch_size)));
    }
    return out;
}

inline std::size_t steps_per_epoch(std::size_t n, std::size_t batch_size) { return (n + batch_size - 1) / batch_size; }

inline std::size_t total_steps(const TrainConfig& c, std::size_t n) {
    const std::size_t full = steps_per_epoch(n, c.batch_size) * c.epochs;
    return c.max_steps ? std::min(full, c.max_steps) : full;
}

// -------------------------------------------------------------------- stepping

struct StepStats {
    double loss = 0;
    double grad_norm = 0;
    double lr = 0;
};

template <class T>
StepStats train_step(model::Seq2SeqModel<T>& m, const tok::Batch& b, AdamState<T>& st, const AdamHyper& h,
                     std::optional<double> clip, std::uint64_t seed) {
    num::Graph<T> g;
    const lora::RunMode mode{true, seed, st.step};
    auto loss = m.loss(g, b, mode);
    StepStats s;
    s.loss = static_cast<double>(loss.value().item());
    if (!std::isfinite(s.loss)) throw NumericError("non-finite training loss at step " + std::to_string(st.step));
    auto grads = g.backward(loss);
    check_finite_grads(grads);
    if (clip) {
        s.grad_norm = clip_global_norm(grads, *clip);
    } else {
        double sq = 0;
        for (const auto& [n, gt] : grads)
            for (T v : gt.data) sq += static_cast<double>(v) * static_cast<double>(v);
        s.grad_norm = std::sqrt(sq);
    }
    s.lr = h.lr;
    optimizer_step(m.trainable_parameters(), grads, st, h);
    return s;
}

// ------------------------------------------------------------------ evaluation

struct Prediction {
    std::string id;
    std::vector<tok::TokenId> ids;
    std::string text;
    std::string reference;
};

// Generates one headline per record. Records are partitioned across threads;
// output order follows the input.
template <class T>
std::vector<Prediction> predict(const model::Seq2SeqModel<T>& m, const tok::SubwordTokenizer& tk,
                                const std::vector<corpus::ArticleRecord>& recs, const model::GenerationConfig& gc,
                                std::size_t max_source = tok::kMaxSourceLen, std::size_t threads = 0) {
    std::vector<Prediction> out(recs.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) {
            const auto ids = tk.encode(recs[i].body, max_source, true);
            auto gen = m.generate(ids, gc);
            out[i] = {recs[i].id, gen, tk.decode(gen), recs[i].headline};
        }
    };
    if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
    threads = std::min(threads, std::max<std::size_t>(1, recs.size()));
    std::vector<std::future<void>> jobs;
    const std::size_t chunk = (recs.size() + threads - 1) / std::max<std::size_t>(1, threads);
    for (std::size_t b = 0; b < recs.size(); b += chunk) {
        jobs.push_back(std::async(std::launch::async, work, b, std::min(recs.size(), b + chunk)));
    }
    for (auto& j : jobs) j.get();
    return out;
}

inline rouge::RougeReport score_predictions(const std::vector<Prediction>& preds) {
    std::vector<std::pair<std::string, std::string>> pairs;
    pairs.reserve(preds.size());
    for (const auto& p : preds) pairs.emplace_back(p.text, p.reference);
    return rouge::corpus_rouge(pairs);
}

template <class T>
rouge::RougeReport evaluate(const model::Seq2SeqModel<T>& m, const tok::SubwordTokenizer& tk,
                            const std::vector<corpus::ArticleRecord>& split, std::size_t max_source = tok::kMaxSourceLen,
                            std::size_t threads = 0) {
    if (split.empty()) throw ContractError("evaluate: empty split");
    return score_predictions(predict(m, tk, split, model::GenerationConfig{}, max_source, threads));
}

// ---------------------------------------------------------------- fine-tuning

struct EpochReport {
    std::size_t epoch = 0;
    double mean_train_loss = 0;
    rouge::RougeReport validation;
    double seconds = 0;
    std::string checkpoint;
};

inline nlohmann::json to_json(const EpochReport& r) {
    return {{"epoch", r.epoch},
            {"mean_train_loss", r.mean_train_loss},
            {"validation", rouge::to_json(r.validation)},
            {"seconds", r.seconds},
            {"checkpoint", r.checkpoint}};
}

struct FinetuneResult {
    std::vector<EpochReport> epochs;
    std::vector<double> step_losses;
    std::string final_checkpoint;
};

struct FinetuneOptions {
    std::filesystem::path run_dir;  // empty: no files written
    std::function<void(std::size_t step, const StepStats&)> on_step;
    std::function<void(const EpochReport&)> on_epoch;
};

template <class T>
FinetuneResult finetune(model::Seq2SeqModel<T>& m, const tok::SubwordTokenizer& tk,
                        const std::vector<corpus::ArticleRecord>& train_split,
                        const std::vector<corpus::ArticleRecord>& val_split, const TrainConfig& cfg,
                        const FinetuneOptions& opt = {}) {
    cfg.validate();
    if (train_split.empty()) throw ConfigError("empty train split");
    if (!m.lora_config()) throw ConfigError("finetune: model has no adapters attached");
    if (m.config().vocab_size != tk.vocab_size()) throw ConfigError("model vocab_size does not match tokenizer");
    const std::string base_before = m.base_hash();
    const std::string tk_hash = tk.fingerprint();

    const auto examples = encode_records(tk, train_split, cfg.max_source_len, cfg.max_target_len);
    const std::size_t total = total_steps(cfg, examples.size());
    AdamState<T> st;
    FinetuneResult res;
    std::ofstream log;
    if (!opt.run_dir.empty()) {
        std::filesystem::create_directories(opt.run_dir / "checkpoints");
        log.open(opt.run_dir / "run_log.jsonl", std::ios::app);
    }

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        double loss_sum = 0;
        std::size_t nsteps = 0;
        for (const auto& idx : epoch_batches(examples.size(), cfg.batch_size, cfg.seed, epoch)) {
            if (cfg.max_steps && st.step >= cfg.max_steps) break;
            std::vector<tok::EncodedExample> batch;
            for (auto i : idx) batch.push_back(examples[i]);
            const AdamHyper h{scheduled_lr(cfg, st.step, total), cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps};
            const auto s = train_step(m, tok::collate(batch), st, h, cfg.clip_norm, cfg.seed);
            res.step_losses.push_back(s.loss);
            loss_sum += s.loss;
            ++nsteps;
            if (opt.on_step) opt.on_step(st.step, s);
        }
        EpochReport rep;
        rep.epoch = epoch + 1;
        rep.mean_train_loss = nsteps ? loss_sum / static_cast<double>(nsteps) : 0.0;
        if (!val_split.empty()) rep.validation = evaluate(m, tk, val_split, cfg.max_source_len, cfg.eval_threads);
        if (!opt.run_dir.empty()) {
            const auto path = opt.run_dir / "checkpoints" / ("epoch-" + std::to_string(rep.epoch) + ".nphd");
            ckpt::save(path, m, tk_hash, rep.epoch, {{"train", to_json(cfg)}});
            rep.checkpoint = path.string();
            res.final_checkpoint = rep.checkpoint;
        }
        rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        if (log.is_open()) {
            log << to_json(rep).dump() << "\n";
            log.flush();
        }
        if (opt.on_epoch) opt.on_epoch(rep);
        res.epochs.push_back(std::move(rep));
    }
    if (m.base_hash() != base_before) throw IntegrityError("base weights changed during fine-tuning");
    return res;
}

}  // namespace nphead::train
