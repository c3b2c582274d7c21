#pragma once

#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "error.hpp"
#include "lora.hpp"
#include "model.hpp"
#include "trainer.hpp"

namespace nphead {

// Everything a fine-tuning run needs besides data paths. The model's
// vocab_size is filled from the tokenizer at run time.
struct RunConfig {
    std::string name = "custom";
    std::size_t tokenizer_vocab_size = 500;
    std::uint64_t adapter_seed = 7;
    model::ModelConfig model;
    lora::LoraConfig lora;
    train::TrainConfig train;

    void validate() const {
        if (tokenizer_vocab_size < tok::kNumSpecial + 1) throw ConfigError("tokenizer vocab_size too small");
        auto m = model;
        if (m.vocab_size == 0) m.vocab_size = tokenizer_vocab_size;
        m.validate();
        lora.validate();
        train.validate();
    }
};

// Settings reported for the original fine-tuning runs, at full source length.
inline RunConfig full_preset() {
    RunConfig c;
    c.name = "full";
    return c;
}

// Small-corpus preset used by the overfit fixture and the pipeline smoke run:
// short sources and a larger step size so a few hundred steps suffice.
inline RunConfig toy_preset() {
    RunConfig c;
    c.name = "toy";
    c.train.learning_rate = 1e-2;
    c.train.batch_size = 8;
    c.train.max_source_len = 64;
    return c;
}

inline nlohmann::json to_json(const RunConfig& c) {
    return {{"name", c.name},
            {"tokenizer", {{"vocab_size", c.tokenizer_vocab_size}}},
            {"adapter_seed", c.adapter_seed},
            {"model", model::to_json(c.model)},
            {"lora", lora::to_json(c.lora)},
            {"train", train::to_json(c.train)}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        if (!known.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

}  // namespace detail

// Overlays `j` on `base`; keys absent from `j` keep their base values.
inline RunConfig merge_run_config(RunConfig base, const nlohmann::json& j) {
    try {
        detail::reject_unknown(j, {"name", "preset", "tokenizer", "adapter_seed", "model", "lora", "train"}, "config");
        base.name = j.value("name", base.name);
        if (j.contains("tokenizer")) {
            detail::reject_unknown(j["tokenizer"], {"vocab_size"}, "tokenizer");
            base.tokenizer_vocab_size = j["tokenizer"].value("vocab_size", base.tokenizer_vocab_size);
        }
        base.adapter_seed = j.value("adapter_seed", base.adapter_seed);
        if (j.contains("model")) {
            auto merged = model::to_json(base.model);
            detail::reject_unknown(j["model"], [&] {
                std::set<std::string> k;
                for (const auto& [key, v] : merged.items()) k.insert(key);
                return k;
            }(), "model");
            merged.merge_patch(j["model"]);
            base.model = model::model_config_from_json(merged);
        }
        if (j.contains("lora")) {
            auto merged = lora::to_json(base.lora);
            detail::reject_unknown(j["lora"], {"r", "alpha", "dropout", "bias", "init_std", "targets"}, "lora");
            merged.merge_patch(j["lora"]);
            base.lora = lora::lora_config_from_json(merged);
        }
        if (j.contains("train")) {
            auto merged = train::to_json(base.train);
            std::set<std::string> k;
            for (const auto& [key, v] : merged.items()) k.insert(key);
            detail::reject_unknown(j["train"], k, "train");
            for (const auto& [key, v] : j["train"].items()) merged[key] = v;
            base.train = train::train_config_from_json(merged);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    base.validate();
    return base;
}

// "toy" and "full" name the presets; anything else is a JSON file that may
// start from a preset via {"preset": "toy"}.
inline RunConfig load_run_config(const std::string& which) {
    if (which == "toy") return toy_preset();
    if (which == "full") return full_preset();
    std::ifstream in(which);
    if (!in) throw ConfigError("cannot read config file '" + which + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + which + "': " + e.what());
    }
    RunConfig base;
    if (j.contains("preset")) {
        const auto p = j["preset"].get<std::string>();
        if (p == "toy") base = toy_preset();
        else if (p == "full") base = full_preset();
        else throw ConfigError("unknown preset '" + p + "'");
    }
    return merge_run_config(base, j);
}

}  // namespace nphead
