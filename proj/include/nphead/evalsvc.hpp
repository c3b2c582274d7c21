#pragma once

// Blinded best-choice voting: sessions are JSON files, votes an append-only
// JSON-lines log per session. Aggregates are a fold over the log.

#include <algorithm>
#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <regex>
#include <set>
#include <shared_mutex>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "rng.hpp"

namespace nphead::evalsvc {

inline const std::string kDefaultCriteria =
    "Choose the single best headline for the article. Consider relevance, fluency, conciseness, "
    "informativeness, factual accuracy and coverage.";

struct ModelOutput {
    std::string model;
    std::string summary;
};

struct ItemInput {
    std::string source;
    std::vector<ModelOutput> outputs;
};

struct Option {
    std::string key;
    std::string summary;
};

struct EvalItem {
    std::string item_id;
    std::string source;
    std::vector<Option> options;
    std::map<std::string, std::string> key_to_model;  // never sent to raters
};

struct EvalSession {
    std::string session_id;
    std::vector<EvalItem> items;
    std::string criteria;
    std::string created_at;
    std::uint64_t seed = 0;
    std::vector<std::string> models;  // first-seen order
};

struct VoteRecord {
    std::string session_id;
    std::string item_id;
    std::string rater_id;
    std::string option_key;
    std::string timestamp;
};

struct Aggregate {
    std::vector<std::string> models;
    std::vector<std::size_t> counts;
    std::vector<long> hundredths;  // percentage x 100
    std::size_t total = 0;

    std::string percentage(std::size_t i) const {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%ld.%02ld", hundredths[i] / 100, hundredths[i] % 100);
        return buf;
    }
};

inline std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

// 100 * count / total rounded half-up to two decimals, as integer hundredths.
inline long percent_hundredths(std::size_t count, std::size_t total) {
    if (total == 0) return 0;
    const auto c = static_cast<unsigned long long>(count), t = static_cast<unsigned long long>(total);
    return static_cast<long>((20000ULL * c + t) / (2ULL * t));
}

inline Aggregate aggregate_counts(std::vector<std::string> models, std::vector<std::size_t> counts) {
    if (models.size() != counts.size()) throw ContractError("aggregate: models and counts differ in length");
    Aggregate a;
    a.models = std::move(models);
    a.counts = std::move(counts);
    a.total = std::accumulate(a.counts.begin(), a.counts.end(), std::size_t{0});
    for (auto c : a.counts) a.hundredths.push_back(percent_hundredths(c, a.total));
    return a;
}

inline bool valid_rater_token(const std::string& s) {
    static const std::regex re("[A-Za-z0-9_-]{16,64}");
    return std::regex_match(s, re);
}

inline std::string issue_rater_token() {
    static const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789";
    std::random_device rd;
    std::string s;
    for (int i = 0; i < 24; ++i) s += alphabet[rd() % 62];
    return s;
}

inline std::string option_key(std::size_t i) {
    if (i >= 26) throw ValidationError("at most 26 options per item");
    return std::string(1, static_cast<char>('A' + i));
}

inline EvalSession build_session(const std::vector<ItemInput>& inputs, std::uint64_t seed,
                                 const std::string& criteria = kDefaultCriteria) {
    if (inputs.empty()) throw ValidationError("session needs at least one item");
    EvalSession s;
    s.seed = seed;
    s.criteria = criteria;
    s.created_at = utc_now();
    const std::size_t n_opts = inputs.front().outputs.size();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        const auto& in = inputs[i];
        if (in.outputs.size() < 2) throw ValidationError("item " + std::to_string(i) + " needs at least two model outputs");
        if (in.outputs.size() != n_opts) throw ValidationError("every item must have the same number of options");
        std::set<std::string> names;
        for (const auto& o : in.outputs) {
            if (o.model.empty()) throw ValidationError("empty model name in item " + std::to_string(i));
            if (!names.insert(o.model).second) {
                throw ValidationError("duplicate model '" + o.model + "' in item " + std::to_string(i));
            }
            if (std::find(s.models.begin(), s.models.end(), o.model) == s.models.end()) s.models.push_back(o.model);
        }
        std::vector<std::size_t> order(in.outputs.size());
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(counter_hash(seed, 0x6576616cULL, i, 0));
        rng.shuffle(order);
        EvalItem item;
        item.item_id = "item-" + std::to_string(i + 1);
        item.source = in.source;
        for (std::size_t k = 0; k < order.size(); ++k) {
            const auto& o = in.outputs[order[k]];
            item.options.push_back({option_key(k), o.summary});
            item.key_to_model[option_key(k)] = o.model;
        }
        s.items.push_back(std::move(item));
    }
    nlohmann::json fp = nlohmann::json::array();
    for (const auto& in : inputs) {
        nlohmann::json outs = nlohmann::json::array();
        for (const auto& o : in.outputs) outs.push_back({o.model, o.summary});
        fp.push_back({in.source, outs});
    }
    s.session_id = fnv1a_hex(fp.dump() + "|" + std::to_string(seed));
    return s;
}

// ------------------------------------------------------------ serialization

inline nlohmann::json rater_view(const EvalSession& s) {
    nlohmann::json items = nlohmann::json::array();
    for (const auto& it : s.items) {
        nlohmann::json opts = nlohmann::json::array();
        for (const auto& o : it.options) opts.push_back({{"key", o.key}, {"summary", o.summary}});
        items.push_back({{"item_id", it.item_id}, {"source", it.source}, {"options", opts}});
    }
    return {{"session_id", s.session_id}, {"criteria", s.criteria}, {"items", items}};
}

inline nlohmann::json to_json(const EvalSession& s) {
    auto j = rater_view(s);
    j["created_at"] = s.created_at;
    j["seed"] = s.seed;
    j["models"] = s.models;
    for (std::size_t i = 0; i < s.items.size(); ++i) j["items"][i]["key_to_model"] = s.items[i].key_to_model;
    return j;
}

inline EvalSession session_from_json(const nlohmann::json& j) {
    EvalSession s;
    s.session_id = j.at("session_id").get<std::string>();
    s.criteria = j.value("criteria", kDefaultCriteria);
    s.created_at = j.value("created_at", "");
    s.seed = j.value("seed", std::uint64_t{0});
    s.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& ji : j.at("items")) {
        EvalItem it;
        it.item_id = ji.at("item_id").get<std::string>();
        it.source = ji.at("source").get<std::string>();
        for (const auto& o : ji.at("options")) it.options.push_back({o.at("key"), o.at("summary")});
        it.key_to_model = ji.at("key_to_model").get<std::map<std::string, std::string>>();
        s.items.push_back(std::move(it));
    }
    return s;
}

inline nlohmann::json to_json(const VoteRecord& v) {
    return {{"session_id", v.session_id},
            {"item_id", v.item_id},
            {"rater_id", v.rater_id},
            {"option_key", v.option_key},
            {"timestamp", v.timestamp}};
}

inline VoteRecord vote_from_json(const nlohmann::json& j) {
    return {j.at("session_id"), j.at("item_id"), j.at("rater_id"), j.at("option_key"), j.value("timestamp", "")};
}

inline nlohmann::json to_json(const Aggregate& a) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t i = 0; i < a.models.size(); ++i) {
        rows.push_back({{"model", a.models[i]}, {"votes", a.counts[i]}, {"percentage", a.percentage(i)}});
    }
    return {{"total", a.total}, {"rows", rows}};
}

// Votes from a log. A final line without its newline is a torn write and is
// ignored; any other unparsable line is corruption.
inline std::vector<VoteRecord> parse_vote_log(const std::string& text) {
    std::vector<VoteRecord> out;
    std::size_t pos = 0;
    while (pos < text.size()) {
        const auto nl = text.find('\n', pos);
        if (nl == std::string::npos) break;
        const std::string line = text.substr(pos, nl - pos);
        pos = nl + 1;
        if (line.empty()) continue;
        try {
            out.push_back(vote_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::exception& e) {
            throw IntegrityError(std::string("corrupt vote log line: ") + e.what());
        }
    }
    return out;
}

// Last write wins per (rater, item); votes that do not match the session are skipped.
inline Aggregate fold_votes(const EvalSession& s, const std::vector<VoteRecord>& votes) {
    std::map<std::pair<std::string, std::string>, std::string> latest;
    for (const auto& v : votes) latest[{v.rater_id, v.item_id}] = v.option_key;
    std::map<std::string, const EvalItem*> items;
    for (const auto& it : s.items) items[it.item_id] = &it;
    std::vector<std::size_t> counts(s.models.size(), 0);
    for (const auto& [key, opt] : latest) {
        const auto it = items.find(key.second);
        if (it == items.end()) continue;
        const auto m = it->second->key_to_model.find(opt);
        if (m == it->second->key_to_model.end()) continue;
        const auto idx = std::find(s.models.begin(), s.models.end(), m->second) - s.models.begin();
        ++counts[static_cast<std::size_t>(idx)];
    }
    return aggregate_counts(s.models, counts);
}

// ------------------------------------------------------------------- store

class SessionStore {
public:
    explicit SessionStore(std::filesystem::path root) : root_(std::move(root)) {
        std::filesystem::create_directories(root_);
    }

    const std::filesystem::path& root() const { return root_; }

    EvalSession create(const std::vector<ItemInput>& inputs, std::uint64_t seed,
                       const std::string& criteria = kDefaultCriteria) {
        auto s = build_session(inputs, seed, criteria);
        auto& e = entry(s.session_id);
        std::unique_lock lock(e.mu);
        const auto path = session_path(s.session_id);
        if (std::filesystem::exists(path)) return load_locked(s.session_id, e);
        const auto tmp = path.string() + ".tmp";
        {
            std::ofstream out(tmp, std::ios::trunc);
            out << to_json(s).dump(2) << "\n";
            if (!out) throw std::runtime_error("cannot write " + tmp);
        }
        std::filesystem::rename(tmp, path);
        e.session = s;
        return s;
    }

    EvalSession get(const std::string& id) {
        auto& e = entry(id);
        std::unique_lock lock(e.mu);
        return load_locked(id, e);
    }

    VoteRecord record_vote(const std::string& id, const std::string& item_id, const std::string& rater_id,
                           const std::string& key) {
        if (!valid_rater_token(rater_id)) throw ValidationError("malformed rater token");
        auto& e = entry(id);
        std::unique_lock lock(e.mu);
        const auto s = load_locked(id, e);
        const auto it = std::find_if(s.items.begin(), s.items.end(), [&](const EvalItem& x) { return x.item_id == item_id; });
        if (it == s.items.end()) throw NotFoundError("unknown item '" + item_id + "'");
        if (!it->key_to_model.count(key)) throw ValidationError("invalid option '" + key + "' for " + item_id);
        VoteRecord v{id, item_id, rater_id, key, utc_now()};
        std::ofstream log(log_path(id), std::ios::app);
        log << to_json(v).dump() << "\n";
        log.flush();
        if (!log) throw std::runtime_error("vote log write failed");
        return v;
    }

    Aggregate aggregate(const std::string& id) {
        auto& e = entry(id);
        EvalSession s;
        {
            std::unique_lock lock(e.mu);
            s = load_locked(id, e);
        }
        std::shared_lock lock(e.mu);
        return fold_votes(s, parse_vote_log(read_log(id)));
    }

    std::filesystem::path session_path(const std::string& id) const { return root_ / (id + ".session.json"); }
    std::filesystem::path log_path(const std::string& id) const { return root_ / (id + ".votes.jsonl"); }

private:
    struct Entry {
        std::shared_mutex mu;
        std::optional<EvalSession> session;
    };

    Entry& entry(const std::string& id) {
        static const std::regex re("[0-9a-f]{16}");
        if (!std::regex_match(id, re)) throw NotFoundError("unknown session '" + id + "'");
        std::lock_guard lock(map_mu_);
        auto& p = entries_[id];
        if (!p) p = std::make_unique<Entry>();
        return *p;
    }

    EvalSession load_locked(const std::string& id, Entry& e) const {
        if (e.session) return *e.session;
        std::ifstream in(session_path(id));
        if (!in) throw NotFoundError("unknown session '" + id + "'");
        try {
            e.session = session_from_json(nlohmann::json::parse(in));
        } catch (const nlohmann::json::exception& ex) {
            throw IntegrityError(std::string("corrupt session file: ") + ex.what());
        }
        return *e.session;
    }

    std::string read_log(const std::string& id) const {
        std::ifstream in(log_path(id), std::ios::binary);
        if (!in) return {};
        std::ostringstream ss;
        ss << in.rdbuf();
        return ss.str();
    }

    std::filesystem::path root_;
    std::mutex map_mu_;
    std::map<std::string, std::unique_ptr<Entry>> entries_;
};

inline std::vector<ItemInput> items_from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw ValidationError("items must be an array");
    std::vector<ItemInput> out;
    for (const auto& ji : j) {
        ItemInput in;
        in.source = ji.at("source").get<std::string>();
        for (const auto& o : ji.at("outputs")) in.outputs.push_back({o.at("model"), o.at("summary")});
        out.push_back(std::move(in));
    }
    return out;
}

}  // namespace nphead::evalsvc
