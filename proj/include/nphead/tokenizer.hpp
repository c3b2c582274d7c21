#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "utf8.hpp"

namespace nphead::tok {

using TokenId = std::int32_t;

// Label padding value. Negative so it can never collide with a vocabulary id.
inline constexpr TokenId kIgnoreIndex = -100;

inline constexpr TokenId kPadId = 0;
inline constexpr TokenId kUnkId = 1;
inline constexpr TokenId kBosId = 2;
inline constexpr TokenId kEosId = 3;
inline constexpr std::size_t kNumSpecial = 4;

inline constexpr int kFormatVersion = 1;

// Marks a space inside a token; it attaches to the start of the next word.
inline const std::string kSpaceMark = "\xE2\x96\x81";  // U+2581

inline const std::string kDefaultPrefix = "सारांश: ";

// Byte-pair subword tokenizer over unicode characters. Immutable once built.
class SubwordTokenizer {
public:
    SubwordTokenizer() = default;

    static SubwordTokenizer train(const std::vector<std::string>& texts, std::size_t vocab_size,
                                  std::string task_prefix = kDefaultPrefix);

    static SubwordTokenizer from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    std::string serialize() const { return to_json().dump(1) + "\n"; }
    static SubwordTokenizer load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;
    std::string fingerprint() const { return fnv1a_hex(serialize()); }

    // [begin, pieces..., end] cut from the right to max_len; begin survives.
    std::vector<TokenId> encode(std::string_view text, std::size_t max_len, bool add_prefix = false) const;
    // Target form: [pieces..., end] cut to max_len. The decoder start token is
    // supplied by shift_right, so it is not part of the labels.
    std::vector<TokenId> encode_labels(std::string_view text, std::size_t max_len) const;
    // Stops after the word that reaches `limit` pieces.
    std::vector<TokenId> encode_pieces(std::string_view text, std::size_t limit = SIZE_MAX) const;
    // Special tokens are skipped; unknown ids render as nothing.
    std::string decode(const std::vector<TokenId>& ids) const;

    std::size_t vocab_size() const { return id_to_token_.size(); }
    std::size_t alphabet_size() const { return alphabet_size_; }
    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }
    const std::string& token(TokenId id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }
    const std::string& task_prefix() const { return prefix_; }
    TokenId id_of(const std::string& token) const {
        auto it = token_to_id_.find(token);
        return it == token_to_id_.end() ? kUnkId : it->second;
    }

private:
    void rebuild_indexes();
    std::vector<TokenId> encode_word(const std::vector<std::string>& symbols) const;

    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, TokenId> token_to_id_;
    std::vector<std::pair<std::string, std::string>> merges_;
    // key: left + NUL + right
    std::unordered_map<std::string, std::size_t> merge_rank_;
    std::size_t alphabet_size_ = 0;
    std::string prefix_ = kDefaultPrefix;
};

namespace detail {

// Splits text into words; a space starts a new word and is carried as the
// space mark. "a  b" -> ["a", "▁", "▁b"]. Concatenating the words and mapping
// marks back to spaces reproduces the input.
inline std::vector<std::vector<std::string>> split_words(std::string_view text) {
    std::vector<std::vector<std::string>> words;
    std::vector<std::string> cur;
    for (char32_t c : utf8::decode(text)) {
        if (c == U' ') {
            if (!cur.empty()) words.push_back(std::move(cur));
            cur = {kSpaceMark};
            continue;
        }
        cur.push_back(utf8::encode(c));
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

}  // namespace detail

inline SubwordTokenizer SubwordTokenizer::train(const std::vector<std::string>& texts, std::size_t vocab_size,
                                                std::string task_prefix) {
    if (texts.empty()) throw ConfigError("tokenizer training corpus is empty");

    // word -> frequency, words as symbol sequences
    std::map<std::vector<std::string>, std::size_t> word_freq;
    std::set<std::string> alphabet;
    auto add_text = [&](std::string_view t, std::size_t weight) {
        for (auto& w : detail::split_words(t)) {
            for (const auto& s : w) alphabet.insert(s);
            word_freq[std::move(w)] += weight;
        }
    };
    for (const auto& t : texts) add_text(t, 1);
    // prefix characters join the alphabet but do not steer merges
    for (auto& w : detail::split_words(task_prefix)) {
        for (const auto& s : w) alphabet.insert(s);
    }

    const std::size_t minimum = alphabet.size() + kNumSpecial;
    if (vocab_size < minimum) {
        throw ConfigError("vocab_size " + std::to_string(vocab_size) + " below minimum " + std::to_string(minimum) +
                          " (alphabet + special tokens)");
    }

    SubwordTokenizer tk;
    tk.prefix_ = std::move(task_prefix);
    tk.id_to_token_ = {"<pad>", "<unk>", "<s>", "</s>"};
    tk.id_to_token_.insert(tk.id_to_token_.end(), alphabet.begin(), alphabet.end());
    tk.alphabet_size_ = alphabet.size();

    std::vector<std::pair<std::vector<std::string>, std::size_t>> words(word_freq.begin(), word_freq.end());
    std::set<std::string> known(alphabet.begin(), alphabet.end());

    while (tk.id_to_token_.size() < vocab_size) {
        std::map<std::pair<std::string, std::string>, std::size_t> pair_freq;
        for (const auto& [syms, f] : words) {
            for (std::size_t i = 0; i + 1 < syms.size(); ++i) pair_freq[{syms[i], syms[i + 1]}] += f;
        }
        // highest count wins; std::map iteration order breaks ties lexicographically
        const std::pair<std::string, std::string>* best = nullptr;
        std::size_t best_count = 0;
        for (const auto& [p, c] : pair_freq) {
            if (c > best_count) {
                best = &p;
                best_count = c;
            }
        }
        if (best == nullptr) break;  // every word is a single symbol
        const auto merged = best->first + best->second;
        const auto pair = *best;
        tk.merges_.push_back(pair);
        if (known.insert(merged).second) tk.id_to_token_.push_back(merged);
        for (auto& [syms, f] : words) {
            std::vector<std::string> next;
            next.reserve(syms.size());
            for (std::size_t i = 0; i < syms.size(); ++i) {
                if (i + 1 < syms.size() && syms[i] == pair.first && syms[i + 1] == pair.second) {
                    next.push_back(merged);
                    ++i;
                } else {
                    next.push_back(syms[i]);
                }
            }
            syms = std::move(next);
        }
    }
    tk.rebuild_indexes();
    return tk;
}

inline void SubwordTokenizer::rebuild_indexes() {
    token_to_id_.clear();
    for (std::size_t i = 0; i < id_to_token_.size(); ++i) {
        if (!token_to_id_.emplace(id_to_token_[i], static_cast<TokenId>(i)).second) {
            throw IntegrityError("duplicate token in vocabulary: " + id_to_token_[i]);
        }
    }
    merge_rank_.clear();
    for (std::size_t i = 0; i < merges_.size(); ++i) merge_rank_.emplace(merges_[i].first + '\0' + merges_[i].second, i);
}

// Standard rank-ordered BPE: repeatedly apply the earliest-learned merge
// present in the word.
inline std::vector<TokenId> SubwordTokenizer::encode_word(const std::vector<std::string>& symbols) const {
    std::vector<std::string> syms = symbols;
    while (syms.size() > 1) {
        std::size_t best_rank = SIZE_MAX;
        std::size_t best_pos = 0;
        std::string key;
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
            key.assign(syms[i]).push_back('\0');
            key += syms[i + 1];
            auto it = merge_rank_.find(key);
            if (it != merge_rank_.end() && it->second < best_rank) {
                best_rank = it->second;
                best_pos = i;
            }
        }
        if (best_rank == SIZE_MAX) break;
        const auto& [a, b] = merges_[best_rank];
        std::vector<std::string> next;
        next.reserve(syms.size());
        for (std::size_t i = 0; i < syms.size(); ++i) {
            if (i >= best_pos && i + 1 < syms.size() && syms[i] == a && syms[i + 1] == b) {
                next.push_back(a + b);
                ++i;
            } else {
                next.push_back(syms[i]);
            }
        }
        syms = std::move(next);
    }
    std::vector<TokenId> ids;
    ids.reserve(syms.size());
    for (const auto& s : syms) ids.push_back(id_of(s));
    return ids;
}

inline std::vector<TokenId> SubwordTokenizer::encode_pieces(std::string_view text, std::size_t limit) const {
    std::vector<TokenId> ids;
    std::unordered_map<std::string, std::vector<TokenId>> seen;
    for (const auto& w : detail::split_words(text)) {
        if (ids.size() >= limit) break;
        std::string joined;
        for (const auto& c : w) joined += c;
        auto it = seen.find(joined);
        if (it == seen.end()) it = seen.emplace(std::move(joined), encode_word(w)).first;
        ids.insert(ids.end(), it->second.begin(), it->second.end());
    }
    return ids;
}

inline std::vector<TokenId> SubwordTokenizer::encode(std::string_view text, std::size_t max_len, bool add_prefix) const {
    std::vector<TokenId> ids{kBosId};
    const auto pieces = add_prefix ? encode_pieces(prefix_ + std::string(text), max_len) : encode_pieces(text, max_len);
    ids.insert(ids.end(), pieces.begin(), pieces.end());
    ids.push_back(kEosId);
    if (ids.size() > max_len) ids.resize(max_len);
    return ids;
}

inline std::vector<TokenId> SubwordTokenizer::encode_labels(std::string_view text, std::size_t max_len) const {
    auto ids = encode_pieces(text, max_len);
    ids.push_back(kEosId);
    if (ids.size() > max_len) ids.resize(max_len);
    return ids;
}

inline std::string SubwordTokenizer::decode(const std::vector<TokenId>& ids) const {
    std::string out;
    for (TokenId id : ids) {
        if (id < static_cast<TokenId>(kNumSpecial) || static_cast<std::size_t>(id) >= id_to_token_.size()) continue;
        out += id_to_token_[static_cast<std::size_t>(id)];
    }
    std::string result;
    result.reserve(out.size());
    for (std::size_t i = 0; i < out.size();) {
        if (out.compare(i, kSpaceMark.size(), kSpaceMark) == 0) {
            result.push_back(' ');
            i += kSpaceMark.size();
        } else {
            result.push_back(out[i++]);
        }
    }
    return result;
}

inline nlohmann::json SubwordTokenizer::to_json() const {
    nlohmann::json merges = nlohmann::json::array();
    for (const auto& [a, b] : merges_) merges.push_back({a, b});
    return {{"format", "nphead-tokenizer"},
            {"version", kFormatVersion},
            {"task_prefix", prefix_},
            {"alphabet_size", alphabet_size_},
            {"special", {{"pad", kPadId}, {"unk", kUnkId}, {"bos", kBosId}, {"eos", kEosId}}},
            {"vocab", id_to_token_},
            {"merges", merges}};
}

inline SubwordTokenizer SubwordTokenizer::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "nphead-tokenizer") throw IntegrityError("not a tokenizer file");
    const int version = j.value("version", -1);
    if (version != kFormatVersion) throw IntegrityError("unsupported tokenizer version " + std::to_string(version));
    const auto& sp = j.at("special");
    if (sp.at("pad") != kPadId || sp.at("unk") != kUnkId || sp.at("bos") != kBosId || sp.at("eos") != kEosId) {
        throw IntegrityError("unexpected special token ids");
    }
    SubwordTokenizer tk;
    tk.prefix_ = j.at("task_prefix").get<std::string>();
    tk.alphabet_size_ = j.at("alphabet_size").get<std::size_t>();
    tk.id_to_token_ = j.at("vocab").get<std::vector<std::string>>();
    for (const auto& m : j.at("merges")) tk.merges_.emplace_back(m.at(0).get<std::string>(), m.at(1).get<std::string>());
    if (tk.id_to_token_.size() < kNumSpecial + tk.alphabet_size_) throw IntegrityError("vocabulary too small");
    tk.rebuild_indexes();
    return tk;
}

inline SubwordTokenizer SubwordTokenizer::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read tokenizer: " + path.string());
    return from_json(nlohmann::json::parse(in));
}

inline void SubwordTokenizer::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write tokenizer: " + path.string());
    out << serialize();
}

// ---------------------------------------------------------------------------
// Examples and batching

inline constexpr std::size_t kMaxSourceLen = 1024;
inline constexpr std::size_t kMaxTargetLen = 20;

struct EncodedExample {
    std::vector<TokenId> input_ids;
    std::vector<TokenId> label_ids;
};

inline EncodedExample encode_example(const SubwordTokenizer& tk, std::string_view body, std::string_view headline,
                                     std::size_t max_source = kMaxSourceLen, std::size_t max_target = kMaxTargetLen) {
    return {tk.encode(body, max_source, true), tk.encode_labels(headline, max_target)};
}

// Row-major id matrices padded to the longest member of the batch.
struct Batch {
    std::size_t batch = 0;
    std::size_t src_len = 0;
    std::size_t tgt_len = 0;
    std::vector<TokenId> input_ids;       // batch x src_len
    std::vector<std::uint8_t> attention_mask;  // batch x src_len
    std::vector<TokenId> labels;          // batch x tgt_len

    TokenId input(std::size_t b, std::size_t t) const { return input_ids[b * src_len + t]; }
    TokenId label(std::size_t b, std::size_t t) const { return labels[b * tgt_len + t]; }
};

inline Batch collate(const std::vector<EncodedExample>& examples, TokenId pad_id = kPadId,
                     TokenId ignore_sentinel = kIgnoreIndex) {
    if (examples.empty()) throw ContractError("collate: empty example list");
    Batch b;
    b.batch = examples.size();
    for (const auto& e : examples) {
        b.src_len = std::max(b.src_len, e.input_ids.size());
        b.tgt_len = std::max(b.tgt_len, e.label_ids.size());
    }
    b.input_ids.assign(b.batch * b.src_len, pad_id);
    b.attention_mask.assign(b.batch * b.src_len, 0);
    b.labels.assign(b.batch * b.tgt_len, ignore_sentinel);
    for (std::size_t i = 0; i < b.batch; ++i) {
        const auto& e = examples[i];
        for (std::size_t t = 0; t < e.input_ids.size(); ++t) {
            b.input_ids[i * b.src_len + t] = e.input_ids[t];
            b.attention_mask[i * b.src_len + t] = e.input_ids[t] != pad_id ? 1 : 0;
        }
        std::copy(e.label_ids.begin(), e.label_ids.end(), b.labels.begin() + static_cast<std::ptrdiff_t>(i * b.tgt_len));
    }
    return b;
}

}  // namespace nphead::tok
