#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "rng.hpp"
#include "utf8.hpp"

namespace nphead::corpus {

struct ArticleRecord {
    std::string id;
    std::string source;
    std::string category;
    std::string headline;
    std::string body;
    std::optional<std::string> url;
    std::optional<std::string> date;

    bool operator==(const ArticleRecord&) const = default;
};

inline nlohmann::json to_json(const ArticleRecord& r) {
    nlohmann::json j = {{"id", r.id},
                        {"source", r.source},
                        {"category", r.category},
                        {"headline", r.headline},
                        {"body", r.body}};
    if (r.url) j["url"] = *r.url;
    if (r.date) j["date"] = *r.date;
    return j;
}

// Throws ValidationError naming the first missing or mistyped field.
inline ArticleRecord record_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ValidationError("record is not an object");
    auto req = [&](const char* key) -> std::string {
        auto it = j.find(key);
        if (it == j.end() || !it->is_string()) throw ValidationError(std::string("missing string field '") + key + "'");
        return it->get<std::string>();
    };
    auto opt = [&](const char* key) -> std::optional<std::string> {
        auto it = j.find(key);
        if (it == j.end() || it->is_null()) return std::nullopt;
        if (!it->is_string()) throw ValidationError(std::string("field '") + key + "' is not a string");
        return it->get<std::string>();
    };
    ArticleRecord r{req("id"), req("source"), req("category"), req("headline"), req("body"), opt("url"), opt("date")};
    if (r.id.empty()) throw ValidationError("empty id");
    return r;
}

// ---------------------------------------------------------------------------
// Normalization

struct CleaningConfig {
    // Extra characters kept besides the Devanagari block and whitespace.
    std::u32string punctuation = U",?!\"'“”‘’";
    bool strict = false;   // abort ingestion on the first malformed line
    unsigned threads = 1;  // shard count for parallel cleaning

    void validate() const {
        for (char32_t c : punctuation) {
            if (c == U'<' || c == U'>') throw ConfigError("punctuation set may not contain angle brackets");
        }
        if (threads == 0) throw ConfigError("threads must be >= 1");
    }
};

inline bool is_unicode_space(char32_t c) {
    switch (c) {
        case U'\t': case U'\n': case U'\v': case U'\f': case U'\r': case U' ':
        case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
        case 0x202F: case 0x205F: case 0x3000:
            return true;
        default:
            return c >= 0x2000 && c <= 0x200A;
    }
}

inline bool is_devanagari(char32_t c) { return c >= 0x0900 && c <= 0x097F; }

inline bool is_whitelisted(char32_t c, const CleaningConfig& cfg) {
    return is_devanagari(c) || is_unicode_space(c) || cfg.punctuation.find(c) != std::u32string::npos;
}

// Removes every <...> span. An unmatched '<' is left for the whitelist filter.
inline std::u32string strip_markup(std::u32string_view in) {
    std::u32string out;
    out.reserve(in.size());
    std::size_t i = 0;
    while (i < in.size()) {
        if (in[i] == U'<') {
            const auto close = in.find(U'>', i + 1);
            if (close != std::u32string_view::npos) {
                out.push_back(U' ');
                i = close + 1;
                continue;
            }
        }
        out.push_back(in[i++]);
    }
    return out;
}

inline std::string clean_text(std::string_view raw, const CleaningConfig& cfg = {}) {
    const std::u32string stripped = strip_markup(utf8::decode(raw));
    std::u32string kept;
    kept.reserve(stripped.size());
    bool pending_space = false;
    for (char32_t c : stripped) {
        if (!is_whitelisted(c, cfg)) continue;
        if (is_unicode_space(c)) {
            pending_space = !kept.empty();
            continue;
        }
        if (pending_space) kept.push_back(U' ');
        pending_space = false;
        kept.push_back(c);
    }
    return utf8::encode(kept);
}

// ---------------------------------------------------------------------------
// Ingestion

struct MalformedLine {
    std::size_t line;  // 1-based
    std::string message;
};

struct IngestReport {
    std::size_t read = 0;
    std::size_t kept = 0;
    std::size_t dropped_empty = 0;
    std::size_t dropped_duplicate_id = 0;
    std::vector<MalformedLine> malformed;
};

inline nlohmann::json to_json(const IngestReport& r) {
    nlohmann::json bad = nlohmann::json::array();
    for (const auto& m : r.malformed) bad.push_back({{"line", m.line}, {"message", m.message}});
    return {{"read", r.read},
            {"kept", r.kept},
            {"dropped_empty", r.dropped_empty},
            {"dropped_duplicate_id", r.dropped_duplicate_id},
            {"malformed", bad}};
}

namespace detail {

struct ParsedLine {
    std::size_t line = 0;
    std::optional<ArticleRecord> record;  // cleaned
    std::string error;
};

inline ParsedLine parse_and_clean(std::size_t line_no, const std::string& text, const CleaningConfig& cfg) {
    ParsedLine p;
    p.line = line_no;
    try {
        auto r = record_from_json(nlohmann::json::parse(text));
        r.headline = clean_text(r.headline, cfg);
        r.body = clean_text(r.body, cfg);
        p.record = std::move(r);
    } catch (const nlohmann::json::exception& e) {
        p.error = e.what();
    } catch (const ValidationError& e) {
        p.error = e.what();
    }
    return p;
}

}  // namespace detail

// Reads a line-delimited corpus file. Blank lines are ignored. Cleaning may
// run on several shards in parallel; deduplication and counting happen
// afterwards in file order so the result does not depend on `threads`.
inline std::vector<ArticleRecord> ingest(const std::filesystem::path& path, const CleaningConfig& cfg,
                                         IngestReport& report) {
    cfg.validate();
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read corpus file: " + path.string());

    std::vector<std::pair<std::size_t, std::string>> lines;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        lines.emplace_back(line_no, std::move(line));
    }
    if (in.bad()) throw IngestError("read failure on corpus file: " + path.string());

    std::vector<detail::ParsedLine> parsed(lines.size());
    auto work = [&](std::size_t begin, std::size_t end) {
        for (std::size_t i = begin; i < end; ++i) parsed[i] = detail::parse_and_clean(lines[i].first, lines[i].second, cfg);
    };
    const std::size_t shards = std::min<std::size_t>(cfg.threads, std::max<std::size_t>(1, lines.size()));
    if (shards <= 1) {
        work(0, lines.size());
    } else {
        std::vector<std::future<void>> jobs;
        const std::size_t chunk = (lines.size() + shards - 1) / shards;
        for (std::size_t s = 0; s < shards; ++s) {
            const std::size_t b = s * chunk;
            const std::size_t e = std::min(lines.size(), b + chunk);
            if (b < e) jobs.push_back(std::async(std::launch::async, work, b, e));
        }
        for (auto& j : jobs) j.get();
    }

    report = {};
    std::vector<ArticleRecord> out;
    std::unordered_set<std::string> seen;
    for (auto& p : parsed) {
        ++report.read;
        if (!p.record) {
            if (cfg.strict) throw IngestError("malformed record at line " + std::to_string(p.line) + ": " + p.error);
            report.malformed.push_back({p.line, p.error});
            continue;
        }
        if (!seen.insert(p.record->id).second) {
            ++report.dropped_duplicate_id;
            continue;
        }
        if (p.record->headline.empty() || p.record->body.empty()) {
            ++report.dropped_empty;
            continue;
        }
        out.push_back(std::move(*p.record));
    }
    report.kept = out.size();
    return out;
}

inline std::vector<ArticleRecord> load_records(const std::filesystem::path& path) {
    IngestReport report;
    CleaningConfig cfg;
    cfg.strict = true;
    return ingest(path, cfg, report);
}

inline void write_records(const std::filesystem::path& path, const std::vector<ArticleRecord>& records) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write corpus file: " + path.string());
    for (const auto& r : records) out << to_json(r).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Splitting

struct SplitManifest {
    std::uint64_t seed = 0;
    std::array<double, 3> ratios{0.70, 0.20, 0.10};
    std::vector<std::string> train_ids;
    std::vector<std::string> val_ids;
    std::vector<std::string> test_ids;
};

struct SplitSizes {
    std::size_t train, val, test;
    bool operator==(const SplitSizes&) const = default;
};

// Round-half-up for train and validation, remainder to test.
inline SplitSizes split_sizes(std::size_t n, const std::array<double, 3>& ratios) {
    const auto round_half_up = [](double x) { return static_cast<std::size_t>(std::floor(x + 0.5)); };
    std::size_t train = std::min(n, round_half_up(ratios[0] * static_cast<double>(n)));
    std::size_t val = std::min(n - train, round_half_up(ratios[1] * static_cast<double>(n)));
    return {train, val, n - train - val};
}

inline void validate_ratios(const std::array<double, 3>& ratios) {
    for (double r : ratios) {
        if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
    }
    if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
}

// Ids are sorted before the seeded shuffle, so input order never matters.
inline SplitManifest split_ids(std::vector<std::string> ids, const std::array<double, 3>& ratios, std::uint64_t seed) {
    validate_ratios(ratios);
    std::sort(ids.begin(), ids.end());
    Rng rng(seed);
    rng.shuffle(ids);
    const auto sizes = split_sizes(ids.size(), ratios);
    SplitManifest m;
    m.seed = seed;
    m.ratios = ratios;
    auto it = ids.begin();
    m.train_ids.assign(it, it + static_cast<std::ptrdiff_t>(sizes.train));
    it += static_cast<std::ptrdiff_t>(sizes.train);
    m.val_ids.assign(it, it + static_cast<std::ptrdiff_t>(sizes.val));
    it += static_cast<std::ptrdiff_t>(sizes.val);
    m.test_ids.assign(it, ids.end());
    return m;
}

inline SplitManifest split_dataset(const std::vector<ArticleRecord>& records,
                                   const std::array<double, 3>& ratios = {0.70, 0.20, 0.10}, std::uint64_t seed = 0) {
    std::vector<std::string> ids;
    ids.reserve(records.size());
    for (const auto& r : records) ids.push_back(r.id);
    return split_ids(std::move(ids), ratios, seed);
}

inline nlohmann::json to_json(const SplitManifest& m) {
    return {{"format", "nphead-split"},
            {"version", 1},
            {"seed", m.seed},
            {"ratios", m.ratios},
            {"train_ids", m.train_ids},
            {"val_ids", m.val_ids},
            {"test_ids", m.test_ids}};
}

inline SplitManifest manifest_from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "nphead-split") throw IntegrityError("not a split manifest");
    if (j.value("version", 0) != 1) throw IntegrityError("unsupported split manifest version");
    SplitManifest m;
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ratios = j.at("ratios").get<std::array<double, 3>>();
    m.train_ids = j.at("train_ids").get<std::vector<std::string>>();
    m.val_ids = j.at("val_ids").get<std::vector<std::string>>();
    m.test_ids = j.at("test_ids").get<std::vector<std::string>>();
    return m;
}

inline void save_manifest(const std::filesystem::path& path, const SplitManifest& m) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IngestError("cannot write manifest: " + path.string());
    out << to_json(m).dump(1) << '\n';
}

inline SplitManifest load_manifest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IngestError("cannot read manifest: " + path.string());
    return manifest_from_json(nlohmann::json::parse(in));
}

// Records whose ids are listed, in list order. Unknown ids are an error.
inline std::vector<ArticleRecord> select(const std::vector<ArticleRecord>& records, const std::vector<std::string>& ids) {
    std::map<std::string_view, const ArticleRecord*> by_id;
    for (const auto& r : records) by_id.emplace(r.id, &r);
    std::vector<ArticleRecord> out;
    out.reserve(ids.size());
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) throw ValidationError("manifest id not in corpus: " + id);
        out.push_back(*it->second);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Statistics

struct CategoryStats {
    std::map<std::string, std::size_t> counts;
    std::size_t total = 0;
};

inline CategoryStats category_stats(const std::vector<ArticleRecord>& records) {
    CategoryStats s;
    for (const auto& r : records) ++s.counts[r.category];
    s.total = records.size();
    return s;
}

// The ten categories of the scraped Nepali news corpus with their article counts.
inline const std::vector<std::pair<std::string, std::size_t>>& reference_category_counts() {
    static const std::vector<std::pair<std::string, std::size_t>> counts = {
        {"News", 36798},         {"Sports", 18767}, {"Others(Mix)", 7258}, {"Opinion", 2358},
        {"Entertainment", 2144}, {"Feature", 2014}, {"Diaspora", 750},     {"World", 462},
        {"Education", 188},      {"Blog", 30},
    };
    return counts;
}

// ---------------------------------------------------------------------------
// Synthetic fixtures

namespace detail {

// Pseudo-words built from consonant + vowel-sign syllables.
inline std::vector<std::string> make_lexicon(std::size_t size, std::uint64_t seed) {
    static constexpr char32_t consonants[] = {0x0915, 0x0916, 0x0917, 0x0918, 0x091A, 0x091B, 0x091C, 0x091D,
                                              0x091F, 0x0920, 0x0921, 0x0922, 0x0923, 0x0924, 0x0925, 0x0926,
                                              0x0927, 0x0928, 0x092A, 0x092B, 0x092C, 0x092D, 0x092E, 0x092F,
                                              0x0930, 0x0932, 0x0935, 0x0936, 0x0937, 0x0938, 0x0939};
    static constexpr char32_t vowel_signs[] = {0, 0x093E, 0x093F, 0x0940, 0x0941, 0x0942, 0x0947, 0x0948, 0x094B, 0x0902};
    Rng rng(splitmix64(seed ^ 0x6c6578ULL));
    std::set<std::string> seen;
    std::vector<std::string> words;
    while (words.size() < size) {
        const auto syllables = rng.uniform_int(1, 3);
        std::u32string w;
        for (std::int64_t s = 0; s < syllables; ++s) {
            w.push_back(consonants[rng.uniform_int(0, std::size(consonants) - 1)]);
            const char32_t v = vowel_signs[rng.uniform_int(0, std::size(vowel_signs) - 1)];
            if (v != 0) w.push_back(v);
        }
        auto text = utf8::encode(w);
        if (seen.insert(text).second) words.push_back(std::move(text));
    }
    return words;
}

}  // namespace detail

struct SyntheticOptions {
    std::size_t lexicon_size = 400;
    // When non-empty, categories are assigned to reproduce these counts
    // (n must equal their sum); otherwise drawn uniformly from the ten categories.
    std::vector<std::pair<std::string, std::size_t>> category_counts;
};

// Random Devanagari articles. The headline is the article's lead: the body
// opens with the headline words followed by a danda, then further sentences.
// Word choice is Zipf-like over a fixed pseudo-word lexicon.
inline std::vector<ArticleRecord> make_synthetic_corpus(std::size_t n, std::uint64_t seed,
                                                        const SyntheticOptions& opts = {}) {
    std::vector<ArticleRecord> out;
    if (n == 0) return out;
    const auto lexicon = detail::make_lexicon(opts.lexicon_size, seed);
    std::vector<double> cdf(lexicon.size());
    double acc = 0;
    for (std::size_t i = 0; i < lexicon.size(); ++i) {
        acc += 1.0 / static_cast<double>(i + 1);
        cdf[i] = acc;
    }
    for (auto& c : cdf) c /= acc;

    std::vector<std::string> categories;
    if (!opts.category_counts.empty()) {
        std::size_t sum = 0;
        for (const auto& [name, count] : opts.category_counts) {
            categories.insert(categories.end(), count, name);
            sum += count;
        }
        if (sum != n) throw ConfigError("category counts must sum to n");
    }

    Rng rng(seed);
    auto word = [&]() -> const std::string& {
        const double u = rng.uniform();
        const auto idx = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
        return lexicon[std::min(idx, lexicon.size() - 1)];
    };
    static const std::string danda = utf8::encode(U'।');
    const auto& names = reference_category_counts();
    const int id_width = static_cast<int>(std::to_string(n).size());

    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        ArticleRecord r;
        std::string id = std::to_string(i);
        r.id = "syn-" + std::string(static_cast<std::size_t>(id_width) - id.size(), '0') + id;
        r.source = "synthetic";
        r.category = categories.empty() ? names[static_cast<std::size_t>(rng.uniform_int(0, 9))].first : categories[i];
        const auto head_len = rng.uniform_int(3, 12);
        const auto body_len = rng.uniform_int(50, 400);
        for (std::int64_t k = 0; k < head_len; ++k) {
            if (k) r.headline += ' ';
            r.headline += word();
        }
        r.body = r.headline;
        // body length counts every whitespace token, dandas included
        r.body += ' ' + danda;
        std::int64_t written = head_len + 1;
        std::int64_t sentence = 0;
        while (written < body_len) {
            r.body += ' ' + word();
            ++written;
            if (++sentence >= 8 + rng.uniform_int(0, 6) && written < body_len) {
                r.body += ' ' + danda;
                ++written;
                sentence = 0;
            }
        }
        out.push_back(std::move(r));
    }
    return out;
}

}  // namespace nphead::corpus
