#pragma once

#include <algorithm>
#include <cstdio>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include "corpus.hpp"
#include "error.hpp"

namespace nphead::rouge {

struct Score {
    double precision = 0;
    double recall = 0;
    double f1 = 0;

    bool operator==(const Score&) const = default;
};

struct RougeReport {
    Score rouge1;
    Score rouge2;
    Score rougeL;

    bool operator==(const RougeReport&) const = default;
};

inline Score make_score(double overlap, double cand_total, double ref_total) {
    Score s;
    s.precision = cand_total > 0 ? overlap / cand_total : 0.0;
    s.recall = ref_total > 0 ? overlap / ref_total : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

inline std::vector<std::string> tokenize(std::string_view text, const corpus::CleaningConfig& cfg = {}) {
    const std::string cleaned = corpus::clean_text(text, cfg);
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < cleaned.size()) {
        const auto j = cleaned.find(' ', i);
        const auto end = j == std::string::npos ? cleaned.size() : j;
        if (end > i) out.emplace_back(cleaned.substr(i, end - i));
        i = end + 1;
    }
    return out;
}

inline std::map<std::vector<std::string>, std::size_t> ngram_counts(const std::vector<std::string>& toks, std::size_t n) {
    std::map<std::vector<std::string>, std::size_t> out;
    if (toks.size() < n) return out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        ++out[std::vector<std::string>(toks.begin() + static_cast<std::ptrdiff_t>(i),
                                       toks.begin() + static_cast<std::ptrdiff_t>(i + n))];
    }
    return out;
}

inline Score rouge_n_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref, std::size_t n) {
    if (n < 1) throw ContractError("rouge_n: n must be >= 1");
    const auto c = ngram_counts(cand, n);
    const auto r = ngram_counts(ref, n);
    std::size_t overlap = 0;
    for (const auto& [gram, cnt] : c) {
        const auto it = r.find(gram);
        if (it != r.end()) overlap += std::min(cnt, it->second);
    }
    const std::size_t ct = cand.size() >= n ? cand.size() - n + 1 : 0;
    const std::size_t rt = ref.size() >= n ? ref.size() - n + 1 : 0;
    return make_score(static_cast<double>(overlap), static_cast<double>(ct), static_cast<double>(rt));
}

inline std::size_t lcs_length(const std::vector<std::string>& a, const std::vector<std::string>& b) {
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline Score rouge_l_tokens(const std::vector<std::string>& cand, const std::vector<std::string>& ref) {
    return make_score(static_cast<double>(lcs_length(cand, ref)), static_cast<double>(cand.size()),
                      static_cast<double>(ref.size()));
}

inline Score rouge_n(std::string_view candidate, std::string_view reference, std::size_t n) {
    return rouge_n_tokens(tokenize(candidate), tokenize(reference), n);
}

inline Score rouge_l(std::string_view candidate, std::string_view reference) {
    return rouge_l_tokens(tokenize(candidate), tokenize(reference));
}

inline RougeReport score_pair(std::string_view candidate, std::string_view reference) {
    const auto c = tokenize(candidate);
    const auto r = tokenize(reference);
    return {rouge_n_tokens(c, r, 1), rouge_n_tokens(c, r, 2), rouge_l_tokens(c, r)};
}

// Macro average: mean of per-example scores, summed in input order.
inline RougeReport corpus_rouge(const std::vector<std::pair<std::string, std::string>>& pairs) {
    if (pairs.empty()) throw ContractError("corpus_rouge: empty pair list");
    RougeReport acc;
    auto add = [](Score& a, const Score& b) {
        a.precision += b.precision;
        a.recall += b.recall;
        a.f1 += b.f1;
    };
    for (const auto& [cand, ref] : pairs) {
        const auto r = score_pair(cand, ref);
        add(acc.rouge1, r.rouge1);
        add(acc.rouge2, r.rouge2);
        add(acc.rougeL, r.rougeL);
    }
    const double n = static_cast<double>(pairs.size());
    for (Score* s : {&acc.rouge1, &acc.rouge2, &acc.rougeL}) {
        s->precision /= n;
        s->recall /= n;
        s->f1 /= n;
    }
    return acc;
}

inline nlohmann::json to_json(const Score& s) {
    return {{"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}};
}

inline nlohmann::json to_json(const RougeReport& r) {
    return {{"rouge1", to_json(r.rouge1)}, {"rouge2", to_json(r.rouge2)}, {"rougeL", to_json(r.rougeL)}};
}

inline Score score_from_json(const nlohmann::json& j) {
    return {j.at("precision").get<double>(), j.at("recall").get<double>(), j.at("f1").get<double>()};
}

inline RougeReport report_from_json(const nlohmann::json& j) {
    return {score_from_json(j.at("rouge1")), score_from_json(j.at("rouge2")), score_from_json(j.at("rougeL"))};
}

// Rows = models; column groups R-1 / R-2 / R-L with P, R, F1.
inline std::string format_table(const std::vector<std::pair<std::string, RougeReport>>& rows) {
    std::size_t w = 5;
    for (const auto& r : rows) w = std::max(w, r.first.size());
    auto pad = [](std::string s, std::size_t n) {
        s.resize(std::max(n, s.size()), ' ');
        return s;
    };
    std::string out = pad("Model", w) + " | " + pad("ROUGE-1", 20) + " | " + pad("ROUGE-2", 20) + " | ROUGE-L\n";
    std::string sub = pad("", w);
    for (int i = 0; i < 3; ++i) sub += " | P      R      F1    ";
    while (!sub.empty() && sub.back() == ' ') sub.pop_back();
    out += sub + "\n";
    out += std::string(w + 3 * 23, '-') + "\n";
    char buf[64];
    for (const auto& [name, rep] : rows) {
        std::string line = pad(name, w);
        for (const Score* s : {&rep.rouge1, &rep.rouge2, &rep.rougeL}) {
            std::snprintf(buf, sizeof buf, " | %.4f %.4f %.4f", s->precision, s->recall, s->f1);
            line += buf;
        }
        out += line + "\n";
    }
    return out;
}

}  // namespace nphead::rouge
