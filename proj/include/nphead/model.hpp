#pragma once

// Desk-scale encoder-decoder transformer. Every base weight is frozen; the
// only trainable tensors are LoRA adapters and the biases selected by the
// LoRA bias mode.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "bytes.hpp"
#include "error.hpp"
#include "hash.hpp"
#include "lora.hpp"
#include "numerics.hpp"
#include "quant.hpp"
#include "tokenizer.hpp"

namespace nphead::model {

using tok::TokenId;

struct ModelConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 128;
    std::size_t n_heads = 4;
    std::size_t n_encoder_layers = 2;
    std::size_t n_decoder_layers = 2;
    std::size_t d_ffn = 256;
    std::size_t max_positions = 1024;
    double dropout = 0.1;
    bool tie_embeddings = true;
    // Frozen base initialization (stands in for pretrained weights).
    std::uint64_t base_seed = 1234;
    double embedding_std = 0.3;
    // Quantization of the frozen projection weights.
    std::optional<quant::Scheme> quant;
    std::size_t quant_block_size = quant::kDefaultBlockSize;

    void validate() const {
        if (vocab_size == 0) throw ConfigError("vocab_size must be positive");
        if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
            throw ConfigError("d_model must be a positive multiple of n_heads");
        }
        if (d_ffn == 0) throw ConfigError("d_ffn must be positive");
        if (max_positions < tok::kMaxSourceLen) throw ConfigError("max_positions must be >= 1024");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
        if (!(embedding_std > 0)) throw ConfigError("embedding_std must be positive");
    }
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size},
            {"d_model", c.d_model},
            {"n_heads", c.n_heads},
            {"n_encoder_layers", c.n_encoder_layers},
            {"n_decoder_layers", c.n_decoder_layers},
            {"d_ffn", c.d_ffn},
            {"max_positions", c.max_positions},
            {"dropout", c.dropout},
            {"tie_embeddings", c.tie_embeddings},
            {"base_seed", c.base_seed},
            {"embedding_std", c.embedding_std},
            {"quant", c.quant ? quant::to_string(*c.quant) : "none"},
            {"quant_block_size", c.quant_block_size}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.d_model = j.value("d_model", c.d_model);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.n_encoder_layers = j.value("n_encoder_layers", c.n_encoder_layers);
    c.n_decoder_layers = j.value("n_decoder_layers", c.n_decoder_layers);
    c.d_ffn = j.value("d_ffn", c.d_ffn);
    c.max_positions = j.value("max_positions", c.max_positions);
    c.dropout = j.value("dropout", c.dropout);
    c.tie_embeddings = j.value("tie_embeddings", c.tie_embeddings);
    c.base_seed = j.value("base_seed", c.base_seed);
    c.embedding_std = j.value("embedding_std", c.embedding_std);
    const auto q = j.value("quant", std::string("none"));
    if (q != "none") c.quant = quant::scheme_from_string(q);
    c.quant_block_size = j.value("quant_block_size", c.quant_block_size);
    return c;
}

// Closed-form count of frozen base parameters.
inline std::size_t base_parameter_count(const ModelConfig& c) {
    const std::size_t d = c.d_model, f = c.d_ffn;
    const std::size_t attn = 4 * (d * d + d);
    const std::size_t ffn = d * f + f + f * d + d;
    const std::size_t ln = 2 * d;
    std::size_t total = c.vocab_size * d + 2 * c.max_positions * d;
    if (!c.tie_embeddings) total += c.vocab_size * d;
    total += c.n_encoder_layers * (attn + ffn + 2 * ln);
    total += c.n_decoder_layers * (2 * attn + ffn + 3 * ln);
    total += 2 * ln;  // final encoder and decoder norms
    return total;
}

// decoder input = labels shifted right behind the start token; ignored label
// positions become padding.
inline std::vector<TokenId> shift_right(const std::vector<TokenId>& labels, std::size_t batch, std::size_t len,
                                        TokenId begin_id = tok::kBosId, TokenId ignore = tok::kIgnoreIndex,
                                        TokenId pad_id = tok::kPadId) {
    if (labels.size() != batch * len) throw ContractError("shift_right: label matrix size mismatch");
    std::vector<TokenId> out(labels.size(), pad_id);
    for (std::size_t b = 0; b < batch; ++b) {
        if (len == 0) continue;
        out[b * len] = begin_id;
        for (std::size_t t = 1; t < len; ++t) {
            const TokenId prev = labels[b * len + t - 1];
            out[b * len + t] = prev == ignore ? pad_id : prev;
        }
    }
    return out;
}

template <class T>
struct LayerNormParams {
    num::Tensor<T> gain;
    num::Tensor<T> shift;
};

template <class T>
struct Projection {
    std::string name;
    std::shared_ptr<const lora::FrozenLinear<T>> base;
    std::optional<lora::LoraAdapter<T>> adapter;
    // Trainable copy of the bias for non-adapted projections under bias mode "all".
    std::optional<num::Tensor<T>> trainable_bias;

    num::Var<T> forward(num::Graph<T>& g, num::Var<T> x, const lora::RunMode& mode) const {
        if (adapter) return adapter->forward(g, x, mode);
        if (trainable_bias) {
            auto b = g.parameter(name + ".bias", *trainable_bias);
            return base->forward(g, x, &b);
        }
        return base->forward(g, x);
    }
};

template <class T>
struct AttentionBlock {
    Projection<T> q, k, v, o;
};

template <class T>
struct FeedForward {
    Projection<T> fc1, fc2;
};

template <class T>
struct EncoderLayer {
    LayerNormParams<T> ln_attn;
    AttentionBlock<T> self_attn;
    LayerNormParams<T> ln_ffn;
    FeedForward<T> ffn;
};

template <class T>
struct DecoderLayer {
    LayerNormParams<T> ln_self;
    AttentionBlock<T> self_attn;
    LayerNormParams<T> ln_cross;
    AttentionBlock<T> cross_attn;
    LayerNormParams<T> ln_ffn;
    FeedForward<T> ffn;
};

enum class Strategy { Greedy, Beam };

struct GenerationConfig {
    std::size_t max_len = tok::kMaxTargetLen;
    Strategy strategy = Strategy::Greedy;
    std::size_t beam_size = 4;
    double length_penalty = 1.0;  // final beam score = logprob / length^penalty
};

template <class T>
class Seq2SeqModel {
public:
    explicit Seq2SeqModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build_base();
    }

    const ModelConfig& config() const { return cfg_; }
    const std::optional<lora::LoraConfig>& lora_config() const { return lora_cfg_; }

    // Attaches fresh adapters (B = 0) to the configured target projections.
    void attach_adapters(const lora::LoraConfig& lc, std::uint64_t seed) {
        lc.validate();
        lora_cfg_ = lc;
        for (auto* p : projections()) {
            p->adapter.reset();
            p->trainable_bias.reset();
            const bool target = is_target(p->name, lc.targets);
            if (target) {
                p->adapter.emplace(p->name, p->base, lc, seed, lc.bias_mode != lora::BiasMode::None);
            } else if (lc.bias_mode == lora::BiasMode::All) {
                p->trainable_bias = p->base->bias();
            }
        }
    }

    // Trainable tensors sorted by name.
    std::vector<std::pair<std::string, num::Tensor<T>*>> trainable_parameters() {
        std::vector<std::pair<std::string, num::Tensor<T>*>> out;
        for (auto* p : projections()) {
            if (p->adapter) {
                for (auto& kv : p->adapter->parameters()) out.push_back(kv);
            } else if (p->trainable_bias) {
                out.emplace_back(p->name + ".bias", &*p->trainable_bias);
            }
        }
        std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
        return out;
    }

    std::size_t trainable_parameter_count() const {
        std::size_t n = 0;
        for (const auto* p : projections()) {
            if (p->adapter) n += p->adapter->trainable_count();
            else if (p->trainable_bias) n += p->trainable_bias->size();
        }
        return n;
    }

    std::vector<const lora::LoraAdapter<T>*> adapters() const {
        std::vector<const lora::LoraAdapter<T>*> out;
        for (const auto* p : projections()) {
            if (p->adapter) out.push_back(&*p->adapter);
        }
        return out;
    }

    // Every frozen base tensor, named. Order is fixed.
    std::size_t base_parameter_count_enumerated() const {
        std::size_t n = 0;
        for_each_base_tensor([&](const std::string&, const num::Tensor<T>& t) { n += t.size(); });
        for (const auto* p : projections()) n += p->base->out_features() * p->base->in_features() + p->base->bias().size();
        return n;
    }

    // Byte image of all frozen weights (quantized weights in packed form).
    std::vector<std::uint8_t> serialize_base() const {
        ByteWriter w;
        w.raw(std::string_view("nphead-base"));
        for_each_base_tensor([&](const std::string& name, const num::Tensor<T>& t) {
            w.str(name);
            lora::FrozenLinear<T>::write_tensor(w, t);
        });
        for (const auto* p : projections()) {
            w.str(p->name);
            p->base->serialize_into(w);
        }
        return w.take();
    }

    std::string base_hash() const {
        Fnv1a h;
        h.update(serialize_base());
        return h.hex();
    }

    // Architecture fingerprint: config plus every projection name and shape.
    std::string shape_signature() const {
        std::string s = "d" + std::to_string(cfg_.d_model) + "h" + std::to_string(cfg_.n_heads) + "v" +
                        std::to_string(cfg_.vocab_size);
        for (const auto* p : projections()) {
            s += ";" + p->name + ":" + num::shape_str(p->base->shape());
        }
        return fnv1a_hex(s);
    }

    // ----------------------------------------------------------------- forward

    // Encoder states [batch*src_len x d_model].
    num::Var<T> encode(num::Graph<T>& g, const std::vector<TokenId>& src_ids, const std::vector<std::uint8_t>& src_mask,
                       std::size_t batch, std::size_t src_len, const lora::RunMode& mode) const {
        check_positions(src_len);
        if (src_ids.size() != batch * src_len || src_mask.size() != batch * src_len) {
            throw ContractError("encode: id/mask size does not match batch x src_len");
        }
        auto x = embed_with_positions(g, src_ids, batch, src_len, enc_pos_);
        x = num::dropout(x, cfg_.dropout, mode.seed, kDropEncEmbed, mode.step, mode.training);
        for (std::size_t l = 0; l < encoder_.size(); ++l) {
            const auto& layer = encoder_[l];
            const std::uint64_t tag = 1000 + l * 10;
            auto h = norm(g, x, layer.ln_attn);
            auto a = attend(g, layer.self_attn, h, h, {batch, src_len, src_len, cfg_.n_heads, false}, src_mask, mode);
            x = num::add(x, num::dropout(a, cfg_.dropout, mode.seed, tag + 1, mode.step, mode.training));
            h = norm(g, x, layer.ln_ffn);
            auto f = feed_forward(g, layer.ffn, h, mode);
            x = num::add(x, num::dropout(f, cfg_.dropout, mode.seed, tag + 2, mode.step, mode.training));
        }
        return norm(g, x, enc_final_);
    }

    // Logits [batch*tgt_len x vocab] for teacher-forced decoder inputs.
    num::Var<T> decode(num::Graph<T>& g, num::Var<T> memory, const std::vector<std::uint8_t>& src_mask, std::size_t batch,
                       std::size_t src_len, const std::vector<TokenId>& dec_ids, std::size_t tgt_len,
                       const lora::RunMode& mode) const {
        check_positions(tgt_len);
        if (dec_ids.size() != batch * tgt_len) throw ContractError("decode: ids do not match batch x tgt_len");
        auto y = embed_with_positions(g, dec_ids, batch, tgt_len, dec_pos_);
        y = num::dropout(y, cfg_.dropout, mode.seed, kDropDecEmbed, mode.step, mode.training);
        for (std::size_t l = 0; l < decoder_.size(); ++l) {
            const auto& layer = decoder_[l];
            const std::uint64_t tag = 2000 + l * 10;
            auto h = norm(g, y, layer.ln_self);
            auto a = attend(g, layer.self_attn, h, h, {batch, tgt_len, tgt_len, cfg_.n_heads, true}, {}, mode);
            y = num::add(y, num::dropout(a, cfg_.dropout, mode.seed, tag + 1, mode.step, mode.training));
            h = norm(g, y, layer.ln_cross);
            auto c = attend(g, layer.cross_attn, h, memory, {batch, tgt_len, src_len, cfg_.n_heads, false}, src_mask, mode);
            y = num::add(y, num::dropout(c, cfg_.dropout, mode.seed, tag + 2, mode.step, mode.training));
            h = norm(g, y, layer.ln_ffn);
            auto f = feed_forward(g, layer.ffn, h, mode);
            y = num::add(y, num::dropout(f, cfg_.dropout, mode.seed, tag + 3, mode.step, mode.training));
        }
        y = norm(g, y, dec_final_);
        return num::linear(y, g.constant_ref(cfg_.tie_embeddings ? token_embedding_ : *lm_head_));
    }

    num::Var<T> forward(num::Graph<T>& g, const std::vector<TokenId>& src_ids, const std::vector<std::uint8_t>& src_mask,
                        std::size_t batch, std::size_t src_len, const std::vector<TokenId>& dec_ids, std::size_t tgt_len,
                        const lora::RunMode& mode) const {
        auto memory = encode(g, src_ids, src_mask, batch, src_len, mode);
        return decode(g, memory, src_mask, batch, src_len, dec_ids, tgt_len, mode);
    }

    num::Var<T> forward(num::Graph<T>& g, const tok::Batch& b, const lora::RunMode& mode) const {
        const auto dec = shift_right(b.labels, b.batch, b.tgt_len);
        return forward(g, b.input_ids, b.attention_mask, b.batch, b.src_len, dec, b.tgt_len, mode);
    }

    // Teacher-forced mean token cross-entropy.
    num::Var<T> loss(num::Graph<T>& g, const tok::Batch& b, const lora::RunMode& mode) const {
        return num::cross_entropy(forward(g, b, mode), b.labels, tok::kIgnoreIndex);
    }

    // --------------------------------------------------------------- generation

    // Generated ids after the start token; ends with the end token unless the
    // length cap was reached first. Eval mode (no dropout).
    std::vector<TokenId> generate(const std::vector<TokenId>& input_ids, const GenerationConfig& gc = {}) const {
        if (gc.max_len < 1) throw ConfigError("generation max_len must be >= 1");
        if (gc.strategy == Strategy::Beam && gc.beam_size < 1) throw ConfigError("beam size must be >= 1");
        if (input_ids.empty()) throw ContractError("generate: empty input");
        num::Graph<T> g;
        const lora::RunMode eval{};
        const std::vector<std::uint8_t> mask(input_ids.size(), 1);
        auto memory = encode(g, input_ids, mask, 1, input_ids.size(), eval);
        auto next_logprobs = [&](const std::vector<TokenId>& prefix) {
            auto logits = decode(g, memory, mask, 1, input_ids.size(), prefix, prefix.size(), eval);
            return log_softmax_last_row(logits.value());
        };
        if (gc.strategy == Strategy::Greedy) return greedy(next_logprobs, gc.max_len);
        return beam(next_logprobs, gc);
    }

private:
    static constexpr std::uint64_t kDropEncEmbed = 1;
    static constexpr std::uint64_t kDropDecEmbed = 2;

    void check_positions(std::size_t len) const {
        if (len > cfg_.max_positions) {
            throw ContractError("sequence length " + std::to_string(len) + " exceeds max_positions " +
                                std::to_string(cfg_.max_positions));
        }
    }

    static bool is_target(const std::string& name, const lora::TargetProjections& t) {
        auto ends = [&](const char* suffix) {
            const std::string s(suffix);
            return name.size() >= s.size() && name.compare(name.size() - s.size(), s.size(), s) == 0;
        };
        if (ends(".q_proj")) return t.query;
        if (ends(".k_proj")) return t.key;
        if (ends(".v_proj")) return t.value;
        if (ends(".o_proj")) return t.output;
        if (ends(".fc1") || ends(".fc2")) return t.feed_forward;
        return false;
    }

    void build_base() {
        Rng rng(cfg_.base_seed);
        const std::size_t d = cfg_.d_model, f = cfg_.d_ffn;
        token_embedding_ = num::randn<T>({cfg_.vocab_size, d}, rng, cfg_.embedding_std);
        enc_pos_ = num::randn<T>({cfg_.max_positions, d}, rng, cfg_.embedding_std);
        dec_pos_ = num::randn<T>({cfg_.max_positions, d}, rng, cfg_.embedding_std);
        if (!cfg_.tie_embeddings) lm_head_ = num::randn<T>({cfg_.vocab_size, d}, rng, cfg_.embedding_std);

        auto ln = [&]() { return LayerNormParams<T>{num::Tensor<T>({d}, T(1)), num::Tensor<T>({d})}; };
        auto proj = [&](std::string name, std::size_t out, std::size_t in) {
            auto w = num::randn<T>({out, in}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
            num::Tensor<T> b({out});
            std::shared_ptr<const lora::FrozenLinear<T>> base;
            if (cfg_.quant) {
                base = std::make_shared<const lora::FrozenLinear<T>>(
                    quant::QuantizedMatrix::quantize(w, *cfg_.quant, cfg_.quant_block_size), std::move(b));
            } else {
                base = std::make_shared<const lora::FrozenLinear<T>>(std::move(w), std::move(b));
            }
            return Projection<T>{std::move(name), std::move(base), std::nullopt, std::nullopt};
        };
        auto attn = [&](const std::string& prefix) {
            return AttentionBlock<T>{proj(prefix + ".q_proj", d, d), proj(prefix + ".k_proj", d, d),
                                     proj(prefix + ".v_proj", d, d), proj(prefix + ".o_proj", d, d)};
        };
        auto ffn = [&](const std::string& prefix) {
            return FeedForward<T>{proj(prefix + ".fc1", f, d), proj(prefix + ".fc2", d, f)};
        };
        for (std::size_t l = 0; l < cfg_.n_encoder_layers; ++l) {
            const std::string p = "encoder.layers." + std::to_string(l);
            EncoderLayer<T> layer{ln(), attn(p + ".self_attn"), ln(), ffn(p + ".ffn")};
            encoder_.push_back(std::move(layer));
        }
        for (std::size_t l = 0; l < cfg_.n_decoder_layers; ++l) {
            const std::string p = "decoder.layers." + std::to_string(l);
            DecoderLayer<T> layer{ln(), attn(p + ".self_attn"), ln(), attn(p + ".cross_attn"), ln(), ffn(p + ".ffn")};
            decoder_.push_back(std::move(layer));
        }
        enc_final_ = ln();
        dec_final_ = ln();
    }

    template <class Fn>
    void for_each_base_tensor(Fn&& fn) const {
        fn("embed_tokens", token_embedding_);
        fn("encoder.embed_positions", enc_pos_);
        fn("decoder.embed_positions", dec_pos_);
        if (lm_head_) fn("lm_head", *lm_head_);
        auto ln = [&](const std::string& name, const LayerNormParams<T>& p) {
            fn(name + ".gain", p.gain);
            fn(name + ".shift", p.shift);
        };
        for (std::size_t l = 0; l < encoder_.size(); ++l) {
            const std::string p = "encoder.layers." + std::to_string(l);
            ln(p + ".ln_attn", encoder_[l].ln_attn);
            ln(p + ".ln_ffn", encoder_[l].ln_ffn);
        }
        for (std::size_t l = 0; l < decoder_.size(); ++l) {
            const std::string p = "decoder.layers." + std::to_string(l);
            ln(p + ".ln_self", decoder_[l].ln_self);
            ln(p + ".ln_cross", decoder_[l].ln_cross);
            ln(p + ".ln_ffn", decoder_[l].ln_ffn);
        }
        ln("encoder.ln_final", enc_final_);
        ln("decoder.ln_final", dec_final_);
    }

    std::vector<Projection<T>*> projections() {
        std::vector<Projection<T>*> out;
        for (auto& l : encoder_) {
            for (auto* p : {&l.self_attn.q, &l.self_attn.k, &l.self_attn.v, &l.self_attn.o, &l.ffn.fc1, &l.ffn.fc2})
                out.push_back(p);
        }
        for (auto& l : decoder_) {
            for (auto* p : {&l.self_attn.q, &l.self_attn.k, &l.self_attn.v, &l.self_attn.o, &l.cross_attn.q,
                            &l.cross_attn.k, &l.cross_attn.v, &l.cross_attn.o, &l.ffn.fc1, &l.ffn.fc2})
                out.push_back(p);
        }
        return out;
    }
    std::vector<const Projection<T>*> projections() const {
        auto mut = const_cast<Seq2SeqModel*>(this)->projections();
        return {mut.begin(), mut.end()};
    }

    num::Var<T> embed_with_positions(num::Graph<T>& g, const std::vector<TokenId>& ids, std::size_t batch,
                                     std::size_t len, const num::Tensor<T>& pos_table) const {
        std::vector<TokenId> positions(batch * len);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < len; ++t) positions[b * len + t] = static_cast<TokenId>(t);
        auto tokens = num::embed(g.constant_ref(token_embedding_), ids);
        return num::add(tokens, num::embed(g.constant_ref(pos_table), positions));
    }

    num::Var<T> norm(num::Graph<T>& g, num::Var<T> x, const LayerNormParams<T>& p) const {
        return num::layer_norm(x, g.constant_ref(p.gain), g.constant_ref(p.shift));
    }

    num::Var<T> attend(num::Graph<T>& g, const AttentionBlock<T>& blk, num::Var<T> query_src, num::Var<T> kv_src,
                       const num::AttentionShape& shape, const std::vector<std::uint8_t>& key_mask,
                       const lora::RunMode& mode) const {
        auto q = blk.q.forward(g, query_src, mode);
        auto k = blk.k.forward(g, kv_src, mode);
        auto v = blk.v.forward(g, kv_src, mode);
        auto a = num::attention(q, k, v, shape, key_mask);
        return blk.o.forward(g, a, mode);
    }

    num::Var<T> feed_forward(num::Graph<T>& g, const FeedForward<T>& ffn, num::Var<T> x, const lora::RunMode& mode) const {
        return ffn.fc2.forward(g, num::gelu(ffn.fc1.forward(g, x, mode)), mode);
    }

    static std::vector<double> log_softmax_last_row(const num::Tensor<T>& logits) {
        const std::size_t rows = logits.shape[0], v = logits.shape[1];
        const T* row = logits.data.data() + (rows - 1) * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double z = 0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
        const double lse = mx + std::log(z);
        std::vector<double> out(v);
        for (std::size_t j = 0; j < v; ++j) out[j] = static_cast<double>(row[j]) - lse;
        return out;
    }

    template <class NextFn>
    static std::vector<TokenId> greedy(NextFn&& next, std::size_t max_len) {
        std::vector<TokenId> prefix{tok::kBosId};
        std::vector<TokenId> out;
        while (out.size() < max_len) {
            const auto lp = next(prefix);
            // first maximum wins ties
            const auto best = static_cast<TokenId>(std::max_element(lp.begin(), lp.end()) - lp.begin());
            out.push_back(best);
            prefix.push_back(best);
            if (best == tok::kEosId) break;
        }
        return out;
    }

    template <class NextFn>
    static std::vector<TokenId> beam(NextFn&& next, const GenerationConfig& gc) {
        struct Hyp {
            std::vector<TokenId> tokens;
            double score = 0;
        };
        struct Cand {
            double score, step_lp;
            std::size_t beam;
            TokenId token;
        };
        std::vector<Hyp> live{Hyp{}};
        std::vector<Hyp> finished;
        const std::size_t k = gc.beam_size;
        for (std::size_t step = 0; step < gc.max_len && !live.empty() && finished.size() < k; ++step) {
            std::vector<Cand> cands;
            for (std::size_t b = 0; b < live.size(); ++b) {
                std::vector<TokenId> prefix{tok::kBosId};
                prefix.insert(prefix.end(), live[b].tokens.begin(), live[b].tokens.end());
                const auto lp = next(prefix);
                for (std::size_t t = 0; t < lp.size(); ++t) {
                    cands.push_back({live[b].score + lp[t], lp[t], b, static_cast<TokenId>(t)});
                }
            }
            const std::size_t keep = std::min(k - finished.size(), cands.size());
            std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                              [](const Cand& a, const Cand& b) {
                                  if (a.score != b.score) return a.score > b.score;
                                  if (a.step_lp != b.step_lp) return a.step_lp > b.step_lp;
                                  if (a.beam != b.beam) return a.beam < b.beam;
                                  return a.token < b.token;
                              });
            std::vector<Hyp> next_live;
            for (std::size_t i = 0; i < keep; ++i) {
                Hyp h = live[cands[i].beam];
                h.tokens.push_back(cands[i].token);
                h.score = cands[i].score;
                (cands[i].token == tok::kEosId ? finished : next_live).push_back(std::move(h));
            }
            live = std::move(next_live);
        }
        for (auto& h : live) finished.push_back(std::move(h));
        auto normalized = [&](const Hyp& h) {
            return h.score / std::pow(static_cast<double>(std::max<std::size_t>(1, h.tokens.size())), gc.length_penalty);
        };
        std::stable_sort(finished.begin(), finished.end(),
                         [&](const Hyp& a, const Hyp& b) { return normalized(a) > normalized(b); });
        return finished.front().tokens;
    }

    ModelConfig cfg_;
    std::optional<lora::LoraConfig> lora_cfg_;
    num::Tensor<T> token_embedding_;
    num::Tensor<T> enc_pos_;
    num::Tensor<T> dec_pos_;
    std::optional<num::Tensor<T>> lm_head_;
    std::vector<EncoderLayer<T>> encoder_;
    std::vector<DecoderLayer<T>> decoder_;
    LayerNormParams<T> enc_final_;
    LayerNormParams<T> dec_final_;
};

}  // namespace nphead::model
