#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "error.hpp"
#include "hash.hpp"
#include "numerics.hpp"
#include "quant.hpp"
#include "rng.hpp"

namespace nphead::lora {

enum class BiasMode { None, LoraOnly, All };

inline std::string to_string(BiasMode m) {
    switch (m) {
        case BiasMode::None: return "none";
        case BiasMode::LoraOnly: return "lora_only";
        case BiasMode::All: return "all";
    }
    return "none";
}

inline BiasMode bias_mode_from_string(const std::string& s) {
    if (s == "none") return BiasMode::None;
    if (s == "lora_only") return BiasMode::LoraOnly;
    if (s == "all") return BiasMode::All;
    throw ConfigError("unknown bias mode '" + s + "' (expected none, lora_only or all)");
}

// Which projections of the transformer receive adapters.
struct TargetProjections {
    bool query = true;
    bool key = false;
    bool value = true;
    bool output = false;
    bool feed_forward = false;

    bool operator==(const TargetProjections&) const = default;
};

struct LoraConfig {
    std::size_t r = 32;
    double alpha = 32.0;
    double dropout = 0.1;
    BiasMode bias_mode = BiasMode::LoraOnly;
    TargetProjections targets;
    double init_std = 0.02;  // A ~ N(0, init_std^2); B starts at zero

    double scaling() const { return alpha / static_cast<double>(r); }

    void validate() const {
        if (r < 1) throw ConfigError("lora r must be >= 1");
        if (!(alpha > 0)) throw ConfigError("lora alpha must be positive");
        if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("lora dropout must be in [0, 1)");
        if (!(init_std >= 0)) throw ConfigError("lora init_std must be non-negative");
    }
};

inline nlohmann::json to_json(const LoraConfig& c) {
    return {{"r", c.r},
            {"alpha", c.alpha},
            {"dropout", c.dropout},
            {"bias", to_string(c.bias_mode)},
            {"init_std", c.init_std},
            {"targets",
             {{"query", c.targets.query},
              {"key", c.targets.key},
              {"value", c.targets.value},
              {"output", c.targets.output},
              {"feed_forward", c.targets.feed_forward}}}};
}

inline LoraConfig lora_config_from_json(const nlohmann::json& j) {
    LoraConfig c;
    c.r = j.value("r", c.r);
    c.alpha = j.value("alpha", c.alpha);
    c.dropout = j.value("dropout", c.dropout);
    c.bias_mode = bias_mode_from_string(j.value("bias", to_string(c.bias_mode)));
    c.init_std = j.value("init_std", c.init_std);
    if (j.contains("targets")) {
        const auto& t = j["targets"];
        c.targets.query = t.value("query", c.targets.query);
        c.targets.key = t.value("key", c.targets.key);
        c.targets.value = t.value("value", c.targets.value);
        c.targets.output = t.value("output", c.targets.output);
        c.targets.feed_forward = t.value("feed_forward", c.targets.feed_forward);
    }
    c.validate();
    return c;
}

// Per-forward switches shared by every layer.
struct RunMode {
    bool training = false;
    std::uint64_t seed = 0;
    std::uint64_t step = 0;
};

inline std::uint64_t layer_key(const std::string& name) {
    Fnv1a h;
    h.update(name);
    return h.digest();
}

// A frozen affine map y = x W^T + b. W is dense or quantized; neither W nor b
// is ever exposed mutably.
template <class T>
class FrozenLinear {
public:
    FrozenLinear(num::Tensor<T> weight, num::Tensor<T> bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
        check();
    }
    FrozenLinear(quant::QuantizedMatrix weight, num::Tensor<T> bias) : weight_(std::move(weight)), bias_(std::move(bias)) {
        check();
    }

    std::size_t out_features() const { return shape()[0]; }
    std::size_t in_features() const { return shape()[1]; }
    num::Shape shape() const {
        if (const auto* q = quantized_weight()) return q->shape();
        return dense_weight()->shape;
    }
    bool quantized() const { return std::holds_alternative<quant::QuantizedMatrix>(weight_); }
    const quant::QuantizedMatrix* quantized_weight() const { return std::get_if<quant::QuantizedMatrix>(&weight_); }
    const num::Tensor<T>* dense_weight() const { return std::get_if<num::Tensor<T>>(&weight_); }
    const num::Tensor<T>& bias() const { return bias_; }

    // Dequantized copy for quantized weights.
    num::Tensor<T> materialize() const {
        if (const auto* q = quantized_weight()) return q->template dequantize<T>();
        return *dense_weight();
    }

    // `bias_override` replaces the frozen bias (used when the bias is trainable).
    num::Var<T> forward(num::Graph<T>& g, num::Var<T> x, const num::Var<T>* bias_override = nullptr) const {
        const num::Var<T> b = bias_override ? *bias_override : g.constant_ref(bias_);
        if (const auto* q = quantized_weight()) return quant::qlinear(x, *q, &b);
        return num::linear(x, g.constant_ref(*dense_weight()), &b);
    }

    void serialize_into(ByteWriter& out) const {
        if (const auto* q = quantized_weight()) {
            out.u8(1);
            q->serialize_into(out);
        } else {
            out.u8(0);
            write_tensor(out, *dense_weight());
        }
        write_tensor(out, bias_);
    }

    static void write_tensor(ByteWriter& out, const num::Tensor<T>& t) {
        out.u32(static_cast<std::uint32_t>(t.shape.size()));
        for (auto d : t.shape) out.u64(d);
        for (T v : t.data) {
            const auto bytes = std::bit_cast<std::array<std::uint8_t, sizeof(T)>>(v);
            out.raw(bytes);
        }
    }

private:
    void check() const {
        const auto s = shape();
        if (s.size() != 2) throw ContractError("frozen linear: weight must be a matrix");
        if (bias_.shape != num::Shape{s[0]}) {
            throw ContractError("frozen linear: bias shape " + num::shape_str(bias_.shape) + " vs weight " +
                                num::shape_str(s));
        }
    }

    std::variant<num::Tensor<T>, quant::QuantizedMatrix> weight_;
    num::Tensor<T> bias_;
};

// Trainable low-rank update attached to a frozen linear map:
//   y = base(x) + (alpha / r) * B (A drop(x)) [+ trainable bias in place of the frozen one]
template <class T>
class LoraAdapter {
public:
    LoraAdapter(std::string name, std::shared_ptr<const FrozenLinear<T>> base, const LoraConfig& cfg, std::uint64_t seed,
                bool train_bias)
        : name_(std::move(name)), base_(std::move(base)), scaling_(static_cast<T>(cfg.scaling())), dropout_(cfg.dropout) {
        cfg.validate();
        if (!base_) throw ContractError("lora adapter without base");
        const std::size_t out = base_->out_features(), in = base_->in_features();
        Rng rng(splitmix64(seed ^ layer_key(name_)));
        a_ = num::randn<T>({cfg.r, in}, rng, cfg.init_std);
        b_ = num::Tensor<T>({out, cfg.r});
        if (train_bias) bias_ = base_->bias();
    }

    const std::string& name() const { return name_; }
    const FrozenLinear<T>& base() const { return *base_; }
    std::shared_ptr<const FrozenLinear<T>> base_ptr() const { return base_; }
    T scaling() const { return scaling_; }
    std::size_t rank() const { return a_.shape[0]; }

    const num::Tensor<T>& A() const { return a_; }
    const num::Tensor<T>& B() const { return b_; }
    const std::optional<num::Tensor<T>>& bias() const { return bias_; }
    num::Tensor<T>& A() { return a_; }
    num::Tensor<T>& B() { return b_; }
    std::optional<num::Tensor<T>>& bias() { return bias_; }

    std::string a_name() const { return name_ + ".lora_A"; }
    std::string b_name() const { return name_ + ".lora_B"; }
    std::string bias_name() const { return name_ + ".bias"; }

    // Trainable tensors with their parameter names.
    std::vector<std::pair<std::string, num::Tensor<T>*>> parameters() {
        std::vector<std::pair<std::string, num::Tensor<T>*>> out{{a_name(), &a_}, {b_name(), &b_}};
        if (bias_) out.emplace_back(bias_name(), &*bias_);
        return out;
    }
    std::size_t trainable_count() const { return a_.size() + b_.size() + (bias_ ? bias_->size() : 0); }

    num::Var<T> forward(num::Graph<T>& g, num::Var<T> x, const RunMode& mode) const {
        if (x.shape().size() != 2 || x.shape()[1] != base_->in_features()) {
            throw ContractError("lora forward: input " + num::shape_str(x.shape()) + " vs weight " +
                                num::shape_str(base_->shape()));
        }
        std::optional<num::Var<T>> bias_var;
        if (bias_) bias_var = g.parameter(bias_name(), *bias_);
        auto y = base_->forward(g, x, bias_var ? &*bias_var : nullptr);
        auto dropped = num::dropout(x, dropout_, mode.seed, layer_key(name_), mode.step, mode.training);
        auto low = num::linear(dropped, g.parameter(a_name(), a_));
        auto up = num::linear(low, g.parameter(b_name(), b_));
        return num::add(y, num::scale(up, scaling_));
    }

    // Dense weight equivalent for inference: dequantized base + scaling * B A.
    num::Tensor<T> merge() const {
        auto w = base_->materialize();
        const std::size_t out = w.shape[0], in = w.shape[1], r = rank();
        num::Tensor<T> ba({out, in});
        num::blas::nn(b_.data.data(), a_.data.data(), ba.data.data(), out, r, in, false);
        for (std::size_t i = 0; i < w.size(); ++i) w.data[i] += scaling_ * ba.data[i];
        return w;
    }

    // Bias that pairs with merge().
    const num::Tensor<T>& merged_bias() const { return bias_ ? *bias_ : base_->bias(); }

private:
    std::string name_;
    std::shared_ptr<const FrozenLinear<T>> base_;
    T scaling_;
    double dropout_;
    num::Tensor<T> a_;
    num::Tensor<T> b_;
    std::optional<num::Tensor<T>> bias_;
};

}  // namespace nphead::lora
