#include <gtest/gtest.h>

#include <set>

#include "nphead/error.hpp"
#include "nphead/lora.hpp"
#include "testutil.hpp"

using namespace nphead;
using namespace nphead::lora;
using num::Graph;
using num::Tensor;

namespace {

template <class T>
std::shared_ptr<const FrozenLinear<T>> dense_base(std::size_t out, std::size_t in, std::uint64_t seed) {
    Rng rng(seed);
    return std::make_shared<const FrozenLinear<T>>(num::randn<T>({out, in}, rng, 0.5), num::randn<T>({out}, rng, 0.1));
}

template <class T>
std::shared_ptr<const FrozenLinear<T>> quant_base(std::size_t out, std::size_t in, std::uint64_t seed, quant::Scheme s) {
    Rng rng(seed);
    auto w = num::randn<T>({out, in}, rng, 0.5);
    return std::make_shared<const FrozenLinear<T>>(quant::QuantizedMatrix::quantize(w, s, 16), num::randn<T>({out}, rng, 0.1));
}

template <class T>
void randomize(LoraAdapter<T>& ad, std::uint64_t seed) {
    Rng rng(seed);
    for (auto& [name, t] : ad.parameters()) {
        for (auto& v : t->data) v = static_cast<T>(rng.normal() * 0.3);
    }
}

LoraConfig config(std::size_t r, double alpha, double dropout = 0.0, BiasMode bias = BiasMode::None) {
    LoraConfig c;
    c.r = r;
    c.alpha = alpha;
    c.dropout = dropout;
    c.bias_mode = bias;
    return c;
}

template <class T>
Tensor<T> eval_forward(const LoraAdapter<T>& ad, const Tensor<T>& x) {
    Graph<T> g;
    return ad.forward(g, g.constant(x), RunMode{}).value();
}

template <class T>
Tensor<T> dense_forward(const Tensor<T>& w, const Tensor<T>& b, const Tensor<T>& x) {
    Graph<T> g;
    auto bv = g.constant(b);
    return num::linear(g.constant(x), g.constant(w), &bv).value();
}

}  // namespace

TEST(Lora, ScalarExample) {
    auto base = std::make_shared<const FrozenLinear<double>>(Tensor<double>({1, 1}, 2.0), Tensor<double>({1}, 0.0));
    LoraAdapter<double> ad("p", base, config(1, 1.0), 1, false);
    ad.A().data[0] = 3;
    ad.B().data[0] = 4;
    EXPECT_EQ(eval_forward(ad, Tensor<double>({1, 1}, 5.0)).data[0], 70.0);
    EXPECT_EQ(ad.merge().data[0], 14.0);
}

TEST(Lora, FreshAdapterIsExactlyTheBase) {
    for (bool quantized : {false, true}) {
        auto base = quantized ? quant_base<float>(12, 20, 1, quant::Scheme::Int4Block) : dense_base<float>(12, 20, 1);
        LoraAdapter<float> ad("p", base, config(4, 8.0, 0.1), 3, false);
        for (float b : ad.B().data) EXPECT_EQ(b, 0.0F);
        Rng rng(5);
        const auto x = num::randn<float>({7, 20}, rng, 1.0);
        Graph<float> g;
        const auto want = base->forward(g, g.constant(x)).value();
        EXPECT_EQ(eval_forward(ad, x).data, want.data);
        EXPECT_EQ(ad.merge().data, base->materialize().data);
    }
}

TEST(Lora, InitialisationStatistics) {
    auto base = dense_base<double>(64, 128, 2);
    LoraAdapter<double> ad("p", base, config(32, 32.0), 9, false);
    double s = 0, s2 = 0;
    for (double a : ad.A().data) {
        s += a;
        s2 += a * a;
    }
    const double n = static_cast<double>(ad.A().size());
    EXPECT_NEAR(s / n, 0.0, 0.002);
    EXPECT_NEAR(std::sqrt(s2 / n), 0.02, 0.001);
    EXPECT_EQ(ad.scaling(), 1.0);
}

TEST(Lora, MergeEquivalencePlainAndQuantized) {
    for (int kind = 0; kind < 4; ++kind) {
        const auto base = kind == 0   ? dense_base<float>(24, 40, 7)
                          : kind == 1 ? quant_base<float>(24, 40, 7, quant::Scheme::Int8Row)
                          : kind == 2 ? quant_base<float>(24, 40, 7, quant::Scheme::Int4Block)
                                      : quant_base<float>(24, 40, 7, quant::Scheme::NF4Block);
        LoraAdapter<float> ad("p", base, config(8, 16.0, 0.1, BiasMode::LoraOnly), 4, true);
        randomize(ad, 11 + kind);
        const auto merged = ad.merge();
        Rng rng(kind);
        double worst = 0;
        for (int i = 0; i < 100; ++i) {
            const auto x = num::randn<float>({1, 40}, rng, 1.0);
            const auto a = eval_forward(ad, x);
            const auto b = dense_forward(merged, ad.merged_bias(), x);
            for (std::size_t k = 0; k < a.size(); ++k) worst = std::max(worst, static_cast<double>(std::abs(a.data[k] - b.data[k])));
        }
        EXPECT_LT(worst, 1e-5) << "base kind " << kind;
    }
}

TEST(Lora, QuantizedBaseMatchesDequantizedDenseOracle) {
    const auto qb = quant_base<double>(10, 16, 3, quant::Scheme::Int4Block);
    LoraAdapter<double> ad("p", qb, config(2, 4.0), 4, false);
    randomize(ad, 5);
    Tensor<double> w = qb->materialize();
    Rng rng(6);
    const auto x = num::randn<double>({5, 16}, rng, 1.0);
    const auto y = eval_forward(ad, x);
    // (W + s B A) x + b, computed by hand
    for (std::size_t n = 0; n < 5; ++n) {
        for (std::size_t o = 0; o < 10; ++o) {
            double acc = qb->bias().data[o];
            for (std::size_t i = 0; i < 16; ++i) {
                double ba = 0;
                for (std::size_t r = 0; r < 2; ++r) ba += ad.B().data[o * 2 + r] * ad.A().data[r * 16 + i];
                acc += (w.data[o * 16 + i] + 2.0 * ba) * x.data[n * 16 + i];
            }
            EXPECT_NEAR(y.data[n * 10 + o], acc, 1e-12);
        }
    }
}

TEST(Lora, GradcheckOnAdapterParameters) {
    for (int s = 0; s < 20; ++s) {
        const auto base = s % 2 ? quant_base<double>(4, 4, s, quant::Scheme::Int8Row) : dense_base<double>(4, 4, s);
        LoraAdapter<double> ad("p", base, config(2, 3.0, 0.0, BiasMode::LoraOnly), s, true);
        randomize(ad, 100 + s);
        Rng rng(200 + s);
        const auto x = num::randn<double>({3, 4}, rng, 1.0);
        auto loss = [&](Graph<double>& g) { return testutil::weighted_sum(ad.forward(g, g.constant(x), RunMode{}), s); };
        std::map<std::string, Tensor<double>> grads;
        {
            Graph<double> g;
            grads = g.backward(loss(g));
        }
        double worst = 0;
        for (auto& [name, t] : ad.parameters()) {
            for (std::size_t i = 0; i < t->size(); ++i) {
                const double orig = t->data[i];
                Graph<double> g1, g2;
                t->data[i] = orig + 1e-4;
                const double up = loss(g1).value().item();
                t->data[i] = orig - 1e-4;
                const double down = loss(g2).value().item();
                t->data[i] = orig;
                worst = std::max(worst, testutil::rel_error(grads.at(name).data[i], (up - down) / 2e-4));
            }
        }
        EXPECT_LT(worst, 1e-4) << "instance " << s;
    }
}

TEST(Lora, GradientKeysFollowBiasMode) {
    const auto base = dense_base<double>(6, 5, 1);
    for (bool train_bias : {false, true}) {
        LoraAdapter<double> ad("enc.q", base, config(2, 2.0), 1, train_bias);
        Rng rng(1);
        Graph<double> g;
        const auto grads = g.backward(num::sum(ad.forward(g, g.constant(num::randn<double>({2, 5}, rng, 1.0)), RunMode{})));
        std::set<std::string> keys;
        for (const auto& [k, v] : grads) keys.insert(k);
        std::set<std::string> want{"enc.q.lora_A", "enc.q.lora_B"};
        if (train_bias) want.insert("enc.q.bias");
        EXPECT_EQ(keys, want);
    }
}

TEST(Lora, TrainableCount) {
    const auto base = dense_base<float>(8, 8, 1);
    EXPECT_EQ(LoraAdapter<float>("p", base, config(2, 2.0), 1, false).trainable_count(), 32u);
    EXPECT_EQ(LoraAdapter<float>("p", base, config(2, 2.0), 1, true).trainable_count(), 40u);
}

TEST(Lora, DropoutOnlyInTraining) {
    const auto base = dense_base<double>(6, 6, 1);
    LoraAdapter<double> ad("p", base, config(3, 3.0, 0.5), 1, false);
    randomize(ad, 2);
    Rng rng(3);
    const auto x = num::randn<double>({4, 6}, rng, 1.0);
    Graph<double> g;
    const auto train1 = ad.forward(g, g.constant(x), RunMode{true, 1, 0}).value();
    const auto train2 = ad.forward(g, g.constant(x), RunMode{true, 1, 0}).value();
    const auto train3 = ad.forward(g, g.constant(x), RunMode{true, 1, 1}).value();
    EXPECT_EQ(train1.data, train2.data);
    EXPECT_NE(train1.data, train3.data);
    EXPECT_NE(train1.data, eval_forward(ad, x).data);
}

TEST(Lora, ContractAndConfigErrors) {
    const auto base = dense_base<double>(3, 4, 1);
    LoraAdapter<double> ad("p", base, config(2, 2.0), 1, false);
    Graph<double> g;
    EXPECT_THROW(ad.forward(g, g.constant(Tensor<double>({2, 5})), RunMode{}), ContractError);
    EXPECT_THROW(config(0, 1.0).validate(), ConfigError);
    EXPECT_THROW(config(1, 0.0).validate(), ConfigError);
    EXPECT_THROW(config(1, 1.0, 1.0).validate(), ConfigError);
    EXPECT_THROW(bias_mode_from_string("some"), ConfigError);
    EXPECT_THROW(FrozenLinear<double>(Tensor<double>({3, 4}), Tensor<double>({4})), ContractError);
}

TEST(Lora, ConfigJsonRoundTrip) {
    auto c = config(16, 8.0, 0.2, BiasMode::All);
    c.targets.feed_forward = true;
    const auto back = lora_config_from_json(to_json(c));
    EXPECT_EQ(back.r, 16u);
    EXPECT_EQ(back.alpha, 8.0);
    EXPECT_EQ(back.bias_mode, BiasMode::All);
    EXPECT_EQ(back.targets, c.targets);
}
