#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "nphead/error.hpp"
#include "nphead/quant.hpp"
#include "nphead/rng.hpp"

using namespace nphead;
using namespace nphead::quant;
using num::Tensor;

namespace {

Tensor<float> random_matrix(Rng& rng) {
    const auto r = static_cast<std::size_t>(rng.uniform_int(1, 24));
    const auto c = static_cast<std::size_t>(rng.uniform_int(1, 80));
    const double std = std::exp(rng.uniform() * 8 - 4);
    auto w = num::randn<float>({r, c}, rng, std);
    // occasional all-zero row and an outlier
    if (rng.uniform() < 0.2) std::fill(w.data.begin(), w.data.begin() + static_cast<std::ptrdiff_t>(c), 0.0F);
    if (rng.uniform() < 0.2) w.data[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(w.size()) - 1))] *= 50.0F;
    return w;
}

double slack(double amax) { return 8 * std::numeric_limits<double>::epsilon() * amax; }

}  // namespace

// Values printed by scripts/nf4_codebook.py.
TEST(Quant, Nf4CodebookMatchesReferenceValues) {
    const double expect[16] = {-1,
                               -0.69619280563234298,
                               -0.52507295944650045,
                               -0.39491742591990708,
                               -0.28444130892108205,
                               -0.18477340280045559,
                               -0.09104997598578049,
                               0,
                               0.079580314958409087,
                               0.16093014438029071,
                               0.2461122513474594,
                               0.33791513671312789,
                               0.44070973186421625,
                               0.56261688796998488,
                               0.72295664415947336,
                               1};
    for (int i = 0; i < 16; ++i) EXPECT_NEAR(nf4_codebook()[i], expect[i], 1e-12) << i;
}

TEST(Quant, RoundTripBoundsOnThousandMatrices) {
    Rng rng(2024);
    double nf4_gap = 0;
    for (std::size_t c = 1; c < 16; ++c) nf4_gap = std::max(nf4_gap, nf4_codebook()[c] - nf4_codebook()[c - 1]);
    for (int m = 0; m < 1000; ++m) {
        const auto w = random_matrix(rng);
        const auto q8 = QuantizedMatrix::quantize(w, Scheme::Int8Row);
        const auto d8 = q8.dequantize<double>();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double amax = q8.absmax()[q8.group_of(i)];
            ASSERT_LE(std::abs(w.data[i] - d8.data[i]), amax / 254 + slack(amax)) << "matrix " << m << " entry " << i;
        }
        const auto q4 = QuantizedMatrix::quantize(w, Scheme::Int4Block, 64);
        const auto d4 = q4.dequantize<double>();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const std::size_t g = q4.group_of(i);
            ASSERT_LE(std::abs(w.data[i] - d4.data[i]), q4.scale(g) / 2 + slack(q4.absmax()[g])) << "matrix " << m;
        }
        const auto qn = QuantizedMatrix::quantize(w, Scheme::NF4Block, 64);
        const auto dn = qn.dequantize<double>();
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double amax = qn.absmax()[qn.group_of(i)];
            ASSERT_LE(std::abs(w.data[i] - dn.data[i]), amax * nf4_gap / 2 + slack(amax));
        }
    }
}

TEST(Quant, SaturatedCodesReproduceTheMaximum) {
    Tensor<float> w({2, 3}, std::vector<float>{0.1F, -3.7F, 2.0F, 0.0F, 0.0F, 0.0F});
    for (auto s : {Scheme::Int8Row, Scheme::Int4Block, Scheme::NF4Block}) {
        const auto d = QuantizedMatrix::quantize(w, s, 2).dequantize<float>();
        EXPECT_EQ(d.data[1], -3.7F) << to_string(s);
        EXPECT_EQ(d.data[4], 0.0F);
    }
}

TEST(Quant, LinearSchemesAreScaleCovariant) {
    Rng rng(8);
    for (int m = 0; m < 200; ++m) {
        const auto w = random_matrix(rng);
        // powers of two keep c * w exact in float
        const float c = std::ldexp(1.0F, static_cast<int>(rng.uniform_int(-6, 6)));
        Tensor<float> cw = w;
        for (auto& x : cw.data) x *= c;
        for (auto s : {Scheme::Int8Row, Scheme::Int4Block}) {
            const auto a = QuantizedMatrix::quantize(w, s, 16);
            const auto b = QuantizedMatrix::quantize(cw, s, 16);
            ASSERT_EQ(a.num_groups(), b.num_groups());
            for (std::size_t g = 0; g < a.num_groups(); ++g) ASSERT_EQ(b.scale(g), c * a.scale(g));
            for (std::size_t i = 0; i < w.size(); ++i) ASSERT_EQ(a.code(i), b.code(i));
        }
    }
}

TEST(Quant, ScaleCovarianceForGeneralFactor) {
    Rng rng(81);
    std::size_t differing = 0, total = 0;
    for (int m = 0; m < 100; ++m) {
        Tensor<double> w = num::randn<double>({8, 32}, rng, 1.0);
        const double c = 0.1 + rng.uniform() * 10;
        Tensor<double> cw = w;
        for (auto& x : cw.data) x *= c;
        const auto a = QuantizedMatrix::quantize(w, Scheme::Int8Row);
        const auto b = QuantizedMatrix::quantize(cw, Scheme::Int8Row);
        for (std::size_t g = 0; g < a.num_groups(); ++g) ASSERT_NEAR(b.scale(g), c * a.scale(g), 1e-6 * c * a.scale(g));
        for (std::size_t i = 0; i < w.size(); ++i, ++total) {
            ASSERT_LE(std::abs(a.code(i) - b.code(i)), 1);
            differing += a.code(i) != b.code(i);
        }
    }
    // absmax is stored in 32 bits, so a code sitting within float rounding of
    // a half-step boundary may move by one
    EXPECT_LE(differing * 10000, total) << differing << " of " << total;
}

TEST(Quant, PackingRoundTripsIncludingOddLengths) {
    Rng rng(3);
    for (std::size_t n = 0; n < 40; ++n) {
        std::vector<std::uint8_t> codes(n);
        for (auto& c : codes) c = static_cast<std::uint8_t>(rng.uniform_int(0, 15));
        const auto packed = pack_nibbles(codes);
        EXPECT_EQ(packed.size(), (n + 1) / 2);
        EXPECT_EQ(unpack_nibbles(packed, n), codes);
    }
    EXPECT_THROW(unpack_nibbles(std::vector<std::uint8_t>{1}, 3), IntegrityError);
}

TEST(Quant, SerializationRoundTripAndCorruption) {
    Rng rng(12);
    const auto w = num::randn<float>({5, 9}, rng, 1.0);
    for (auto s : {Scheme::Int8Row, Scheme::Int4Block, Scheme::NF4Block}) {
        const auto q = QuantizedMatrix::quantize(w, s, 8);
        const auto bytes = q.serialize();
        const auto back = QuantizedMatrix::deserialize(bytes);
        EXPECT_EQ(back.serialize(), bytes);
        EXPECT_EQ(back.dequantize<float>().data, q.dequantize<float>().data);
        auto bad = bytes;
        bad[0] = 9;
        EXPECT_THROW(QuantizedMatrix::deserialize(bad), IntegrityError);
        bad = bytes;
        bad.pop_back();
        EXPECT_THROW(QuantizedMatrix::deserialize(bad), IntegrityError);
        bad = bytes;
        bad.push_back(0);
        EXPECT_THROW(QuantizedMatrix::deserialize(bad), IntegrityError);
    }
    // an int4 nibble of 0 decodes to -8, outside the symmetric range
    auto bytes = QuantizedMatrix::quantize(w, Scheme::Int4Block, 8).serialize();
    bytes.back() = 0x00;
    EXPECT_THROW(QuantizedMatrix::deserialize(bytes).dequantize<float>(), IntegrityError);
}

TEST(Quant, ConfigurationErrors) {
    Tensor<float> w({2, 2}, 1.0F);
    EXPECT_THROW(QuantizedMatrix::quantize(w, Scheme::Int4Block, 3), ConfigError);
    EXPECT_THROW(QuantizedMatrix::quantize(Tensor<float>({4}, 1.0F), Scheme::Int8Row), ContractError);
    w.data[0] = std::numeric_limits<float>::quiet_NaN();
    EXPECT_THROW(QuantizedMatrix::quantize(w, Scheme::Int8Row), ContractError);
    EXPECT_THROW(scheme_from_string("fp8"), ConfigError);
    EXPECT_EQ(scheme_from_string("nf4"), Scheme::NF4Block);
}

TEST(Quant, MatrixHasNoPublicConstructorOrMutators) {
    static_assert(!std::is_default_constructible_v<QuantizedMatrix>);
    Rng rng(1);
    const auto w = num::randn<double>({6, 5}, rng, 1.0);
    const auto x = num::randn<double>({5, 3}, rng, 1.0);
    const auto q = QuantizedMatrix::quantize(w, Scheme::Int4Block, 4);
    const auto y = qmatmul(q, x);
    const auto d = q.dequantize<double>();
    for (std::size_t r = 0; r < 6; ++r) {
        for (std::size_t k = 0; k < 3; ++k) {
            double s = 0;
            for (std::size_t c = 0; c < 5; ++c) s += d.data[r * 5 + c] * x.data[c * 3 + k];
            EXPECT_NEAR(y.data[r * 3 + k], s, 1e-12);
        }
    }
}
