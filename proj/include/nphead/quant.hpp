#pragma once

// Frozen-weight quantization: int8 absmax per row, and 4-bit blockwise absmax
// (signed linear levels or a normal-float codebook). Blocks run over the
// row-major flattened matrix; the final block may be partial.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "bytes.hpp"
#include "error.hpp"
#include "numerics.hpp"

namespace nphead::quant {

enum class Scheme : std::uint8_t {
    Int8Row = 1,    // one absmax per row, codes -127..127
    Int4Block = 2,  // one absmax per block, codes -7..7
    NF4Block = 3,   // one absmax per block, codes index a 16-level codebook
};

inline std::string to_string(Scheme s) {
    switch (s) {
        case Scheme::Int8Row: return "int8";
        case Scheme::Int4Block: return "int4";
        case Scheme::NF4Block: return "nf4";
    }
    return "unknown";
}

inline Scheme scheme_from_string(const std::string& s) {
    if (s == "int8") return Scheme::Int8Row;
    if (s == "int4") return Scheme::Int4Block;
    if (s == "nf4") return Scheme::NF4Block;
    throw ConfigError("unknown quantization scheme '" + s + "' (expected int8, int4 or nf4)");
}

inline constexpr std::size_t kDefaultBlockSize = 64;

// Largest code magnitude; the stored scale is absmax / top_code.
inline constexpr int top_code(Scheme s) {
    switch (s) {
        case Scheme::Int8Row: return 127;
        case Scheme::Int4Block: return 7;
        case Scheme::NF4Block: return 1;
    }
    return 1;
}

namespace detail {

// Inverse standard normal CDF by bisection on erfc; accurate to double precision.
inline double normal_quantile(double p) {
    double lo = -40.0, hi = 40.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        const double cdf = 0.5 * std::erfc(-mid / std::numbers::sqrt2);
        (cdf < p ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

inline std::array<double, 16> build_nf4_codebook() {
    const double offset = 0.5 * ((1.0 - 1.0 / 30.0) + (1.0 - 1.0 / 32.0));
    std::array<double, 16> levels{};
    std::size_t n = 0;
    // 7 negative levels from an 8-point grid, 8 positive from a 9-point grid
    for (int i = 0; i < 7; ++i) levels[n++] = -normal_quantile(offset + (0.5 - offset) * i / 7.0);
    levels[n++] = 0.0;
    for (int i = 0; i < 8; ++i) levels[n++] = normal_quantile(offset + (0.5 - offset) * i / 8.0);
    std::sort(levels.begin(), levels.end());
    const double top = levels.back();
    for (auto& v : levels) v /= top;
    return levels;
}

}  // namespace detail

inline const std::array<double, 16>& nf4_codebook() {
    static const std::array<double, 16> table = detail::build_nf4_codebook();
    return table;
}

// Two 4-bit values per byte, low nibble first. An odd tail is padded with 0.
inline std::vector<std::uint8_t> pack_nibbles(std::span<const std::uint8_t> nibbles) {
    std::vector<std::uint8_t> out((nibbles.size() + 1) / 2, 0);
    for (std::size_t i = 0; i < nibbles.size(); ++i) {
        out[i / 2] |= static_cast<std::uint8_t>((nibbles[i] & 0x0F) << (4 * (i % 2)));
    }
    return out;
}

inline std::vector<std::uint8_t> unpack_nibbles(std::span<const std::uint8_t> packed, std::size_t count) {
    if (packed.size() * 2 < count) throw IntegrityError("packed code buffer too short");
    std::vector<std::uint8_t> out(count);
    for (std::size_t i = 0; i < count; ++i) out[i] = (packed[i / 2] >> (4 * (i % 2))) & 0x0F;
    return out;
}

// Immutable quantized weight. Construct with quantize() or deserialize().
class QuantizedMatrix {
public:
    template <class T>
    static QuantizedMatrix quantize(const num::Tensor<T>& w, Scheme scheme, std::size_t block_size = kDefaultBlockSize);

    static QuantizedMatrix deserialize(std::span<const std::uint8_t> bytes);
    std::vector<std::uint8_t> serialize() const;
    void serialize_into(ByteWriter& out) const;
    static QuantizedMatrix read_from(ByteReader& in);

    // Throws IntegrityError on a code outside the scheme's range.
    template <class T>
    num::Tensor<T> dequantize() const;
    template <class T>
    void dequantize_row(std::size_t r, std::span<T> out) const {
        for (std::size_t c = 0; c < cols_; ++c) out[c] = static_cast<T>(level(r * cols_ + c));
    }

    Scheme scheme() const { return scheme_; }
    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    num::Shape shape() const { return {rows_, cols_}; }
    std::size_t block_size() const { return scheme_ == Scheme::Int8Row ? cols_ : block_size_; }
    std::size_t num_groups() const { return absmax_.size(); }
    // Per-row (int8) or per-block (4-bit) absolute maximum of the source values.
    std::span<const float> absmax() const { return absmax_; }
    double scale(std::size_t group) const { return static_cast<double>(absmax_[group]) / top_code(scheme_); }
    std::span<const std::uint8_t> packed_codes() const { return codes_; }
    // Signed code (linear schemes) or codebook index (nf4) of flat element i.
    int code(std::size_t i) const;
    std::size_t group_of(std::size_t flat_index) const {
        return scheme_ == Scheme::Int8Row ? flat_index / cols_ : flat_index / block_size_;
    }

private:
    QuantizedMatrix() = default;
    double level(std::size_t flat_index) const;

    Scheme scheme_ = Scheme::Int8Row;
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t block_size_ = 0;
    std::vector<float> absmax_;
    std::vector<std::uint8_t> codes_;  // int8 bytes, or packed nibbles
};

template <class T>
QuantizedMatrix QuantizedMatrix::quantize(const num::Tensor<T>& w, Scheme scheme, std::size_t block_size) {
    if (w.shape.size() != 2) throw ContractError("quantize: expected a matrix, got " + num::shape_str(w.shape));
    if (scheme != Scheme::Int8Row && (block_size == 0 || block_size % 2 != 0)) {
        throw ConfigError("quantize: block_size must be a positive even number, got " + std::to_string(block_size));
    }
    for (T x : w.data) {
        if (!std::isfinite(x)) throw ContractError("quantize: non-finite weight");
    }
    QuantizedMatrix q;
    q.scheme_ = scheme;
    q.rows_ = w.shape[0];
    q.cols_ = w.shape[1];
    q.block_size_ = scheme == Scheme::Int8Row ? 0 : block_size;
    const std::size_t n = w.size();
    const std::size_t group = scheme == Scheme::Int8Row ? q.cols_ : block_size;
    const std::size_t groups = group == 0 ? 0 : (n + group - 1) / group;
    q.absmax_.assign(scheme == Scheme::Int8Row ? q.rows_ : groups, 0.0F);
    const double top = top_code(scheme);

    std::vector<std::uint8_t> nibbles;
    if (scheme == Scheme::Int8Row) q.codes_.resize(n);
    else nibbles.resize(n);

    for (std::size_t gi = 0; gi < q.absmax_.size(); ++gi) {
        const std::size_t begin = gi * group, end = std::min(n, begin + group);
        double amax = 0;
        for (std::size_t i = begin; i < end; ++i) amax = std::max(amax, std::abs(static_cast<double>(w.data[i])));
        const float amax_f = static_cast<float>(amax);
        q.absmax_[gi] = amax_f;
        for (std::size_t i = begin; i < end; ++i) {
            const double x = static_cast<double>(w.data[i]);
            if (scheme == Scheme::NF4Block) {
                const double t = amax_f > 0 ? x / amax_f : 0.0;
                const auto& book = nf4_codebook();
                std::size_t best = 0;
                for (std::size_t c = 1; c < book.size(); ++c) {
                    if (std::abs(book[c] - t) < std::abs(book[best] - t)) best = c;
                }
                nibbles[i] = static_cast<std::uint8_t>(best);
                continue;
            }
            // round half away from zero; x * top / absmax keeps exact halves exact
            double c = amax_f > 0 ? std::round(x * top / amax_f) : 0.0;
            c = std::clamp(c, -top, top);
            if (scheme == Scheme::Int8Row) q.codes_[i] = static_cast<std::uint8_t>(static_cast<std::int8_t>(c));
            else nibbles[i] = static_cast<std::uint8_t>(static_cast<int>(c) + 8);
        }
    }
    if (scheme != Scheme::Int8Row) q.codes_ = pack_nibbles(nibbles);
    return q;
}

inline int QuantizedMatrix::code(std::size_t i) const {
    if (scheme_ == Scheme::Int8Row) return static_cast<std::int8_t>(codes_[i]);
    const int nib = (codes_[i / 2] >> (4 * (i % 2))) & 0x0F;
    return scheme_ == Scheme::NF4Block ? nib : nib - 8;
}

inline double QuantizedMatrix::level(std::size_t i) const {
    const int c = code(i);
    const double amax = absmax_[group_of(i)];
    switch (scheme_) {
        case Scheme::Int8Row:
            if (c < -127) throw IntegrityError("int8 code out of range at element " + std::to_string(i));
            // (c * absmax) / 127 is exact for c = +-127, so a saturated code
            // reproduces the row maximum bit for bit
            return static_cast<double>(c) * amax / 127.0;
        case Scheme::Int4Block:
            if (c < -7) throw IntegrityError("int4 code out of range at element " + std::to_string(i));
            return static_cast<double>(c) * amax / 7.0;
        case Scheme::NF4Block:
            return nf4_codebook()[static_cast<std::size_t>(c)] * amax;
    }
    return 0.0;
}

template <class T>
num::Tensor<T> QuantizedMatrix::dequantize() const {
    num::Tensor<T> out({rows_, cols_});
    for (std::size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<T>(level(i));
    return out;
}

inline void QuantizedMatrix::serialize_into(ByteWriter& out) const {
    out.u8(static_cast<std::uint8_t>(scheme_));
    out.u32(static_cast<std::uint32_t>(rows_));
    out.u32(static_cast<std::uint32_t>(cols_));
    out.u32(static_cast<std::uint32_t>(block_size_));
    out.u32(static_cast<std::uint32_t>(absmax_.size()));
    for (float s : absmax_) out.f32(s);
    out.u32(static_cast<std::uint32_t>(codes_.size()));
    out.raw(codes_);
}

inline std::vector<std::uint8_t> QuantizedMatrix::serialize() const {
    ByteWriter w;
    serialize_into(w);
    return w.take();
}

inline QuantizedMatrix QuantizedMatrix::read_from(ByteReader& in) {
    QuantizedMatrix q;
    const auto tag = in.u8();
    if (tag < 1 || tag > 3) throw IntegrityError("unknown quantization scheme tag " + std::to_string(tag));
    q.scheme_ = static_cast<Scheme>(tag);
    q.rows_ = in.u32();
    q.cols_ = in.u32();
    q.block_size_ = in.u32();
    const std::size_t n = q.rows_ * q.cols_;
    const std::size_t groups = in.u32();
    const std::size_t expect_groups = q.scheme_ == Scheme::Int8Row
                                          ? q.rows_
                                          : (q.block_size_ == 0 ? SIZE_MAX : (n + q.block_size_ - 1) / q.block_size_);
    if (groups != expect_groups) throw IntegrityError("scale count does not match shape");
    q.absmax_.resize(groups);
    for (auto& s : q.absmax_) {
        s = in.f32();
        if (!(s >= 0.0F) || !std::isfinite(s)) throw IntegrityError("invalid scale value");
    }
    const std::size_t code_bytes = in.u32();
    const std::size_t expect_bytes = q.scheme_ == Scheme::Int8Row ? n : (n + 1) / 2;
    if (code_bytes != expect_bytes) throw IntegrityError("code byte count does not match shape");
    const auto raw = in.raw(code_bytes);
    q.codes_.assign(raw.begin(), raw.end());
    return q;
}

inline QuantizedMatrix QuantizedMatrix::deserialize(std::span<const std::uint8_t> bytes) {
    ByteReader r(bytes);
    auto q = read_from(r);
    if (!r.done()) throw IntegrityError("trailing bytes after quantized matrix");
    return q;
}

// Q [rows x cols] times x [cols x k], dequantizing one row at a time.
template <class T>
num::Tensor<T> qmatmul(const QuantizedMatrix& q, const num::Tensor<T>& x) {
    if (x.shape.size() != 2 || x.shape[0] != q.cols()) {
        throw ContractError("qmatmul: shape mismatch " + num::shape_str(q.shape()) + " vs " + num::shape_str(x.shape));
    }
    const std::size_t k = x.shape[1];
    num::Tensor<T> y({q.rows(), k});
    std::vector<T> row(q.cols());
    for (std::size_t r = 0; r < q.rows(); ++r) {
        q.dequantize_row<T>(r, row);
        T* yr = y.data.data() + r * k;
        for (std::size_t c = 0; c < q.cols(); ++c) {
            const T wv = row[c];
            if (wv == T(0)) continue;
            const T* xc = x.data.data() + c * k;
            for (std::size_t j = 0; j < k; ++j) yr[j] += wv * xc[j];
        }
    }
    return y;
}

// Graph op: x [n x in] times dequantize(Q)^T plus optional bias. Gradients
// flow to x (and bias) only.
template <class T>
num::Var<T> qlinear(num::Var<T> x, const QuantizedMatrix& q, const num::Var<T>* bias = nullptr) {
    auto& g = *x.graph;
    auto w = g.constant(q.dequantize<T>());
    return num::linear(x, w, bias);
}

}  // namespace nphead::quant
