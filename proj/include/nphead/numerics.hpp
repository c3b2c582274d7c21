#pragma once

// Dense tensors and a tape-based reverse-mode graph, templated on the scalar
// type: float for training, double for gradient checks.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "error.hpp"
#include "rng.hpp"

namespace nphead::num {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? " x " : "") << s[i];
    os << ']';
    return os.str();
}

inline std::size_t numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

template <class T>
struct Tensor {
    Shape shape;
    std::vector<T> data;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), data(numel(shape), fill) {}
    Tensor(Shape s, std::vector<T> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != numel(shape)) {
            throw ContractError("tensor data length " + std::to_string(data.size()) + " does not match shape " +
                                shape_str(shape));
        }
    }

    std::size_t size() const { return data.size(); }
    bool empty() const { return data.empty(); }
    std::size_t rows() const { return shape.size() < 2 ? 1 : shape[0]; }
    std::size_t cols() const { return shape.empty() ? 1 : shape.back(); }
    T& operator()(std::size_t i, std::size_t j) { return data[i * cols() + j]; }
    const T& operator()(std::size_t i, std::size_t j) const { return data[i * cols() + j]; }
    T item() const {
        if (data.size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape));
        return data[0];
    }

    template <class U>
    Tensor<U> cast() const {
        Tensor<U> out;
        out.shape = shape;
        out.data.assign(data.begin(), data.end());
        return out;
    }

    bool operator==(const Tensor&) const = default;
};

template <class T>
Tensor<T> randn(Shape shape, Rng& rng, double stddev) {
    Tensor<T> t(std::move(shape));
    for (auto& x : t.data) x = static_cast<T>(rng.normal() * stddev);
    return t;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
    return std::all_of(t.data.begin(), t.data.end(), [](T x) { return std::isfinite(x); });
}

// ---------------------------------------------------------------------------
// Row-major GEMM helpers over raw buffers.

namespace blas {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MMap = Eigen::Map<RowMat<T>>;

// C (+)= A[m x k] * B[k x n]
template <class T>
void nn(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    CMap<T> A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    CMap<T> B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MMap<T> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (accumulate) C.noalias() += A * B;
    else C.noalias() = A * B;
}

// C (+)= A[m x k] * B[n x k]^T
template <class T>
void nt(const T* a, const T* b, T* c, std::size_t m, std::size_t k, std::size_t n, bool accumulate) {
    CMap<T> A(a, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(k));
    CMap<T> B(b, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    MMap<T> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (accumulate) C.noalias() += A * B.transpose();
    else C.noalias() = A * B.transpose();
}

// C (+)= A[k x m]^T * B[k x n]
template <class T>
void tn(const T* a, const T* b, T* c, std::size_t k, std::size_t m, std::size_t n, bool accumulate) {
    CMap<T> A(a, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(m));
    CMap<T> B(b, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(n));
    MMap<T> C(c, static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(n));
    if (accumulate) C.noalias() += A.transpose() * B;
    else C.noalias() = A.transpose() * B;
}

}  // namespace blas

// ---------------------------------------------------------------------------
// Graph

template <class T>
class Graph;

// Handle to a node in a Graph. Cheap to copy.
template <class T>
struct Var {
    Graph<T>* graph = nullptr;
    int id = -1;

    const Tensor<T>& value() const { return graph->value(id); }
    const Shape& shape() const { return value().shape; }
    bool requires_grad() const { return graph->requires_grad(id); }
};

template <class T>
class Graph {
public:
    // Receives the node's output gradient and output value, and accumulates
    // into the gradients of its parents.
    using BackwardFn = std::function<void(Graph&, const Tensor<T>&, const Tensor<T>&)>;

    Var<T> constant(Tensor<T> v) { return push(std::move(v), nullptr, false, {}); }
    // Non-owning; `v` must outlive the graph.
    Var<T> constant_ref(const Tensor<T>& v) { return push({}, &v, false, {}); }
    // Trainable leaf bound to external storage; `v` must outlive the graph.
    Var<T> parameter(std::string name, const Tensor<T>& v) { return push({}, &v, true, std::move(name)); }
    Var<T> constant_ref(Tensor<T>&&) = delete;
    Var<T> parameter(std::string, Tensor<T>&&) = delete;

    // Records an op result. `fn` is kept only when some parent needs a gradient.
    Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
#ifdef NPHEAD_CHECK_FINITE
        if (!all_finite(value)) throw NumericError("non-finite value produced by a forward op");
#endif
        bool rg = false;
        for (const auto& p : parents) {
            if (p.graph != this) throw ContractError("operand recorded on a different graph");
            rg = rg || requires_grad(p.id);
        }
        auto v = push(std::move(value), nullptr, rg, {});
        if (rg) nodes_.back().backward = std::move(fn);
        return v;
    }

    const Tensor<T>& value(int id) const {
        const auto& n = nodes_[static_cast<std::size_t>(id)];
        return n.ref ? *n.ref : n.owned;
    }
    bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

    // Gradient buffer of a node, zero-initialized on first access.
    Tensor<T>& grad(int id) {
        auto& n = nodes_[static_cast<std::size_t>(id)];
        if (!n.has_grad) {
            n.grad = Tensor<T>(value(id).shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    std::size_t size() const { return nodes_.size(); }

    // Reverse sweep over the tape. Ids are assigned in execution order, so
    // descending id order is a reverse topological order and every node is
    // visited at most once. Returns gradients keyed by parameter name;
    // contributions of a parameter bound more than once are summed.
    std::map<std::string, Tensor<T>> backward(Var<T> loss) {
        if (loss.graph != this) throw ContractError("backward: loss belongs to another graph");
        if (value(loss.id).size() != 1) {
            throw ContractError("backward: loss must be scalar, got shape " + shape_str(value(loss.id).shape));
        }
        for (auto& n : nodes_) {
            n.grad = {};
            n.has_grad = false;
        }
        std::map<std::string, Tensor<T>> out;
        if (!requires_grad(loss.id)) return out;
        grad(loss.id).data[0] = T(1);
        for (int id = loss.id; id >= 0; --id) {
            auto& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || !n.has_grad || !n.backward) continue;
            n.backward(*this, n.grad, value(id));
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            auto& n = nodes_[i];
            if (n.param.empty()) continue;
            const Tensor<T> g = n.has_grad ? n.grad : Tensor<T>(value(static_cast<int>(i)).shape);
            auto [it, inserted] = out.emplace(n.param, g);
            if (!inserted) {
                for (std::size_t k = 0; k < g.size(); ++k) it->second.data[k] += g.data[k];
            }
        }
        return out;
    }

private:
    struct Node {
        Tensor<T> owned;
        const Tensor<T>* ref = nullptr;
        Tensor<T> grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::string param;
        BackwardFn backward;
    };

    Var<T> push(Tensor<T> owned, const Tensor<T>* ref, bool rg, std::string param) {
        nodes_.push_back(Node{std::move(owned), ref, {}, false, rg, std::move(param), {}});
        return Var<T>{this, static_cast<int>(nodes_.size() - 1)};
    }

    std::vector<Node> nodes_;
};

namespace detail {

inline void require_same(const char* op, const Shape& a, const Shape& b) {
    if (a != b) throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

inline void require_matrix(const char* op, const Shape& a) {
    if (a.size() != 2) throw ContractError(std::string(op) + ": expected a matrix, got " + shape_str(a));
}

template <class T>
Graph<T>& graph_of(Var<T> a) {
    if (a.graph == nullptr) throw ContractError("operand not attached to a graph");
    return *a.graph;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and reductions

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
    detail::require_same("add", a.shape(), b.shape());
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += bv.data[i];
    const int ia = a.id, ib = b.id;
    return detail::graph_of(a).record(std::move(y), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        for (int p : {ia, ib}) {
            if (!g.requires_grad(p)) continue;
            auto& gp = g.grad(p);
            for (std::size_t i = 0; i < gy.size(); ++i) gp.data[i] += gy.data[i];
        }
    });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> y = a.value();
    for (auto& x : y.data) x *= s;
    const int ia = a.id;
    return detail::graph_of(a).record(std::move(y), {a}, [ia, s](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        auto& ga = g.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += s * gy.data[i];
    });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
    detail::require_same("mul", a.shape(), b.shape());
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= bv.data[i];
    const int ia = a.id, ib = b.id;
    return detail::graph_of(a).record(std::move(y), {a, b}, [ia, ib](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        if (g.requires_grad(ia)) {
            const auto& bv2 = g.value(ib);
            auto& ga = g.grad(ia);
            for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * bv2.data[i];
        }
        if (g.requires_grad(ib)) {
            const auto& av2 = g.value(ia);
            auto& gb = g.grad(ib);
            for (std::size_t i = 0; i < gy.size(); ++i) gb.data[i] += gy.data[i] * av2.data[i];
        }
    });
}

template <class T>
Var<T> sum(Var<T> a) {
    T total = 0;
    for (T x : a.value().data) total += x;
    const int ia = a.id;
    return detail::graph_of(a).record(Tensor<T>({1}, total), {a}, [ia](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        auto& ga = g.grad(ia);
        for (auto& x : ga.data) x += gy.data[0];
    });
}

// Exact (erf-based) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    const auto& x = a.value();
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = T(0.5) * x.data[i] * (T(1) + std::erf(x.data[i] * inv_sqrt2));
    const int ia = a.id;
    return detail::graph_of(a).record(std::move(y), {a}, [ia](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        constexpr T inv_sqrt2pi = T(0.39894228040143267794);
        const auto& xv = g.value(ia);
        auto& ga = g.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) {
            const T v = xv.data[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * v * v);
            ga.data[i] += gy.data[i] * (cdf + v * pdf);
        }
    });
}

// Inverted dropout. The keep decision for element i is a pure function of
// (seed, layer_id, step, i). Identity when not training or p == 0.
template <class T>
Var<T> dropout(Var<T> a, double p, std::uint64_t seed, std::uint64_t layer_id, std::uint64_t step, bool training) {
    if (p < 0.0 || p >= 1.0) throw ContractError("dropout: probability must be in [0, 1)");
    if (!training || p == 0.0) return a;
    const auto& x = a.value();
    auto mask = std::make_shared<std::vector<T>>(x.size());
    const T keep_scale = T(1) / static_cast<T>(1.0 - p);
    Tensor<T> y(x.shape);
    for (std::size_t i = 0; i < x.size(); ++i) {
        (*mask)[i] = to_unit(counter_hash(seed, layer_id, step, i)) >= p ? keep_scale : T(0);
        y.data[i] = x.data[i] * (*mask)[i];
    }
    const int ia = a.id;
    return detail::graph_of(a).record(std::move(y), {a}, [ia, mask](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        auto& ga = g.grad(ia);
        for (std::size_t i = 0; i < gy.size(); ++i) ga.data[i] += gy.data[i] * (*mask)[i];
    });
}

// ---------------------------------------------------------------------------
// Matrix products

template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
    detail::require_matrix("matmul", a.shape());
    detail::require_matrix("matmul", b.shape());
    const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    if (b.shape()[0] != k) {
        throw ContractError("matmul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    Tensor<T> y({m, n});
    blas::nn(a.value().data.data(), b.value().data.data(), y.data.data(), m, k, n, false);
    const int ia = a.id, ib = b.id;
    return detail::graph_of(a).record(std::move(y), {a, b},
                                      [ia, ib, m, k, n](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        if (g.requires_grad(ia)) blas::nt(gy.data.data(), g.value(ib).data.data(), g.grad(ia).data.data(), m, n, k, true);
        if (g.requires_grad(ib)) blas::tn(g.value(ia).data.data(), gy.data.data(), g.grad(ib).data.data(), m, k, n, true);
    });
}

// y = x W^T + b with x [n x in], W [out x in], b [out] (optional).
template <class T>
Var<T> linear(Var<T> x, Var<T> w, const Var<T>* bias = nullptr) {
    detail::require_matrix("linear", x.shape());
    detail::require_matrix("linear", w.shape());
    const std::size_t n = x.shape()[0], in = x.shape()[1], out = w.shape()[0];
    if (w.shape()[1] != in) {
        throw ContractError("linear: shape mismatch " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
    }
    if (bias && bias->shape() != Shape{out}) {
        throw ContractError("linear: bias shape " + shape_str(bias->shape()) + " vs weight " + shape_str(w.shape()));
    }
    Tensor<T> y({n, out});
    blas::nt(x.value().data.data(), w.value().data.data(), y.data.data(), n, in, out, false);
    if (bias) {
        const auto& bv = bias->value();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < out; ++j) y.data[i * out + j] += bv.data[j];
    }
    const int ix = x.id, iw = w.id, ib = bias ? bias->id : -1;
    auto fn = [ix, iw, ib, n, in, out](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        if (g.requires_grad(ix)) blas::nn(gy.data.data(), g.value(iw).data.data(), g.grad(ix).data.data(), n, out, in, true);
        if (g.requires_grad(iw)) blas::tn(gy.data.data(), g.value(ix).data.data(), g.grad(iw).data.data(), n, out, in, true);
        if (ib >= 0 && g.requires_grad(ib)) {
            auto& gb = g.grad(ib);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < out; ++j) gb.data[j] += gy.data[i * out + j];
        }
    };
    auto& g = detail::graph_of(x);
    if (bias) return g.record(std::move(y), {x, w, *bias}, fn);
    return g.record(std::move(y), {x, w}, fn);
}

// ---------------------------------------------------------------------------
// Embedding lookup: rows of `table` [V x d] selected by ids.

template <class T>
Var<T> embed(Var<T> table, const std::vector<std::int32_t>& ids) {
    detail::require_matrix("embed", table.shape());
    const std::size_t vocab = table.shape()[0], d = table.shape()[1];
    Tensor<T> y({ids.size(), d});
    const auto& tv = table.value();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw ContractError("embed: id " + std::to_string(ids[i]) + " outside table of shape " +
                                shape_str(table.shape()));
        }
        std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                    y.data.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    const int it = table.id;
    return detail::graph_of(table).record(std::move(y), {table},
                                          [it, ids, d](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        auto& gt = g.grad(it);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) gt.data[static_cast<std::size_t>(ids[i]) * d + j] += gy.data[i * d + j];
    });
}

// ---------------------------------------------------------------------------
// Softmax over one axis of a matrix (axis 1: each row sums to one).

template <class T>
Var<T> softmax(Var<T> a, int axis = 1) {
    detail::require_matrix("softmax", a.shape());
    if (axis < 0) axis += 2;
    if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
    const std::size_t r = a.shape()[0], c = a.shape()[1];
    // `lines` vectors of `len` elements spaced `stride` apart
    const std::size_t lines = axis == 1 ? r : c, len = axis == 1 ? c : r;
    const std::size_t line_step = axis == 1 ? c : 1, stride = axis == 1 ? 1 : c;
    const auto& x = a.value();
    Tensor<T> y(x.shape);
    for (std::size_t l = 0; l < lines; ++l) {
        const std::size_t base = l * line_step;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, x.data[base + k * stride]);
        T z = 0;
        for (std::size_t k = 0; k < len; ++k) {
            const T e = std::exp(x.data[base + k * stride] - mx);
            y.data[base + k * stride] = e;
            z += e;
        }
        for (std::size_t k = 0; k < len; ++k) y.data[base + k * stride] /= z;
    }
    const int ia = a.id;
    return detail::graph_of(a).record(std::move(y), {a},
                                      [=](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>& yv) {
        auto& ga = g.grad(ia);
        for (std::size_t l = 0; l < lines; ++l) {
            const std::size_t base = l * line_step;
            T dot = 0;
            for (std::size_t k = 0; k < len; ++k) dot += gy.data[base + k * stride] * yv.data[base + k * stride];
            for (std::size_t k = 0; k < len; ++k) {
                const std::size_t i = base + k * stride;
                ga.data[i] += yv.data[i] * (gy.data[i] - dot);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Layer normalization over the last axis of x [n x d].

inline constexpr double kLayerNormEps = 1e-5;

template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gain, Var<T> shift, double eps = kLayerNormEps) {
    detail::require_matrix("layer_norm", x.shape());
    const std::size_t n = x.shape()[0], d = x.shape()[1];
    if (gain.shape() != Shape{d} || shift.shape() != Shape{d}) {
        throw ContractError("layer_norm: gain/shift shape " + shape_str(gain.shape()) + " vs input " + shape_str(x.shape()));
    }
    const auto& xv = x.value();
    const auto& gv = gain.value();
    const auto& bv = shift.value();
    auto xhat = std::make_shared<std::vector<T>>(n * d);
    auto inv_std = std::make_shared<std::vector<T>>(n);
    Tensor<T> y({n, d});
    for (std::size_t i = 0; i < n; ++i) {
        const T* row = xv.data.data() + i * d;
        T mean = 0;
        for (std::size_t j = 0; j < d; ++j) mean += row[j];
        mean /= static_cast<T>(d);
        T var = 0;
        for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
        var /= static_cast<T>(d);
        const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const T h = (row[j] - mean) * is;
            (*xhat)[i * d + j] = h;
            y.data[i * d + j] = h * gv.data[j] + bv.data[j];
        }
    }
    const int ix = x.id, ig = gain.id, ib = shift.id;
    return detail::graph_of(x).record(std::move(y), {x, gain, shift},
                                      [=](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        const auto& gval = g.value(ig);
        if (g.requires_grad(ig) || g.requires_grad(ib)) {
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < d; ++j) {
                    if (g.requires_grad(ig)) g.grad(ig).data[j] += gy.data[i * d + j] * (*xhat)[i * d + j];
                    if (g.requires_grad(ib)) g.grad(ib).data[j] += gy.data[i * d + j];
                }
            }
        }
        if (!g.requires_grad(ix)) return;
        auto& gx = g.grad(ix);
        for (std::size_t i = 0; i < n; ++i) {
            T mean_dh = 0, mean_dh_h = 0;
            for (std::size_t j = 0; j < d; ++j) {
                const T dh = gy.data[i * d + j] * gval.data[j];
                mean_dh += dh;
                mean_dh_h += dh * (*xhat)[i * d + j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dh_h /= static_cast<T>(d);
            for (std::size_t j = 0; j < d; ++j) {
                const T dh = gy.data[i * d + j] * gval.data[j];
                gx.data[i * d + j] += (*inv_std)[i] * (dh - mean_dh - (*xhat)[i * d + j] * mean_dh_h);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Multi-head scaled dot-product attention.
//
// q is [batch*q_len x D], k and v are [batch*k_len x D]; heads split D into
// equal column slices. key_mask (batch x k_len, 1 = attend) excludes padded
// keys; `causal` additionally hides keys after the query position. Masked
// scores are treated as -inf, so their probabilities are exactly zero. A row
// with no visible key produces a zero output.

namespace detail {

template <class T>
using StridedConst = Eigen::Map<const blas::RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using StridedMut = Eigen::Map<blas::RowMat<T>, 0, Eigen::OuterStride<>>;

// rows x cols block of a row-major buffer whose rows are `stride` apart.
template <class T>
StridedConst<T> head_view(const T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return StridedConst<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                           Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}
template <class T>
StridedMut<T> head_view_mut(T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return StridedMut<T>(p, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols),
                         Eigen::OuterStride<>(static_cast<Eigen::Index>(stride)));
}

}  // namespace detail

struct AttentionShape {
    std::size_t batch = 1;
    std::size_t q_len = 0;
    std::size_t k_len = 0;
    std::size_t heads = 1;
    bool causal = false;
};

template <class T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, const AttentionShape& s, const std::vector<std::uint8_t>& key_mask,
                 std::shared_ptr<std::vector<T>>* probs_out = nullptr) {
    detail::require_matrix("attention", q.shape());
    detail::require_same("attention(k, v)", k.shape(), v.shape());
    const std::size_t dm = q.shape()[1];
    if (q.shape()[0] != s.batch * s.q_len || k.shape()[0] != s.batch * s.k_len || k.shape()[1] != dm) {
        throw ContractError("attention: shape mismatch q " + shape_str(q.shape()) + " vs k " + shape_str(k.shape()));
    }
    if (s.heads == 0 || dm % s.heads != 0) throw ContractError("attention: model width not divisible by head count");
    if (!key_mask.empty() && key_mask.size() != s.batch * s.k_len) throw ContractError("attention: key mask size mismatch");

    const std::size_t dh = dm / s.heads;
    const T inv_scale = T(1) / std::sqrt(static_cast<T>(dh));
    const std::size_t tq = s.q_len, tk = s.k_len;
    auto probs = std::make_shared<std::vector<T>>(s.batch * s.heads * tq * tk, T(0));
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    Tensor<T> y({s.batch * tq, dm});
    auto visible = [mask = &key_mask, tk, causal = s.causal](std::size_t b, std::size_t i, std::size_t j) {
        return (mask->empty() || (*mask)[b * tk + j]) && !(causal && j > i);
    };
    for (std::size_t b = 0; b < s.batch; ++b) {
        for (std::size_t h = 0; h < s.heads; ++h) {
            const auto Q = detail::head_view(qv.data.data() + b * tq * dm + h * dh, tq, dh, dm);
            const auto K = detail::head_view(kv.data.data() + b * tk * dm + h * dh, tk, dh, dm);
            const auto V = detail::head_view(vv.data.data() + b * tk * dm + h * dh, tk, dh, dm);
            blas::MMap<T> P(probs->data() + (b * s.heads + h) * tq * tk, static_cast<Eigen::Index>(tq),
                            static_cast<Eigen::Index>(tk));
            P.noalias() = (Q * K.transpose()) * inv_scale;
            for (std::size_t i = 0; i < tq; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t j = 0; j < tk; ++j) {
                    if (visible(b, i, j)) mx = std::max(mx, P(i, j));
                }
                if (mx == -std::numeric_limits<T>::infinity()) {
                    P.row(static_cast<Eigen::Index>(i)).setZero();
                    continue;
                }
                T z = 0;
                for (std::size_t j = 0; j < tk; ++j) {
                    const T e = visible(b, i, j) ? std::exp(P(i, j) - mx) : T(0);
                    P(i, j) = e;
                    z += e;
                }
                P.row(static_cast<Eigen::Index>(i)) /= z;
            }
            auto Y = detail::head_view_mut(y.data.data() + b * tq * dm + h * dh, tq, dh, dm);
            Y.noalias() = P * V;
        }
    }
    if (probs_out) *probs_out = probs;
    const int iq = q.id, ik = k.id, iv = v.id;
    const AttentionShape sh = s;
    return detail::graph_of(q).record(std::move(y), {q, k, v},
                                      [=](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        const auto& qv2 = g.value(iq);
        const auto& kv2 = g.value(ik);
        const auto& vv2 = g.value(iv);
        T* gq = g.requires_grad(iq) ? g.grad(iq).data.data() : nullptr;
        T* gk = g.requires_grad(ik) ? g.grad(ik).data.data() : nullptr;
        T* gv = g.requires_grad(iv) ? g.grad(iv).data.data() : nullptr;
        blas::RowMat<T> dS(static_cast<Eigen::Index>(tq), static_cast<Eigen::Index>(tk));
        for (std::size_t b = 0; b < sh.batch; ++b) {
            for (std::size_t h = 0; h < sh.heads; ++h) {
                const std::size_t qoff = b * tq * dm + h * dh, koff = b * tk * dm + h * dh;
                blas::CMap<T> P(probs->data() + (b * sh.heads + h) * tq * tk, static_cast<Eigen::Index>(tq),
                                static_cast<Eigen::Index>(tk));
                const auto GY = detail::head_view(gy.data.data() + qoff, tq, dh, dm);
                const auto Q = detail::head_view(qv2.data.data() + qoff, tq, dh, dm);
                const auto K = detail::head_view(kv2.data.data() + koff, tk, dh, dm);
                const auto V = detail::head_view(vv2.data.data() + koff, tk, dh, dm);
                if (gv) detail::head_view_mut(gv + koff, tk, dh, dm).noalias() += P.transpose() * GY;
                if (!gq && !gk) continue;
                dS.noalias() = GY * V.transpose();
                for (Eigen::Index i = 0; i < dS.rows(); ++i) {
                    const T row_dot = dS.row(i).dot(P.row(i));
                    dS.row(i) = (P.row(i).array() * (dS.row(i).array() - row_dot) * inv_scale).matrix();
                }
                if (gq) detail::head_view_mut(gq + qoff, tq, dh, dm).noalias() += dS * K;
                if (gk) detail::head_view_mut(gk + koff, tk, dh, dm).noalias() += dS.transpose() * Q;
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Mean token cross-entropy over rows whose target is not `ignore_index`.
// A batch with every target ignored has loss 0 and zero gradient.

template <class T>
Var<T> cross_entropy(Var<T> logits, const std::vector<std::int32_t>& targets, std::int32_t ignore_index) {
    detail::require_matrix("cross_entropy", logits.shape());
    const std::size_t n = logits.shape()[0], vocab = logits.shape()[1];
    if (targets.size() != n) {
        throw ContractError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                            shape_str(logits.shape()));
    }
    std::size_t count = 0;
    for (auto t : targets) {
        if (t == ignore_index) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
            throw ContractError("cross_entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                                std::to_string(vocab));
        }
        ++count;
    }
    const auto& x = logits.value();
    auto lse = std::make_shared<std::vector<T>>(n, T(0));
    T total = 0;
    for (std::size_t i = 0; i < n; ++i) {
        if (targets[i] == ignore_index) continue;
        const T* row = x.data.data() + i * vocab;
        T mx = *std::max_element(row, row + vocab);
        T z = 0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(row[j] - mx);
        (*lse)[i] = mx + std::log(z);
        total += (*lse)[i] - row[targets[i]];
    }
    const T loss = count ? total / static_cast<T>(count) : T(0);
    const int il = logits.id;
    return detail::graph_of(logits).record(Tensor<T>({1}, loss), {logits},
                                           [=](Graph<T>& g, const Tensor<T>& gy, const Tensor<T>&) {
        if (count == 0) return;
        const auto& xv = g.value(il);
        auto& gl = g.grad(il);
        const T s = gy.data[0] / static_cast<T>(count);
        for (std::size_t i = 0; i < n; ++i) {
            if (targets[i] == ignore_index) continue;
            const T* row = xv.data.data() + i * vocab;
            T* grow = gl.data.data() + i * vocab;
            for (std::size_t j = 0; j < vocab; ++j) grow[j] += s * std::exp(row[j] - (*lse)[i]);
            grow[targets[i]] -= s;
        }
    });
}

}  // namespace nphead::num
