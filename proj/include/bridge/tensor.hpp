#pragma once

// Reverse-mode automatic differentiation over small dense tensors (rank 1-2).
//
// A Tape owns the compute graph; nodes are recorded in creation order, which
// is also a topological order. backward() walks nodes in reverse creation
// order and accumulates into parent gradients in that fixed order, so runs
// are bitwise reproducible per seed. Dense products are delegated to Eigen
// maps over the tensors' own storage.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "bridge/common.hpp"

namespace bridge {

template <class S>
struct Tensor {
    std::vector<int> shape;
    std::vector<S> data;
    bool requires_grad = false;

    Tensor() = default;
    Tensor(std::vector<int> shape_in, std::vector<S> data_in, bool rg = false)
        : shape(std::move(shape_in)), data(std::move(data_in)), requires_grad(rg) {
        if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
            throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    }

    static std::int64_t numel_of(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int e : s) {
            if (e <= 0) throw ShapeError("Tensor: non-positive extent in shape " + shape_str(s));
            n *= e;
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) {
        const auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), S(0)));
    }

    static Tensor full(std::vector<int> s, S v) {
        const auto n = numel_of(s);
        return Tensor(std::move(s), std::vector<S>(static_cast<std::size_t>(n), v));
    }

    static Tensor scalar(S v) { return Tensor({1}, {v}); }

    static Tensor randn(std::vector<int> s, S stddev, SplitMix64& rng) {
        const auto n = numel_of(s);
        std::vector<S> d(static_cast<std::size_t>(n));
        for (auto& x : d) x = static_cast<S>(rng.normal()) * stddev;
        return Tensor(std::move(s), std::move(d));
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
    int rows() const { return shape.empty() ? 1 : shape[0]; }
    int cols() const { return shape.size() < 2 ? 1 : shape[1]; }
    bool is_scalar() const { return numel() == 1; }

    S& at(int r, int c) { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)]; }
    S at(int r, int c) const { return data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols()) + static_cast<std::size_t>(c)]; }

    static std::string shape_str(const std::vector<int>& s) {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
        os << ']';
        return os.str();
    }
};

template <class S>
using EMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using EMap = Eigen::Map<EMat<S>>;
template <class S>
using ECMap = Eigen::Map<const EMat<S>>;

template <class S>
EMap<S> emap(Tensor<S>& t) {
    return EMap<S>(t.data.data(), t.rows(), t.cols());
}
template <class S>
ECMap<S> emap(const Tensor<S>& t) {
    return ECMap<S>(t.data.data(), t.rows(), t.cols());
}
template <class S>
EMap<S> emap(std::vector<S>& buf, int r, int c) {
    return EMap<S>(buf.data(), r, c);
}
template <class S>
ECMap<S> emap(const std::vector<S>& buf, int r, int c) {
    return ECMap<S>(buf.data(), r, c);
}

namespace detail {

[[noreturn]] inline void shape_fail(const char* op, const std::vector<int>& a, const std::vector<int>& b) {
    throw ShapeError(std::string(op) + ": shape mismatch " + Tensor<double>::shape_str(a) + " vs " +
                     Tensor<double>::shape_str(b));
}

[[noreturn]] inline void shape_fail(const char* op, const std::vector<int>& a) {
    throw ShapeError(std::string(op) + ": bad shape " + Tensor<double>::shape_str(a));
}

// Broadcast classes supported by the elementwise binaries.
enum class Bcast { Same, RowVec, Scalar };

inline Bcast bcast_kind(const char* op, const std::vector<int>& a, const std::vector<int>& b) {
    if (a == b) return Bcast::Same;
    const std::int64_t bn = Tensor<double>::numel_of(b);
    if (bn == 1) return Bcast::Scalar;
    // b broadcasts across rows of a when it is a single row of matching width.
    const int a_cols = a.size() < 2 ? (a.empty() ? 1 : a[0]) : a[1];
    const int b_rows = b.empty() ? 1 : b[0];
    const int b_cols = b.size() < 2 ? 1 : b[1];
    if ((b.size() == 1 && b[0] == a_cols) || (b.size() == 2 && b_rows == 1 && b_cols == a_cols))
        return Bcast::RowVec;
    shape_fail(op, a, b);
}

}  // namespace detail

template <class S>
class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape lives.
template <class S>
class Var {
public:
    Var() = default;
    Var(Tape<S>* tape, int index) : tape_(tape), index_(index) {}

    const Tensor<S>& value() const;
    /// Gradient accumulated by the last backward(); zeros if the node was not reached.
    Tensor<S> grad() const;
    bool valid() const { return tape_ != nullptr; }
    int index() const { return index_; }
    Tape<S>* tape() const { return tape_; }

private:
    Tape<S>* tape_ = nullptr;
    int index_ = -1;
};

/// Leaf gradients keyed by node index, as produced by Tape::backward.
template <class S>
using GradIndexMap = std::map<int, Tensor<S>>;

template <class S>
class Tape {
public:
    struct Node {
        Tensor<S> value;
        std::vector<S> grad;  // empty until the node is reached by backward
        bool needs_grad = false;
        bool is_leaf = false;
        std::function<void(Tape&, Node&)> backprop;  // may be empty for leaves/constants
    };

    /// Differentiable leaf (requires_grad taken from the tensor).
    Var<S> leaf(Tensor<S> t) {
        const bool rg = t.requires_grad;
        return push(std::move(t), rg, /*is_leaf=*/true, {});
    }

    /// Non-differentiable input.
    Var<S> constant(Tensor<S> t) {
        t.requires_grad = false;
        return push(std::move(t), false, /*is_leaf=*/true, {});
    }

    Var<S> push(Tensor<S> value, bool needs_grad, bool is_leaf, std::function<void(Tape&, Node&)> backprop) {
        nodes_.push_back(std::make_unique<Node>());
        Node& n = *nodes_.back();
        n.value = std::move(value);
        n.needs_grad = needs_grad;
        n.is_leaf = is_leaf;
        n.backprop = std::move(backprop);
        return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
    }

    Node& node(int i) { return *nodes_[static_cast<std::size_t>(i)]; }
    const Node& node(int i) const { return *nodes_[static_cast<std::size_t>(i)]; }
    int size() const { return static_cast<int>(nodes_.size()); }

    std::vector<S>& grad_buf(int i) {
        Node& n = node(i);
        if (n.grad.empty()) n.grad.assign(n.value.data.size(), S(0));
        return n.grad;
    }

    /// Reverse sweep from a scalar root. Returns the gradients of every
    /// requires-grad leaf that the root actually depends on.
    GradIndexMap<S> backward(const Var<S>& root) {
        if (root.tape() != this) throw Error("backward: root from another tape");
        Node& r = node(root.index());
        if (!r.value.is_scalar())
            throw Error("backward: root must be scalar, got shape " + Tensor<S>::shape_str(r.value.shape));
        grad_buf(root.index())[0] = S(1);
        for (int i = root.index(); i >= 0; --i) {
            Node& n = node(i);
            if (n.grad.empty() || !n.needs_grad) continue;
            if (n.backprop) n.backprop(*this, n);
        }
        GradIndexMap<S> out;
        for (int i = 0; i <= root.index(); ++i) {
            const Node& n = node(i);
            if (n.is_leaf && n.value.requires_grad && !n.grad.empty())
                out.emplace(i, Tensor<S>(n.value.shape, n.grad));
        }
        return out;
    }

    Tensor<S> grad_of(const Var<S>& v) const {
        const Node& n = node(v.index());
        if (n.grad.empty()) return Tensor<S>::zeros(n.value.shape);
        return Tensor<S>(n.value.shape, n.grad);
    }

private:
    std::vector<std::unique_ptr<Node>> nodes_;
};

template <class S>
const Tensor<S>& Var<S>::value() const {
    return tape_->node(index_).value;
}

template <class S>
Tensor<S> Var<S>::grad() const {
    return tape_->grad_of(*this);
}

// ---------------------------------------------------------------------------
// Primitives. Each op validates shapes, computes the forward value, and
// registers a closure that adds into its parents' gradient buffers.
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
bool any_needs_grad(std::initializer_list<const Var<S>*> vs) {
    for (const auto* v : vs)
        if (v->tape()->node(v->index()).needs_grad) return true;
    return false;
}

template <class S>
void check_same_tape(const char* op, const Var<S>& a, const Var<S>& b) {
    if (a.tape() != b.tape()) throw Error(std::string(op) + ": operands from different tapes");
}

// Adds dy into the gradient of `parent`, reducing over broadcast dimensions.
template <class S>
void add_reduced(Tape<S>& tape, int parent, Bcast kind, const std::vector<S>& dy, int rows, int cols) {
    auto& g = tape.grad_buf(parent);
    switch (kind) {
        case Bcast::Same:
            for (std::size_t i = 0; i < dy.size(); ++i) g[i] += dy[i];
            break;
        case Bcast::RowVec:
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c)
                    g[static_cast<std::size_t>(c)] += dy[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
            break;
        case Bcast::Scalar: {
            S acc(0);
            for (S v : dy) acc += v;
            g[0] += acc;
            break;
        }
    }
}

}  // namespace detail

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    detail::check_same_tape("add", a, b);
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    const Tensor<S>& bv = b.value();
    const auto kind = detail::bcast_kind("add", av.shape, bv.shape);
    Tensor<S> out = Tensor<S>::zeros(av.shape);
    const int rows = av.rows(), cols = av.cols();
    switch (kind) {
        case detail::Bcast::Same:
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[i];
            break;
        case detail::Bcast::RowVec:
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) out.at(r, c) = av.at(r, c) + bv.data[static_cast<std::size_t>(c)];
            break;
        case detail::Bcast::Scalar:
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] + bv.data[0];
            break;
    }
    const bool ng = detail::any_needs_grad<S>({&a, &b});
    const int ai = a.index(), bi = b.index();
    return tape.push(std::move(out), ng, false, [ai, bi, kind, rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
        if (t.node(ai).needs_grad) detail::add_reduced(t, ai, detail::Bcast::Same, n.grad, rows, cols);
        if (t.node(bi).needs_grad) detail::add_reduced(t, bi, kind, n.grad, rows, cols);
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    detail::check_same_tape("mul", a, b);
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    const Tensor<S>& bv = b.value();
    const auto kind = detail::bcast_kind("mul", av.shape, bv.shape);
    Tensor<S> out = Tensor<S>::zeros(av.shape);
    const int rows = av.rows(), cols = av.cols();
    switch (kind) {
        case detail::Bcast::Same:
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[i];
            break;
        case detail::Bcast::RowVec:
            for (int r = 0; r < rows; ++r)
                for (int c = 0; c < cols; ++c) out.at(r, c) = av.at(r, c) * bv.data[static_cast<std::size_t>(c)];
            break;
        case detail::Bcast::Scalar:
            for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = av.data[i] * bv.data[0];
            break;
    }
    const bool ng = detail::any_needs_grad<S>({&a, &b});
    const int ai = a.index(), bi = b.index();
    return tape.push(std::move(out), ng, false, [ai, bi, kind, rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
        const auto& av2 = t.node(ai).value;
        const auto& bv2 = t.node(bi).value;
        if (t.node(ai).needs_grad) {
            std::vector<S> da(n.grad.size());
            switch (kind) {
                case detail::Bcast::Same:
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] = n.grad[i] * bv2.data[i];
                    break;
                case detail::Bcast::RowVec:
                    for (int r = 0; r < rows; ++r)
                        for (int c = 0; c < cols; ++c) {
                            const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                            da[i] = n.grad[i] * bv2.data[static_cast<std::size_t>(c)];
                        }
                    break;
                case detail::Bcast::Scalar:
                    for (std::size_t i = 0; i < da.size(); ++i) da[i] = n.grad[i] * bv2.data[0];
                    break;
            }
            detail::add_reduced(t, ai, detail::Bcast::Same, da, rows, cols);
        }
        if (t.node(bi).needs_grad) {
            std::vector<S> db(n.grad.size());
            for (std::size_t i = 0; i < db.size(); ++i) db[i] = n.grad[i] * av2.data[i];
            detail::add_reduced(t, bi, kind, db, rows, cols);
        }
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S c) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    for (auto& v : out.data) v *= c;
    const int ai = a.index();
    const bool ng = a.tape()->node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai, c](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
    });
}

template <class S>
Var<S> add_const(const Var<S>& a, S c) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    for (auto& v : out.data) v += c;
    const int ai = a.index();
    const bool ng = a.tape()->node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <class S>
Var<S> neg(const Var<S>& a) {
    return scale(a, S(-1));
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    return add(a, neg(b));
}

/// [m,k] x [k,n] -> [m,n]
template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
    detail::check_same_tape("matmul", a, b);
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    const Tensor<S>& bv = b.value();
    if (av.shape.size() != 2 || bv.shape.size() != 2 || av.shape[1] != bv.shape[0])
        detail::shape_fail("matmul", av.shape, bv.shape);
    Tensor<S> out = Tensor<S>::zeros({av.shape[0], bv.shape[1]});
    emap(out).noalias() = emap(av) * emap(bv);
    const bool ng = detail::any_needs_grad<S>({&a, &b});
    const int ai = a.index(), bi = b.index();
    return tape.push(std::move(out), ng, false, [ai, bi](Tape<S>& t, typename Tape<S>::Node& n) {
        const auto& av2 = t.node(ai).value;
        const auto& bv2 = t.node(bi).value;
        ECMap<S> dy(n.grad.data(), n.value.rows(), n.value.cols());
        if (t.node(ai).needs_grad) {
            auto ga = emap(t.grad_buf(ai), av2.rows(), av2.cols());
            ga.noalias() += dy * emap(bv2).transpose();
        }
        if (t.node(bi).needs_grad) {
            auto gb = emap(t.grad_buf(bi), bv2.rows(), bv2.cols());
            gb.noalias() += emap(av2).transpose() * dy;
        }
    });
}

/// x [m,k] against a row-major weight W [n,k]: returns x * W^T, shape [m,n].
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w) {
    detail::check_same_tape("linear", x, w);
    Tape<S>& tape = *x.tape();
    const Tensor<S>& xv = x.value();
    const Tensor<S>& wv = w.value();
    if (xv.shape.size() != 2 || wv.shape.size() != 2 || xv.shape[1] != wv.shape[1])
        detail::shape_fail("linear", xv.shape, wv.shape);
    Tensor<S> out = Tensor<S>::zeros({xv.shape[0], wv.shape[0]});
    emap(out).noalias() = emap(xv) * emap(wv).transpose();
    const bool ng = detail::any_needs_grad<S>({&x, &w});
    const int xi = x.index(), wi = w.index();
    return tape.push(std::move(out), ng, false, [xi, wi](Tape<S>& t, typename Tape<S>::Node& n) {
        const auto& xv2 = t.node(xi).value;
        const auto& wv2 = t.node(wi).value;
        ECMap<S> dy(n.grad.data(), n.value.rows(), n.value.cols());
        if (t.node(xi).needs_grad) {
            auto gx = emap(t.grad_buf(xi), xv2.rows(), xv2.cols());
            gx.noalias() += dy * emap(wv2);
        }
        if (t.node(wi).needs_grad) {
            auto gw = emap(t.grad_buf(wi), wv2.rows(), wv2.cols());
            gw.noalias() += dy.transpose() * emap(xv2);
        }
    });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    if (av.shape.size() != 2) detail::shape_fail("transpose", av.shape);
    Tensor<S> out = Tensor<S>::zeros({av.shape[1], av.shape[0]});
    emap(out) = emap(av).transpose();
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        const auto& av2 = t.node(ai).value;
        ECMap<S> dy(n.grad.data(), n.value.rows(), n.value.cols());
        auto ga = emap(t.grad_buf(ai), av2.rows(), av2.cols());
        ga += dy.transpose();
    });
}

template <class S>
Var<S> exp(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    for (auto& v : out.data) v = std::exp(v);
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * n.value.data[i];
    });
}

template <class S>
Var<S> log(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    for (auto& v : out.data) v = std::log(v);
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        const auto& av2 = t.node(ai).value;
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / av2.data[i];
    });
}

/// Smooth GELU (tanh form), used as the MLP activation.
template <class S>
Var<S> gelu(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    constexpr double k0 = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double k1 = 0.044715;
    for (auto& v : out.data) {
        const double x = static_cast<double>(v);
        v = static_cast<S>(0.5 * x * (1.0 + std::tanh(k0 * (x + k1 * x * x * x))));
    }
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        constexpr double c0 = 0.7978845608028654;
        constexpr double c1 = 0.044715;
        const auto& av2 = t.node(ai).value;
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = static_cast<double>(av2.data[i]);
            const double u = c0 * (x + c1 * x * x * x);
            const double th = std::tanh(u);
            const double sech2 = 1.0 - th * th;
            const double dudx = c0 * (1.0 + 3.0 * c1 * x * x);
            const double d = 0.5 * (1.0 + th) + 0.5 * x * sech2 * dudx;
            g[i] += n.grad[i] * static_cast<S>(d);
        }
    });
}

/// Row-wise softmax over the last dimension.
template <class S>
Var<S> softmax_rows(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    Tensor<S> out = av;
    out.requires_grad = false;
    const int rows = av.rows(), cols = av.cols();
    for (int r = 0; r < rows; ++r) {
        S mx = out.at(r, 0);
        for (int c = 1; c < cols; ++c) mx = std::max(mx, out.at(r, c));
        S sum(0);
        for (int c = 0; c < cols; ++c) {
            const S e = std::exp(out.at(r, c) - mx);
            out.at(r, c) = e;
            sum += e;
        }
        for (int c = 0; c < cols; ++c) out.at(r, c) /= sum;
    }
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai, rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (int r = 0; r < rows; ++r) {
            S dot(0);
            for (int c = 0; c < cols; ++c) {
                const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                dot += n.grad[i] * n.value.data[i];
            }
            for (int c = 0; c < cols; ++c) {
                const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                g[i] += (n.grad[i] - dot) * n.value.data[i];
            }
        }
    });
}

/// Numerically stable row-wise log-softmax. Shared with the no-graph forward
/// path so both produce identical values.
template <class S>
void log_softmax_row_inplace(S* row, int n) {
    S mx = row[0];
    for (int c = 1; c < n; ++c) mx = std::max(mx, row[c]);
    S sum(0);
    for (int c = 0; c < n; ++c) sum += std::exp(row[c] - mx);
    const S lse = mx + std::log(sum);
    for (int c = 0; c < n; ++c) row[c] -= lse;
}

/// Fused row-wise log-softmax (not log(softmax(x))): y = x - logsumexp(x).
template <class S>
Var<S> log_softmax_rows(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    Tensor<S> out = a.value();
    out.requires_grad = false;
    const int rows = out.rows(), cols = out.cols();
    for (int r = 0; r < rows; ++r) log_softmax_row_inplace(&out.data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols)], cols);
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai, rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
        // dx = dy - softmax(x) * sum_row(dy)
        auto& g = t.grad_buf(ai);
        for (int r = 0; r < rows; ++r) {
            S dysum(0);
            for (int c = 0; c < cols; ++c)
                dysum += n.grad[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
            for (int c = 0; c < cols; ++c) {
                const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                g[i] += n.grad[i] - std::exp(n.value.data[i]) * dysum;
            }
        }
    });
}

/// out[i, :] = m[idx[i], :]  (embedding lookup; idx is not differentiable)
template <class S>
Var<S> take_rows(const Var<S>& m, std::vector<int> idx) {
    Tape<S>& tape = *m.tape();
    const Tensor<S>& mv = m.value();
    if (mv.shape.size() != 2) detail::shape_fail("take_rows", mv.shape);
    const int cols = mv.cols();
    for (int i : idx)
        if (i < 0 || i >= mv.rows())
            throw Error("take_rows: index " + std::to_string(i) + " out of range [0," + std::to_string(mv.rows()) + ")");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(idx.size()), cols});
    for (std::size_t r = 0; r < idx.size(); ++r)
        std::copy_n(&mv.data[static_cast<std::size_t>(idx[r]) * static_cast<std::size_t>(cols)], cols,
                    &out.data[r * static_cast<std::size_t>(cols)]);
    const int mi = m.index();
    const bool ng = tape.node(mi).needs_grad;
    return tape.push(std::move(out), ng, false, [mi, idx = std::move(idx), cols](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(mi);
        for (std::size_t r = 0; r < idx.size(); ++r)
            for (int c = 0; c < cols; ++c)
                g[static_cast<std::size_t>(idx[r]) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] +=
                    n.grad[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
    });
}

/// out[i] = m[i, idx[i]]  (per-row gather, e.g. target-token log-probs)
template <class S>
Var<S> gather_per_row(const Var<S>& m, std::vector<int> idx) {
    Tape<S>& tape = *m.tape();
    const Tensor<S>& mv = m.value();
    if (mv.shape.size() != 2 || static_cast<int>(idx.size()) != mv.rows())
        detail::shape_fail("gather_per_row", mv.shape, {static_cast<int>(idx.size())});
    const int cols = mv.cols();
    for (int i : idx)
        if (i < 0 || i >= cols)
            throw Error("gather_per_row: index " + std::to_string(i) + " out of range [0," + std::to_string(cols) + ")");
    Tensor<S> out = Tensor<S>::zeros({static_cast<int>(idx.size())});
    for (std::size_t r = 0; r < idx.size(); ++r)
        out.data[r] = mv.data[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(idx[r])];
    const int mi = m.index();
    const bool ng = tape.node(mi).needs_grad;
    return tape.push(std::move(out), ng, false, [mi, idx = std::move(idx), cols](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(mi);
        for (std::size_t r = 0; r < idx.size(); ++r)
            g[r * static_cast<std::size_t>(cols) + static_cast<std::size_t>(idx[r])] += n.grad[r];
    });
}

template <class S>
Var<S> sum(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    S acc(0);
    for (S v : a.value().data) acc += v;
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(Tensor<S>::scalar(acc), ng, false, [ai](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (auto& v : g) v += n.grad[0];
    });
}

template <class S>
Var<S> mean(const Var<S>& a) {
    Tape<S>& tape = *a.tape();
    const auto n_elems = static_cast<S>(a.value().numel());
    S acc(0);
    for (S v : a.value().data) acc += v;
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(Tensor<S>::scalar(acc / n_elems), ng, false, [ai, n_elems](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (auto& v : g) v += n.grad[0] / n_elems;
    });
}

/// Mean of scalar nodes; used to combine per-example losses into one root.
template <class S>
Var<S> mean_of(const std::vector<Var<S>>& xs) {
    if (xs.empty()) throw Error("mean_of: empty list");
    Tape<S>& tape = *xs[0].tape();
    S acc(0);
    bool ng = false;
    std::vector<int> ids;
    ids.reserve(xs.size());
    for (const auto& x : xs) {
        detail::check_same_tape("mean_of", xs[0], x);
        if (!x.value().is_scalar()) throw Error("mean_of: non-scalar element");
        acc += x.value().data[0];
        ng = ng || tape.node(x.index()).needs_grad;
        ids.push_back(x.index());
    }
    const auto count = static_cast<S>(xs.size());
    return tape.push(Tensor<S>::scalar(acc / count), ng, false, [ids = std::move(ids), count](Tape<S>& t, typename Tape<S>::Node& n) {
        for (int id : ids)
            if (t.node(id).needs_grad) t.grad_buf(id)[0] += n.grad[0] / count;
    });
}

/// Where mask != 0 the output is `fill`; gradients are blocked there.
template <class S>
Var<S> masked_fill(const Var<S>& a, const Tensor<std::uint8_t>& mask, S fill) {
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    if (mask.shape != av.shape) detail::shape_fail("masked_fill", av.shape, mask.shape);
    Tensor<S> out = av;
    out.requires_grad = false;
    for (std::size_t i = 0; i < out.data.size(); ++i)
        if (mask.data[i]) out.data[i] = fill;
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai, mask](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (!mask.data[i]) g[i] += n.grad[i];
    });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, int start, int len) {
    Tape<S>& tape = *a.tape();
    const Tensor<S>& av = a.value();
    if (av.shape.size() != 2 || start < 0 || len <= 0 || start + len > av.cols())
        throw ShapeError("slice_cols: range [" + std::to_string(start) + "," + std::to_string(start + len) +
                         ") out of " + Tensor<S>::shape_str(av.shape));
    const int rows = av.rows(), cols = av.cols();
    Tensor<S> out = Tensor<S>::zeros({rows, len});
    for (int r = 0; r < rows; ++r)
        std::copy_n(&av.data[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(start)], len,
                    &out.data[static_cast<std::size_t>(r) * static_cast<std::size_t>(len)]);
    const int ai = a.index();
    const bool ng = tape.node(ai).needs_grad;
    return tape.push(std::move(out), ng, false, [ai, start, len, rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
        auto& g = t.grad_buf(ai);
        for (int r = 0; r < rows; ++r)
            for (int c = 0; c < len; ++c)
                g[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(start + c)] +=
                    n.grad[static_cast<std::size_t>(r) * static_cast<std::size_t>(len) + static_cast<std::size_t>(c)];
    });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& xs) {
    if (xs.empty()) throw Error("concat_cols: empty list");
    Tape<S>& tape = *xs[0].tape();
    const int rows = xs[0].value().rows();
    int total = 0;
    for (const auto& x : xs) {
        detail::check_same_tape("concat_cols", xs[0], x);
        if (x.value().shape.size() != 2 || x.value().rows() != rows)
            detail::shape_fail("concat_cols", xs[0].value().shape, x.value().shape);
        total += x.value().cols();
    }
    Tensor<S> out = Tensor<S>::zeros({rows, total});
    bool ng = false;
    std::vector<int> ids;
    std::vector<int> widths;
    int off = 0;
    for (const auto& x : xs) {
        const Tensor<S>& v = x.value();
        const int w = v.cols();
        for (int r = 0; r < rows; ++r)
            std::copy_n(&v.data[static_cast<std::size_t>(r) * static_cast<std::size_t>(w)], w,
                        &out.data[static_cast<std::size_t>(r) * static_cast<std::size_t>(total) + static_cast<std::size_t>(off)]);
        off += w;
        ids.push_back(x.index());
        widths.push_back(w);
        ng = ng || tape.node(x.index()).needs_grad;
    }
    return tape.push(std::move(out), ng, false,
                     [ids = std::move(ids), widths = std::move(widths), rows, total](Tape<S>& t, typename Tape<S>::Node& n) {
                         int off2 = 0;
                         for (std::size_t k = 0; k < ids.size(); ++k) {
                             const int w = widths[k];
                             if (t.node(ids[k]).needs_grad) {
                                 auto& g = t.grad_buf(ids[k]);
                                 for (int r = 0; r < rows; ++r)
                                     for (int c = 0; c < w; ++c)
                                         g[static_cast<std::size_t>(r) * static_cast<std::size_t>(w) + static_cast<std::size_t>(c)] +=
                                             n.grad[static_cast<std::size_t>(r) * static_cast<std::size_t>(total) +
                                                    static_cast<std::size_t>(off2 + c)];
                             }
                             off2 += w;
                         }
                     });
}

/// Row-wise layer normalization with learned gain/bias (1-D, width matching).
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gain, const Var<S>& bias, S eps = S(1e-5)) {
    detail::check_same_tape("layer_norm", x, gain);
    detail::check_same_tape("layer_norm", x, bias);
    Tape<S>& tape = *x.tape();
    const Tensor<S>& xv = x.value();
    const int rows = xv.rows(), cols = xv.cols();
    if (gain.value().numel() != cols || bias.value().numel() != cols)
        detail::shape_fail("layer_norm", xv.shape, gain.value().shape);
    Tensor<S> out = Tensor<S>::zeros(xv.shape);
    Tensor<S> xhat = Tensor<S>::zeros(xv.shape);
    std::vector<S> inv_std(static_cast<std::size_t>(rows));
    const auto& g0 = gain.value().data;
    const auto& b0 = bias.value().data;
    for (int r = 0; r < rows; ++r) {
        S mu(0);
        for (int c = 0; c < cols; ++c) mu += xv.at(r, c);
        mu /= static_cast<S>(cols);
        S var(0);
        for (int c = 0; c < cols; ++c) {
            const S d = xv.at(r, c) - mu;
            var += d * d;
        }
        var /= static_cast<S>(cols);
        const S inv = S(1) / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(r)] = inv;
        for (int c = 0; c < cols; ++c) {
            const S xh = (xv.at(r, c) - mu) * inv;
            xhat.at(r, c) = xh;
            out.at(r, c) = xh * g0[static_cast<std::size_t>(c)] + b0[static_cast<std::size_t>(c)];
        }
    }
    const bool ng = detail::any_needs_grad<S>({&x, &gain, &bias});
    const int xi = x.index(), gi = gain.index(), bi = bias.index();
    return tape.push(std::move(out), ng, false,
                     [xi, gi, bi, xhat = std::move(xhat), inv_std = std::move(inv_std), rows, cols](Tape<S>& t, typename Tape<S>::Node& n) {
                         const auto& gv = t.node(gi).value.data;
                         if (t.node(gi).needs_grad) {
                             auto& gg = t.grad_buf(gi);
                             for (int r = 0; r < rows; ++r)
                                 for (int c = 0; c < cols; ++c)
                                     gg[static_cast<std::size_t>(c)] +=
                                         n.grad[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)] *
                                         xhat.at(r, c);
                         }
                         if (t.node(bi).needs_grad) {
                             auto& gb = t.grad_buf(bi);
                             for (int r = 0; r < rows; ++r)
                                 for (int c = 0; c < cols; ++c)
                                     gb[static_cast<std::size_t>(c)] +=
                                         n.grad[static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
                         }
                         if (t.node(xi).needs_grad) {
                             auto& gx = t.grad_buf(xi);
                             for (int r = 0; r < rows; ++r) {
                                 // dxhat = dy * gain; dx = inv/n * (n*dxhat - sum(dxhat) - xhat*sum(dxhat*xhat))
                                 S s1(0), s2(0);
                                 for (int c = 0; c < cols; ++c) {
                                     const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                                     const S dxh = n.grad[i] * gv[static_cast<std::size_t>(c)];
                                     s1 += dxh;
                                     s2 += dxh * xhat.data[i];
                                 }
                                 const S inv = inv_std[static_cast<std::size_t>(r)];
                                 for (int c = 0; c < cols; ++c) {
                                     const auto i = static_cast<std::size_t>(r) * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c);
                                     const S dxh = n.grad[i] * gv[static_cast<std::size_t>(c)];
                                     gx[i] += inv * (dxh - s1 / static_cast<S>(cols) - xhat.data[i] * s2 / static_cast<S>(cols));
                                 }
                             }
                         }
                     });
}

}  // namespace bridge
