#pragma once

// Dense N-d tensors with reverse-mode gradient computation. Every operation
// records a backward closure on its output node; backward() replays the graph
// reachable from a scalar loss in reverse topological order and accumulates
// (+=) gradients into the leaves. Reduction order inside every kernel is
// fixed, so results are bit-identical across runs and thread counts.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace daffnet {

using Shape = std::vector<std::size_t>;

enum class PoolKind { average, max };
enum class Interp { trilinear, nearest };

struct shape_error : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};
struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct graph_error : std::logic_error {
    using std::logic_error::logic_error;
};

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

// When enabled, every op validates that its output is finite. Tests and
// `check` turn this on; the trainer keeps it off and checks loss/grads per
// step instead.
inline bool& finite_checks() {
    static bool on = false;
    return on;
}

namespace detail {

inline std::uint64_t next_node_id() {
    static std::uint64_t counter = 0;
    return ++counter;
}

template <class T>
struct Node {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;  // allocated lazily, same length as data
    bool requires_grad = false;
    bool released = false;  // backward already consumed this graph
    std::uint64_t id = 0;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backward_fn;

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

}  // namespace detail

template <class T>
class TensorT {
public:
    TensorT() = default;
    explicit TensorT(std::shared_ptr<detail::Node<T>> n) : node_(std::move(n)) {}

    static TensorT zeros(Shape shape) {
        return full(std::move(shape), T(0));
    }
    static TensorT full(Shape shape, T value) {
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->data.assign(shape_numel(n->shape), value);
        n->id = detail::next_node_id();
        return TensorT(std::move(n));
    }
    static TensorT from(Shape shape, std::vector<T> values) {
        if (shape_numel(shape) != values.size())
            throw shape_error("tensor: data length " + std::to_string(values.size()) +
                              " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node<T>>();
        n->shape = std::move(shape);
        n->data = std::move(values);
        n->id = detail::next_node_id();
        return TensorT(std::move(n));
    }
    static TensorT scalar(T value) { return full({1}, value); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const& { return node_->shape; }
    Shape shape() && { return node_->shape; }  // copy: the handle is about to die
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    const std::vector<T>& values() const& { return node_->data; }
    std::vector<T> values() && { return node_->data; }  // copy: see shape()
    // In-place mutation is valid only for leaves between graph uses
    // (parameter updates); never mutate a node that a live graph consumed.
    std::vector<T>& mutable_values() { return node_->data; }

    bool requires_grad() const { return node_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        node_->requires_grad = rg;
        return *this;
    }
    bool has_grad() const { return !node_->grad.empty(); }
    const std::vector<T>& grad() const& {
        if (node_->grad.empty())
            throw graph_error("tensor: gradient not populated (run backward first)");
        return node_->grad;
    }
    std::vector<T> grad() && { return grad(); }
    std::vector<T>& mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    T item() const {
        if (numel() != 1) throw shape_error("item: tensor is not scalar, shape " + shape_str(shape()));
        return node_->data[0];
    }

    std::shared_ptr<detail::Node<T>> node() const { return node_; }

private:
    std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class T>
void check_finite(const Node<T>& n) {
    if (!finite_checks()) return;
    for (T v : n.data)
        if (!std::isfinite(v))
            throw numeric_error(std::string("non-finite value produced by op '") + n.op + "'");
}

template <class T>
std::shared_ptr<Node<T>> make_op(const char* op, Shape shape,
                                 std::vector<std::shared_ptr<Node<T>>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->data.resize(shape_numel(n->shape));
    n->id = next_node_id();
    n->op = op;
    for (const auto& p : parents)
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

template <class T>
void check_same_shape(const char* op, const TensorT<T>& a, const TensorT<T>& b) {
    if (a.shape() != b.shape())
        throw shape_error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

template <class T>
void check_rank5(const char* op, const TensorT<T>& t) {
    if (t.rank() != 5)
        throw shape_error(std::string(op) + ": expected rank-5 tensor [N,C,D,H,W], got " +
                          shape_str(t.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// backward

template <class T>
void backward(const TensorT<T>& loss) {
    auto root = loss.node();
    if (!root) throw graph_error("backward: undefined tensor");
    if (root->data.size() != 1) throw graph_error("backward: loss must be scalar");
    if (root->released) throw graph_error("backward: graph already consumed by a previous backward");
    if (!root->requires_grad)
        throw graph_error("backward: loss is detached from all gradient-tracked leaves");

    // Iterative post-order DFS; children appear after their parents are done,
    // giving a topological order with the loss last.
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            detail::Node<T>* p = node->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node<T>* n = *it;
        if (n->backward_fn) n->backward_fn();
    }
    // Release closures and graph edges; a second backward is an error.
    for (auto* n : order) {
        n->backward_fn = nullptr;
        n->parents.clear();
        n->released = true;
    }
}

// ---------------------------------------------------------------------------
// elementwise ops

namespace detail {

template <class T, class FwdFn, class BwdFn>
TensorT<T> unary_op(const char* name, const TensorT<T>& a, FwdFn fwd, BwdFn dfdx) {
    auto out = make_op<T>(name, a.shape(), {a.node()});
    const T* av = a.node()->data.data();
    T* ov = out->data.data();
    const std::size_t n = out->data.size();
    for (std::size_t i = 0; i < n; ++i) ov[i] = fwd(av[i]);
    if (out->requires_grad) {
        Node<T>* pa = a.node().get();
        Node<T>* po = out.get();
        out->backward_fn = [pa, po, dfdx]() {
            pa->ensure_grad();
            const std::size_t m = po->data.size();
            for (std::size_t i = 0; i < m; ++i)
                pa->grad[i] += dfdx(pa->data[i], po->data[i]) * po->grad[i];
        };
    }
    check_finite(*out);
    return TensorT<T>(out);
}

}  // namespace detail

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("add", a, b);
    auto out = detail::make_op<T>("add", a.shape(), {a.node(), b.node()});
    const T* av = a.node()->data.data();
    const T* bv = b.node()->data.data();
    T* ov = out->data.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) ov[i] = av[i] + bv[i];
    if (out->requires_grad) {
        auto *pa = a.node().get(), *pb = b.node().get(), *po = out.get();
        out->backward_fn = [pa, pb, po]() {
            const auto& g = po->grad;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i];
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("sub", a, b);
    auto out = detail::make_op<T>("sub", a.shape(), {a.node(), b.node()});
    const T* av = a.node()->data.data();
    const T* bv = b.node()->data.data();
    T* ov = out->data.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) ov[i] = av[i] - bv[i];
    if (out->requires_grad) {
        auto *pa = a.node().get(), *pb = b.node().get(), *po = out.get();
        out->backward_fn = [pa, pb, po]() {
            const auto& g = po->grad;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] -= g[i];
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("mul", a, b);
    auto out = detail::make_op<T>("mul", a.shape(), {a.node(), b.node()});
    const T* av = a.node()->data.data();
    const T* bv = b.node()->data.data();
    T* ov = out->data.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) ov[i] = av[i] * bv[i];
    if (out->requires_grad) {
        auto *pa = a.node().get(), *pb = b.node().get(), *po = out.get();
        out->backward_fn = [pa, pb, po]() {
            const auto& g = po->grad;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i] * pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pb->grad[i] += g[i] * pa->data[i];
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

template <class T>
TensorT<T> div(const TensorT<T>& a, const TensorT<T>& b) {
    detail::check_same_shape("div", a, b);
    auto out = detail::make_op<T>("div", a.shape(), {a.node(), b.node()});
    const T* av = a.node()->data.data();
    const T* bv = b.node()->data.data();
    T* ov = out->data.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) ov[i] = av[i] / bv[i];
    if (out->requires_grad) {
        auto *pa = a.node().get(), *pb = b.node().get(), *po = out.get();
        out->backward_fn = [pa, pb, po]() {
            const auto& g = po->grad;
            if (pa->requires_grad) {
                pa->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) pa->grad[i] += g[i] / pb->data[i];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i)
                    pb->grad[i] -= g[i] * po->data[i] / pb->data[i];
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

template <class T>
TensorT<T> add_scalar(const TensorT<T>& a, T c) {
    return detail::unary_op(
        "add_scalar", a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <class T>
TensorT<T> mul_scalar(const TensorT<T>& a, T c) {
    return detail::unary_op(
        "mul_scalar", a, [c](T x) { return x * c; }, [c](T, T) { return c; });
}

template <class T>
TensorT<T> neg(const TensorT<T>& a) {
    return mul_scalar(a, T(-1));
}

template <class T>
TensorT<T> leaky_relu(const TensorT<T>& a, T slope) {
    return detail::unary_op(
        "leaky_relu", a, [slope](T x) { return x >= T(0) ? x : slope * x; },
        [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
TensorT<T> relu(const TensorT<T>& a) {
    return leaky_relu(a, T(0));
}

template <class T>
TensorT<T> sigmoid(const TensorT<T>& a) {
    return detail::unary_op(
        "sigmoid", a,
        [](T x) { return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <class T>
TensorT<T> exp_op(const TensorT<T>& a) {
    return detail::unary_op(
        "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <class T>
TensorT<T> log_op(const TensorT<T>& a) {
    return detail::unary_op(
        "log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <class T>
TensorT<T> sqrt_op(const TensorT<T>& a) {
    return detail::unary_op(
        "sqrt", a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(1) / (T(2) * y); });
}

template <class T>
TensorT<T> clamp_min(const TensorT<T>& a, T lo) {
    return detail::unary_op(
        "clamp_min", a, [lo](T x) { return x < lo ? lo : x; },
        [lo](T x, T) { return x >= lo ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// reductions & broadcasts

template <class T>
TensorT<T> sum(const TensorT<T>& a) {
    auto out = detail::make_op<T>("sum", {1}, {a.node()});
    T acc = T(0);
    for (T v : a.node()->data) acc += v;
    out->data[0] = acc;
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po]() {
            pa->ensure_grad();
            const T g = po->grad[0];
            for (auto& gv : pa->grad) gv += g;
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

template <class T>
TensorT<T> mean(const TensorT<T>& a) {
    return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

// [N,C,D,H,W] -> [N,C,1,1,1], mean over spatial positions
template <class T>
TensorT<T> spatial_mean(const TensorT<T>& a) {
    detail::check_rank5("spatial_mean", a);
    const auto& s = a.shape();
    const std::size_t nc = s[0] * s[1], sp = s[2] * s[3] * s[4];
    auto out = detail::make_op<T>("spatial_mean", {s[0], s[1], 1, 1, 1}, {a.node()});
    const T* av = a.node()->data.data();
    const T inv = T(1) / static_cast<T>(sp);
    for (std::size_t i = 0; i < nc; ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < sp; ++j) acc += av[i * sp + j];
        out->data[i] = acc * inv;
    }
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, nc, sp, inv]() {
            pa->ensure_grad();
            for (std::size_t i = 0; i < nc; ++i) {
                const T g = po->grad[i] * inv;
                for (std::size_t j = 0; j < sp; ++j) pa->grad[i * sp + j] += g;
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// [N,C,1,1,1] broadcast to [N,C,D,H,W]
template <class T>
TensorT<T> broadcast_spatial(const TensorT<T>& a, const Shape& target) {
    detail::check_rank5("broadcast_spatial", a);
    if (target.size() != 5 || target[0] != a.dim(0) || target[1] != a.dim(1))
        throw shape_error("broadcast_spatial: incompatible target " + shape_str(target));
    if (a.dim(2) != 1 || a.dim(3) != 1 || a.dim(4) != 1)
        throw shape_error("broadcast_spatial: source spatial dims must be 1");
    const std::size_t nc = target[0] * target[1], sp = target[2] * target[3] * target[4];
    auto out = detail::make_op<T>("broadcast_spatial", target, {a.node()});
    const T* av = a.node()->data.data();
    for (std::size_t i = 0; i < nc; ++i)
        std::fill(out->data.begin() + i * sp, out->data.begin() + (i + 1) * sp, av[i]);
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, nc, sp]() {
            pa->ensure_grad();
            for (std::size_t i = 0; i < nc; ++i) {
                T acc = T(0);
                for (std::size_t j = 0; j < sp; ++j) acc += po->grad[i * sp + j];
                pa->grad[i] += acc;
            }
        };
    }
    return TensorT<T>(out);
}

// [C] broadcast to [N,C,D,H,W] (per-channel affine parameters)
template <class T>
TensorT<T> broadcast_channel(const TensorT<T>& a, const Shape& target) {
    if (a.rank() != 1 || target.size() != 5 || target[1] != a.dim(0))
        throw shape_error("broadcast_channel: want [C] -> [N,C,D,H,W]");
    const std::size_t n = target[0], c = target[1], sp = target[2] * target[3] * target[4];
    auto out = detail::make_op<T>("broadcast_channel", target, {a.node()});
    const T* av = a.node()->data.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < c; ++ci) {
            auto base = (ni * c + ci) * sp;
            std::fill(out->data.begin() + base, out->data.begin() + base + sp, av[ci]);
        }
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, n, c, sp]() {
            pa->ensure_grad();
            for (std::size_t ci = 0; ci < c; ++ci) {
                T acc = T(0);
                for (std::size_t ni = 0; ni < n; ++ni) {
                    const T* g = po->grad.data() + (ni * c + ci) * sp;
                    for (std::size_t j = 0; j < sp; ++j) acc += g[j];
                }
                pa->grad[ci] += acc;
            }
        };
    }
    return TensorT<T>(out);
}

// x * s where s has exactly one element; differentiable in both.
template <class T>
TensorT<T> scale_by(const TensorT<T>& x, const TensorT<T>& s) {
    if (s.numel() != 1) throw shape_error("scale_by: scale tensor must have one element");
    auto out = detail::make_op<T>("scale_by", x.shape(), {x.node(), s.node()});
    const T sv = s.node()->data[0];
    const T* xv = x.node()->data.data();
    for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = xv[i] * sv;
    if (out->requires_grad) {
        auto *px = x.node().get(), *ps = s.node().get(), *po = out.get();
        out->backward_fn = [px, ps, po]() {
            const auto& g = po->grad;
            if (px->requires_grad) {
                px->ensure_grad();
                const T sv2 = ps->data[0];
                for (std::size_t i = 0; i < g.size(); ++i) px->grad[i] += g[i] * sv2;
            }
            if (ps->requires_grad) {
                ps->ensure_grad();
                T acc = T(0);
                for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * px->data[i];
                ps->grad[0] += acc;
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// [N,C,...] -> [N,1,...], sum across channels
template <class T>
TensorT<T> sum_channels(const TensorT<T>& a) {
    detail::check_rank5("sum_channels", a);
    const auto& s = a.shape();
    const std::size_t n = s[0], c = s[1], sp = s[2] * s[3] * s[4];
    auto out = detail::make_op<T>("sum_channels", {n, 1, s[2], s[3], s[4]}, {a.node()});
    const T* av = a.node()->data.data();
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t j = 0; j < sp; ++j) {
            T acc = T(0);
            for (std::size_t ci = 0; ci < c; ++ci) acc += av[(ni * c + ci) * sp + j];
            out->data[ni * sp + j] = acc;
        }
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, n, c, sp]() {
            pa->ensure_grad();
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t ci = 0; ci < c; ++ci)
                    for (std::size_t j = 0; j < sp; ++j)
                        pa->grad[(ni * c + ci) * sp + j] += po->grad[ni * sp + j];
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// shape ops

template <class T>
TensorT<T> reshape(const TensorT<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw shape_error("reshape: element count mismatch " + shape_str(a.shape()) + " -> " +
                          shape_str(shape));
    auto out = detail::make_op<T>("reshape", std::move(shape), {a.node()});
    out->data = a.node()->data;
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po]() {
            pa->ensure_grad();
            for (std::size_t i = 0; i < po->grad.size(); ++i) pa->grad[i] += po->grad[i];
        };
    }
    return TensorT<T>(out);
}

// slice channels [c0, c1) along axis 1 of a rank>=2 tensor
template <class T>
TensorT<T> slice_channels(const TensorT<T>& a, std::size_t c0, std::size_t c1) {
    if (a.rank() < 2 || c0 >= c1 || c1 > a.dim(1))
        throw shape_error("slice_channels: bad range on " + shape_str(a.shape()));
    const auto& s = a.shape();
    const std::size_t n = s[0], c = s[1];
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s.size(); ++i) inner *= s[i];
    Shape os = s;
    os[1] = c1 - c0;
    auto out = detail::make_op<T>("slice_channels", os, {a.node()});
    const T* av = a.node()->data.data();
    const std::size_t oc = c1 - c0;
    for (std::size_t ni = 0; ni < n; ++ni)
        for (std::size_t ci = 0; ci < oc; ++ci)
            std::copy(av + (ni * c + c0 + ci) * inner, av + (ni * c + c0 + ci + 1) * inner,
                      out->data.begin() + (ni * oc + ci) * inner);
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, n, c, c0, oc, inner]() {
            pa->ensure_grad();
            for (std::size_t ni = 0; ni < n; ++ni)
                for (std::size_t ci = 0; ci < oc; ++ci) {
                    T* dst = pa->grad.data() + (ni * c + c0 + ci) * inner;
                    const T* src = po->grad.data() + (ni * oc + ci) * inner;
                    for (std::size_t j = 0; j < inner; ++j) dst[j] += src[j];
                }
        };
    }
    return TensorT<T>(out);
}

// concatenate along axis 1; all other dims must match
template <class T>
TensorT<T> concat_channels(const std::vector<TensorT<T>>& xs) {
    if (xs.empty()) throw shape_error("concat_channels: no inputs");
    const auto& s0 = xs[0].shape();
    std::size_t ctot = 0;
    std::vector<std::shared_ptr<detail::Node<T>>> parents;
    for (const auto& x : xs) {
        if (x.rank() != s0.size() || x.dim(0) != s0[0])
            throw shape_error("concat_channels: rank/batch mismatch");
        for (std::size_t i = 2; i < s0.size(); ++i)
            if (x.dim(i) != s0[i]) throw shape_error("concat_channels: trailing dim mismatch");
        ctot += x.dim(1);
        parents.push_back(x.node());
    }
    Shape os = s0;
    os[1] = ctot;
    std::size_t inner = 1;
    for (std::size_t i = 2; i < s0.size(); ++i) inner *= s0[i];
    const std::size_t n = s0[0];
    auto out = detail::make_op<T>("concat_channels", os, parents);
    std::size_t coff = 0;
    for (const auto& x : xs) {
        const std::size_t xc = x.dim(1);
        const T* xv = x.node()->data.data();
        for (std::size_t ni = 0; ni < n; ++ni)
            std::copy(xv + ni * xc * inner, xv + (ni + 1) * xc * inner,
                      out->data.begin() + (ni * ctot + coff) * inner);
        coff += xc;
    }
    if (out->requires_grad) {
        std::vector<detail::Node<T>*> ps;
        std::vector<std::size_t> offs;
        std::size_t off = 0;
        for (const auto& x : xs) {
            ps.push_back(x.node().get());
            offs.push_back(off);
            off += x.dim(1);
        }
        auto* po = out.get();
        out->backward_fn = [ps, offs, po, n, ctot, inner]() {
            for (std::size_t k = 0; k < ps.size(); ++k) {
                if (!ps[k]->requires_grad) continue;
                ps[k]->ensure_grad();
                const std::size_t xc = ps[k]->shape[1];
                for (std::size_t ni = 0; ni < n; ++ni) {
                    const T* src = po->grad.data() + (ni * ctot + offs[k]) * inner;
                    T* dst = ps[k]->grad.data() + ni * xc * inner;
                    for (std::size_t j = 0; j < xc * inner; ++j) dst[j] += src[j];
                }
            }
        };
    }
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// softmax along an axis (max-subtracted)

template <class T>
TensorT<T> softmax(const TensorT<T>& a, std::size_t axis) {
    if (axis >= a.rank()) throw shape_error("softmax: axis out of range");
    const auto& s = a.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t k = s[axis];
    auto out = detail::make_op<T>("softmax", s, {a.node()});
    const T* av = a.node()->data.data();
    T* ov = out->data.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < inner; ++j) {
            const std::size_t base = o * k * inner + j;
            T mx = av[base];
            for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, av[base + c * inner]);
            T z = T(0);
            for (std::size_t c = 0; c < k; ++c) {
                const T e = std::exp(av[base + c * inner] - mx);
                ov[base + c * inner] = e;
                z += e;
            }
            const T iz = T(1) / z;
            for (std::size_t c = 0; c < k; ++c) ov[base + c * inner] *= iz;
        }
    if (out->requires_grad) {
        auto *pa = a.node().get(), *po = out.get();
        out->backward_fn = [pa, po, outer, inner, k]() {
            pa->ensure_grad();
            for (std::size_t o = 0; o < outer; ++o)
                for (std::size_t j = 0; j < inner; ++j) {
                    const std::size_t base = o * k * inner + j;
                    T dot = T(0);
                    for (std::size_t c = 0; c < k; ++c)
                        dot += po->grad[base + c * inner] * po->data[base + c * inner];
                    for (std::size_t c = 0; c < k; ++c)
                        pa->grad[base + c * inner] +=
                            po->data[base + c * inner] * (po->grad[base + c * inner] - dot);
                }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

// ---------------------------------------------------------------------------
// linear: [N,Fin] x [Fout,Fin] + [Fout] -> [N,Fout]

template <class T>
TensorT<T> linear(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& b) {
    if (x.rank() != 2 || w.rank() != 2 || b.rank() != 1 || x.dim(1) != w.dim(1) ||
        w.dim(0) != b.dim(0))
        throw shape_error("linear: incompatible shapes " + shape_str(x.shape()) + " " +
                          shape_str(w.shape()) + " " + shape_str(b.shape()));
    const std::size_t n = x.dim(0), fin = x.dim(1), fout = w.dim(0);
    auto out = detail::make_op<T>("linear", {n, fout}, {x.node(), w.node(), b.node()});
    const T* xv = x.node()->data.data();
    const T* wv = w.node()->data.data();
    const T* bv = b.node()->data.data();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t o = 0; o < fout; ++o) {
            T acc = bv[o];
            for (std::size_t f = 0; f < fin; ++f) acc += xv[i * fin + f] * wv[o * fin + f];
            out->data[i * fout + o] = acc;
        }
    if (out->requires_grad) {
        auto *px = x.node().get(), *pw = w.node().get(), *pb = b.node().get(), *po = out.get();
        out->backward_fn = [px, pw, pb, po, n, fin, fout]() {
            const auto& g = po->grad;
            if (px->requires_grad) {
                px->ensure_grad();
                for (std::size_t i = 0; i < n; ++i)
                    for (std::size_t f = 0; f < fin; ++f) {
                        T acc = T(0);
                        for (std::size_t o = 0; o < fout; ++o)
                            acc += g[i * fout + o] * pw->data[o * fin + f];
                        px->grad[i * fin + f] += acc;
                    }
            }
            if (pw->requires_grad) {
                pw->ensure_grad();
                for (std::size_t o = 0; o < fout; ++o)
                    for (std::size_t f = 0; f < fin; ++f) {
                        T acc = T(0);
                        for (std::size_t i = 0; i < n; ++i)
                            acc += g[i * fout + o] * px->data[i * fin + f];
                        pw->grad[o * fin + f] += acc;
                    }
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t o = 0; o < fout; ++o) {
                    T acc = T(0);
                    for (std::size_t i = 0; i < n; ++i) acc += g[i * fout + o];
                    pb->grad[o] += acc;
                }
            }
        };
    }
    detail::check_finite(*out);
    return TensorT<T>(out);
}

}  // namespace daffnet
