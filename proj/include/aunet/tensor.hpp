// Dense row-major tensor with reverse-mode autodiff.
//
// A Tensor<T> is a shared handle on a tape node holding the value, an
// optional gradient buffer and the recorded inputs. Kernels are free
// functions; they record a backward closure only while grad mode is on and
// at least one input requires gradients. backward() walks the tape in a
// fixed reverse-topological order, so gradient accumulation is
// deterministic. Instantiate with float for training and double for the
// finite-difference suite.
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace aunet {

using Shape = std::vector<int64_t>;

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

namespace detail {
inline thread_local bool grad_mode = true;
}

inline bool grad_enabled() { return detail::grad_mode; }

// RAII scope that disables tape recording (evaluation / shape probing).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename T>
struct TapeNode {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until first needed
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TapeNode<T>>> parents;
    std::function<void(TapeNode<T>&)> backward_fn;

    bool is_leaf() const { return parents.empty(); }

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_data(shape, std::vector<T>(shape_numel(shape), T(0)));
    }

    static Tensor full(Shape shape, T v) {
        return from_data(shape, std::vector<T>(shape_numel(shape), v));
    }

    static Tensor scalar(T v) { return from_data({1}, {v}); }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<int64_t>(data.size()))
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match data length " +
                             std::to_string(data.size()));
        auto n = std::make_shared<TapeNode<T>>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int ndim() const { return static_cast<int>(node_->shape.size()); }
    int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    int64_t numel() const { return static_cast<int64_t>(node_->value.size()); }

    std::vector<T>& data() { return node_->value; }
    const std::vector<T>& data() const { return node_->value; }
    T& operator[](int64_t i) { return node_->value[static_cast<size_t>(i)]; }
    T operator[](int64_t i) const { return node_->value[static_cast<size_t>(i)]; }

    T item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor is not scalar");
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool b) {
        node_->requires_grad = b;
        return *this;
    }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<T>& grad() { return node_->ensure_grad(); }
    const std::vector<T>& grad() const { return node_->grad; }
    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    std::shared_ptr<TapeNode<T>>& node() { return node_; }
    const std::shared_ptr<TapeNode<T>>& node() const { return node_; }

    // d(this)/d(leaf) for every requires_grad leaf reachable on the tape.
    // Leaf grads accumulate across calls; interior grads are reset per call.
    void backward() const;

private:
    std::shared_ptr<TapeNode<T>> node_;
};

namespace detail {

// Post-order DFS over parents, children visited in recorded order. The
// resulting list reversed is a topological order rooted at `root`.
template <typename T>
std::vector<TapeNode<T>*> topo_order(TapeNode<T>* root) {
    std::vector<TapeNode<T>*> order;
    std::unordered_set<TapeNode<T>*> seen;
    struct Frame {
        TapeNode<T>* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    stack.push_back({root, 0});
    seen.insert(root);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next_parent < f.node->parents.size()) {
            TapeNode<T>* p = f.node->parents[f.next_parent].get();
            ++f.next_parent;
            if (seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }
    return order;
}

}  // namespace detail

template <typename T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw std::invalid_argument("backward: root must be scalar");
    auto order = detail::topo_order(node_.get());
    // interior grads are scratch for this traversal; leaves persist
    for (TapeNode<T>* n : order) {
        if (!n->is_leaf() && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TapeNode<T>* n = *it;
        if (n->backward_fn && n->requires_grad && !n->grad.empty()) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// kernel plumbing
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
    for (const Tensor<T>* t : inputs)
        if ((*t).requires_grad()) return true;
    return false;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> value, const char* op,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(TapeNode<T>&)> backward_fn) {
    Tensor<T> out = Tensor<T>::from_data(std::move(shape), std::move(value));
    if (grad_enabled() && any_requires_grad<T>(inputs)) {
        auto& n = *out.node();
        n.op = op;
        n.requires_grad = true;
        n.parents.reserve(inputs.size());
        for (const Tensor<T>* t : inputs) n.parents.push_back(t->node());
        n.backward_fn = std::move(backward_fn);
    }
    return out;
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void mm_acc_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t p = 0; p < k; ++p) {
            const T av = arow[p];
            if (av == T(0)) continue;
            const T* brow = b + p * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C[m x n] += A[m x k] * B^T where B is [n x k]
template <typename T>
void mm_acc_nt(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t i = 0; i < m; ++i) {
        const T* arow = a + i * k;
        T* crow = c + i * n;
        for (int64_t j = 0; j < n; ++j) {
            const T* brow = b + j * k;
            T acc = T(0);
            for (int64_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// C[m x n] += A^T * B where A is [k x m], B is [k x n]
template <typename T>
void mm_acc_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
    for (int64_t p = 0; p < k; ++p) {
        const T* arow = a + p * m;
        const T* brow = b + p * n;
        for (int64_t i = 0; i < m; ++i) {
            const T av = arow[i];
            if (av == T(0)) continue;
            T* crow = c + i * n;
            for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> v(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) v[static_cast<size_t>(i)] += b[i];
    return detail::make_result<T>(a.shape(), std::move(v), "add", {&a, &b}, [](TapeNode<T>& n) {
        for (int s = 0; s < 2; ++s) {
            auto& p = *n.parents[static_cast<size_t>(s)];
            if (!p.requires_grad) continue;
            auto& g = p.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "sub");
    std::vector<T> v(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) v[static_cast<size_t>(i)] -= b[i];
    return detail::make_result<T>(a.shape(), std::move(v), "sub", {&a, &b}, [](TapeNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "mul");
    std::vector<T> v(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) v[static_cast<size_t>(i)] *= b[i];
    return detail::make_result<T>(a.shape(), std::move(v), "mul", {&a, &b}, [](TapeNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa.value[i];
        }
    });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "div");
    std::vector<T> v(a.data());
    for (int64_t i = 0; i < a.numel(); ++i) v[static_cast<size_t>(i)] /= b[i];
    return detail::make_result<T>(a.shape(), std::move(v), "div", {&a, &b}, [](TapeNode<T>& n) {
        auto& pa = *n.parents[0];
        auto& pb = *n.parents[1];
        if (pa.requires_grad) {
            auto& g = pa.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / pb.value[i];
        }
        if (pb.requires_grad) {
            auto& g = pb.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i)
                g[i] -= n.grad[i] * pa.value[i] / (pb.value[i] * pb.value[i]);
        }
    });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.data());
    for (T& x : v) x += c;
    return detail::make_result<T>(a.shape(), std::move(v), "add_scalar", {&a}, [](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.data());
    for (T& x : v) x *= c;
    return detail::make_result<T>(a.shape(), std::move(v), "mul_scalar", {&a}, [c](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += c * n.grad[i];
    });
}

// c - a, elementwise (used for 1 - p)
template <typename T>
Tensor<T> rsub_scalar(const Tensor<T>& a, T c) {
    std::vector<T> v(a.data());
    for (T& x : v) x = c - x;
    return detail::make_result<T>(a.shape(), std::move(v), "rsub_scalar", {&a}, [](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
    });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
    std::vector<T> v(a.data());
    for (T& x : v) x = x > T(0) ? x : T(0);
    return detail::make_result<T>(a.shape(), std::move(v), "relu", {&a}, [](TapeNode<T>& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (p.value[i] > T(0)) g[i] += n.grad[i];
    });
}

// exact GeLU: 0.5 x (1 + erf(x / sqrt(2)))
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    constexpr double inv_sqrt2pi = 0.39894228040143267794;
    std::vector<T> v(a.data());
    for (T& x : v) x = static_cast<T>(0.5 * double(x) * (1.0 + std::erf(double(x) * inv_sqrt2)));
    return detail::make_result<T>(a.shape(), std::move(v), "gelu", {&a}, [](TapeNode<T>& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
            const double x = double(p.value[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            g[i] += n.grad[i] * static_cast<T>(cdf + x * pdf);
        }
    });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    std::vector<T> v(a.data());
    for (T& x : v) {
        if (x >= T(0)) {
            x = T(1) / (T(1) + std::exp(-x));
        } else {
            const T e = std::exp(x);
            x = e / (T(1) + e);
        }
    }
    return detail::make_result<T>(a.shape(), std::move(v), "sigmoid", {&a}, [](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) {
            const T s = n.value[i];
            g[i] += n.grad[i] * s * (T(1) - s);
        }
    });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
    std::vector<T> v(a.data());
    for (T& x : v) x = std::log(x);
    return detail::make_result<T>(a.shape(), std::move(v), "log", {&a}, [](TapeNode<T>& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / p.value[i];
    });
}

// straight-through inside [lo,hi], zero gradient outside
template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
    std::vector<T> v(a.data());
    for (T& x : v) x = std::min(hi, std::max(lo, x));
    return detail::make_result<T>(a.shape(), std::move(v), "clamp", {&a}, [lo, hi](TapeNode<T>& n) {
        auto& p = *n.parents[0];
        auto& g = p.ensure_grad();
        for (size_t i = 0; i < g.size(); ++i)
            if (p.value[i] >= lo && p.value[i] <= hi) g[i] += n.grad[i];
    });
}

// elementwise max over a set of same-shape tensors; earliest tensor wins ties
template <typename T>
Tensor<T> max_elem(const std::vector<Tensor<T>>& xs) {
    if (xs.empty()) throw std::invalid_argument("max_elem: empty set");
    for (const auto& x : xs) detail::check_same_shape(xs[0], x, "max_elem");
    const size_t n = static_cast<size_t>(xs[0].numel());
    std::vector<T> v(xs[0].data());
    std::vector<int32_t> arg(n, 0);
    for (size_t s = 1; s < xs.size(); ++s) {
        const auto& d = xs[s].data();
        for (size_t i = 0; i < n; ++i) {
            if (d[i] > v[i]) {
                v[i] = d[i];
                arg[i] = static_cast<int32_t>(s);
            }
        }
    }
    Tensor<T> out = Tensor<T>::from_data(xs[0].shape(), std::move(v));
    bool rec = grad_enabled();
    if (rec) {
        rec = false;
        for (const auto& x : xs) rec = rec || x.requires_grad();
    }
    if (rec) {
        auto& node = *out.node();
        node.op = "max_elem";
        node.requires_grad = true;
        for (const auto& x : xs) node.parents.push_back(x.node());
        node.backward_fn = [arg = std::move(arg)](TapeNode<T>& nd) {
            for (size_t i = 0; i < arg.size(); ++i) {
                auto& p = *nd.parents[static_cast<size_t>(arg[i])];
                if (p.requires_grad) p.ensure_grad()[i] += nd.grad[i];
            }
        };
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw ShapeError("matmul: expects 2-d operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    std::vector<T> v(static_cast<size_t>(m * n), T(0));
    detail::mm_acc_nn(a.data().data(), b.data().data(), v.data(), m, k, n);
    return detail::make_result<T>({m, n}, std::move(v), "matmul", {&a, &b}, [m, k, n](TapeNode<T>& nd) {
        auto& pa = *nd.parents[0];
        auto& pb = *nd.parents[1];
        if (pa.requires_grad)
            detail::mm_acc_nt(nd.grad.data(), pb.value.data(), pa.ensure_grad().data(), m, n, k);
        if (pb.requires_grad)
            detail::mm_acc_tn(pa.value.data(), nd.grad.data(), pb.ensure_grad().data(), k, m, n);
    });
}

// y[i,j] = m[i,j] + v[j]
template <typename T>
Tensor<T> add_rowvec(const Tensor<T>& m, const Tensor<T>& v) {
    if (m.ndim() != 2 || v.ndim() != 1 || v.dim(0) != m.dim(1))
        throw ShapeError("add_rowvec: " + shape_str(m.shape()) + " + " + shape_str(v.shape()));
    const int64_t rows = m.dim(0), cols = m.dim(1);
    std::vector<T> out(m.data());
    for (int64_t i = 0; i < rows; ++i)
        for (int64_t j = 0; j < cols; ++j) out[static_cast<size_t>(i * cols + j)] += v[j];
    return detail::make_result<T>(m.shape(), std::move(out), "add_rowvec", {&m, &v},
                                  [rows, cols](TapeNode<T>& nd) {
        auto& pm = *nd.parents[0];
        auto& pv = *nd.parents[1];
        if (pm.requires_grad) {
            auto& g = pm.ensure_grad();
            for (size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
        }
        if (pv.requires_grad) {
            auto& g = pv.ensure_grad();
            for (int64_t i = 0; i < rows; ++i)
                for (int64_t j = 0; j < cols; ++j)
                    g[static_cast<size_t>(j)] += nd.grad[static_cast<size_t>(i * cols + j)];
        }
    });
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    std::vector<T> v(a.data());
    return detail::make_result<T>(std::move(shape), std::move(v), "reshape", {&a}, [](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
    return reshape(a, {a.numel()});
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty list");
    const int nd = xs[0].ndim();
    if (axis < 0 || axis >= nd) throw std::invalid_argument("concat: bad axis");
    Shape out_shape = xs[0].shape();
    int64_t axis_total = 0;
    for (const auto& x : xs) {
        if (x.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (int i = 0; i < nd; ++i)
            if (i != axis && x.dim(i) != out_shape[static_cast<size_t>(i)])
                throw ShapeError("concat: extent mismatch at axis " + std::to_string(i));
        axis_total += x.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = axis_total;

    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
    for (int i = axis + 1; i < nd; ++i) inner *= out_shape[static_cast<size_t>(i)];

    std::vector<T> v(static_cast<size_t>(shape_numel(out_shape)));
    std::vector<int64_t> axis_sizes;
    axis_sizes.reserve(xs.size());
    for (const auto& x : xs) axis_sizes.push_back(x.dim(axis));

    int64_t offset = 0;
    for (size_t s = 0; s < xs.size(); ++s) {
        const auto& src = xs[s].data();
        const int64_t block = axis_sizes[s] * inner;
        for (int64_t o = 0; o < outer; ++o)
            std::copy_n(src.data() + o * block, block, v.data() + o * axis_total * inner + offset * inner);
        offset += axis_sizes[s];
    }

    Tensor<T> out = Tensor<T>::from_data(std::move(out_shape), std::move(v));
    bool rec = grad_enabled();
    if (rec) {
        rec = false;
        for (const auto& x : xs) rec = rec || x.requires_grad();
    }
    if (rec) {
        auto& node = *out.node();
        node.op = "concat";
        node.requires_grad = true;
        for (const auto& x : xs) node.parents.push_back(x.node());
        node.backward_fn = [outer, inner, axis_total, axis_sizes](TapeNode<T>& nd) {
            int64_t off = 0;
            for (size_t s = 0; s < nd.parents.size(); ++s) {
                auto& p = *nd.parents[s];
                const int64_t block = axis_sizes[s] * inner;
                if (p.requires_grad) {
                    auto& g = p.ensure_grad();
                    for (int64_t o = 0; o < outer; ++o) {
                        const T* src = nd.grad.data() + o * axis_total * inner + off * inner;
                        T* dst = g.data() + o * block;
                        for (int64_t i = 0; i < block; ++i) dst[i] += src[i];
                    }
                }
                off += axis_sizes[s];
            }
        };
    }
    return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t len) {
    const int nd = a.ndim();
    if (axis < 0 || axis >= nd) throw std::invalid_argument("slice: bad axis");
    if (start < 0 || len <= 0 || start + len > a.dim(axis))
        throw std::invalid_argument("slice: range out of bounds");
    Shape out_shape = a.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= a.dim(i);
    for (int i = axis + 1; i < nd; ++i) inner *= a.dim(i);
    const int64_t axis_total = a.dim(axis);

    std::vector<T> v(static_cast<size_t>(shape_numel(out_shape)));
    for (int64_t o = 0; o < outer; ++o)
        std::copy_n(a.data().data() + (o * axis_total + start) * inner, len * inner,
                    v.data() + o * len * inner);

    return detail::make_result<T>(std::move(out_shape), std::move(v), "slice", {&a},
                                  [outer, inner, axis_total, start, len](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t o = 0; o < outer; ++o) {
            const T* src = nd.grad.data() + o * len * inner;
            T* dst = g.data() + (o * axis_total + start) * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
        }
    });
}

// [c,h,w] -> [h*w, c] token matrix (row-major spatial flatten)
template <typename T>
Tensor<T> tokens_from_chw(const Tensor<T>& a) {
    if (a.ndim() != 3) throw ShapeError("tokens_from_chw: expects [c,h,w]");
    const int64_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
    std::vector<T> v(static_cast<size_t>(c * hw));
    const T* src = a.data().data();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t p = 0; p < hw; ++p) v[static_cast<size_t>(p * c + ch)] = src[ch * hw + p];
    return detail::make_result<T>({hw, c}, std::move(v), "tokens_from_chw", {&a},
                                  [c, hw](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t p = 0; p < hw; ++p)
                g[static_cast<size_t>(ch * hw + p)] += nd.grad[static_cast<size_t>(p * c + ch)];
    });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
    T acc = T(0);
    for (const T& x : a.data()) acc += x;
    return detail::make_result<T>({1}, {acc}, "sum_all", {&a}, [](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        const T gv = n.grad[0];
        for (T& x : g) x += gv;
    });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
    T acc = T(0);
    for (const T& x : a.data()) acc += x;
    const T inv = T(1) / static_cast<T>(a.numel());
    return detail::make_result<T>({1}, {acc * inv}, "mean_all", {&a}, [inv](TapeNode<T>& n) {
        auto& g = n.parents[0]->ensure_grad();
        const T gv = n.grad[0] * inv;
        for (T& x : g) x += gv;
    });
}

// [n,d] -> [1,d] column means
template <typename T>
Tensor<T> mean_axis0(const Tensor<T>& a) {
    if (a.ndim() != 2) throw ShapeError("mean_axis0: expects 2-d");
    const int64_t n = a.dim(0), d = a.dim(1);
    std::vector<T> v(static_cast<size_t>(d), T(0));
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) v[static_cast<size_t>(j)] += a[i * d + j];
    const T inv = T(1) / static_cast<T>(n);
    for (T& x : v) x *= inv;
    return detail::make_result<T>({1, d}, std::move(v), "mean_axis0", {&a}, [n, d, inv](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < d; ++j)
                g[static_cast<size_t>(i * d + j)] += nd.grad[static_cast<size_t>(j)] * inv;
    });
}

// ---------------------------------------------------------------------------
// conv / pool / norm / resize
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
void im2col(const T* x, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw, int64_t stride,
            int64_t pad, int64_t oh, int64_t ow, T* col) {
    // col is [cin*kh*kw, oh*ow]
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                T* crow = col + ((c * kh + ki) * kw + kj) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) {
                        std::fill_n(crow + oy * ow, ow, T(0));
                        continue;
                    }
                    const T* xrow = x + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox * stride + kj - pad;
                        crow[oy * ow + ox] = (ix >= 0 && ix < w) ? xrow[ix] : T(0);
                    }
                }
            }
        }
    }
}

template <typename T>
void col2im_acc(const T* col, int64_t cin, int64_t h, int64_t w, int64_t kh, int64_t kw,
                int64_t stride, int64_t pad, int64_t oh, int64_t ow, T* x) {
    for (int64_t c = 0; c < cin; ++c) {
        for (int64_t ki = 0; ki < kh; ++ki) {
            for (int64_t kj = 0; kj < kw; ++kj) {
                const T* crow = col + ((c * kh + ki) * kw + kj) * oh * ow;
                for (int64_t oy = 0; oy < oh; ++oy) {
                    const int64_t iy = oy * stride + ki - pad;
                    if (iy < 0 || iy >= h) continue;
                    T* xrow = x + (c * h + iy) * w;
                    for (int64_t ox = 0; ox < ow; ++ox) {
                        const int64_t ix = ox * stride + kj - pad;
                        if (ix >= 0 && ix < w) xrow[ix] += crow[oy * ow + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// x: [cin,h,w], w: [cout,cin,kh,kw], b: [cout]; cross-correlation semantics
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int64_t stride,
                 int64_t pad) {
    if (x.ndim() != 3 || w.ndim() != 4) throw ShapeError("conv2d: expects x[c,h,w], w[o,c,kh,kw]");
    const int64_t cin = x.dim(0), h = x.dim(1), wd = x.dim(2);
    const int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != cin) throw ShapeError("conv2d: channel mismatch");
    if (b.ndim() != 1 || b.dim(0) != cout) throw ShapeError("conv2d: bias extent mismatch");
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be positive");
    const int64_t oh = (h + 2 * pad - kh) / stride + 1;
    const int64_t ow = (wd + 2 * pad - kw) / stride + 1;
    if (h + 2 * pad < kh || wd + 2 * pad < kw || oh <= 0 || ow <= 0)
        throw ShapeError("conv2d: non-positive output extent");

    const int64_t ck = cin * kh * kw;
    std::vector<T> col(static_cast<size_t>(ck * oh * ow));
    detail::im2col(x.data().data(), cin, h, wd, kh, kw, stride, pad, oh, ow, col.data());

    std::vector<T> y(static_cast<size_t>(cout * oh * ow), T(0));
    detail::mm_acc_nn(w.data().data(), col.data(), y.data(), cout, ck, oh * ow);
    for (int64_t co = 0; co < cout; ++co) {
        const T bv = b[co];
        for (int64_t p = 0; p < oh * ow; ++p) y[static_cast<size_t>(co * oh * ow + p)] += bv;
    }

    const bool rec = grad_enabled() && detail::any_requires_grad<T>({&x, &w, &b});
    Tensor<T> out = detail::make_result<T>(
        {cout, oh, ow}, std::move(y), "conv2d", {&x, &w, &b},
        [cin, h, wd, kh, kw, stride, pad, oh, ow, cout, ck,
         col = rec ? std::move(col) : std::vector<T>()](TapeNode<T>& nd) {
            auto& px = *nd.parents[0];
            auto& pw = *nd.parents[1];
            auto& pb = *nd.parents[2];
            const int64_t np = oh * ow;
            if (pb.requires_grad) {
                auto& g = pb.ensure_grad();
                for (int64_t co = 0; co < cout; ++co) {
                    T acc = T(0);
                    for (int64_t p = 0; p < np; ++p) acc += nd.grad[static_cast<size_t>(co * np + p)];
                    g[static_cast<size_t>(co)] += acc;
                }
            }
            if (pw.requires_grad)
                detail::mm_acc_nt(nd.grad.data(), col.data(), pw.ensure_grad().data(), cout, np, ck);
            if (px.requires_grad) {
                std::vector<T> dcol(static_cast<size_t>(ck * np), T(0));
                detail::mm_acc_tn(pw.value.data(), nd.grad.data(), dcol.data(), ck, cout, np);
                detail::col2im_acc(dcol.data(), cin, h, wd, kh, kw, stride, pad, oh, ow,
                                   px.ensure_grad().data());
            }
        });
    return out;
}

// fixed kernel 2, stride 2; odd trailing row/col is dropped
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& x) {
    if (x.ndim() != 3) throw ShapeError("maxpool2d: expects [c,h,w]");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    if (h < 2 || w < 2) throw ShapeError("maxpool2d: spatial extent below kernel");
    const int64_t oh = h / 2, ow = w / 2;
    std::vector<T> v(static_cast<size_t>(c * oh * ow));
    std::vector<int32_t> arg(v.size());
    const T* src = x.data().data();
    for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t oy = 0; oy < oh; ++oy) {
            for (int64_t ox = 0; ox < ow; ++ox) {
                int64_t best = (ch * h + oy * 2) * w + ox * 2;
                T bv = src[best];
                const std::array<int64_t, 3> cand = {best + 1, best + w, best + w + 1};
                for (int64_t idx : cand) {
                    if (src[idx] > bv) {
                        bv = src[idx];
                        best = idx;
                    }
                }
                const size_t o = static_cast<size_t>((ch * oh + oy) * ow + ox);
                v[o] = bv;
                arg[o] = static_cast<int32_t>(best - ch * h * w);
            }
        }
    }
    return detail::make_result<T>({c, oh, ow}, std::move(v), "maxpool2d", {&x},
                                  [c, h, w, oh, ow, arg = std::move(arg)](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch) {
            const int64_t base_in = ch * h * w;
            const int64_t base_out = ch * oh * ow;
            for (int64_t p = 0; p < oh * ow; ++p)
                g[static_cast<size_t>(base_in + arg[static_cast<size_t>(base_out + p)])] +=
                    nd.grad[static_cast<size_t>(base_out + p)];
        }
    });
}

// integer-factor nearest upsampling; output is block-constant
template <typename T>
Tensor<T> interpolate_nearest(const Tensor<T>& x, int64_t factor) {
    if (x.ndim() != 3) throw ShapeError("interpolate_nearest: expects [c,h,w]");
    if (factor < 1) throw std::invalid_argument("interpolate_nearest: factor must be >= 1");
    const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
    const int64_t oh = h * factor, ow = w * factor;
    std::vector<T> v(static_cast<size_t>(c * oh * ow));
    const T* src = x.data().data();
    for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t oy = 0; oy < oh; ++oy) {
            const T* srow = src + (ch * h + oy / factor) * w;
            T* drow = v.data() + (ch * oh + oy) * ow;
            for (int64_t ox = 0; ox < ow; ++ox) drow[ox] = srow[ox / factor];
        }
    return detail::make_result<T>({c, oh, ow}, std::move(v), "interpolate_nearest", {&x},
                                  [c, h, w, factor, oh, ow](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t oy = 0; oy < oh; ++oy) {
                const T* grow = nd.grad.data() + (ch * oh + oy) * ow;
                T* drow = g.data() + (ch * h + oy / factor) * w;
                for (int64_t ox = 0; ox < ow; ++ox) drow[ox / factor] += grow[ox];
            }
    });
}

// Per-channel batch normalization over the spatial extent of one sample.
// Training mode uses biased batch statistics and updates the running
// buffers in place; eval mode normalizes with the running buffers.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                      T momentum = T(0.1), T eps = T(1e-5)) {
    if (x.ndim() != 3) throw ShapeError("batchnorm2d: expects [c,h,w]");
    const int64_t c = x.dim(0), n = x.dim(1) * x.dim(2);
    if (gamma.numel() != c || beta.numel() != c || running_mean.numel() != c ||
        running_var.numel() != c)
        throw ShapeError("batchnorm2d: per-channel parameter extent mismatch");

    std::vector<T> mean(static_cast<size_t>(c)), var(static_cast<size_t>(c));
    const T* src = x.data().data();
    if (training) {
        for (int64_t ch = 0; ch < c; ++ch) {
            T m = T(0);
            for (int64_t i = 0; i < n; ++i) m += src[ch * n + i];
            m /= static_cast<T>(n);
            T v = T(0);
            for (int64_t i = 0; i < n; ++i) {
                const T d = src[ch * n + i] - m;
                v += d * d;
            }
            v /= static_cast<T>(n);
            mean[static_cast<size_t>(ch)] = m;
            var[static_cast<size_t>(ch)] = v;
        }
        for (int64_t ch = 0; ch < c; ++ch) {
            running_mean[ch] = (T(1) - momentum) * running_mean[ch] + momentum * mean[static_cast<size_t>(ch)];
            running_var[ch] = (T(1) - momentum) * running_var[ch] + momentum * var[static_cast<size_t>(ch)];
        }
    } else {
        for (int64_t ch = 0; ch < c; ++ch) {
            mean[static_cast<size_t>(ch)] = running_mean[ch];
            var[static_cast<size_t>(ch)] = running_var[ch];
        }
    }

    std::vector<T> inv_std(static_cast<size_t>(c));
    for (int64_t ch = 0; ch < c; ++ch)
        inv_std[static_cast<size_t>(ch)] = T(1) / std::sqrt(var[static_cast<size_t>(ch)] + eps);

    std::vector<T> xhat(static_cast<size_t>(c * n));
    std::vector<T> y(static_cast<size_t>(c * n));
    for (int64_t ch = 0; ch < c; ++ch) {
        const T m = mean[static_cast<size_t>(ch)];
        const T is = inv_std[static_cast<size_t>(ch)];
        const T gm = gamma[ch], bt = beta[ch];
        for (int64_t i = 0; i < n; ++i) {
            const T xh = (src[ch * n + i] - m) * is;
            xhat[static_cast<size_t>(ch * n + i)] = xh;
            y[static_cast<size_t>(ch * n + i)] = gm * xh + bt;
        }
    }

    const bool rec = grad_enabled() && detail::any_requires_grad<T>({&x, &gamma, &beta});
    return detail::make_result<T>(
        x.shape(), std::move(y), "batchnorm2d", {&x, &gamma, &beta},
        [c, n, training, xhat = rec ? std::move(xhat) : std::vector<T>(),
         inv_std = std::move(inv_std)](TapeNode<T>& nd) {
            auto& px = *nd.parents[0];
            auto& pg = *nd.parents[1];
            auto& pb = *nd.parents[2];
            for (int64_t ch = 0; ch < c; ++ch) {
                const size_t base = static_cast<size_t>(ch * n);
                T sum_dy = T(0), sum_dy_xhat = T(0);
                for (int64_t i = 0; i < n; ++i) {
                    sum_dy += nd.grad[base + static_cast<size_t>(i)];
                    sum_dy_xhat += nd.grad[base + static_cast<size_t>(i)] * xhat[base + static_cast<size_t>(i)];
                }
                if (pg.requires_grad) pg.ensure_grad()[static_cast<size_t>(ch)] += sum_dy_xhat;
                if (pb.requires_grad) pb.ensure_grad()[static_cast<size_t>(ch)] += sum_dy;
                if (px.requires_grad) {
                    auto& g = px.ensure_grad();
                    const T gm = pg.value[static_cast<size_t>(ch)];
                    const T is = inv_std[static_cast<size_t>(ch)];
                    if (training) {
                        const T invn = T(1) / static_cast<T>(n);
                        for (int64_t i = 0; i < n; ++i) {
                            const size_t o = base + static_cast<size_t>(i);
                            g[o] += gm * is * (nd.grad[o] - invn * sum_dy - invn * xhat[o] * sum_dy_xhat);
                        }
                    } else {
                        for (int64_t i = 0; i < n; ++i) {
                            const size_t o = base + static_cast<size_t>(i);
                            g[o] += gm * is * nd.grad[o];
                        }
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// graph / gather kernels
// ---------------------------------------------------------------------------

// m[i,:] = elementwise max over neighbors j of (x[j,:] - x[i,:]);
// adjacency rows index x, K entries per row; first maximum wins ties
template <typename T>
Tensor<T> max_relative(const Tensor<T>& x, const std::vector<int32_t>& adjacency, int64_t k) {
    if (x.ndim() != 2) throw ShapeError("max_relative: expects [n,d]");
    const int64_t n = x.dim(0), d = x.dim(1);
    if (k < 1 || static_cast<int64_t>(adjacency.size()) != n * k)
        throw std::invalid_argument("max_relative: adjacency extent mismatch");
    std::vector<T> v(static_cast<size_t>(n * d));
    std::vector<int32_t> arg(static_cast<size_t>(n * d));
    const T* src = x.data().data();
    for (int64_t i = 0; i < n; ++i) {
        const T* xi = src + i * d;
        for (int64_t e = 0; e < d; ++e) {
            const int32_t j0 = adjacency[static_cast<size_t>(i * k)];
            T best = src[j0 * d + e] - xi[e];
            int32_t bj = j0;
            for (int64_t q = 1; q < k; ++q) {
                const int32_t j = adjacency[static_cast<size_t>(i * k + q)];
                const T cand = src[j * d + e] - xi[e];
                if (cand > best) {
                    best = cand;
                    bj = j;
                }
            }
            v[static_cast<size_t>(i * d + e)] = best;
            arg[static_cast<size_t>(i * d + e)] = bj;
        }
    }
    return detail::make_result<T>({n, d}, std::move(v), "max_relative", {&x},
                                  [n, d, arg = std::move(arg)](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
            for (int64_t e = 0; e < d; ++e) {
                const T gv = nd.grad[static_cast<size_t>(i * d + e)];
                g[static_cast<size_t>(arg[static_cast<size_t>(i * d + e)] * d + e)] += gv;
                g[static_cast<size_t>(i * d + e)] -= gv;
            }
    });
}

struct Window {
    int64_t y0;
    int64_t x0;
};

// Gathers s x s windows from F[c,h,w]; row i is window i flattened
// channel-major (c, then dy, then dx). Windows must already be clamped.
template <typename T>
Tensor<T> gather_windows(const Tensor<T>& f, const std::vector<Window>& windows, int64_t s) {
    if (f.ndim() != 3) throw ShapeError("gather_windows: expects [c,h,w]");
    const int64_t c = f.dim(0), h = f.dim(1), w = f.dim(2);
    const int64_t n = static_cast<int64_t>(windows.size());
    const int64_t d = c * s * s;
    for (const Window& win : windows)
        if (win.y0 < 0 || win.x0 < 0 || win.y0 + s > h || win.x0 + s > w)
            throw std::invalid_argument("gather_windows: window out of bounds");
    std::vector<T> v(static_cast<size_t>(n * d));
    const T* src = f.data().data();
    for (int64_t i = 0; i < n; ++i) {
        T* dst = v.data() + i * d;
        for (int64_t ch = 0; ch < c; ++ch)
            for (int64_t dy = 0; dy < s; ++dy)
                for (int64_t dx = 0; dx < s; ++dx)
                    *dst++ = src[(ch * h + windows[static_cast<size_t>(i)].y0 + dy) * w +
                                 windows[static_cast<size_t>(i)].x0 + dx];
    }
    return detail::make_result<T>({n, d}, std::move(v), "gather_windows", {&f},
                                  [c, h, w, s, d, windows](TapeNode<T>& nd) {
        auto& g = nd.parents[0]->ensure_grad();
        const int64_t n2 = static_cast<int64_t>(windows.size());
        for (int64_t i = 0; i < n2; ++i) {
            const T* src = nd.grad.data() + i * d;
            for (int64_t ch = 0; ch < c; ++ch)
                for (int64_t dy = 0; dy < s; ++dy)
                    for (int64_t dx = 0; dx < s; ++dx)
                        g[static_cast<size_t>((ch * h + windows[static_cast<size_t>(i)].y0 + dy) * w +
                                              windows[static_cast<size_t>(i)].x0 + dx)] += *src++;
        }
    });
}

// x [n,d] @ w [d,e] + b [e]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_rowvec(matmul(x, w), b);
}

}  // namespace aunet
