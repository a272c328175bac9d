#pragma once

// Dense float64 tensors with tape-free reverse-mode autodiff.
//
// A Tensor is a shared handle to a graph node. Operations on tensors that
// require gradients record their inputs and a backward closure; backward()
// walks the reachable subgraph in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "kiest/error.hpp"

namespace kiest {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> data(numel(shape), v);
        return from(std::move(shape), std::move(data), requires_grad);
    }

    static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false) {
        if (numel(shape) != data.size()) {
            throw DimensionError("tensor data length " + std::to_string(data.size()) +
                                 " does not match shape " + shape_str(shape));
        }
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        if (requires_grad) n->ensure_grad();
        return Tensor(std::move(n));
    }

    static Tensor scalar(double v, bool requires_grad = false) { return from({}, {v}, requires_grad); }

    static Tensor row(std::vector<double> data, bool requires_grad = false) {
        const std::size_t n = data.size();
        return from({1, n}, std::move(data), requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t ndim() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return ndim() >= 1 ? node_->shape[0] : 1; }
    std::size_t cols() const { return ndim() >= 2 ? node_->shape[1] : (ndim() == 1 ? node_->shape[0] : 1); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<const double> data() const { return node_->value; }
    std::span<double> mutable_data() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->value.size(); }

    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }
    double at(std::size_t i, std::size_t j) const { return node_->value[i * cols() + j]; }
    double operator[](std::size_t i) const { return node_->value[i]; }

    void zero_grad() {
        if (node_->requires_grad) node_->grad.assign(node_->value.size(), 0.0);
    }

    // Value copy with no history.
    Tensor detach() const { return from(shape(), node_->value, false); }

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

private:
    std::shared_ptr<detail::Node> node_;
};

namespace detail {

template <class... Ts>
bool any_requires_grad(const Ts&... ts) {
    return (ts.requires_grad() || ...);
}

inline Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                          std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    if (grad_enabled()) {
        bool needs = false;
        for (const auto& t : inputs) needs = needs || t.requires_grad();
        if (needs) {
            n->requires_grad = true;
            n->parents.reserve(inputs.size());
            for (auto& t : inputs) n->parents.push_back(t.node());
            n->backward = std::move(backward);
        }
    }
    return Tensor(std::move(n));
}

inline void require_2d(const Tensor& t, const char* op) {
    if (t.ndim() != 2) throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

}  // namespace detail

// Populates dLoss/dTensor for every requires_grad tensor reachable from loss.
// Leaf gradients accumulate across calls; call zero_grad() between steps.
inline void backward(const Tensor& loss) {
    if (!loss.defined() || loss.size() != 1) {
        throw ContractError("backward() needs a scalar loss, got " +
                            (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
    }
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(loss.node().get(), 0);
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            detail::Node* p = node->parents[next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    for (auto* n : order) {
        if (n->backward) n->grad.assign(n->value.size(), 0.0);
    }
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] += self.grad[i] * pa->value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * s;
    });
}

// Adds a constant (non-differentiable) tensor, e.g. an attention mask.
inline Tensor add_constant(const Tensor& a, std::span<const double> c) {
    if (c.size() != a.size()) throw DimensionError("add_constant: size mismatch");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + c[i];
    return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] > 0.0 ? a[i] : 0.0;
    return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (p->value[i] > 0.0) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor log(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::log(a[i]);
    return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] / p->value[i];
    });
}

// Inverted dropout. Identity when rate == 0.
template <class Rng>
Tensor dropout(const Tensor& a, double rate, Rng& rng) {
    if (rate <= 0.0) return a;
    std::bernoulli_distribution keep(1.0 - rate);
    std::vector<double> mask(a.size());
    for (auto& m : mask) m = keep(rng) ? 1.0 / (1.0 - rate) : 0.0;
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * mask[i];
    return detail::make_result(a.shape(), std::move(out), {a}, [mask = std::move(mask)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_result({}, {s}, {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        const double g = self.grad[0];
        for (auto& v : p->grad) v += g;
    });
}

inline Tensor mean(const Tensor& a) {
    if (a.size() == 0) throw ContractError("mean of empty tensor");
    return scale(sum(a), 1.0 / static_cast<double>(a.size()));
}

// Sum of a list of scalars.
inline Tensor sum_scalars(std::span<const Tensor> xs) {
    if (xs.empty()) return Tensor::scalar(0.0);
    double s = 0.0;
    for (const auto& x : xs) s += x.item();
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    return detail::make_result({}, {s}, std::move(inputs), [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            p->grad[0] += self.grad[0];
        }
    });
}

// Column-wise mean over rows: [m x n] -> [1 x n].
inline Tensor mean_rows(const Tensor& a) {
    detail::require_2d(a, "mean_rows");
    const std::size_t m = a.rows(), n = a.cols();
    if (m == 0) throw ContractError("mean_rows of empty matrix");
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
    for (auto& v : out) v /= static_cast<double>(m);
    return detail::make_result({1, n}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[j] * inv;
    });
}

// Euclidean norm of all entries. The gradient at the origin is taken as 0.
inline Tensor norm(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v * v;
    const double r = std::sqrt(s);
    return detail::make_result({}, {r}, {a}, [r](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        if (r == 0.0) return;
        const double g = self.grad[0] / r;
        for (std::size_t i = 0; i < p->value.size(); ++i) p->grad[i] += g * p->value[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra and layout

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            if (av == 0.0) continue;
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        const double* G = self.grad.data();
        if (pa->requires_grad) {
            pa->ensure_grad();
            const double* B = pb->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < n; ++j) s += G[i * n + j] * B[p * n + j];
                    pa->grad[i * k + p] += s;
                }
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            const double* A = pa->value.data();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    if (av == 0.0) continue;
                    double* grow = pb->grad.data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) grow[j] += av * G[i * n + j];
                }
        }
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_2d(a, "transpose");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return detail::make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[j * m + i];
    });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (numel(shape) != a.size()) {
        throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return detail::make_result(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    });
}

// Adds a [1 x n] row to every row of an [m x n] matrix.
inline Tensor add_row(const Tensor& a, const Tensor& row) {
    detail::require_2d(a, "add_row");
    if (row.size() != a.cols()) {
        throw DimensionError("add_row: " + shape_str(a.shape()) + " + " + shape_str(row.shape()));
    }
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = a[i * n + j] + row[j];
    return detail::make_result({m, n}, std::move(out), {a, row}, [m, n](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pr = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < m * n; ++i) pa->grad[i] += self.grad[i];
        }
        if (pr->requires_grad) {
            pr->ensure_grad();
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) pr->grad[j] += self.grad[i * n + j];
        }
    });
}

inline Tensor slice_cols(const Tensor& a, std::size_t start, std::size_t len) {
    detail::require_2d(a, "slice_cols");
    if (start + len > a.cols()) throw DimensionError("slice_cols out of range for " + shape_str(a.shape()));
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * len);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < len; ++j) out[i * len + j] = a[i * n + start + j];
    return detail::make_result({m, len}, std::move(out), {a}, [m, n, start, len](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < len; ++j) p->grad[i * n + start + j] += self.grad[i * len + j];
    });
}

inline Tensor concat_cols(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_cols of nothing");
    const std::size_t m = parts[0].rows();
    std::size_t n = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_cols");
        if (p.rows() != m) throw DimensionError("concat_cols: row count mismatch");
        widths.push_back(p.cols());
        n += p.cols();
    }
    std::vector<double> out(m * n);
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t w = p.cols();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < w; ++j) out[i * n + off + j] = p[i * w + j];
        off += w;
    }
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_result({m, n}, std::move(out), std::move(inputs), [m, n, widths](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            const std::size_t w = widths[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < w; ++j) p->grad[i * w + j] += self.grad[i * n + off + j];
            }
            off += w;
        }
    });
}

inline Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) throw ContractError("concat_rows of nothing");
    const std::size_t n = parts[0].cols();
    std::size_t m = 0;
    std::vector<std::size_t> heights;
    for (const auto& p : parts) {
        detail::require_2d(p, "concat_rows");
        if (p.cols() != n) throw DimensionError("concat_rows: column count mismatch");
        heights.push_back(p.rows());
        m += p.rows();
    }
    std::vector<double> out;
    out.reserve(m * n);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    std::vector<Tensor> inputs(parts.begin(), parts.end());
    return detail::make_result({m, n}, std::move(out), std::move(inputs), [n, heights](detail::Node& self) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            const std::size_t len = heights[k] * n;
            if (p->requires_grad) {
                p->ensure_grad();
                for (std::size_t i = 0; i < len; ++i) p->grad[i] += self.grad[off + i];
            }
            off += len;
        }
    });
}

// Row lookup: out[i] = table[ids[i]]. Used for embeddings and row subsets.
inline Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
    detail::require_2d(table, "gather_rows");
    const std::size_t n = table.cols();
    std::vector<double> out(ids.size() * n);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] >= table.rows()) {
            throw IndexError("gather_rows: id " + std::to_string(ids[i]) + " out of range " +
                             std::to_string(table.rows()));
        }
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(ids[i] * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return detail::make_result({ids.size(), n}, std::move(out), {table}, [n, idx = std::move(idx)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) p->grad[idx[i] * n + j] += self.grad[i * n + j];
    });
}

// Row-wise selection among same-shape alternatives: out[i] = options[choice[i]][i].
// Rows not chosen from an option receive exactly zero gradient.
inline Tensor merge_rows(std::span<const Tensor> options, std::span<const std::size_t> choice) {
    if (options.empty()) throw ContractError("merge_rows without options");
    const Shape& shape = options[0].shape();
    detail::require_2d(options[0], "merge_rows");
    for (const auto& o : options) {
        if (o.shape() != shape) throw DimensionError("merge_rows: option shape mismatch");
    }
    const std::size_t m = shape[0], n = shape[1];
    if (choice.size() != m) throw DimensionError("merge_rows: choice length mismatch");
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        if (choice[i] >= options.size()) throw IndexError("merge_rows: choice out of range");
        const auto src = options[choice[i]].data();
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * n), n, out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    std::vector<Tensor> inputs(options.begin(), options.end());
    std::vector<std::size_t> ch(choice.begin(), choice.end());
    return detail::make_result(shape, std::move(out), std::move(inputs), [m, n, ch = std::move(ch)](detail::Node& self) {
        for (std::size_t i = 0; i < m; ++i) {
            auto& p = self.parents[ch[i]];
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += self.grad[i * n + j];
        }
    });
}

// Picks one entry per row: out[i] = a[i, ids[i]]; shape [m].
inline Tensor pick(const Tensor& a, std::span<const std::size_t> ids) {
    detail::require_2d(a, "pick");
    const std::size_t m = a.rows(), n = a.cols();
    if (ids.size() != m) throw DimensionError("pick: id count mismatch");
    std::vector<double> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        if (ids[i] >= n) throw IndexError("pick: id out of range");
        out[i] = a[i * n + ids[i]];
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    return detail::make_result({m}, std::move(out), {a}, [n, idx = std::move(idx)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i) p->grad[i * n + idx[i]] += self.grad[i];
    });
}

// Sparse weighted aggregation: out[i] = sum_k weight_k * src[index_k] over the
// entries listed for row i, in the order given. Summation order is exactly the
// list order, so callers control floating-point reproducibility.
struct Aggregation {
    struct Entry {
        std::size_t src;
        double weight;
    };
    std::vector<std::vector<Entry>> rows;
};

inline Tensor aggregate(const Tensor& src, const Aggregation& agg) {
    detail::require_2d(src, "aggregate");
    const std::size_t n = src.cols();
    const std::size_t m = agg.rows.size();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (const auto& e : agg.rows[i]) {
            if (e.src >= src.rows()) throw IndexError("aggregate: source row out of range");
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += e.weight * src[e.src * n + j];
        }
    return detail::make_result({m, n}, std::move(out), {src}, [n, agg](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < agg.rows.size(); ++i)
            for (const auto& e : agg.rows[i])
                for (std::size_t j = 0; j < n; ++j) p->grad[e.src * n + j] += e.weight * self.grad[i * n + j];
    });
}

// ---------------------------------------------------------------------------
// Normalization

namespace detail {

inline Tensor softmax_rows(const Tensor& a) {
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double* y = out.data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            y[j] = std::exp(x[j] - mx);
            s += y[j];
        }
        for (std::size_t j = 0; j < n; ++j) y[j] /= s;
    }
    return make_result({m, n}, std::move(out), {a}, [m, n](Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            const double* y = self.value.data() + i * n;
            const double* g = self.grad.data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += y[j] * g[j];
            for (std::size_t j = 0; j < n; ++j) p->grad[i * n + j] += y[j] * (g[j] - dot);
        }
    });
}

}  // namespace detail

// Softmax along axis (0 or 1, negative counts from the back) of a matrix, or
// over all entries of a vector.
inline Tensor softmax(const Tensor& a, int axis = -1) {
    if (a.ndim() == 1) return reshape(detail::softmax_rows(reshape(a, {1, a.size()})), a.shape());
    detail::require_2d(a, "softmax");
    if (axis < 0) axis += 2;
    if (axis == 1) return detail::softmax_rows(a);
    if (axis == 0) return transpose(detail::softmax_rows(transpose(a)));
    throw DimensionError("softmax: axis out of range");
}

inline Tensor log_softmax_rows(const Tensor& a) {
    detail::require_2d(a, "log_softmax_rows");
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        const double* x = a.data().data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, x[j]);
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
        const double lse = mx + std::log(s);
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x[j] - lse;
    }
    return detail::make_result({m, n}, std::move(out), {a}, [m, n](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        for (std::size_t i = 0; i < m; ++i) {
            double gs = 0.0;
            for (std::size_t j = 0; j < n; ++j) gs += self.grad[i * n + j];
            for (std::size_t j = 0; j < n; ++j) {
                const double soft = std::exp(self.value[i * n + j]);
                p->grad[i * n + j] += self.grad[i * n + j] - soft * gs;
            }
        }
    });
}

inline constexpr double kLayerNormEps = 1e-5;

// Row-wise layer normalization with affine [1 x d] gain and bias.
inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = kLayerNormEps) {
    detail::require_2d(x, "layer_norm");
    const std::size_t m = x.rows(), d = x.cols();
    if (d < 2) throw DimensionError("layer_norm needs at least 2 features");
    if (gain.size() != d || bias.size() != d) throw DimensionError("layer_norm: gain/bias size mismatch");
    std::vector<double> xhat(m * d), inv_std(m), out(m * d);
    for (std::size_t i = 0; i < m; ++i) {
        const double* r = x.data().data() + i * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += r[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (r[j] - mu) * (r[j] - mu);
        var /= static_cast<double>(d);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < d; ++j) {
            xhat[i * d + j] = (r[j] - mu) * inv_std[i];
            out[i * d + j] = xhat[i * d + j] * gain[j] + bias[j];
        }
    }
    return detail::make_result(
        {m, d}, std::move(out), {x, gain, bias},
        [m, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            auto& px = self.parents[0];
            auto& pg = self.parents[1];
            auto& pb = self.parents[2];
            if (pg->requires_grad) {
                pg->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) pg->grad[j] += self.grad[i * d + j] * xhat[i * d + j];
            }
            if (pb->requires_grad) {
                pb->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < d; ++j) pb->grad[j] += self.grad[i * d + j];
            }
            if (px->requires_grad) {
                px->ensure_grad();
                const double dd = static_cast<double>(d);
                for (std::size_t i = 0; i < m; ++i) {
                    double s1 = 0.0, s2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gh = self.grad[i * d + j] * pg->value[j];
                        s1 += gh;
                        s2 += gh * xhat[i * d + j];
                    }
                    for (std::size_t j = 0; j < d; ++j) {
                        const double gh = self.grad[i * d + j] * pg->value[j];
                        px->grad[i * d + j] += inv_std[i] * (gh - s1 / dd - xhat[i * d + j] * s2 / dd);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Losses

// Mean token NLL with label smoothing: the target gets 1 - s, every other
// class s / (|V| - 1).
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets, double label_smoothing = 0.0) {
    detail::require_2d(logits, "cross_entropy");
    const std::size_t t = logits.rows(), v = logits.cols();
    if (targets.size() != t) throw DimensionError("cross_entropy: target count mismatch");
    if (t == 0) throw ContractError("cross_entropy over zero positions");
    for (auto id : targets) {
        if (id >= v) throw IndexError("cross_entropy: target " + std::to_string(id) + " outside vocabulary of " + std::to_string(v));
    }
    const double s = label_smoothing;
    const double off = v > 1 ? s / static_cast<double>(v - 1) : 0.0;
    std::vector<double> probs(t * v);
    double loss = 0.0;
    for (std::size_t i = 0; i < t; ++i) {
        const double* x = logits.data().data() + i * v;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < v; ++j) z += std::exp(x[j] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t j = 0; j < v; ++j) {
            const double lp = x[j] - lse;
            probs[i * v + j] = std::exp(lp);
            const double w = j == targets[i] ? 1.0 - s : off;
            if (w != 0.0) loss -= w * lp;
        }
    }
    loss /= static_cast<double>(t);
    std::vector<std::size_t> tg(targets.begin(), targets.end());
    return detail::make_result({}, {loss}, {logits}, [t, v, s, off, probs = std::move(probs), tg = std::move(tg)](detail::Node& self) {
        auto& p = self.parents[0];
        p->ensure_grad();
        const double g = self.grad[0] / static_cast<double>(t);
        for (std::size_t i = 0; i < t; ++i)
            for (std::size_t j = 0; j < v; ++j) {
                const double w = j == tg[i] ? 1.0 - s : off;
                // d/dx of -sum_j w_j log p_j with sum_j w_j = 1
                p->grad[i * v + j] += g * (probs[i * v + j] - w);
            }
    });
}

// ---------------------------------------------------------------------------
// Plain vector helpers

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

// a.b / (|a||b|); 0 when either vector has zero norm.
inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw DimensionError("cosine_similarity: length mismatch");
    const double na = std::sqrt(dot(a, a));
    const double nb = std::sqrt(dot(b, b));
    if (na == 0.0 || nb == 0.0) return 0.0;
    return std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
}

}  // namespace kiest
