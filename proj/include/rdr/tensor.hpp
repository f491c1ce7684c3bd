#pragma once

// Dense double tensors with reverse-mode gradient accumulation.
//
// A Tensor is a shared handle to a node of an implicit computation graph.
// Each op records its parent nodes and a backward closure; backward() walks
// the graph from a scalar root in reverse topological order and accumulates
// dL/dx into each node's grad buffer. Parameter tensors live in a
// ParamRegistry and keep their gradients across backward calls until
// sgd_step() consumes and clears them. Everything is 64-bit; finite
// difference checking (grad_check) is the sole validation route for the
// analytic backward rules.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rdr/errors.hpp"
#include "rdr/rng.hpp"

namespace rdr {

class Tensor;

namespace detail {

struct TensorNode {
    std::vector<std::size_t> shape;
    std::vector<double> value;
    std::vector<double> grad; // empty until backward touches the node
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward;
    bool needs_grad = false;
    bool is_param = false;
    std::string name;
};

inline std::size_t shape_product(const std::vector<std::size_t>& s) {
    std::size_t p = 1;
    for (std::size_t d : s) p *= d;
    return p;
}

inline std::string shape_str(const std::vector<std::size_t>& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    out += ")";
    return out;
}

inline void ensure_grad(TensorNode& n) {
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
}

} // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}

    static Tensor constant(std::vector<std::size_t> shape, std::vector<double> values) {
        if (detail::shape_product(shape) != values.size())
            throw dimension_error("tensor: shape " + detail::shape_str(shape) +
                                  " does not match " + std::to_string(values.size()) + " values");
        auto n = std::make_shared<detail::TensorNode>();
        n->shape = std::move(shape);
        n->value = std::move(values);
        return Tensor(n);
    }

    static Tensor zeros(std::vector<std::size_t> shape) {
        std::vector<double> v(detail::shape_product(shape), 0.0);
        return constant(std::move(shape), std::move(v));
    }

    static Tensor scalar_const(double v) { return constant({1}, {v}); }

    bool defined() const { return node_ != nullptr; }
    const std::vector<std::size_t>& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }

    double scalar() const {
        if (size() != 1)
            throw dimension_error("tensor: scalar() on shape " + detail::shape_str(shape()));
        return node_->value[0];
    }

    double at(std::size_t i) const { return node_->value.at(i); }
    double at(std::size_t i, std::size_t j) const { return node_->value.at(i * cols() + j); }

    std::span<const double> values() const { return node_->value; }
    std::vector<double>& values_mut() { return node_->value; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const double> grad() const { return node_->grad; }
    double grad_at(std::size_t i) const {
        return node_->grad.empty() ? 0.0 : node_->grad.at(i);
    }
    double grad_at(std::size_t i, std::size_t j) const { return grad_at(i * cols() + j); }

    bool needs_grad() const { return node_->needs_grad; }
    bool is_param() const { return node_->is_param; }
    const std::string& name() const { return node_->name; }

    detail::TensorNode* node() const { return node_.get(); }
    const std::shared_ptr<detail::TensorNode>& handle() const { return node_; }

private:
    std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

inline Tensor make_op(std::vector<std::size_t> shape, std::vector<double> value,
                      std::vector<Tensor> parents,
                      std::function<void(TensorNode&)> backward) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    for (const Tensor& p : parents) {
        n->parents.push_back(p.handle());
        if (p.needs_grad()) n->needs_grad = true;
    }
    if (n->needs_grad) n->backward = std::move(backward);
    return Tensor(n);
}

} // namespace detail

// ---------------------------------------------------------------------------
// Parameters

class ParamRegistry {
public:
    Tensor create(const std::string& name, std::vector<std::size_t> shape, Rng& rng,
                  double lo = -0.1, double hi = 0.1) {
        std::vector<double> v(detail::shape_product(shape));
        for (double& x : v) x = rng.uniform(lo, hi);
        return create_from(name, std::move(shape), std::move(v));
    }

    Tensor create_from(const std::string& name, std::vector<std::size_t> shape,
                       std::vector<double> values) {
        if (name.empty() || name.find('\t') != std::string::npos)
            throw argument_error("param registry: invalid name '" + name + "'");
        if (index_.count(name))
            throw argument_error("param registry: duplicate name '" + name + "'");
        Tensor t = Tensor::constant(std::move(shape), std::move(values));
        t.node()->needs_grad = true;
        t.node()->is_param = true;
        t.node()->name = name;
        index_[name] = params_.size();
        params_.push_back(t);
        return t;
    }

    Tensor get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end())
            throw lookup_error("param registry: unknown parameter '" + name + "'");
        return params_[it->second];
    }

    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    // Insertion order; deterministic across runs by construction.
    const std::vector<Tensor>& params() const { return params_; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const Tensor& p : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (const Tensor& p : params_) {
            auto& g = p.node()->grad;
            std::fill(g.begin(), g.end(), 0.0);
        }
    }

private:
    std::vector<Tensor> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

// ---------------------------------------------------------------------------
// Backward pass

inline void backward(const Tensor& root) {
    detail::TensorNode* r = root.node();
    if (!r || r->value.size() != 1)
        throw argument_error("backward: root must be a scalar tensor");
    if (!r->needs_grad) return;

    // Reverse DFS post-order is a topological order: every consumer finishes
    // after its inputs, so reversing runs consumers first.
    std::vector<detail::TensorNode*> order;
    std::unordered_set<detail::TensorNode*> seen;
    struct Frame {
        detail::TensorNode* n;
        std::size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({r, 0});
    seen.insert(r);
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            detail::TensorNode* p = f.n->parents[f.next++].get();
            if (p->needs_grad && !seen.count(p)) {
                seen.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    detail::ensure_grad(*r);
    r->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backward) (*it)->backward(**it);
    }
}

// ---------------------------------------------------------------------------
// Ops

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw dimension_error("matmul: incompatible shapes " +
                              detail::shape_str(a.shape()) + " and " +
                              detail::shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<double> out(m * n, 0.0);
    const auto av = a.values();
    const auto bv = b.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t l = 0; l < k; ++l) {
            const double ail = av[i * k + l];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += ail * bv[l * n + j];
        }
    return detail::make_op(
        {m, n}, std::move(out), {a, b}, [m, k, n](detail::TensorNode& self) {
            auto& A = *self.parents[0];
            auto& B = *self.parents[1];
            if (A.needs_grad) {
                detail::ensure_grad(A);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t l = 0; l < k; ++l) {
                        double s = 0.0;
                        for (std::size_t j = 0; j < n; ++j)
                            s += self.grad[i * n + j] * B.value[l * n + j];
                        A.grad[i * k + l] += s;
                    }
            }
            if (B.needs_grad) {
                detail::ensure_grad(B);
                for (std::size_t l = 0; l < k; ++l)
                    for (std::size_t j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (std::size_t i = 0; i < m; ++i)
                            s += A.value[i * k + l] * self.grad[i * n + j];
                        B.grad[l * n + j] += s;
                    }
            }
        });
}

// v[k] * M[k,n] -> [n]
inline Tensor vecmat(const Tensor& v, const Tensor& m) {
    if (v.rank() != 1 || m.rank() != 2 || v.size() != m.rows())
        throw dimension_error("vecmat: incompatible shapes " +
                              detail::shape_str(v.shape()) + " and " +
                              detail::shape_str(m.shape()));
    const std::size_t k = v.size(), n = m.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t l = 0; l < k; ++l) {
        const double vl = v.at(l);
        for (std::size_t j = 0; j < n; ++j) out[j] += vl * m.values()[l * n + j];
    }
    return detail::make_op({n}, std::move(out), {v, m}, [k, n](detail::TensorNode& self) {
        auto& V = *self.parents[0];
        auto& M = *self.parents[1];
        if (V.needs_grad) {
            detail::ensure_grad(V);
            for (std::size_t l = 0; l < k; ++l) {
                double s = 0.0;
                for (std::size_t j = 0; j < n; ++j) s += self.grad[j] * M.value[l * n + j];
                V.grad[l] += s;
            }
        }
        if (M.needs_grad) {
            detail::ensure_grad(M);
            for (std::size_t l = 0; l < k; ++l)
                for (std::size_t j = 0; j < n; ++j) M.grad[l * n + j] += V.value[l] * self.grad[j];
        }
    });
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw dimension_error("add: shape mismatch " + detail::shape_str(a.shape()) +
                              " vs " + detail::shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        for (auto& p : self.parents) {
            if (!p->needs_grad) continue;
            detail::ensure_grad(*p);
            for (std::size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw dimension_error("sub: shape mismatch " + detail::shape_str(a.shape()) +
                              " vs " + detail::shape_str(b.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) - b.at(i);
    return detail::make_op(a.shape(), std::move(out), {a, b}, [](detail::TensorNode& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.needs_grad) {
            detail::ensure_grad(A);
            for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
        }
        if (B.needs_grad) {
            detail::ensure_grad(B);
            for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] -= self.grad[i];
        }
    });
}

// X[m,n] + b[n] broadcast over rows.
inline Tensor add_row(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2 || b.rank() != 1 || x.cols() != b.size())
        throw dimension_error("add_row: incompatible shapes " +
                              detail::shape_str(x.shape()) + " and " +
                              detail::shape_str(b.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(m * n);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] = x.at(i, j) + b.at(j);
    return detail::make_op({m, n}, std::move(out), {x, b}, [m, n](detail::TensorNode& self) {
        auto& X = *self.parents[0];
        auto& B = *self.parents[1];
        if (X.needs_grad) {
            detail::ensure_grad(X);
            for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
        }
        if (B.needs_grad) {
            detail::ensure_grad(B);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) B.grad[j] += self.grad[i * n + j];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) * c;
    return detail::make_op(a.shape(), std::move(out), {a}, [c](detail::TensorNode& self) {
        auto& A = *self.parents[0];
        if (!A.needs_grad) return;
        detail::ensure_grad(A);
        for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += c * self.grad[i];
    });
}

inline Tensor add_const(const Tensor& a, double c) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) + c;
    return detail::make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
        auto& A = *self.parents[0];
        if (!A.needs_grad) return;
        detail::ensure_grad(A);
        for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
    });
}

inline Tensor tanh(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.at(i));
    return detail::make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
        auto& A = *self.parents[0];
        if (!A.needs_grad) return;
        detail::ensure_grad(A);
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const double y = self.value[i];
            A.grad[i] += (1.0 - y * y) * self.grad[i];
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.at(i) > 0.0 ? a.at(i) : 0.0;
    return detail::make_op(a.shape(), std::move(out), {a}, [](detail::TensorNode& self) {
        auto& A = *self.parents[0];
        if (!A.needs_grad) return;
        detail::ensure_grad(A);
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (A.value[i] > 0.0) A.grad[i] += self.grad[i];
    });
}

// Single row of a [N,D] table.
inline Tensor row(const Tensor& table, std::size_t idx) {
    if (table.rank() != 2)
        throw dimension_error("row: expected rank-2 table, got " +
                              detail::shape_str(table.shape()));
    if (idx >= table.rows())
        throw lookup_error("row: index " + std::to_string(idx) + " out of range [0," +
                           std::to_string(table.rows()) + ")");
    const std::size_t d = table.cols();
    std::vector<double> out(d);
    for (std::size_t j = 0; j < d; ++j) out[j] = table.at(idx, j);
    return detail::make_op({d}, std::move(out), {table}, [idx, d](detail::TensorNode& self) {
        auto& T = *self.parents[0];
        if (!T.needs_grad) return;
        detail::ensure_grad(T);
        for (std::size_t j = 0; j < d; ++j) T.grad[idx * d + j] += self.grad[j];
    });
}

// Gather rows of a [N,D] table; repeated indices accumulate on backward.
inline Tensor rows(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2)
        throw dimension_error("rows: expected rank-2 table, got " +
                              detail::shape_str(table.shape()));
    const std::size_t n = ids.size(), d = table.cols();
    std::vector<double> out(n * d);
    for (std::size_t r = 0; r < n; ++r) {
        if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= table.rows())
            throw lookup_error("rows: index " + std::to_string(ids[r]) +
                               " out of range [0," + std::to_string(table.rows()) + ")");
        for (std::size_t j = 0; j < d; ++j)
            out[r * d + j] = table.at(static_cast<std::size_t>(ids[r]), j);
    }
    return detail::make_op({n, d}, std::move(out), {table},
                           [ids, n, d](detail::TensorNode& self) {
                               auto& T = *self.parents[0];
                               if (!T.needs_grad) return;
                               detail::ensure_grad(T);
                               for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < d; ++j)
                                       T.grad[static_cast<std::size_t>(ids[r]) * d + j] +=
                                           self.grad[r * d + j];
                           });
}

// Mean over rows of X[m,n] -> [n]; m == 0 yields zeros.
inline Tensor mean_rows(const Tensor& x) {
    if (x.rank() != 2)
        throw dimension_error("mean_rows: expected rank-2 input, got " +
                              detail::shape_str(x.shape()));
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<double> out(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += x.at(i, j);
    if (m > 0)
        for (std::size_t j = 0; j < n; ++j) out[j] /= static_cast<double>(m);
    return detail::make_op({n}, std::move(out), {x}, [m, n](detail::TensorNode& self) {
        if (m == 0) return;
        auto& X = *self.parents[0];
        if (!X.needs_grad) return;
        detail::ensure_grad(X);
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) X.grad[i * n + j] += inv * self.grad[j];
    });
}

inline Tensor concat(const Tensor& a, const Tensor& b) {
    if (a.rank() != 1 || b.rank() != 1)
        throw dimension_error("concat: expected rank-1 inputs, got " +
                              detail::shape_str(a.shape()) + " and " +
                              detail::shape_str(b.shape()));
    std::vector<double> out;
    out.reserve(a.size() + b.size());
    out.insert(out.end(), a.values().begin(), a.values().end());
    out.insert(out.end(), b.values().begin(), b.values().end());
    const std::size_t na = a.size();
    return detail::make_op({a.size() + b.size()}, std::move(out), {a, b},
                           [na](detail::TensorNode& self) {
                               auto& A = *self.parents[0];
                               auto& B = *self.parents[1];
                               if (A.needs_grad) {
                                   detail::ensure_grad(A);
                                   for (std::size_t i = 0; i < na; ++i) A.grad[i] += self.grad[i];
                               }
                               if (B.needs_grad) {
                                   detail::ensure_grad(B);
                                   for (std::size_t i = na; i < self.grad.size(); ++i)
                                       B.grad[i - na] += self.grad[i];
                               }
                           });
}

// Euclidean norm over all elements -> scalar. Gradient is v/||v||; at the
// (non-differentiable) origin the zero subgradient is used.
inline Tensor l2norm(const Tensor& v) {
    double s = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) s += v.at(i) * v.at(i);
    const double norm = std::sqrt(s);
    return detail::make_op({1}, {norm}, {v}, [](detail::TensorNode& self) {
        auto& V = *self.parents[0];
        if (!V.needs_grad) return;
        const double norm = self.value[0];
        if (norm < 1e-12) return;
        detail::ensure_grad(V);
        for (std::size_t i = 0; i < V.value.size(); ++i)
            V.grad[i] += (V.value[i] / norm) * self.grad[0];
    });
}

inline Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
    if (detail::shape_product(shape) != a.size())
        throw dimension_error("reshape: cannot reshape " + detail::shape_str(a.shape()) +
                              " to " + detail::shape_str(shape));
    std::vector<double> out(a.values().begin(), a.values().end());
    return detail::make_op(std::move(shape), std::move(out), {a},
                           [](detail::TensorNode& self) {
                               auto& A = *self.parents[0];
                               if (!A.needs_grad) return;
                               detail::ensure_grad(A);
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                   A.grad[i] += self.grad[i];
                           });
}

// Mean over rows of -log softmax(logits)[target]. Rows are reduced with the
// usual max-shifted log-sum-exp so one-sided +1000 logits stay finite.
inline Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    if (logits.rank() != 2)
        throw dimension_error("softmax_cross_entropy: expected rank-2 logits, got " +
                              detail::shape_str(logits.shape()));
    const std::size_t n = logits.rows(), c = logits.cols();
    if (c < 2)
        throw argument_error("softmax_cross_entropy: need at least 2 classes, got " +
                             std::to_string(c));
    if (targets.size() != n)
        throw dimension_error("softmax_cross_entropy: " + std::to_string(targets.size()) +
                              " targets for " + std::to_string(n) + " rows");
    for (int t : targets)
        if (t < 0 || static_cast<std::size_t>(t) >= c)
            throw target_error("softmax_cross_entropy: target " + std::to_string(t) +
                               " out of range [0," + std::to_string(c) + ")");
    if (n == 0) return Tensor::scalar_const(0.0);

    std::vector<double> probs(n * c);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(logits.at(i, j) - mx);
            denom += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
        const double lse = mx + std::log(denom);
        total += lse - logits.at(i, static_cast<std::size_t>(targets[i]));
    }
    const double loss = total / static_cast<double>(n);
    return detail::make_op(
        {1}, {loss}, {logits},
        [probs = std::move(probs), targets, n, c](detail::TensorNode& self) {
            auto& L = *self.parents[0];
            if (!L.needs_grad) return;
            detail::ensure_grad(L);
            const double g = self.grad[0] / static_cast<double>(n);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    double d = probs[i * c + j];
                    if (j == static_cast<std::size_t>(targets[i])) d -= 1.0;
                    L.grad[i * c + j] += g * d;
                }
        });
}

// Distribution-target variant; the target distribution is treated as constant.
inline Tensor softmax_cross_entropy(const Tensor& logits, const Tensor& target_dist) {
    if (logits.rank() != 2 || logits.shape() != target_dist.shape())
        throw dimension_error("softmax_cross_entropy: logits " +
                              detail::shape_str(logits.shape()) + " vs targets " +
                              detail::shape_str(target_dist.shape()));
    const std::size_t n = logits.rows(), c = logits.cols();
    if (c < 2)
        throw argument_error("softmax_cross_entropy: need at least 2 classes, got " +
                             std::to_string(c));
    if (n == 0) return Tensor::scalar_const(0.0);

    std::vector<double> probs(n * c);
    std::vector<double> q(target_dist.values().begin(), target_dist.values().end());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = logits.at(i, 0);
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, logits.at(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = std::exp(logits.at(i, j) - mx);
            denom += probs[i * c + j];
        }
        for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= denom;
        const double lse = mx + std::log(denom);
        for (std::size_t j = 0; j < c; ++j)
            total += q[i * c + j] * (lse - logits.at(i, j));
    }
    const double loss = total / static_cast<double>(n);
    return detail::make_op({1}, {loss}, {logits},
                           [probs = std::move(probs), q = std::move(q), n,
                            c](detail::TensorNode& self) {
                               auto& L = *self.parents[0];
                               if (!L.needs_grad) return;
                               detail::ensure_grad(L);
                               const double g = self.grad[0] / static_cast<double>(n);
                               for (std::size_t i = 0; i < n * c; ++i)
                                   L.grad[i] += g * (probs[i] - q[i]);
                           });
}

// Left-to-right sum of scalar tensors; the summation order is part of the
// determinism contract.
inline Tensor sum_scalars(const std::vector<Tensor>& xs) {
    if (xs.empty()) return Tensor::scalar_const(0.0);
    double s = 0.0;
    for (const Tensor& x : xs) {
        if (x.size() != 1)
            throw dimension_error("sum_scalars: non-scalar term of shape " +
                                  detail::shape_str(x.shape()));
        s += x.scalar();
    }
    return detail::make_op({1}, {s}, xs, [](detail::TensorNode& self) {
        for (auto& p : self.parents) {
            if (!p->needs_grad) continue;
            detail::ensure_grad(*p);
            p->grad[0] += self.grad[0];
        }
    });
}

// ---------------------------------------------------------------------------
// Optimizer

inline void sgd_step(ParamRegistry& params, double learning_rate) {
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate))
        throw argument_error("sgd_step: learning rate must be finite and >= 0");
    for (const Tensor& p : params.params()) {
        auto& node = *p.node();
        if (node.grad.empty()) continue; // never touched by backward: zero gradient
        for (std::size_t i = 0; i < node.value.size(); ++i) {
            if (!std::isfinite(node.grad[i]))
                throw numeric_error("sgd_step: non-finite gradient in parameter '" +
                                    node.name + "'");
            node.value[i] -= learning_rate * node.grad[i];
        }
        std::fill(node.grad.begin(), node.grad.end(), 0.0);
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    std::size_t elements = 0;
};

// Compares the analytic gradient of fn against central differences, element by
// element, over every parameter in the registry. fn must be deterministic: it
// is re-evaluated many times under perturbed parameter values.
inline GradCheckReport grad_check(const std::function<Tensor(ParamRegistry&)>& fn,
                                  ParamRegistry& params, double epsilon = 1e-5) {
    if (!(epsilon > 0.0))
        throw argument_error("grad_check: epsilon must be positive");

    params.zero_grad();
    Tensor out = fn(params);
    if (out.size() != 1)
        throw argument_error("grad_check: fn must return a scalar");
    if (!std::isfinite(out.scalar()))
        throw numeric_error("grad_check: fn returned a non-finite value");
    backward(out);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.params().size());
    for (const Tensor& p : params.params()) {
        if (p.has_grad())
            analytic.emplace_back(p.grad().begin(), p.grad().end());
        else
            analytic.emplace_back(p.size(), 0.0);
    }

    GradCheckReport report;
    for (std::size_t pi = 0; pi < params.params().size(); ++pi) {
        Tensor p = params.params()[pi];
        auto& v = p.values_mut();
        for (std::size_t i = 0; i < v.size(); ++i) {
            const double saved = v[i];
            v[i] = saved + epsilon;
            const double f1 = fn(params).scalar();
            v[i] = saved - epsilon;
            const double f2 = fn(params).scalar();
            v[i] = saved;
            if (!std::isfinite(f1) || !std::isfinite(f2))
                throw numeric_error("grad_check: non-finite value while perturbing '" +
                                    p.name() + "'");
            const double numeric = (f1 - f2) / (2.0 * epsilon);
            const double a = analytic[pi][i];
            const double rel = std::fabs(a - numeric) /
                               std::max({std::fabs(a), std::fabs(numeric), 1e-8});
            ++report.elements;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.param = p.name();
                report.index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    params.zero_grad();
    return report;
}

// ---------------------------------------------------------------------------
// Checkpoints: one line per parameter,
//   name<TAB>shape(comma-separated)<TAB>values(space-separated)
// Values use shortest round-trip formatting so save/load is lossless.

inline std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline double parse_double(std::string_view s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw parse_error("invalid number '" + std::string(s) + "'");
    return v;
}

inline long long parse_int(std::string_view s) {
    long long v = 0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size())
        throw parse_error("invalid integer '" + std::string(s) + "'");
    return v;
}

inline std::string checkpoint_string(const ParamRegistry& params) {
    std::string out;
    for (const Tensor& p : params.params()) {
        out += p.name();
        out += '\t';
        const auto& shape = p.shape();
        for (std::size_t i = 0; i < shape.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(shape[i]);
        }
        out += '\t';
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (i) out += ' ';
            out += format_double(p.at(i));
        }
        out += '\n';
    }
    return out;
}

inline void save_checkpoint(const ParamRegistry& params, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw argument_error("save_checkpoint: cannot open '" + path + "'");
    f << checkpoint_string(params);
}

namespace detail {

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        std::size_t pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            break;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + 1;
    }
    return out;
}

} // namespace detail

struct CheckpointEntry {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> values;
};

inline std::vector<CheckpointEntry> read_checkpoint(std::istream& in) {
    std::vector<CheckpointEntry> entries;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        auto fields = detail::split_view(line, '\t');
        if (fields.size() != 3)
            throw parse_error("checkpoint line " + std::to_string(lineno) +
                              ": expected 3 tab-separated fields");
        CheckpointEntry e;
        e.name = std::string(fields[0]);
        for (auto d : detail::split_view(fields[1], ',')) {
            std::size_t dim = 0;
            auto res = std::from_chars(d.data(), d.data() + d.size(), dim);
            if (res.ec != std::errc() || res.ptr != d.data() + d.size())
                throw parse_error("checkpoint line " + std::to_string(lineno) +
                                  ": bad shape field");
            e.shape.push_back(dim);
        }
        if (!fields[2].empty())
            for (auto v : detail::split_view(fields[2], ' ')) e.values.push_back(parse_double(v));
        if (detail::shape_product(e.shape) != e.values.size())
            throw parse_error("checkpoint line " + std::to_string(lineno) +
                              ": shape/value count mismatch");
        entries.push_back(std::move(e));
    }
    return entries;
}

inline std::vector<CheckpointEntry> read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw argument_error("read_checkpoint: cannot open '" + path + "'");
    return read_checkpoint(f);
}

// Loads values into an existing registry; every registry parameter must be
// present with a matching shape.
inline void load_checkpoint(ParamRegistry& params, const std::string& path) {
    auto entries = read_checkpoint(path);
    std::unordered_map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (const Tensor& p : params.params()) {
        auto it = by_name.find(p.name());
        if (it == by_name.end())
            throw lookup_error("load_checkpoint: parameter '" + p.name() +
                               "' missing from checkpoint");
        const CheckpointEntry& e = *it->second;
        if (e.shape != p.shape())
            throw dimension_error("load_checkpoint: shape mismatch for '" + p.name() +
                                  "': registry " + detail::shape_str(p.shape()) +
                                  " vs file " + detail::shape_str(e.shape));
        Tensor mut = p;
        mut.values_mut() = e.values;
    }
}

} // namespace rdr
