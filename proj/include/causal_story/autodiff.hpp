#pragma once

// Minimal reverse-mode differentiation over dense row-major double tensors.
//
// A Tensor is a shared handle to a graph node. Operations record their inputs
// and a backward closure only when gradient recording is enabled and at least
// one input requires a gradient, so inference paths allocate no graph.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <unordered_set>
#include <utility>
#include <vector>

#include "errors.hpp"

namespace causal_story {

using Shape = std::vector<std::size_t>;

namespace detail {

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    bool is_leaf() const { return !backward; }

    std::vector<double>& ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
        return grad;
    }
};

using NodePtr = std::shared_ptr<Node>;

inline thread_local int no_grad_depth = 0;

inline std::size_t numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMatMap = Eigen::Map<const RowMat>;
using MatMap = Eigen::Map<RowMat>;

}  // namespace detail

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard() { ++detail::no_grad_depth; }
    ~NoGradGuard() { --detail::no_grad_depth; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        check_shape(shape);
        node_->value.assign(detail::numel(shape), fill);
        node_->shape = std::move(shape);
        node_->requires_grad = requires_grad;
    }

    Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
        : node_(std::make_shared<detail::Node>()) {
        check_shape(shape);
        if (detail::numel(shape) != values.size()) {
            std::ostringstream os;
            os << "tensor shape " << detail::shape_str(shape) << " holds " << detail::numel(shape)
               << " values, got " << values.size();
            throw DimensionError(os.str());
        }
        node_->shape = std::move(shape);
        node_->value = std::move(values);
        node_->requires_grad = requires_grad;
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t size() const { return node_->value.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.back(); }

    std::span<const double> data() const { return node_->value; }
    /// Mutable view of the values. Mutating a tensor that is part of a
    /// recorded graph invalidates that graph's gradients.
    std::span<double> mutable_data() { return node_->value; }
    double operator[](std::size_t i) const { return node_->value[i]; }
    double item() const {
        if (size() != 1) throw ContractError("item() on tensor of shape " + detail::shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool on) { node_->requires_grad = on; }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->ensure_grad(); }
    void zero_grad() { node_->grad.clear(); }

    /// Fresh leaf holding a copy of the values; never requires grad.
    Tensor detach() const { return Tensor(shape(), node_->value, false); }

    /// Deep copy as a leaf, preserving requires_grad.
    Tensor clone() const { return Tensor(shape(), node_->value, requires_grad()); }

    detail::Node& node() const { return *node_; }
    const detail::NodePtr& node_ptr() const { return node_; }

private:
    static void check_shape(const Shape& shape) {
        if (shape.empty()) throw DimensionError("tensor shape must have rank >= 1");
        for (auto d : shape)
            if (d == 0) throw DimensionError("tensor dimension must be positive, got " + detail::shape_str(shape));
    }

    detail::NodePtr node_;
};

namespace detail {

/// Builds the output node of an operation. The closure receives the output
/// node and accumulates into the grads of `self.parents[k]` (same order as
/// `inputs`); it is only attached when some input requires grad.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> value, std::initializer_list<Tensor> inputs,
                   Backward&& backward) {
    Tensor out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    auto& node = out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& t : inputs) node.parents.push_back(t.node_ptr());
    node.backward = std::forward<Backward>(backward);
    return out;
}

template <class Backward>
Tensor make_result(Shape shape, std::vector<double> value, const std::vector<Tensor>& inputs,
                   Backward&& backward) {
    Tensor out(std::move(shape), std::move(value));
    if (!grad_enabled()) return out;
    bool any = false;
    for (const auto& t : inputs) any = any || t.requires_grad();
    if (!any) return out;
    auto& node = out.node();
    node.requires_grad = true;
    node.parents.reserve(inputs.size());
    for (const auto& t : inputs) node.parents.push_back(t.node_ptr());
    node.backward = std::forward<Backward>(backward);
    return out;
}

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw DimensionError(std::string(op) + " expects a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2(a, "matmul");
    detail::require_rank2(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k)
        throw DimensionError("matmul: inner dimensions differ, " + detail::shape_str(a.shape()) + " x " +
                             detail::shape_str(b.shape()));
    std::vector<double> out(m * n);
    detail::MatMap(out.data(), m, n).noalias() =
        detail::ConstMatMap(a.data().data(), m, k) * detail::ConstMatMap(b.data().data(), k, n);
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        detail::ConstMatMap dC(self.grad.data(), m, n);
        if (A.requires_grad)
            detail::MatMap(A.ensure_grad().data(), m, k).noalias() +=
                dC * detail::ConstMatMap(B.value.data(), k, n).transpose();
        if (B.requires_grad)
            detail::MatMap(B.ensure_grad().data(), k, n).noalias() +=
                detail::ConstMatMap(A.value.data(), m, k).transpose() * dC;
    });
}

inline Tensor transpose(const Tensor& a) {
    detail::require_rank2(a, "transpose");
    const std::size_t r = a.dim(0), c = a.dim(1);
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = a[i * c + j];
    return detail::make_result({c, r}, std::move(out), {a}, [r, c](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) {
            auto& g = A.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B.value[i];
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A.value[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * s;
    return detail::make_result(a.shape(), std::move(out), {a}, [s](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * s;
    });
}

/// Adds a length-d row vector to every row of an [n x d] matrix (bias add).
inline Tensor add_row(const Tensor& a, const Tensor& row) {
    detail::require_rank2(a, "add_row");
    const std::size_t n = a.dim(0), d = a.dim(1);
    if (row.size() != d)
        throw DimensionError("add_row: row of shape " + detail::shape_str(row.shape()) + " vs matrix " +
                             detail::shape_str(a.shape()));
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = a[i * d + j] + row[j];
    return detail::make_result(a.shape(), std::move(out), {a, row}, [n, d](detail::Node& self) {
        if (self.parents[0]->requires_grad) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            auto& g = self.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < d; ++j) g[j] += self.grad[i * d + j];
        }
    });
}

/// x * sigmoid(x)
inline Tensor silu(const Tensor& a) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / (1.0 + std::exp(-a[i]));
    return detail::make_result(a.shape(), std::move(out), {a}, [](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& g = A.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double s = 1.0 / (1.0 + std::exp(-A.value[i]));
            g[i] += self.grad[i] * s * (1.0 + A.value[i] * (1.0 - s));
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions and losses

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return detail::make_result({1}, {s}, {a}, [](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    const double inv = 1.0 / static_cast<double>(a.size());
    return detail::make_result({1}, {s * inv}, {a}, [inv](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (auto& v : g) v += self.grad[0] * inv;
    });
}

/// Mean of squared differences over all elements.
inline Tensor mse(const Tensor& a, const Tensor& b) {
    detail::require_same_shape(a, b, "mse");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    const double inv = 1.0 / static_cast<double>(a.size());
    return detail::make_result({1}, {s * inv}, {a, b}, [inv](detail::Node& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        const double k = 2.0 * inv * self.grad[0];
        if (A.requires_grad) {
            auto& g = A.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * (A.value[i] - B.value[i]);
        }
        if (B.requires_grad) {
            auto& g = B.ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= k * (A.value[i] - B.value[i]);
        }
    });
}

// ---------------------------------------------------------------------------
// Normalization and attention primitives

/// Row-aligned additive bias: entries are 0 (allowed) or -inf (blocked).
struct AdditiveBias {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::span<const double> values;

    bool blocked(std::size_t i, std::size_t j) const {
        return values[i * cols + j] == -std::numeric_limits<double>::infinity();
    }
};

/// Softmax over the last axis with an additive mask. Blocked entries come out
/// exactly zero; a row without any admissible entry is rejected.
inline Tensor softmax_masked(const Tensor& logits, const AdditiveBias& bias) {
    const std::size_t n = logits.cols();
    const std::size_t rows = logits.size() / n;
    if (bias.cols != n || bias.rows != rows || bias.values.size() != rows * n)
        throw DimensionError("softmax_masked: bias is " + std::to_string(bias.rows) + "x" + std::to_string(bias.cols) +
                             ", logits " + detail::shape_str(logits.shape()));
    std::vector<double> out(logits.size(), 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (!bias.blocked(r, j)) mx = std::max(mx, logits[r * n + j] + bias.values[r * n + j]);
        if (mx == -std::numeric_limits<double>::infinity())
            throw InvalidMaskError("softmax_masked: row " + std::to_string(r) + " has no allowed entry");
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            if (bias.blocked(r, j)) continue;
            const double e = std::exp(logits[r * n + j] + bias.values[r * n + j] - mx);
            out[r * n + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] /= z;
    }
    return detail::make_result(logits.shape(), std::move(out), {logits}, [rows, n](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t r = 0; r < rows; ++r) {
            const double* p = self.value.data() + r * n;
            const double* dp = self.grad.data() + r * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += p[j] * dp[j];
            for (std::size_t j = 0; j < n; ++j) g[r * n + j] += p[j] * (dp[j] - dot);
        }
    });
}

/// Per-row normalization over the last axis followed by an affine map.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5) {
    const std::size_t d = x.cols();
    if (gamma.size() != d || beta.size() != d)
        throw DimensionError("layer_norm: gamma/beta " + detail::shape_str(gamma.shape()) + "/" +
                             detail::shape_str(beta.shape()) + " vs input " + detail::shape_str(x.shape()));
    const std::size_t rows = x.size() / d;
    std::vector<double> out(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const double* xr = x.data().data() + r * d;
        double mu = 0.0;
        for (std::size_t j = 0; j < d; ++j) mu += xr[j];
        mu /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(d);
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[r] = is;
        for (std::size_t j = 0; j < d; ++j) {
            const double h = (xr[j] - mu) * is;
            xhat[r * d + j] = h;
            out[r * d + j] = gamma[j] * h + beta[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
            auto& X = *self.parents[0];
            auto& G = *self.parents[1];
            auto& B = *self.parents[2];
            const double* dy = self.grad.data();
            if (G.requires_grad) {
                auto& g = G.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j] * xhat[r * d + j];
            }
            if (B.requires_grad) {
                auto& g = B.ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) g[j] += dy[r * d + j];
            }
            if (X.requires_grad) {
                auto& g = X.ensure_grad();
                const double inv_d = 1.0 / static_cast<double>(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * G.value[j];
                        m1 += dh;
                        m2 += dh * xhat[r * d + j];
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dh = dy[r * d + j] * G.value[j];
                        g[r * d + j] += inv_std[r] * (dh - m1 - xhat[r * d + j] * m2);
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Rows of `table` [V x d] selected by `ids`.
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
    detail::require_rank2(table, "embedding");
    const std::size_t v = table.dim(0), d = table.dim(1);
    std::vector<double> out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
            throw IndexError("embedding: id " + std::to_string(ids[i]) + " outside table of " + std::to_string(v));
        std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(ids[i]) * d), d,
                    out.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    std::vector<int> idx(ids.begin(), ids.end());
    return detail::make_result({ids.size(), d}, std::move(out), {table}, [idx = std::move(idx), d](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[i]) * d + j] += self.grad[i * d + j];
    });
}

/// out.flat[i] = x.flat[index[i]]; covers permutations, patch extraction and slicing.
inline Tensor gather(const Tensor& x, std::vector<std::size_t> index, Shape out_shape) {
    if (detail::numel(out_shape) != index.size())
        throw DimensionError("gather: " + std::to_string(index.size()) + " indices for shape " +
                             detail::shape_str(out_shape));
    std::vector<double> out(index.size());
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= x.size()) throw IndexError("gather: index " + std::to_string(index[i]) + " out of range");
        out[i] = x[index[i]];
    }
    return detail::make_result(std::move(out_shape), std::move(out), {x}, [index = std::move(index)](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[i];
    });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
    if (detail::numel(shape) != x.size())
        throw DimensionError("reshape: " + detail::shape_str(x.shape()) + " -> " + detail::shape_str(shape));
    std::vector<double> out(x.data().begin(), x.data().end());
    return detail::make_result(std::move(shape), std::move(out), {x}, [](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

/// Rows [begin, end) of a matrix.
inline Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
    detail::require_rank2(x, "slice_rows");
    if (begin >= end || end > x.dim(0))
        throw IndexError("slice_rows: [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                         std::to_string(x.dim(0)) + " rows");
    const std::size_t d = x.dim(1);
    std::vector<double> out(x.data().begin() + static_cast<std::ptrdiff_t>(begin * d),
                            x.data().begin() + static_cast<std::ptrdiff_t>(end * d));
    return detail::make_result({end - begin, d}, std::move(out), {x}, [begin, d](detail::Node& self) {
        auto& g = self.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[begin * d + i] += self.grad[i];
    });
}

/// Stacks matrices with equal column counts vertically.
inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no inputs");
    const std::size_t d = parts.front().cols();
    std::size_t n = 0;
    for (const auto& p : parts) {
        detail::require_rank2(p, "concat_rows");
        if (p.cols() != d)
            throw DimensionError("concat_rows: column mismatch " + detail::shape_str(parts.front().shape()) + " vs " +
                                 detail::shape_str(p.shape()));
        n += p.rows();
    }
    std::vector<double> out;
    out.reserve(n * d);
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    return detail::make_result({n, d}, std::move(out), parts, [](detail::Node& self) {
        std::size_t offset = 0;
        for (auto& p : self.parents) {
            if (p->requires_grad) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offset + i];
            }
            offset += p->value.size();
        }
    });
}

// ---------------------------------------------------------------------------
// Backpropagation

/// Accumulates d(loss)/d(leaf) into every reachable leaf that requires grad.
/// Leaf grads are additive across calls; intermediate grads are reset.
inline void backward(const Tensor& loss) {
    if (loss.size() != 1)
        throw ContractError("backward: loss must be scalar, got shape " + detail::shape_str(loss.shape()));
    if (!loss.requires_grad()) return;

    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
    seen.insert(&loss.node());
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
    for (auto* n : order)
        if (!n->is_leaf()) n->grad.assign(n->value.size(), 0.0);
    loss.node().ensure_grad()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if (!(*it)->is_leaf()) (*it)->backward(**it);
}

/// Central-difference gradient of a scalar function at x; perturbs x in place
/// and restores it.
template <class Fn>
Tensor finite_diff_grad(Fn&& f, Tensor x, double h) {
    std::vector<double> g(x.size());
    auto data = x.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
        const double saved = data[i];
        data[i] = saved + h;
        const double fp = f(x);
        data[i] = saved - h;
        const double fm = f(x);
        data[i] = saved;
        g[i] = (fp - fm) / (2.0 * h);
    }
    return Tensor(x.shape(), std::move(g));
}

}  // namespace causal_story
