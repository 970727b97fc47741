#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <utility>
#include <vector>

#include "hcct/rng.hpp"
#include "hcct/tensor.hpp"

// Forward kernels and their reverse-mode rules. Every op validates shapes up
// front, checks its output for NaN/Inf, and registers a backward function
// only while grad recording is enabled and some input participates.

namespace hcct {

namespace detail {

template <typename T>
inline void check_finite(const std::vector<T>& values, const char* op) {
    for (const T& v : values) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError(std::string(op) + ": non-finite value in output");
        }
    }
}

// A node takes part in backward iff the sweep allocated its grad buffer.
template <typename T>
inline bool wants_grad(const Node<T>& n) {
    return n.grad.size() == n.value.size();
}

template <typename T>
inline Tensor<T> make_op_node(const char* op, Shape shape, std::vector<T> value,
                              std::vector<Tensor<T>> parents,
                              std::function<void(Node<T>&)> backward_fn) {
    check_finite(value, op);
    auto node = std::make_shared<Node<T>>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool track = false;
    if (grad_mode()) {
        for (const auto& p : parents) {
            if (p.defined() && p.requires_grad()) { track = true; break; }
        }
    }
    if (track) {
        node->requires_grad = true;
        for (auto& p : parents) node->parents.push_back(p.node_ptr());
        node->backward_fn = std::move(backward_fn);
    }
    return Tensor<T>::adopt(std::move(node));
}

inline std::vector<std::size_t> row_strides(const Shape& shape) {
    std::vector<std::size_t> st(shape.size());
    std::size_t acc = 1;
    for (std::size_t i = shape.size(); i-- > 0;) {
        st[i] = acc;
        acc *= shape[i];
    }
    return st;
}

inline Shape broadcast_shapes(const char* op, const Shape& a, const Shape& b) {
    std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(std::string(op) + ": shapes not broadcastable: " +
                             shape_str(a) + " vs " + shape_str(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

// Per-axis element strides of `shape` viewed through `out`; 0 marks a
// broadcast axis.
inline std::vector<std::size_t> broadcast_strides(const Shape& shape, const Shape& out) {
    std::vector<std::size_t> eff(out.size(), 0);
    auto st = row_strides(shape);
    std::size_t off = out.size() - shape.size();
    for (std::size_t i = 0; i < shape.size(); ++i) {
        eff[off + i] = (shape[i] == 1 && out[off + i] != 1) ? 0 : st[i];
    }
    return eff;
}

// Odometer walk over `out`, handing the callback the linear output index and
// the two source offsets.
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa,
                               const std::vector<std::size_t>& sb, F&& f) {
    std::size_t n = numel(out);
    std::vector<std::size_t> idx(out.size(), 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t lin = 0; lin < n; ++lin) {
        f(lin, oa, ob);
        for (std::size_t ax = out.size(); ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax]) break;
            idx[ax] = 0;
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
        }
    }
}

enum class BinaryKind { Add, Sub, Mul };

template <typename T>
Tensor<T> broadcast_binary(const char* op, BinaryKind kind, const Tensor<T>& a,
                           const Tensor<T>& b) {
    Shape out_shape = broadcast_shapes(op, a.shape(), b.shape());
    auto sa = broadcast_strides(a.shape(), out_shape);
    auto sb = broadcast_strides(b.shape(), out_shape);
    std::vector<T> out(numel(out_shape));
    const std::vector<T>& av = a.data();
    const std::vector<T>& bv = b.data();
    switch (kind) {
        case BinaryKind::Add:
            for_each_broadcast(out_shape, sa, sb,
                               [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] + bv[j]; });
            break;
        case BinaryKind::Sub:
            for_each_broadcast(out_shape, sa, sb,
                               [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] - bv[j]; });
            break;
        case BinaryKind::Mul:
            for_each_broadcast(out_shape, sa, sb,
                               [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = av[i] * bv[j]; });
            break;
    }
    return make_op_node<T>(
        op, out_shape, std::move(out), {a, b},
        [kind, out_shape, sa, sb](Node<T>& self) {
            Node<T>& na = *self.parents[0];
            Node<T>& nb = *self.parents[1];
            const std::vector<T>& gy = self.grad;
            bool ga = wants_grad(na), gb = wants_grad(nb);
            if (!ga && !gb) return;
            // Repeated offsets on a broadcast axis accumulate, which is the
            // reduction the chain rule calls for.
            for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                switch (kind) {
                    case BinaryKind::Add:
                        if (ga) na.grad[i] += gy[o];
                        if (gb) nb.grad[j] += gy[o];
                        break;
                    case BinaryKind::Sub:
                        if (ga) na.grad[i] += gy[o];
                        if (gb) nb.grad[j] -= gy[o];
                        break;
                    case BinaryKind::Mul:
                        if (ga) na.grad[i] += gy[o] * nb.value[j];
                        if (gb) nb.grad[j] += gy[o] * na.value[i];
                        break;
                }
            });
        });
}

} // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary("add", detail::BinaryKind::Add, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary("sub", detail::BinaryKind::Sub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::broadcast_binary("mul", detail::BinaryKind::Mul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.data());
    for (T& v : out) v *= factor;
    return detail::make_op_node<T>("scale", x.shape(), std::move(out), {x},
                                   [factor](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           nx.grad[i] += factor * self.grad[i];
                                       }
                                   });
}

/// Sum of all elements, as a rank-0 tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    double acc = 0.0;
    for (const T& v : x.data()) acc += static_cast<double>(v);
    return detail::make_op_node<T>("sum", {}, {static_cast<T>(acc)}, {x},
                                   [](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       for (T& g : nx.grad) g += self.grad[0];
                                   });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    std::size_t n = x.size();
    double acc = 0.0;
    for (const T& v : x.data()) acc += static_cast<double>(v);
    return detail::make_op_node<T>("mean", {}, {static_cast<T>(acc / static_cast<double>(n))}, {x},
                                   [n](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       T g = self.grad[0] / static_cast<T>(n);
                                       for (T& gi : nx.grad) gi += g;
                                   });
}

// Batched matrix product. Trailing two axes are the matrices; leading axes
// broadcast.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() < 2 || sb.size() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(sa) +
                         " and " + shape_str(sb));
    }
    std::size_t m = sa[sa.size() - 2], k = sa[sa.size() - 1];
    std::size_t k2 = sb[sb.size() - 2], p = sb[sb.size() - 1];
    if (k != k2) {
        throw ShapeError("matmul: inner dimensions mismatch: " + shape_str(sa) + " vs " +
                         shape_str(sb));
    }
    Shape batch_a(sa.begin(), sa.end() - 2);
    Shape batch_b(sb.begin(), sb.end() - 2);
    Shape batch = detail::broadcast_shapes("matmul", batch_a, batch_b);
    Shape out_shape = batch;
    out_shape.push_back(m);
    out_shape.push_back(p);

    auto ea = detail::broadcast_strides(batch_a, batch);
    auto eb = detail::broadcast_strides(batch_b, batch);
    for (auto& s : ea) s *= m * k;
    for (auto& s : eb) s *= k * p;

    std::vector<T> out(numel(out_shape), T(0));
    const T* ad = a.data().data();
    const T* bd = b.data().data();
    detail::for_each_broadcast(batch, ea, eb, [&](std::size_t lin, std::size_t oa, std::size_t ob) {
        const T* A = ad + oa;
        const T* B = bd + ob;
        T* C = out.data() + lin * m * p;
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t kk = 0; kk < k; ++kk) {
                T av = A[i * k + kk];
                const T* brow = B + kk * p;
                T* crow = C + i * p;
                for (std::size_t j = 0; j < p; ++j) crow[j] += av * brow[j];
            }
        }
    });

    return detail::make_op_node<T>(
        "matmul", out_shape, std::move(out), {a, b},
        [batch, ea, eb, m, k, p](detail::Node<T>& self) {
            detail::Node<T>& na = *self.parents[0];
            detail::Node<T>& nb = *self.parents[1];
            bool ga = detail::wants_grad(na), gb = detail::wants_grad(nb);
            if (!ga && !gb) return;
            const T* gy = self.grad.data();
            detail::for_each_broadcast(batch, ea, eb, [&](std::size_t lin, std::size_t oa, std::size_t ob) {
                const T* G = gy + lin * m * p;
                if (ga) {
                    const T* B = nb.value.data() + ob;
                    T* dA = na.grad.data() + oa;
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t kk = 0; kk < k; ++kk) {
                            const T* grow = G + i * p;
                            const T* brow = B + kk * p;
                            T acc = T(0);
                            for (std::size_t j = 0; j < p; ++j) acc += grow[j] * brow[j];
                            dA[i * k + kk] += acc;
                        }
                    }
                }
                if (gb) {
                    const T* A = na.value.data() + oa;
                    T* dB = nb.grad.data() + ob;
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        for (std::size_t i = 0; i < m; ++i) {
                            T av = A[i * k + kk];
                            const T* grow = G + i * p;
                            T* brow = dB + kk * p;
                            for (std::size_t j = 0; j < p; ++j) brow[j] += av * grow[j];
                        }
                    }
                }
            });
        });
}

template <typename T>
Tensor<T> transpose_last2(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.size() < 2) throw ShapeError("transpose: rank must be >= 2, got " + shape_str(s));
    std::size_t m = s[s.size() - 2], n = s[s.size() - 1];
    Shape out_shape = s;
    std::swap(out_shape[s.size() - 2], out_shape[s.size() - 1]);
    std::size_t batches = numel(s) / (m * n);
    std::vector<T> out(x.size());
    const T* xv = x.data().data();
    for (std::size_t b = 0; b < batches; ++b) {
        const T* src = xv + b * m * n;
        T* dst = out.data() + b * m * n;
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
    }
    return detail::make_op_node<T>("transpose", out_shape, std::move(out), {x},
                                   [batches, m, n](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       const T* gy = self.grad.data();
                                       for (std::size_t b = 0; b < batches; ++b) {
                                           const T* src = gy + b * m * n;
                                           T* dst = nx.grad.data() + b * m * n;
                                           for (std::size_t j = 0; j < n; ++j)
                                               for (std::size_t i = 0; i < m; ++i)
                                                   dst[i * n + j] += src[j * m + i];
                                       }
                                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (numel(new_shape) != x.size()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    }
    return detail::make_op_node<T>("reshape", std::move(new_shape), x.data(), {x},
                                   [](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           nx.grad[i] += self.grad[i];
                                   });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t len) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw ShapeError("slice: axis out of range for " + shape_str(s));
    if (len == 0 || start + len > s[axis]) {
        throw ShapeError("slice: range [" + std::to_string(start) + ", " +
                         std::to_string(start + len) + ") exceeds extent " +
                         std::to_string(s[axis]));
    }
    Shape out_shape = s;
    out_shape[axis] = len;
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    std::vector<T> out(numel(out_shape));
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * len * inner, xv + (o * s[axis] + start) * inner,
                    len * inner * sizeof(T));
    }
    return detail::make_op_node<T>(
        "slice", out_shape, std::move(out), {x},
        [outer, inner, len, axis_extent = s[axis], start](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            if (!detail::wants_grad(nx)) return;
            const T* gy = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                T* dst = nx.grad.data() + (o * axis_extent + start) * inner;
                const T* src = gy + o * len * inner;
                for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
            }
        });
}

template <typename T>
Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    if (sa.size() != sb.size() || axis >= sa.size()) {
        throw ShapeError("concat: incompatible ranks " + shape_str(sa) + " vs " + shape_str(sb));
    }
    for (std::size_t i = 0; i < sa.size(); ++i) {
        if (i != axis && sa[i] != sb[i]) {
            throw ShapeError("concat: extents differ off-axis: " + shape_str(sa) + " vs " +
                             shape_str(sb));
        }
    }
    Shape out_shape = sa;
    out_shape[axis] += sb[axis];
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
    for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
    std::size_t la = sa[axis], lb = sb[axis];
    std::vector<T> out(numel(out_shape));
    for (std::size_t o = 0; o < outer; ++o) {
        std::memcpy(out.data() + o * (la + lb) * inner, a.data().data() + o * la * inner,
                    la * inner * sizeof(T));
        std::memcpy(out.data() + (o * (la + lb) + la) * inner, b.data().data() + o * lb * inner,
                    lb * inner * sizeof(T));
    }
    return detail::make_op_node<T>(
        "concat", out_shape, std::move(out), {a, b},
        [outer, inner, la, lb](detail::Node<T>& self) {
            detail::Node<T>& na = *self.parents[0];
            detail::Node<T>& nb = *self.parents[1];
            const T* gy = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                if (detail::wants_grad(na)) {
                    const T* src = gy + o * (la + lb) * inner;
                    T* dst = na.grad.data() + o * la * inner;
                    for (std::size_t i = 0; i < la * inner; ++i) dst[i] += src[i];
                }
                if (detail::wants_grad(nb)) {
                    const T* src = gy + (o * (la + lb) + la) * inner;
                    T* dst = nb.grad.data() + o * lb * inner;
                    for (std::size_t i = 0; i < lb * inner; ++i) dst[i] += src[i];
                }
            }
        });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.data());
    for (T& v : out) v = v > T(0) ? v : T(0);
    return detail::make_op_node<T>("relu", x.shape(), std::move(out), {x},
                                   [](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                           if (nx.value[i] > T(0)) nx.grad[i] += self.grad[i];
                                       }
                                   });
}

// Max-subtracted softmax along `axis`; rows sum to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) {
        throw ValueError("softmax: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s));
    }
    std::size_t n = s[axis];
    std::size_t inner = 1, outer = 1;
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    std::vector<T> out(x.size());
    const T* xv = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            std::size_t base = o * n * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                mx = std::max(mx, static_cast<double>(xv[base + i * inner]));
            }
            double denom = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                denom += std::exp(static_cast<double>(xv[base + i * inner]) - mx);
            }
            for (std::size_t i = 0; i < n; ++i) {
                out[base + i * inner] = static_cast<T>(
                    std::exp(static_cast<double>(xv[base + i * inner]) - mx) / denom);
            }
        }
    }
    return detail::make_op_node<T>(
        "softmax", s, std::move(out), {x}, [n, inner, outer](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            if (!detail::wants_grad(nx)) return;
            const T* y = self.value.data();
            const T* gy = self.grad.data();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    std::size_t base = o * n * inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) {
                        std::size_t k = base + i * inner;
                        dot += static_cast<double>(gy[k]) * static_cast<double>(y[k]);
                    }
                    for (std::size_t i = 0; i < n; ++i) {
                        std::size_t k = base + i * inner;
                        nx.grad[k] += y[k] * (gy[k] - static_cast<T>(dot));
                    }
                }
            }
        });
}

// Normalizes the last axis. gamma/beta have that axis's extent.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    double eps = 1e-5) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("layernorm: input must have rank >= 1");
    std::size_t d = s.back();
    if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
        throw ShapeError("layernorm: gamma/beta must be [" + std::to_string(d) + "], got " +
                         shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
    }
    std::size_t rows = x.size() / d;
    std::vector<T> out(x.size());
    std::vector<T> xhat(x.size());
    std::vector<T> inv_std(rows);
    const T* xv = x.data().data();
    const T* gv = gamma.data().data();
    const T* bv = beta.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv + r * d;
        double mean = 0.0;
        for (std::size_t i = 0; i < d; ++i) mean += static_cast<double>(row[i]);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
            double c = static_cast<double>(row[i]) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double inv = 1.0 / std::sqrt(var + eps);
        inv_std[r] = static_cast<T>(inv);
        for (std::size_t i = 0; i < d; ++i) {
            T xh = static_cast<T>((static_cast<double>(row[i]) - mean) * inv);
            xhat[r * d + i] = xh;
            out[r * d + i] = gv[i] * xh + bv[i];
        }
    }
    return detail::make_op_node<T>(
        "layernorm", s, std::move(out), {x, gamma, beta},
        [rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            detail::Node<T>& ng = *self.parents[1];
            detail::Node<T>& nb = *self.parents[2];
            const T* gy = self.grad.data();
            const T* gv = ng.value.data();
            for (std::size_t r = 0; r < rows; ++r) {
                const T* grow = gy + r * d;
                const T* xh = xhat.data() + r * d;
                if (detail::wants_grad(ng) || detail::wants_grad(nb)) {
                    for (std::size_t i = 0; i < d; ++i) {
                        if (detail::wants_grad(ng)) ng.grad[i] += grow[i] * xh[i];
                        if (detail::wants_grad(nb)) nb.grad[i] += grow[i];
                    }
                }
                if (detail::wants_grad(nx)) {
                    double m1 = 0.0, m2 = 0.0;
                    for (std::size_t i = 0; i < d; ++i) {
                        double gg = static_cast<double>(grow[i]) * static_cast<double>(gv[i]);
                        m1 += gg;
                        m2 += gg * static_cast<double>(xh[i]);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    T* dx = nx.grad.data() + r * d;
                    for (std::size_t i = 0; i < d; ++i) {
                        double gg = static_cast<double>(grow[i]) * static_cast<double>(gv[i]);
                        dx[i] += static_cast<T>(static_cast<double>(inv_std[r]) *
                                                (gg - m1 - static_cast<double>(xh[i]) * m2));
                    }
                }
            }
        });
}

// Inverted dropout: survivors are scaled by 1/(1-p) so evaluation is exactly
// the identity. p == 0 consumes no randomness.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng, bool training) {
    if (p < 0.0 || p >= 1.0) {
        throw ValueError("dropout: rate must be in [0, 1), got " + std::to_string(p));
    }
    if (!training || p == 0.0) return x;
    T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    std::vector<T> mask(x.size());
    for (T& m : mask) m = rng.next_uniform() < p ? T(0) : keep_scale;
    std::vector<T> out(x.size());
    const T* xv = x.data().data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
    return detail::make_op_node<T>("dropout", x.shape(), std::move(out), {x},
                                   [mask = std::move(mask)](detail::Node<T>& self) {
                                       detail::Node<T>& nx = *self.parents[0];
                                       if (!detail::wants_grad(nx)) return;
                                       for (std::size_t i = 0; i < self.grad.size(); ++i)
                                           nx.grad[i] += self.grad[i] * mask[i];
                                   });
}

// x [.., in] times w [in, out] plus bias [out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    return add(matmul(x, w), bias);
}

// Mean over the batch of -log softmax(logits)[label], stabilized with
// log-sum-exp.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::size_t>& labels) {
    const Shape& s = logits.shape();
    if (s.size() != 2) throw ShapeError("cross_entropy: logits must be [batch, classes], got " + shape_str(s));
    std::size_t b = s[0], c = s[1];
    if (labels.size() != b) {
        throw ContractError("cross_entropy: got " + std::to_string(labels.size()) +
                            " labels for batch of " + std::to_string(b));
    }
    for (std::size_t label : labels) {
        if (label >= c) {
            throw ContractError("cross_entropy: label " + std::to_string(label) +
                                " out of range [0, " + std::to_string(c) + ")");
        }
    }
    const T* lv = logits.data().data();
    std::vector<T> probs(b * c);
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const T* row = lv + i * c;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < c; ++j) mx = std::max(mx, static_cast<double>(row[j]));
        double denom = 0.0;
        for (std::size_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j]) - mx);
        double lse = mx + std::log(denom);
        loss += lse - static_cast<double>(row[labels[i]]);
        for (std::size_t j = 0; j < c; ++j) {
            probs[i * c + j] = static_cast<T>(std::exp(static_cast<double>(row[j]) - lse));
        }
    }
    loss /= static_cast<double>(b);
    return detail::make_op_node<T>(
        "cross_entropy", {}, {static_cast<T>(loss)}, {logits},
        [b, c, labels, probs = std::move(probs)](detail::Node<T>& self) {
            detail::Node<T>& nx = *self.parents[0];
            if (!detail::wants_grad(nx)) return;
            T g = self.grad[0] / static_cast<T>(b);
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    T delta = probs[i * c + j] - (j == labels[i] ? T(1) : T(0));
                    nx.grad[i * c + j] += g * delta;
                }
            }
        });
}

// Row-wise argmax over the last axis; ties resolve to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& x) {
    const Shape& s = x.shape();
    if (s.empty()) throw ShapeError("argmax: rank must be >= 1");
    std::size_t c = s.back();
    std::size_t rows = x.size() / c;
    std::vector<std::size_t> out(rows);
    const T* xv = x.data().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* row = xv + r * c;
        std::size_t best = 0;
        for (std::size_t j = 1; j < c; ++j) {
            if (row[j] > row[best]) best = j;
        }
        out[r] = best;
    }
    return out;
}

} // namespace hcct
