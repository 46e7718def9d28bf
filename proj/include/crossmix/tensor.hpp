// Copyright (c) 2026 The crossmix Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense double-precision tensors with reverse-mode automatic
// differentiation. Ops record a graph node only when some operand needs
// gradient, so frozen-weight inference pays no tape overhead. Every
// recorded node keeps a forward closure so the graph can be re-evaluated
// in place after perturbing a leaf — that is what finite-difference
// checking uses, and it is what makes stop-gradient constructs
// (detach, hard routing indicators, dropout masks) checkable: they stay
// frozen at their recorded values during re-evaluation.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <unordered_set>

#include "crossmix/common.hpp"

namespace crossmix {

using Shape = std::vector<int>;

inline size_t numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) {
        require(d >= 0, "negative extent in shape " + shape_str(s));
        n *= static_cast<size_t>(d);
    }
    return n;
}

namespace detail {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // sized on demand during backward
    bool requires_grad = false;
    bool needs_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> forward_fn;   // recompute value from parents
    std::function<void(Node&)> backward_fn;  // scatter grad into parents
    int64_t seq = 0;
    std::string name;

    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline int64_t next_seq() {
    static int64_t counter = 0;
    return ++counter;
}

}  // namespace detail

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(detail::NodePtr n) : node_(std::move(n)) {}

    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
        require(numel(shape) == data.size(),
                "data length " + std::to_string(data.size()) + " does not match shape " + shape_str(shape));
        auto n = std::make_shared<detail::Node>();
        n->shape = std::move(shape);
        n->value = std::move(data);
        n->requires_grad = requires_grad;
        n->needs_grad = requires_grad;
        n->seq = detail::next_seq();
        return Tensor(n);
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(numel(shape), 0.0);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double v, bool requires_grad = false) {
        std::vector<double> d(numel(shape), v);
        return from_data(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double v, bool requires_grad = false) {
        return from_data({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t size() const { return node_->value.size(); }

    const std::vector<double>& values() const { return node_->value; }
    // Leaf mutation (initializers, optimizer steps). Graphs built before a
    // mutation are stale and must not be reused. Tensor is a shared handle,
    // so these are const members: they mutate the pointee, not the handle.
    std::vector<double>& mutable_values() const { return node_->value; }

    double item() const {
        require(size() == 1, "item() on non-scalar tensor of shape " + shape_str(shape()));
        return node_->value[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool rg) const {
        node_->requires_grad = rg;
        node_->needs_grad = rg || !node_->parents.empty();
    }

    bool has_grad() const { return node_->grad.size() == node_->value.size(); }
    const std::vector<double>& grad() const {
        require(has_grad(), "gradient not populated for tensor " + node_->name);
        return node_->grad;
    }
    std::vector<double>& mutable_grad() const {
        node_->ensure_grad();
        return node_->grad;
    }
    void zero_grad() const { node_->grad.assign(node_->value.size(), 0.0); }

    void set_name(std::string n) const { node_->name = std::move(n); }
    const std::string& name() const { return node_->name; }

    detail::Node* node() const { return node_.get(); }
    const detail::NodePtr& handle() const { return node_; }

    void backward() const;

private:
    detail::NodePtr node_;
};

// Topologically ordered view of the recorded operations that (a) need
// gradient and (b) are reachable from a root. Parents precede children;
// backward walks it once in reverse, re-evaluation walks it forward.
struct Graph {
    std::vector<detail::Node*> order;

    static Graph reachable(const Tensor& root) {
        Graph g;
        if (!root.node()->needs_grad) return g;
        std::unordered_set<detail::Node*> seen;
        // Iterative postorder DFS.
        std::vector<std::pair<detail::Node*, size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                detail::Node* p = n->parents[next].get();
                ++next;
                if (p->needs_grad && !seen.count(p)) {
                    seen.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                g.order.push_back(n);
                stack.pop_back();
            }
        }
        return g;
    }

    // Recompute every non-leaf node's value from its parents, in order.
    // Leaves and detached constants keep their stored values.
    void reevaluate() {
        for (detail::Node* n : order) {
            if (n->forward_fn) n->forward_fn(*n);
        }
    }
};

inline void Tensor::backward() const {
    require(size() == 1, "backward() requires a scalar root, got shape " + shape_str(shape()));
    detail::Node* root = node_.get();
    if (!root->needs_grad) return;  // no trainable leaf reaches this root
    Graph g = Graph::reachable(*this);
    for (detail::Node* n : g.order) {
        if (!n->parents.empty()) n->grad.assign(n->value.size(), 0.0);
    }
    root->ensure_grad();
    root->grad[0] += 1.0;
    for (auto it = g.order.rbegin(); it != g.order.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward_fn) n->backward_fn(*n);
    }
}

// ---------------------------------------------------------------------------
// raw kernels

namespace detail {

// c[M,N] (+)= a[M,K] @ b[K,N]
inline void mm_nn(const double* a, const double* b, double* c, int M, int K, int N, bool acc) {
    for (int i = 0; i < M; ++i) {
        double* ci = c + static_cast<size_t>(i) * N;
        if (!acc) std::fill(ci, ci + N, 0.0);
        const double* ai = a + static_cast<size_t>(i) * K;
        for (int k = 0; k < K; ++k) {
            const double av = ai[k];
            const double* bk = b + static_cast<size_t>(k) * N;
            for (int j = 0; j < N; ++j) ci[j] += av * bk[j];
        }
    }
}

// c[M,N] (+)= a[M,K] @ b[N,K]^T
inline void mm_nt(const double* a, const double* b, double* c, int M, int K, int N, bool acc) {
    for (int i = 0; i < M; ++i) {
        const double* ai = a + static_cast<size_t>(i) * K;
        double* ci = c + static_cast<size_t>(i) * N;
        for (int j = 0; j < N; ++j) {
            const double* bj = b + static_cast<size_t>(j) * K;
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += ai[k] * bj[k];
            ci[j] = acc ? ci[j] + s : s;
        }
    }
}

// c[M,N] (+)= a[K,M]^T @ b[K,N]
inline void mm_tn(const double* a, const double* b, double* c, int M, int K, int N, bool acc) {
    if (!acc) std::fill(c, c + static_cast<size_t>(M) * N, 0.0);
    for (int k = 0; k < K; ++k) {
        const double* ak = a + static_cast<size_t>(k) * M;
        const double* bk = b + static_cast<size_t>(k) * N;
        for (int i = 0; i < M; ++i) {
            const double av = ak[i];
            double* ci = c + static_cast<size_t>(i) * N;
            for (int j = 0; j < N; ++j) ci[j] += av * bk[j];
        }
    }
}

inline Tensor make_op(Shape shape, std::vector<NodePtr> parents,
                      std::function<void(Node&)> fwd, std::function<void(Node&)> bwd) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->value.resize(numel(n->shape));
    fwd(*n);
    bool needs = false;
    for (auto& p : parents)
        if (p->needs_grad) needs = true;
    if (needs) {
        n->needs_grad = true;
        n->parents = std::move(parents);
        n->forward_fn = std::move(fwd);
        n->backward_fn = std::move(bwd);
    }
    n->seq = next_seq();
    return Tensor(n);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise and scalar ops

inline Tensor add(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(
        a.shape(), {pa, pb},
        [pa, pb](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] + pb->value[i];
        },
        [pa, pb](detail::Node& n) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i];
            }
        });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(
        a.shape(), {pa, pb},
        [pa, pb](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] - pb->value[i];
        },
        [pa, pb](detail::Node& n) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
            }
        });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(
        a.shape(), {pa, pb},
        [pa, pb](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] * pb->value[i];
        },
        [pa, pb](detail::Node& n) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * pb->value[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] += n.grad[i] * pa->value[i];
            }
        });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
    require(a.shape() == b.shape(),
            "div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(
        a.shape(), {pa, pb},
        [pa, pb](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] / pb->value[i];
        },
        [pa, pb](detail::Node& n) {
            if (pa->needs_grad) {
                pa->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] / pb->value[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i)
                    pb->grad[i] -= n.grad[i] * pa->value[i] / (pb->value[i] * pb->value[i]);
            }
        });
}

inline Tensor scale(const Tensor& a, double c) {
    auto pa = a.handle();
    return detail::make_op(
        a.shape(), {pa},
        [pa, c](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] * c;
        },
        [pa, c](detail::Node& n) {
            if (!pa->needs_grad) return;
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i] * c;
        });
}

inline Tensor add_constant(const Tensor& a, double c) {
    auto pa = a.handle();
    return detail::make_op(
        a.shape(), {pa},
        [pa, c](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = pa->value[i] + c;
        },
        [pa](detail::Node& n) {
            if (!pa->needs_grad) return;
            pa->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) pa->grad[i] += n.grad[i];
        });
}

// x broadcast-multiplied by a scalar tensor (used for straight-through
// routing weights attached to interaction residuals).
inline Tensor mul_scalar(const Tensor& x, const Tensor& s) {
    require(s.size() == 1, "mul_scalar: second operand must be scalar");
    auto px = x.handle(), ps = s.handle();
    return detail::make_op(
        x.shape(), {px, ps},
        [px, ps](detail::Node& n) {
            const double c = ps->value[0];
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = px->value[i] * c;
        },
        [px, ps](detail::Node& n) {
            if (px->needs_grad) {
                px->ensure_grad();
                const double c = ps->value[0];
                for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] * c;
            }
            if (ps->needs_grad) {
                ps->ensure_grad();
                double acc = 0.0;
                for (size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * px->value[i];
                ps->grad[0] += acc;
            }
        });
}

// x[..., d] + bias[d]
inline Tensor add_rowwise(const Tensor& x, const Tensor& bias) {
    require(bias.rank() == 1 && x.rank() >= 1 && x.dim(x.rank() - 1) == bias.dim(0),
            "add_rowwise: incompatible shapes " + shape_str(x.shape()) + " and " + shape_str(bias.shape()));
    auto px = x.handle(), pb = bias.handle();
    const int d = bias.dim(0);
    return detail::make_op(
        x.shape(), {px, pb},
        [px, pb, d](detail::Node& n) {
            const size_t rows = n.value.size() / d;
            for (size_t r = 0; r < rows; ++r)
                for (int j = 0; j < d; ++j) n.value[r * d + j] = px->value[r * d + j] + pb->value[j];
        },
        [px, pb, d](detail::Node& n) {
            const size_t rows = n.grad.size() / d;
            if (px->needs_grad) {
                px->ensure_grad();
                for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
            }
            if (pb->needs_grad) {
                pb->ensure_grad();
                for (size_t r = 0; r < rows; ++r)
                    for (int j = 0; j < d; ++j) pb->grad[j] += n.grad[r * d + j];
            }
        });
}

inline Tensor gelu(const Tensor& x) {
    auto px = x.handle();
    constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double kA = 0.044715;
    return detail::make_op(
        x.shape(), {px},
        [px](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) {
                const double v = px->value[i];
                const double u = kC * (v + kA * v * v * v);
                n.value[i] = 0.5 * v * (1.0 + std::tanh(u));
            }
        },
        [px](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) {
                const double v = px->value[i];
                const double u = kC * (v + kA * v * v * v);
                const double t = std::tanh(u);
                const double du = kC * (1.0 + 3.0 * kA * v * v);
                const double dydv = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
                px->grad[i] += n.grad[i] * dydv;
            }
        });
}

inline Tensor log(const Tensor& x) {
    auto px = x.handle();
    return detail::make_op(
        x.shape(), {px},
        [px](detail::Node& n) {
            for (size_t i = 0; i < n.value.size(); ++i) n.value[i] = std::log(px->value[i]);
        },
        [px](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i] / px->value[i];
        });
}

inline Tensor sum_all(const Tensor& x) {
    auto px = x.handle();
    return detail::make_op(
        {1}, {px},
        [px](detail::Node& n) {
            double s = 0.0;
            for (double v : px->value) s += v;
            n.value[0] = s;
        },
        [px](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            const double g = n.grad[0];
            for (size_t i = 0; i < px->grad.size(); ++i) px->grad[i] += g;
        });
}

inline Tensor mean_all(const Tensor& x) {
    require(x.size() > 0, "mean_all on empty tensor");
    return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// Scalar view of one element; gradient scatters back to that element.
inline Tensor select(const Tensor& x, int flat_index) {
    require(flat_index >= 0 && static_cast<size_t>(flat_index) < x.size(),
            "select: index " + std::to_string(flat_index) + " out of range for shape " + shape_str(x.shape()));
    auto px = x.handle();
    return detail::make_op(
        {1}, {px},
        [px, flat_index](detail::Node& n) { n.value[0] = px->value[static_cast<size_t>(flat_index)]; },
        [px, flat_index](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            px->grad[static_cast<size_t>(flat_index)] += n.grad[0];
        });
}

// Value copy that blocks gradient flow. During graph re-evaluation the
// detached value stays frozen — a leaf with no forward closure.
inline Tensor detach(const Tensor& x) {
    auto n = std::make_shared<detail::Node>();
    n->shape = x.shape();
    n->value = x.values();
    n->seq = detail::next_seq();
    return Tensor(n);
}

// ---------------------------------------------------------------------------
// structural ops

inline Tensor reshape(const Tensor& x, Shape shape) {
    require(numel(shape) == x.size(),
            "reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
    auto px = x.handle();
    return detail::make_op(
        std::move(shape), {px},
        [px](detail::Node& n) { n.value = px->value; },
        [px](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (size_t i = 0; i < n.grad.size(); ++i) px->grad[i] += n.grad[i];
        });
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    require(!parts.empty(), "concat: no inputs");
    const int rank = parts[0].rank();
    require(axis >= 0 && axis < rank, "concat: bad axis");
    Shape out = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
        require(p.rank() == rank, "concat: rank mismatch");
        for (int i = 0; i < rank; ++i)
            require(i == axis || p.dim(i) == out[static_cast<size_t>(i)],
                    "concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(out));
        total += p.dim(axis);
    }
    out[static_cast<size_t>(axis)] = total;

    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(out[static_cast<size_t>(i)]);
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<size_t>(out[static_cast<size_t>(i)]);

    std::vector<detail::NodePtr> ph;
    ph.reserve(parts.size());
    for (const auto& p : parts) ph.push_back(p.handle());
    std::vector<size_t> axlen;
    for (const auto& p : parts) axlen.push_back(static_cast<size_t>(p.dim(axis)));
    const size_t total_ax = static_cast<size_t>(total);

    return detail::make_op(
        std::move(out), ph,
        [ph, axlen, outer, inner, total_ax](detail::Node& n) {
            for (size_t o = 0; o < outer; ++o) {
                size_t off = 0;
                for (size_t p = 0; p < ph.size(); ++p) {
                    const size_t len = axlen[p] * inner;
                    std::memcpy(n.value.data() + (o * total_ax + off) * inner,
                                ph[p]->value.data() + o * len, len * sizeof(double));
                    off += axlen[p];
                }
            }
        },
        [ph, axlen, outer, inner, total_ax](detail::Node& n) {
            for (size_t o = 0; o < outer; ++o) {
                size_t off = 0;
                for (size_t p = 0; p < ph.size(); ++p) {
                    const size_t len = axlen[p] * inner;
                    if (ph[p]->needs_grad) {
                        ph[p]->ensure_grad();
                        const double* g = n.grad.data() + (o * total_ax + off) * inner;
                        double* dst = ph[p]->grad.data() + o * len;
                        for (size_t i = 0; i < len; ++i) dst[i] += g[i];
                    }
                    off += axlen[p];
                }
            }
        });
}

inline Tensor narrow(const Tensor& x, int axis, int start, int len) {
    const int rank = x.rank();
    require(axis >= 0 && axis < rank, "narrow: bad axis");
    require(start >= 0 && len >= 0 && start + len <= x.dim(axis),
            "narrow: range [" + std::to_string(start) + ", " + std::to_string(start + len) +
                ") exceeds extent " + std::to_string(x.dim(axis)));
    Shape out = x.shape();
    out[static_cast<size_t>(axis)] = len;
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(x.dim(i));
    for (int i = axis + 1; i < rank; ++i) inner *= static_cast<size_t>(x.dim(i));
    const size_t src_ax = static_cast<size_t>(x.dim(axis));
    auto px = x.handle();
    return detail::make_op(
        std::move(out), {px},
        [px, outer, inner, src_ax, start, len](detail::Node& n) {
            for (size_t o = 0; o < outer; ++o)
                std::memcpy(n.value.data() + o * static_cast<size_t>(len) * inner,
                            px->value.data() + (o * src_ax + static_cast<size_t>(start)) * inner,
                            static_cast<size_t>(len) * inner * sizeof(double));
        },
        [px, outer, inner, src_ax, start, len](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (size_t o = 0; o < outer; ++o) {
                const double* g = n.grad.data() + o * static_cast<size_t>(len) * inner;
                double* dst = px->grad.data() + (o * src_ax + static_cast<size_t>(start)) * inner;
                for (size_t i = 0; i < static_cast<size_t>(len) * inner; ++i) dst[i] += g[i];
            }
        });
}

inline std::vector<Tensor> split(const Tensor& x, int axis, const std::vector<int>& sizes) {
    int total = 0;
    for (int s : sizes) total += s;
    require(total == x.dim(axis), "split: sizes do not cover extent");
    std::vector<Tensor> out;
    int start = 0;
    for (int s : sizes) {
        out.push_back(narrow(x, axis, start, s));
        start += s;
    }
    return out;
}

inline Tensor slice_rows(const Tensor& x, int begin, int end) {
    return narrow(x, 0, begin, end - begin);
}

// [n, h*dh] -> [h, n, dh]
inline Tensor split_heads(const Tensor& x, int heads) {
    require(x.rank() == 2, "split_heads: expected rank-2 input, got " + shape_str(x.shape()));
    const int n = x.dim(0), d = x.dim(1);
    require(d % heads == 0, "split_heads: width " + std::to_string(d) + " not divisible by " + std::to_string(heads));
    const int dh = d / heads;
    auto px = x.handle();
    return detail::make_op(
        {heads, n, dh}, {px},
        [px, heads, n, dh, d](detail::Node& nd) {
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < n; ++i)
                    std::memcpy(nd.value.data() + (static_cast<size_t>(h) * n + i) * dh,
                                px->value.data() + static_cast<size_t>(i) * d + static_cast<size_t>(h) * dh,
                                static_cast<size_t>(dh) * sizeof(double));
        },
        [px, heads, n, dh, d](detail::Node& nd) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < n; ++i) {
                    const double* g = nd.grad.data() + (static_cast<size_t>(h) * n + i) * dh;
                    double* dst = px->grad.data() + static_cast<size_t>(i) * d + static_cast<size_t>(h) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += g[j];
                }
        });
}

// [h, n, dh] -> [n, h*dh]
inline Tensor merge_heads(const Tensor& x) {
    require(x.rank() == 3, "merge_heads: expected rank-3 input, got " + shape_str(x.shape()));
    const int heads = x.dim(0), n = x.dim(1), dh = x.dim(2);
    const int d = heads * dh;
    auto px = x.handle();
    return detail::make_op(
        {n, d}, {px},
        [px, heads, n, dh, d](detail::Node& nd) {
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < n; ++i)
                    std::memcpy(nd.value.data() + static_cast<size_t>(i) * d + static_cast<size_t>(h) * dh,
                                px->value.data() + (static_cast<size_t>(h) * n + i) * dh,
                                static_cast<size_t>(dh) * sizeof(double));
        },
        [px, heads, n, dh, d](detail::Node& nd) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (int h = 0; h < heads; ++h)
                for (int i = 0; i < n; ++i) {
                    const double* g = nd.grad.data() + static_cast<size_t>(i) * d + static_cast<size_t>(h) * dh;
                    double* dst = px->grad.data() + (static_cast<size_t>(h) * n + i) * dh;
                    for (int j = 0; j < dh; ++j) dst[j] += g[j];
                }
        });
}

inline Tensor transpose_last(const Tensor& x) {
    require(x.rank() == 2 || x.rank() == 3, "transpose_last: expected rank 2 or 3, got " + shape_str(x.shape()));
    const bool batched = x.rank() == 3;
    const int b = batched ? x.dim(0) : 1;
    const int r = x.dim(batched ? 1 : 0), c = x.dim(batched ? 2 : 1);
    Shape out = batched ? Shape{b, c, r} : Shape{c, r};
    auto px = x.handle();
    return detail::make_op(
        std::move(out), {px},
        [px, b, r, c](detail::Node& n) {
            for (int bi = 0; bi < b; ++bi) {
                const double* src = px->value.data() + static_cast<size_t>(bi) * r * c;
                double* dst = n.value.data() + static_cast<size_t>(bi) * r * c;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) dst[static_cast<size_t>(j) * r + i] = src[static_cast<size_t>(i) * c + j];
            }
        },
        [px, b, r, c](detail::Node& n) {
            if (!px->needs_grad) return;
            px->ensure_grad();
            for (int bi = 0; bi < b; ++bi) {
                const double* g = n.grad.data() + static_cast<size_t>(bi) * r * c;
                double* dst = px->grad.data() + static_cast<size_t>(bi) * r * c;
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) dst[static_cast<size_t>(i) * c + j] += g[static_cast<size_t>(j) * r + i];
            }
        });
}

// ---------------------------------------------------------------------------
// matmul

// 2-D: [r,k]@[k,c]. 3-D: batched over the shared leading extent.
// Gradient contract: dA = G @ B^T, dB = A^T @ G.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.rank() == b.rank() && (a.rank() == 2 || a.rank() == 3),
            "matmul: unsupported ranks for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    const bool batched = a.rank() == 3;
    const int nb = batched ? a.dim(0) : 1;
    const int M = a.dim(batched ? 1 : 0), K = a.dim(batched ? 2 : 1);
    const int K2 = b.dim(batched ? 1 : 0), N = b.dim(batched ? 2 : 1);
    require(K == K2 && (!batched || b.dim(0) == nb),
            "matmul: shape mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    Shape out = batched ? Shape{nb, M, N} : Shape{M, N};
    auto pa = a.handle(), pb = b.handle();
    return detail::make_op(
        std::move(out), {pa, pb},
        [pa, pb, nb, M, K, N](detail::Node& n) {
            for (int bi = 0; bi < nb; ++bi)
                detail::mm_nn(pa->value.data() + static_cast<size_t>(bi) * M * K,
                              pb->value.data() + static_cast<size_t>(bi) * K * N,
                              n.value.data() + static_cast<size_t>(bi) * M * N, M, K, N, false);
        },
        [pa, pb, nb, M, K, N](detail::Node& n) {
            for (int bi = 0; bi < nb; ++bi) {
                const double* g = n.grad.data() + static_cast<size_t>(bi) * M * N;
                if (pa->needs_grad) {
                    pa->ensure_grad();
                    detail::mm_nt(g, pb->value.data() + static_cast<size_t>(bi) * K * N,
                                  pa->grad.data() + static_cast<size_t>(bi) * M * K, M, N, K, true);
                }
                if (pb->needs_grad) {
                    pb->ensure_grad();
                    detail::mm_tn(pa->value.data() + static_cast<size_t>(bi) * M * K, g,
                                  pb->grad.data() + static_cast<size_t>(bi) * K * N, K, M, N, true);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// softmax / layer norm / losses

// Softmax over the last axis with an optional additive mask whose entries
// are 0 or -inf. The mask must match a suffix of x's shape and broadcasts
// over the leading axes. A fully masked row comes back all-zero instead of
// NaN; the count of such rows is reported through `flags`.
struct SoftmaxFlags {
    int fully_masked_rows = 0;
};

inline Tensor softmax_last(const Tensor& x, const Tensor* mask = nullptr, SoftmaxFlags* flags = nullptr) {
    require(x.rank() >= 1, "softmax_last: rank-0 input");
    const int width = x.dim(x.rank() - 1);
    detail::NodePtr pm;
    size_t mask_rows = 0;
    if (mask && mask->defined()) {
        require(!mask->node()->needs_grad, "softmax_last: mask must not require grad");
        const auto& ms = mask->shape();
        const auto& xs = x.shape();
        require(ms.size() <= xs.size() &&
                    std::equal(ms.rbegin(), ms.rend(), xs.rbegin()),
                "softmax_last: mask shape " + shape_str(ms) + " is not a suffix of " + shape_str(xs));
        pm = mask->handle();
        mask_rows = numel(ms) / static_cast<size_t>(width);
    }
    auto px = x.handle();
    const size_t rows = x.size() / static_cast<size_t>(width);

    auto fwd = [px, pm, rows, mask_rows, width](detail::Node& n) {
        for (size_t r = 0; r < rows; ++r) {
            const double* in = px->value.data() + r * width;
            const double* mr = pm ? pm->value.data() + (r % mask_rows) * width : nullptr;
            double* out = n.value.data() + r * width;
            double mx = -std::numeric_limits<double>::infinity();
            for (int j = 0; j < width; ++j) {
                const double v = in[j] + (mr ? mr[j] : 0.0);
                if (v > mx) mx = v;
            }
            if (!std::isfinite(mx)) {  // fully masked row
                std::fill(out, out + width, 0.0);
                continue;
            }
            double z = 0.0;
            for (int j = 0; j < width; ++j) {
                const double v = in[j] + (mr ? mr[j] : 0.0);
                out[j] = std::exp(v - mx);
                z += out[j];
            }
            for (int j = 0; j < width; ++j) out[j] /= z;
        }
    };
    auto bwd = [px, rows, width](detail::Node& n) {
        if (!px->needs_grad) return;
        px->ensure_grad();
        for (size_t r = 0; r < rows; ++r) {
            const double* p = n.value.data() + r * width;
            const double* g = n.grad.data() + r * width;
            double dot = 0.0;
            for (int j = 0; j < width; ++j) dot += p[j] * g[j];
            double* dst = px->grad.data() + r * width;
            for (int j = 0; j < width; ++j) dst[j] += p[j] * (g[j] - dot);
        }
    };
    std::vector<detail::NodePtr> parents = pm ? std::vector<detail::NodePtr>{px, pm}
                                              : std::vector<detail::NodePtr>{px};
    Tensor out = detail::make_op(x.shape(), std::move(parents), fwd, bwd);
    if (flags) {
        flags->fully_masked_rows = 0;
        for (size_t r = 0; r < rows; ++r) {
            double s = 0.0;
            for (int j = 0; j < width; ++j) s += out.values()[r * width + j];
            if (s < 0.5) ++flags->fully_masked_rows;
        }
    }
    return out;
}

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    require(eps > 0.0, "layer_norm: eps must be positive");
    require(x.rank() >= 1, "layer_norm: rank-0 input");
    const int d = x.dim(x.rank() - 1);
    require(gain.rank() == 1 && gain.dim(0) == d && bias.rank() == 1 && bias.dim(0) == d,
            "layer_norm: gain/bias must have shape [" + std::to_string(d) + "]");
    auto px = x.handle(), pg = gain.handle(), pb = bias.handle();
    const size_t rows = x.size() / static_cast<size_t>(d);
    return detail::make_op(
        x.shape(), {px, pg, pb},
        [px, pg, pb, rows, d, eps](detail::Node& n) {
            for (size_t r = 0; r < rows; ++r) {
                const double* in = px->value.data() + r * d;
                double* out = n.value.data() + r * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) mu += in[j];
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
                var /= d;
                const double inv = 1.0 / std::sqrt(var + eps);
                for (int j = 0; j < d; ++j)
                    out[j] = (in[j] - mu) * inv * pg->value[j] + pb->value[j];
            }
        },
        [px, pg, pb, rows, d, eps](detail::Node& n) {
            for (size_t r = 0; r < rows; ++r) {
                const double* in = px->value.data() + r * d;
                const double* g = n.grad.data() + r * d;
                double mu = 0.0;
                for (int j = 0; j < d; ++j) mu += in[j];
                mu /= d;
                double var = 0.0;
                for (int j = 0; j < d; ++j) var += (in[j] - mu) * (in[j] - mu);
                var /= d;
                const double inv = 1.0 / std::sqrt(var + eps);
                if (pg->needs_grad || pb->needs_grad) {
                    if (pg->needs_grad) pg->ensure_grad();
                    if (pb->needs_grad) pb->ensure_grad();
                    for (int j = 0; j < d; ++j) {
                        const double xhat = (in[j] - mu) * inv;
                        if (pg->needs_grad) pg->grad[j] += g[j] * xhat;
                        if (pb->needs_grad) pb->grad[j] += g[j];
                    }
                }
                if (px->needs_grad) {
                    px->ensure_grad();
                    double mean_a = 0.0, mean_ax = 0.0;
                    for (int j = 0; j < d; ++j) {
                        const double a = g[j] * pg->value[j];
                        const double xhat = (in[j] - mu) * inv;
                        mean_a += a;
                        mean_ax += a * xhat;
                    }
                    mean_a /= d;
                    mean_ax /= d;
                    double* dst = px->grad.data() + r * d;
                    for (int j = 0; j < d; ++j) {
                        const double a = g[j] * pg->value[j];
                        const double xhat = (in[j] - mu) * inv;
                        dst[j] += inv * (a - mean_a - xhat * mean_ax);
                    }
                }
            }
        });
}

// Token/position lookup: rows of `table` gathered by id, with scatter-add
// gradient back into the table.
inline Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
    require(table.rank() == 2, "embedding: table must be rank 2");
    const int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        require(id >= 0 && id < v,
                "embedding: id " + std::to_string(id) + " out of range [0, " + std::to_string(v) + ")");
    auto pt = table.handle();
    auto ids_copy = ids;
    return detail::make_op(
        {static_cast<int>(ids.size()), d}, {pt},
        [pt, ids_copy, d](detail::Node& n) {
            for (size_t i = 0; i < ids_copy.size(); ++i)
                std::memcpy(n.value.data() + i * d,
                            pt->value.data() + static_cast<size_t>(ids_copy[i]) * d,
                            static_cast<size_t>(d) * sizeof(double));
        },
        [pt, ids_copy, d](detail::Node& n) {
            if (!pt->needs_grad) return;
            pt->ensure_grad();
            for (size_t i = 0; i < ids_copy.size(); ++i) {
                const double* g = n.grad.data() + i * d;
                double* dst = pt->grad.data() + static_cast<size_t>(ids_copy[i]) * d;
                for (int j = 0; j < d; ++j) dst[j] += g[j];
            }
        });
}

// Mean negative log-likelihood over rows whose target is >= 0; targets of
// -1 mark padding and are excluded from the mean.
inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets) {
    require(logits.rank() == 2, "cross_entropy: logits must be [T, V]");
    const int t = logits.dim(0), v = logits.dim(1);
    require(static_cast<size_t>(t) == targets.size(),
            "cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(t) + " rows");
    int counted = 0;
    for (int y : targets) {
        require(y >= -1 && y < v, "cross_entropy: target " + std::to_string(y) + " out of range [0, " + std::to_string(v) + ")");
        if (y >= 0) ++counted;
    }
    require(counted > 0, "cross_entropy: all positions flagged as padding");
    auto pl = logits.handle();
    auto tgt = targets;
    return detail::make_op(
        {1}, {pl},
        [pl, tgt, t, v, counted](detail::Node& n) {
            double total = 0.0;
            for (int r = 0; r < t; ++r) {
                if (tgt[static_cast<size_t>(r)] < 0) continue;
                const double* row = pl->value.data() + static_cast<size_t>(r) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                total += std::log(z) + mx - row[tgt[static_cast<size_t>(r)]];
            }
            n.value[0] = total / counted;
        },
        [pl, tgt, t, v, counted](detail::Node& n) {
            if (!pl->needs_grad) return;
            pl->ensure_grad();
            const double g = n.grad[0] / counted;
            for (int r = 0; r < t; ++r) {
                if (tgt[static_cast<size_t>(r)] < 0) continue;
                const double* row = pl->value.data() + static_cast<size_t>(r) * v;
                double mx = row[0];
                for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
                double z = 0.0;
                for (int j = 0; j < v; ++j) z += std::exp(row[j] - mx);
                double* dst = pl->grad.data() + static_cast<size_t>(r) * v;
                for (int j = 0; j < v; ++j) {
                    const double p = std::exp(row[j] - mx) / z;
                    dst[j] += g * (p - (j == tgt[static_cast<size_t>(r)] ? 1.0 : 0.0));
                }
            }
        });
}

// Inverted-scale dropout. The mask is sampled once at construction and is a
// constant of the recorded graph, so re-evaluation and backward stay
// consistent. p == 0 is the identity.
inline Tensor dropout(const Tensor& x, double p, Rng& rng) {
    require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
    if (p == 0.0) return x;
    std::vector<double> mask(x.size());
    const double keep = 1.0 / (1.0 - p);
    for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep;
    Tensor m = Tensor::from_data(x.shape(), std::move(mask));
    return mul(x, m);
}

// ---------------------------------------------------------------------------
// init helpers

inline Tensor randn_init(Shape shape, Rng& rng, double stddev, bool requires_grad = true) {
    std::vector<double> d(numel(shape));
    for (auto& v : d) v = rng.normal(0.0, stddev);
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

inline Tensor uniform_init(Shape shape, Rng& rng, double lo, double hi, bool requires_grad = true) {
    std::vector<double> d(numel(shape));
    for (auto& v : d) v = rng.uniform(lo, hi);
    return Tensor::from_data(std::move(shape), std::move(d), requires_grad);
}

inline int argmax_row(const Tensor& t, int row) {
    const int width = t.dim(t.rank() - 1);
    const double* p = t.values().data() + static_cast<size_t>(row) * width;
    int best = 0;
    for (int j = 1; j < width; ++j)
        if (p[j] > p[best]) best = j;
    return best;
}

}  // namespace crossmix
