#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// Small graphs, eager construction, explicit backward(). Single-threaded per
// training run; gradient buffers are the only mutable state after forward.

#include <algorithm>
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

namespace dskd {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

struct TensorNode {
    Shape shape;
    std::vector<double> data;       // row-major
    bool requires_grad = false;
    std::vector<double> grad;       // empty until first accumulation
    std::vector<NodePtr> parents;
    std::function<void()> backward_fn;  // pushes this->grad into parents

    std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), 0.0);
    }
};

// Value-semantic handle over a shared graph node.
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape shape, std::vector<double> data, bool requires_grad = false) {
        for (int d : shape)
            if (d <= 0) throw std::invalid_argument("Tensor: non-positive dimension in shape " + shape_str(shape));
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
            throw std::invalid_argument("Tensor: shape " + shape_str(shape) + " does not match data length " +
                                        std::to_string(data.size()));
        node_ = std::make_shared<TensorNode>();
        node_->shape = std::move(shape);
        node_->data = std::move(data);
        node_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), value);
        return Tensor(std::move(shape), std::move(d), requires_grad);
    }

    static Tensor scalar(double value, bool requires_grad = false) {
        return Tensor(Shape{1}, std::vector<double>{value}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::int64_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }

    std::vector<double>& data() { return node_->data; }
    const std::vector<double>& data() const { return node_->data; }

    const std::vector<double>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        node_->ensure_grad();
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    // Value copy outside the graph.
    Tensor detach() const { return Tensor(node_->shape, node_->data, false); }

    NodePtr node() const { return node_; }

    static Tensor from_node(NodePtr n) {
        Tensor t;
        t.node_ = std::move(n);
        return t;
    }

private:
    NodePtr node_;
};

namespace detail {

inline NodePtr make_result(Shape shape, std::vector<double> data, std::vector<NodePtr> parents) {
    auto n = std::make_shared<TensorNode>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) { n->requires_grad = true; break; }
    return n;
}

inline void topo_sort(const NodePtr& root, std::vector<TensorNode*>& order) {
    std::unordered_set<TensorNode*> seen;
    std::vector<std::pair<TensorNode*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    seen.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            TensorNode* p = node->parents[idx++].get();
            if (seen.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
}

}  // namespace detail

// Accumulates gradients of a scalar loss into every reachable tensor with
// requires_grad=true. Repeated calls without zeroing accumulate additively.
inline void backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    std::vector<TensorNode*> order;
    detail::topo_sort(loss.node(), order);
    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn && !n->grad.empty()) n->backward_fn();
    }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw std::invalid_argument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    auto res = detail::make_result(a.shape(), std::move(out), {a.node(), b.node()});
    if (res->requires_grad) {
        auto an = a.node(); auto bn = b.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, an, bn] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (std::size_t i = 0; i < r->grad.size(); ++i) an->grad[i] += r->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (std::size_t i = 0; i < r->grad.size(); ++i) bn->grad[i] += r->grad[i];
            }
        };
    }
    return Tensor::from_node(res);
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * a.data()[i];
    auto res = detail::make_result(a.shape(), std::move(out), {a.node()});
    if (res->requires_grad) {
        auto an = a.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, an, c] {
            an->ensure_grad();
            for (std::size_t i = 0; i < r->grad.size(); ++i) an->grad[i] += c * r->grad[i];
        };
    }
    return Tensor::from_node(res);
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.data().size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    auto res = detail::make_result(a.shape(), std::move(out), {a.node()});
    if (res->requires_grad) {
        auto an = a.node();
        TensorNode* r = res.get();
        // subgradient at 0 is 0
        res->backward_fn = [r, an] {
            an->ensure_grad();
            for (std::size_t i = 0; i < r->grad.size(); ++i)
                if (an->data[i] > 0.0) an->grad[i] += r->grad[i];
        };
    }
    return Tensor::from_node(res);
}

inline Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    auto res = detail::make_result(Shape{1}, {s}, {a.node()});
    if (res->requires_grad) {
        auto an = a.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, an] {
            an->ensure_grad();
            for (std::size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += r->grad[0];
        };
    }
    return Tensor::from_node(res);
}

inline Tensor mean(const Tensor& a) {
    return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

// Dot product against a constant coefficient vector; the constant side never
// receives gradient. Used for stop-gradient weighted reductions.
inline Tensor dot_const(const Tensor& a, const std::vector<double>& coeffs) {
    if (static_cast<std::size_t>(a.numel()) != coeffs.size())
        throw std::invalid_argument("dot_const: length mismatch " + std::to_string(a.numel()) + " vs " +
                                    std::to_string(coeffs.size()));
    double s = 0.0;
    for (std::size_t i = 0; i < coeffs.size(); ++i) s += a.data()[i] * coeffs[i];
    auto res = detail::make_result(Shape{1}, {s}, {a.node()});
    if (res->requires_grad) {
        auto an = a.node();
        TensorNode* r = res.get();
        std::vector<double> c = coeffs;
        res->backward_fn = [r, an, c = std::move(c)] {
            an->ensure_grad();
            for (std::size_t i = 0; i < c.size(); ++i) an->grad[i] += c[i] * r->grad[0];
        };
    }
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                    shape_str(b.shape()));
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = a.data()[i * k + p];
            for (int j = 0; j < n; ++j) out[i * n + j] += av * b.data()[p * n + j];
        }
    auto res = detail::make_result(Shape{m, n}, std::move(out), {a.node(), b.node()});
    if (res->requires_grad) {
        auto an = a.node(); auto bn = b.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, an, bn, m, k, n] {
            if (an->requires_grad) {
                an->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int p = 0; p < k; ++p) {
                        double s = 0.0;
                        for (int j = 0; j < n; ++j) s += r->grad[i * n + j] * bn->data[p * n + j];
                        an->grad[i * k + p] += s;
                    }
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int p = 0; p < k; ++p)
                    for (int j = 0; j < n; ++j) {
                        double s = 0.0;
                        for (int i = 0; i < m; ++i) s += an->data[i * k + p] * r->grad[i * n + j];
                        bn->grad[p * n + j] += s;
                    }
            }
        };
    }
    return Tensor::from_node(res);
}

// Adds a length-n bias row to every row of an m x n matrix.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 2 || bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1])
        throw std::invalid_argument("add_bias: shapes " + shape_str(x.shape()) + " and " + shape_str(bias.shape()));
    const int m = x.shape()[0], n = x.shape()[1];
    std::vector<double> out(x.data().size());
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[i * n + j] = x.data()[i * n + j] + bias.data()[j];
    auto res = detail::make_result(x.shape(), std::move(out), {x.node(), bias.node()});
    if (res->requires_grad) {
        auto xn = x.node(); auto bn = bias.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, xn, bn, m, n] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < r->grad.size(); ++i) xn->grad[i] += r->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j) bn->grad[j] += r->grad[i * n + j];
            }
        };
    }
    return Tensor::from_node(res);
}

inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    return add_bias(matmul(x, weight), bias);
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

// Cross-correlation with zero padding. input: N x C x H x W, kernel: O x C x kh x kw.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, int stride, int padding) {
    if (input.shape().size() != 4 || kernel.shape().size() != 4)
        throw std::invalid_argument("conv2d: need 4-d input and kernel, got " + shape_str(input.shape()) + " and " +
                                    shape_str(kernel.shape()));
    const int N = input.shape()[0], C = input.shape()[1], H = input.shape()[2], W = input.shape()[3];
    const int O = kernel.shape()[0], KC = kernel.shape()[1], kh = kernel.shape()[2], kw = kernel.shape()[3];
    if (KC != C)
        throw std::invalid_argument("conv2d: channel mismatch, input " + shape_str(input.shape()) + " kernel " +
                                    shape_str(kernel.shape()));
    if (stride < 1 || padding < 0 || kh > H + 2 * padding || kw > W + 2 * padding)
        throw std::invalid_argument("conv2d: invalid geometry (kernel " + shape_str(kernel.shape()) + ", input " +
                                    shape_str(input.shape()) + ", stride " + std::to_string(stride) + ", padding " +
                                    std::to_string(padding) + ")");
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;

    std::vector<double> out(static_cast<std::size_t>(N) * O * Ho * Wo, 0.0);
    const auto& in = input.data();
    const auto& ker = kernel.data();
    for (int n = 0; n < N; ++n)
        for (int o = 0; o < O; ++o)
            for (int oh = 0; oh < Ho; ++oh)
                for (int ow = 0; ow < Wo; ++ow) {
                    double s = 0.0;
                    for (int c = 0; c < C; ++c)
                        for (int i = 0; i < kh; ++i) {
                            const int ih = oh * stride + i - padding;
                            if (ih < 0 || ih >= H) continue;
                            for (int j = 0; j < kw; ++j) {
                                const int iw = ow * stride + j - padding;
                                if (iw < 0 || iw >= W) continue;
                                s += in[((n * C + c) * H + ih) * W + iw] * ker[((o * C + c) * kh + i) * kw + j];
                            }
                        }
                    out[((n * O + o) * Ho + oh) * Wo + ow] = s;
                }

    auto res = detail::make_result(Shape{N, O, Ho, Wo}, std::move(out), {input.node(), kernel.node()});
    if (res->requires_grad) {
        auto in_n = input.node(); auto k_n = kernel.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, in_n, k_n, N, C, H, W, O, kh, kw, Ho, Wo, stride, padding] {
            if (in_n->requires_grad) in_n->ensure_grad();
            if (k_n->requires_grad) k_n->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int o = 0; o < O; ++o)
                    for (int oh = 0; oh < Ho; ++oh)
                        for (int ow = 0; ow < Wo; ++ow) {
                            const double g = r->grad[((n * O + o) * Ho + oh) * Wo + ow];
                            if (g == 0.0) continue;
                            for (int c = 0; c < C; ++c)
                                for (int i = 0; i < kh; ++i) {
                                    const int ih = oh * stride + i - padding;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int j = 0; j < kw; ++j) {
                                        const int iw = ow * stride + j - padding;
                                        if (iw < 0 || iw >= W) continue;
                                        const std::size_t ii = ((n * C + c) * H + ih) * W + iw;
                                        const std::size_t ki = ((o * C + c) * kh + i) * kw + j;
                                        if (in_n->requires_grad) in_n->grad[ii] += g * k_n->data[ki];
                                        if (k_n->requires_grad) k_n->grad[ki] += g * in_n->data[ii];
                                    }
                                }
                        }
        };
    }
    return Tensor::from_node(res);
}

// Per-channel bias for a N x C x H x W activation.
inline Tensor add_channel_bias(const Tensor& x, const Tensor& bias) {
    if (x.shape().size() != 4 || bias.shape().size() != 1 || bias.shape()[0] != x.shape()[1])
        throw std::invalid_argument("add_channel_bias: shapes " + shape_str(x.shape()) + " and " +
                                    shape_str(bias.shape()));
    const int N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    std::vector<double> out(x.data().size());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < HW; ++p) {
                const std::size_t i = (static_cast<std::size_t>(n) * C + c) * HW + p;
                out[i] = x.data()[i] + bias.data()[c];
            }
    auto res = detail::make_result(x.shape(), std::move(out), {x.node(), bias.node()});
    if (res->requires_grad) {
        auto xn = x.node(); auto bn = bias.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, xn, bn, N, C, HW] {
            if (xn->requires_grad) {
                xn->ensure_grad();
                for (std::size_t i = 0; i < r->grad.size(); ++i) xn->grad[i] += r->grad[i];
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c)
                        for (int p = 0; p < HW; ++p)
                            bn->grad[c] += r->grad[(static_cast<std::size_t>(n) * C + c) * HW + p];
            }
        };
    }
    return Tensor::from_node(res);
}

// Spatial mean per channel: N x C x H x W -> N x C.
inline Tensor global_avg_pool(const Tensor& x) {
    if (x.shape().size() != 4)
        throw std::invalid_argument("global_avg_pool: need 4-d input, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], HW = x.shape()[2] * x.shape()[3];
    std::vector<double> out(static_cast<std::size_t>(N) * C, 0.0);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int p = 0; p < HW; ++p) s += x.data()[(static_cast<std::size_t>(n) * C + c) * HW + p];
            out[n * C + c] = s / HW;
        }
    auto res = detail::make_result(Shape{N, C}, std::move(out), {x.node()});
    if (res->requires_grad) {
        auto xn = x.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, xn, N, C, HW] {
            xn->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double g = r->grad[n * C + c] / HW;
                    for (int p = 0; p < HW; ++p) xn->grad[(static_cast<std::size_t>(n) * C + c) * HW + p] += g;
                }
        };
    }
    return Tensor::from_node(res);
}

// ---------------------------------------------------------------------------
// Softmax
// ---------------------------------------------------------------------------

// Row-wise softened softmax over an N x K logit matrix, max-subtracted.
inline Tensor softmax(const Tensor& z, double temperature) {
    if (temperature <= 0.0)
        throw std::invalid_argument("softmax: temperature must be positive, got " + std::to_string(temperature));
    if (z.shape().size() != 2)
        throw std::invalid_argument("softmax: need 2-d logits, got " + shape_str(z.shape()));
    const int N = z.shape()[0], K = z.shape()[1];
    std::vector<double> out(z.data().size());
    for (int n = 0; n < N; ++n) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int k = 0; k < K; ++k) mx = std::max(mx, z.data()[n * K + k] / temperature);
        double denom = 0.0;
        for (int k = 0; k < K; ++k) {
            out[n * K + k] = std::exp(z.data()[n * K + k] / temperature - mx);
            denom += out[n * K + k];
        }
        for (int k = 0; k < K; ++k) out[n * K + k] /= denom;
    }
    auto res = detail::make_result(z.shape(), std::move(out), {z.node()});
    if (res->requires_grad) {
        auto zn = z.node();
        TensorNode* r = res.get();
        res->backward_fn = [r, zn, N, K, temperature] {
            zn->ensure_grad();
            for (int n = 0; n < N; ++n) {
                double dot = 0.0;
                for (int k = 0; k < K; ++k) dot += r->grad[n * K + k] * r->data[n * K + k];
                for (int k = 0; k < K; ++k)
                    zn->grad[n * K + k] += r->data[n * K + k] * (r->grad[n * K + k] - dot) / temperature;
            }
        };
    }
    return Tensor::from_node(res);
}

// Named trainable tensor; names are unique within one network.
struct Parameter {
    std::string name;
    Tensor value;
};

}  // namespace dskd
