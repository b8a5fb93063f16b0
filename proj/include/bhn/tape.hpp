#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "bhn/gemm.hpp"
#include "bhn/optim.hpp"
#include "bhn/tensor.hpp"

namespace bhn {

enum class Op : std::uint8_t {
    kLeaf,
    kMatmul,
    kAdd,
    kScale,
    kLeakyRelu,
    kSigmoid,
    kTanh,
    kSoftmaxLastDim,
    kAbs,
    kClampMax,
    kNegate,
    kMeanSquareError,
    kCosineSimilarityRows,
    kConcat,
    kSlice,
    kElementwiseMul,
    kTransposedConv2d,
    kConv2d,
    kLog,
    kExp,
    kSum,
    kReshape,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::kLeaf: return "leaf";
        case Op::kMatmul: return "matmul";
        case Op::kAdd: return "add";
        case Op::kScale: return "scale";
        case Op::kLeakyRelu: return "leaky_relu";
        case Op::kSigmoid: return "sigmoid";
        case Op::kTanh: return "tanh";
        case Op::kSoftmaxLastDim: return "softmax_lastdim";
        case Op::kAbs: return "abs";
        case Op::kClampMax: return "clamp_max";
        case Op::kNegate: return "negate";
        case Op::kMeanSquareError: return "mean_square_error";
        case Op::kCosineSimilarityRows: return "cosine_similarity_rows";
        case Op::kConcat: return "concat";
        case Op::kSlice: return "slice";
        case Op::kElementwiseMul: return "elementwise_mul";
        case Op::kTransposedConv2d: return "transposed_conv2d";
        case Op::kConv2d: return "conv2d_grad_helper";
        case Op::kLog: return "log";
        case Op::kExp: return "exp";
        case Op::kSum: return "sum";
        case Op::kReshape: return "reshape";
    }
    return "?";
}

/// Handle into a tape. Only valid for the tape that produced it.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

/// Records primitive operations as they execute and replays them in
/// reverse for gradients. One tape per forward/backward pass, confined
/// to a single thread; leaves bound to Parameters get their gradients
/// flushed on backward().
template <typename T>
class TapeT {
public:
    using Tensor = TensorT<T>;

    struct Node {
        Op op = Op::kLeaf;
        Shape shape;
        std::vector<T> value;
        std::vector<T> grad;       // allocated iff requires_grad
        bool requires_grad = false;
        std::array<int, 2> in{-1, -1};
        std::vector<int> more_in;  // concat inputs beyond the first two
        double c = 0.0;            // scale factor / clamp cap / leaky slope
        int lo = 0, hi = 0;        // slice bounds; conv stride/pad
        bool ta = false, tb = false;
        std::vector<T> saved;
        int binding = -1;          // index into bindings_ for bound leaves
    };

    bool check_finite = true;

    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }

    void reset() {
        nodes_.clear();
        bindings_.clear();
    }

    // ---- leaves ----

    Var leaf(Tensor t, bool requires_grad = false) {
        Node n;
        n.op = Op::kLeaf;
        n.shape = t.shape;
        n.value = std::move(t.data);
        n.requires_grad = requires_grad;
        return push(std::move(n));
    }

    Var constant(Tensor t) { return leaf(std::move(t), false); }

    /// Differentiable leaf bound to a parameter; backward() accumulates
    /// the leaf gradient into p.grad. Binding the same parameter twice
    /// sums both contributions.
    Var param(ParameterT<T>& p) {
        Var v = leaf(p.value, true);
        nodes_[v.id].binding = static_cast<int>(bindings_.size());
        bindings_.push_back(&p);
        return v;
    }

    // ---- access ----

    const Shape& shape(Var v) const { return node(v).shape; }
    const std::vector<T>& data(Var v) const { return node(v).value; }
    Tensor value(Var v) const { return Tensor(node(v).shape, node(v).value); }
    bool requires_grad(Var v) const { return node(v).requires_grad; }

    const std::vector<T>& grad(Var v) const {
        const Node& n = node(v);
        if (!n.requires_grad) fail("grad requested for a non-differentiable node");
        return n.grad;
    }
    Tensor grad_tensor(Var v) const { return Tensor(node(v).shape, grad(v)); }

    // ---- primitives ----

    Var matmul(Var a, Var b, bool trans_a = false, bool trans_b = false) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape.size() > 2 || nb.shape.size() > 2 || na.shape.empty() || nb.shape.empty())
            fail(shape_msg("matmul", na.shape, nb.shape) + " (rank 1 or 2 required)");
        // 1-d lhs is a row, 1-d rhs is a column; trans flags apply to the 2-d view
        int ar = na.shape.size() == 1 ? 1 : na.shape[0];
        int ac = na.shape.size() == 1 ? na.shape[0] : na.shape[1];
        int br = nb.shape.size() == 1 ? nb.shape[0] : nb.shape[0];
        int bc = nb.shape.size() == 1 ? 1 : nb.shape[1];
        const int m = trans_a ? ac : ar;
        const int k = trans_a ? ar : ac;
        const int k2 = trans_b ? bc : br;
        const int n = trans_b ? br : bc;
        if (k != k2) fail(shape_msg("matmul", na.shape, nb.shape) + " (inner dims differ)");
        Node out;
        out.op = Op::kMatmul;
        out.ta = trans_a;
        out.tb = trans_b;
        if (na.shape.size() == 1 && nb.shape.size() == 1) out.shape = {1};
        else if (nb.shape.size() == 1) out.shape = {m};
        else if (na.shape.size() == 1) out.shape = {n};
        else out.shape = {m, n};
        out.value.assign(static_cast<std::size_t>(m) * n, T(0));
        detail::gemm<T>(trans_a, trans_b, m, n, k, na.value.data(), nb.value.data(),
                        out.value.data(), false);
        out.lo = m;  // cache logical dims for backward
        out.hi = n;
        out.c = k;
        return finish(std::move(out), a, b);
    }

    Var add(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        Node out;
        out.op = Op::kAdd;
        if (na.shape == nb.shape) {
            out.shape = na.shape;
            out.value.resize(na.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[i] + nb.value[i];
        } else if (nb.value.size() == 1) {
            out.shape = na.shape;
            out.value.resize(na.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[i] + nb.value[0];
        } else if (na.value.size() == 1) {
            out.shape = nb.shape;
            out.value.resize(nb.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[0] + nb.value[i];
        } else if (nb.shape.size() == 1 && nb.shape[0] == last_dim(na.shape)) {
            // row-broadcast bias
            const std::size_t cols = nb.value.size();
            out.shape = na.shape;
            out.value.resize(na.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[i] + nb.value[i % cols];
        } else {
            fail(shape_msg("add", na.shape, nb.shape));
        }
        return finish(std::move(out), a, b);
    }

    Var scale(Var a, double c) {
        Node out = unary_shell(Op::kScale, a);
        out.c = c;
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = static_cast<T>(c) * na.value[i];
        return finish(std::move(out), a);
    }

    Var leaky_relu(Var a, double slope = 0.01) {
        Node out = unary_shell(Op::kLeakyRelu, a);
        out.c = slope;
        const Node& na = node(a);
        const T s = static_cast<T>(slope);
        for (std::size_t i = 0; i < na.value.size(); ++i) {
            const T x = na.value[i];
            out.value[i] = x > T(0) ? x : s * x;
        }
        return finish(std::move(out), a);
    }

    Var sigmoid(Var a) {
        Node out = unary_shell(Op::kSigmoid, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = T(1) / (T(1) + std::exp(-na.value[i]));
        return finish(std::move(out), a);
    }

    Var tanh(Var a) {
        Node out = unary_shell(Op::kTanh, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = std::tanh(na.value[i]);
        return finish(std::move(out), a);
    }

    Var softmax_lastdim(Var a) {
        Node out = unary_shell(Op::kSoftmaxLastDim, a);
        const Node& na = node(a);
        const std::size_t cols = static_cast<std::size_t>(last_dim(na.shape));
        const std::size_t rows = na.value.size() / cols;
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = na.value.data() + r * cols;
            T* y = out.value.data() + r * cols;
            T mx = x[0];
            for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
            T sum = 0;
            for (std::size_t j = 0; j < cols; ++j) {
                y[j] = std::exp(x[j] - mx);
                sum += y[j];
            }
            for (std::size_t j = 0; j < cols; ++j) y[j] /= sum;
        }
        return finish(std::move(out), a);
    }

    Var abs(Var a) {
        Node out = unary_shell(Op::kAbs, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = std::fabs(na.value[i]);
        return finish(std::move(out), a);
    }

    Var clamp_max(Var a, double cap) {
        Node out = unary_shell(Op::kClampMax, a);
        out.c = cap;
        const Node& na = node(a);
        const T m = static_cast<T>(cap);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = std::min(na.value[i], m);
        return finish(std::move(out), a);
    }

    Var negate(Var a) {
        Node out = unary_shell(Op::kNegate, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i) out.value[i] = -na.value[i];
        return finish(std::move(out), a);
    }

    Var mean_square_error(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape != nb.shape) fail(shape_msg("mean_square_error", na.shape, nb.shape));
        Node out;
        out.op = Op::kMeanSquareError;
        out.shape = {1};
        double acc = 0;
        for (std::size_t i = 0; i < na.value.size(); ++i) {
            const double d = static_cast<double>(na.value[i]) - static_cast<double>(nb.value[i]);
            acc += d * d;
        }
        out.value = {static_cast<T>(acc / static_cast<double>(na.value.size()))};
        return finish(std::move(out), a, b);
    }

    Var cosine_similarity_rows(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        if (na.shape != nb.shape || na.shape.size() > 2)
            fail(shape_msg("cosine_similarity_rows", na.shape, nb.shape));
        const std::size_t cols = static_cast<std::size_t>(last_dim(na.shape));
        const std::size_t rows = na.value.size() / cols;
        Node out;
        out.op = Op::kCosineSimilarityRows;
        out.shape = {static_cast<int>(rows)};
        out.value.resize(rows);
        out.saved.resize(rows * 3);  // dot, |a|, |b| per row
        for (std::size_t r = 0; r < rows; ++r) {
            const T* x = na.value.data() + r * cols;
            const T* y = nb.value.data() + r * cols;
            double dot = 0, nx = 0, ny = 0;
            for (std::size_t j = 0; j < cols; ++j) {
                dot += static_cast<double>(x[j]) * y[j];
                nx += static_cast<double>(x[j]) * x[j];
                ny += static_cast<double>(y[j]) * y[j];
            }
            if (nx == 0 || ny == 0)
                fail("cosine_similarity_rows: zero-norm vector at row " + std::to_string(r));
            const double la = std::sqrt(nx), lb = std::sqrt(ny);
            out.value[r] = static_cast<T>(dot / (la * lb));
            out.saved[r * 3] = static_cast<T>(dot);
            out.saved[r * 3 + 1] = static_cast<T>(la);
            out.saved[r * 3 + 2] = static_cast<T>(lb);
        }
        return finish(std::move(out), a, b);
    }

    Var concat(const std::vector<Var>& xs) {
        if (xs.empty()) fail("concat: no inputs");
        const Shape& head = node(xs[0]).shape;
        Shape lead(head.begin(), head.end() - 1);
        int total = 0;
        for (Var v : xs) {
            const Shape& s = node(v).shape;
            if (Shape(s.begin(), s.end() - 1) != lead)
                fail(shape_msg("concat", head, s) + " (leading dims differ)");
            total += s.back();
        }
        Node out;
        out.op = Op::kConcat;
        out.shape = lead;
        out.shape.push_back(total);
        out.value.resize(shape_numel(out.shape));
        std::size_t rows = 1;
        for (int d : lead) rows *= static_cast<std::size_t>(d);
        std::size_t off = 0;
        for (Var v : xs) {
            const Node& n = node(v);
            const std::size_t w = static_cast<std::size_t>(n.shape.back());
            for (std::size_t r = 0; r < rows; ++r)
                std::copy_n(n.value.data() + r * w, w,
                            out.value.data() + r * static_cast<std::size_t>(total) + off);
            off += w;
        }
        out.in = {xs[0].id, xs.size() > 1 ? xs[1].id : -1};
        for (std::size_t i = 2; i < xs.size(); ++i) out.more_in.push_back(xs[i].id);
        out.requires_grad = false;
        for (Var v : xs) out.requires_grad = out.requires_grad || node(v).requires_grad;
        return push_checked(std::move(out));
    }

    Var slice(Var a, int lo, int hi) {
        const Node& na = node(a);
        const int width = last_dim(na.shape);
        if (lo < 0 || hi > width || lo >= hi)
            fail("slice: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                 ") out of bounds for last dim " + std::to_string(width));
        Node out;
        out.op = Op::kSlice;
        out.lo = lo;
        out.hi = hi;
        out.shape = na.shape;
        out.shape.back() = hi - lo;
        const std::size_t rows = na.value.size() / static_cast<std::size_t>(width);
        const std::size_t w = static_cast<std::size_t>(hi - lo);
        out.value.resize(rows * w);
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(na.value.data() + r * static_cast<std::size_t>(width) + lo, w,
                        out.value.data() + r * w);
        return finish(std::move(out), a);
    }

    Var elementwise_mul(Var a, Var b) {
        const Node& na = node(a);
        const Node& nb = node(b);
        Node out;
        out.op = Op::kElementwiseMul;
        if (na.shape == nb.shape) {
            out.shape = na.shape;
            out.value.resize(na.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[i] * nb.value[i];
        } else if (nb.value.size() == 1) {
            out.shape = na.shape;
            out.value.resize(na.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[i] * nb.value[0];
        } else if (na.value.size() == 1) {
            out.shape = nb.shape;
            out.value.resize(nb.value.size());
            for (std::size_t i = 0; i < out.value.size(); ++i)
                out.value[i] = na.value[0] * nb.value[i];
        } else {
            fail(shape_msg("elementwise_mul", na.shape, nb.shape));
        }
        return finish(std::move(out), a, b);
    }

    /// x: [N,Cin,H,W], w: [Cin,Cout,kh,kw]; output [N,Cout,(H-1)s-2p+kh, ...].
    Var transposed_conv2d(Var x, Var w, int stride, int pad) {
        const Node& nx = node(x);
        const Node& nw = node(w);
        if (nx.shape.size() != 4 || nw.shape.size() != 4 || nx.shape[1] != nw.shape[0])
            fail(shape_msg("transposed_conv2d", nx.shape, nw.shape));
        const int N = nx.shape[0], Ci = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
        const int Co = nw.shape[1], kh = nw.shape[2], kw = nw.shape[3];
        const int Ho = (H - 1) * stride - 2 * pad + kh;
        const int Wo = (W - 1) * stride - 2 * pad + kw;
        if (Ho <= 0 || Wo <= 0) fail("transposed_conv2d: empty output");
        Node out;
        out.op = Op::kTransposedConv2d;
        out.lo = stride;
        out.hi = pad;
        out.shape = {N, Co, Ho, Wo};
        out.value.assign(shape_numel(out.shape), T(0));
        tconv_forward(nx.value.data(), nw.value.data(), out.value.data(), N, Ci, H, W, Co,
                      kh, kw, stride, pad, Ho, Wo);
        return finish(std::move(out), x, w);
    }

    /// Plain cross-correlation; x: [N,Cin,H,W], w: [Cout,Cin,kh,kw]. Also
    /// exercised standalone so the transposed-conv gradients have an
    /// independently tested counterpart.
    Var conv2d(Var x, Var w, int stride, int pad) {
        const Node& nx = node(x);
        const Node& nw = node(w);
        if (nx.shape.size() != 4 || nw.shape.size() != 4 || nx.shape[1] != nw.shape[1])
            fail(shape_msg("conv2d_grad_helper", nx.shape, nw.shape));
        const int N = nx.shape[0], Ci = nx.shape[1], H = nx.shape[2], W = nx.shape[3];
        const int Co = nw.shape[0], kh = nw.shape[2], kw = nw.shape[3];
        const int Ho = (H + 2 * pad - kh) / stride + 1;
        const int Wo = (W + 2 * pad - kw) / stride + 1;
        if (Ho <= 0 || Wo <= 0) fail("conv2d_grad_helper: empty output");
        Node out;
        out.op = Op::kConv2d;
        out.lo = stride;
        out.hi = pad;
        out.shape = {N, Co, Ho, Wo};
        out.value.assign(shape_numel(out.shape), T(0));
        conv_forward(nx.value.data(), nw.value.data(), out.value.data(), N, Ci, H, W, Co,
                     kh, kw, stride, pad, Ho, Wo);
        return finish(std::move(out), x, w);
    }

    Var log(Var a) {
        Node out = unary_shell(Op::kLog, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i) {
            if (!(na.value[i] > T(0)))
                fail("log: non-positive input " + std::to_string(na.value[i]));
            out.value[i] = std::log(na.value[i]);
        }
        return finish(std::move(out), a);
    }

    Var exp(Var a) {
        Node out = unary_shell(Op::kExp, a);
        const Node& na = node(a);
        for (std::size_t i = 0; i < na.value.size(); ++i)
            out.value[i] = std::exp(na.value[i]);
        return finish(std::move(out), a);
    }

    Var sum(Var a) {
        const Node& na = node(a);
        Node out;
        out.op = Op::kSum;
        out.shape = {1};
        double acc = 0;
        for (const T v : na.value) acc += static_cast<double>(v);
        out.value = {static_cast<T>(acc)};
        return finish(std::move(out), a);
    }

    Var reshape(Var a, Shape s) {
        const Node& na = node(a);
        if (shape_numel(s) != na.value.size())
            fail("reshape: " + shape_str(na.shape) + " to " + shape_str(s) +
                 " changes element count");
        Node out;
        out.op = Op::kReshape;
        out.shape = std::move(s);
        out.value = na.value;
        return finish(std::move(out), a);
    }

    // ---- reverse pass ----

    void backward(Var root) {
        if (nodes_.empty()) fail("backward: empty tape");
        Node& r = node_mut(root);
        if (r.value.size() != 1) fail("backward: root must be scalar, got " + shape_str(r.shape));
        if (!r.requires_grad) return flush_bindings();  // nothing differentiable below
        r.grad[0] += T(1);
        for (int id = root.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (!n.requires_grad || n.op == Op::kLeaf) continue;
            step_backward(n);
        }
        flush_bindings();
    }

private:
    std::vector<Node> nodes_;
    std::vector<ParameterT<T>*> bindings_;

    static int last_dim(const Shape& s) { return s.empty() ? 1 : s.back(); }

    static std::string shape_msg(const char* prim, const Shape& a, const Shape& b) {
        return std::string(prim) + ": incompatible shapes " + shape_str(a) + " and " +
               shape_str(b);
    }

    const Node& node(Var v) const { return nodes_.at(static_cast<std::size_t>(v.id)); }
    Node& node_mut(Var v) { return nodes_.at(static_cast<std::size_t>(v.id)); }

    Node unary_shell(Op op, Var a) {
        Node out;
        out.op = op;
        out.shape = node(a).shape;
        out.value.resize(node(a).value.size());
        return out;
    }

    Var finish(Node&& out, Var a, Var b = Var{}) {
        out.in = {a.id, b.id};
        out.requires_grad = node(a).requires_grad || (b.valid() && node(b).requires_grad);
        return push_checked(std::move(out));
    }

    Var push_checked(Node&& n) {
        if (check_finite) {
            for (const T v : n.value)
                if (!std::isfinite(static_cast<double>(v)))
                    fail(std::string(op_name(n.op)) + ": non-finite output at node " +
                         std::to_string(nodes_.size()));
        }
        return push(std::move(n));
    }

    Var push(Node&& n) {
        if (check_finite && n.op == Op::kLeaf) {
            for (const T v : n.value)
                if (!std::isfinite(static_cast<double>(v)))
                    fail("leaf: non-finite input at node " + std::to_string(nodes_.size()));
        }
        if (n.requires_grad) n.grad.assign(n.value.size(), T(0));
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size() - 1)};
    }

    void flush_bindings() {
        for (const Node& n : nodes_) {
            if (n.binding < 0 || !n.requires_grad) continue;
            ParameterT<T>* p = bindings_[static_cast<std::size_t>(n.binding)];
            for (std::size_t i = 0; i < n.grad.size(); ++i) p->grad.data[i] += n.grad[i];
            p->has_grad = true;
        }
    }

    void step_backward(Node& n) {
        Node& a = nodes_[static_cast<std::size_t>(n.in[0])];
        Node* b = n.in[1] >= 0 ? &nodes_[static_cast<std::size_t>(n.in[1])] : nullptr;
        const std::vector<T>& g = n.grad;
        switch (n.op) {
            case Op::kMatmul: backward_matmul(n, a, *b); break;
            case Op::kAdd: {
                if (a.shape == n.shape && b->shape == n.shape) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (a.requires_grad) a.grad[i] += g[i];
                        if (b->requires_grad) b->grad[i] += g[i];
                    }
                } else {
                    backward_broadcast(a, g, n.shape);
                    backward_broadcast(*b, g, n.shape);
                }
                break;
            }
            case Op::kScale: {
                const T c = static_cast<T>(n.c);
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += c * g[i];
                break;
            }
            case Op::kLeakyRelu: {
                const T s = static_cast<T>(n.c);
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i)
                        a.grad[i] += (a.value[i] > T(0) ? g[i] : s * g[i]);
                break;
            }
            case Op::kSigmoid: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const T y = n.value[i];
                        a.grad[i] += g[i] * y * (T(1) - y);
                    }
                break;
            }
            case Op::kTanh: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const T y = n.value[i];
                        a.grad[i] += g[i] * (T(1) - y * y);
                    }
                break;
            }
            case Op::kSoftmaxLastDim: {
                if (!a.requires_grad) break;
                const std::size_t cols = static_cast<std::size_t>(last_dim(n.shape));
                const std::size_t rows = n.value.size() / cols;
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* y = n.value.data() + r * cols;
                    const T* gr = g.data() + r * cols;
                    T dot = 0;
                    for (std::size_t j = 0; j < cols; ++j) dot += gr[j] * y[j];
                    for (std::size_t j = 0; j < cols; ++j)
                        a.grad[r * cols + j] += y[j] * (gr[j] - dot);
                }
                break;
            }
            case Op::kAbs: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        const T x = a.value[i];
                        a.grad[i] += x > T(0) ? g[i] : (x < T(0) ? -g[i] : T(0));
                    }
                break;
            }
            case Op::kClampMax: {
                const T cap = static_cast<T>(n.c);
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i)
                        if (a.value[i] <= cap) a.grad[i] += g[i];
                break;
            }
            case Op::kNegate: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] -= g[i];
                break;
            }
            case Op::kMeanSquareError: {
                const T s = g[0] * T(2) / static_cast<T>(a.value.size());
                for (std::size_t i = 0; i < a.value.size(); ++i) {
                    const T d = a.value[i] - b->value[i];
                    if (a.requires_grad) a.grad[i] += s * d;
                    if (b->requires_grad) b->grad[i] -= s * d;
                }
                break;
            }
            case Op::kCosineSimilarityRows: {
                const std::size_t rows = n.value.size();
                const std::size_t cols = a.value.size() / rows;
                for (std::size_t r = 0; r < rows; ++r) {
                    const T dot = n.saved[r * 3];
                    const T la = n.saved[r * 3 + 1];
                    const T lb = n.saved[r * 3 + 2];
                    const T inv = T(1) / (la * lb);
                    const T gr = g[r];
                    for (std::size_t j = 0; j < cols; ++j) {
                        const T x = a.value[r * cols + j];
                        const T y = b->value[r * cols + j];
                        if (a.requires_grad)
                            a.grad[r * cols + j] += gr * (y * inv - dot * x / (la * la) * inv);
                        if (b->requires_grad)
                            b->grad[r * cols + j] += gr * (x * inv - dot * y / (lb * lb) * inv);
                    }
                }
                break;
            }
            case Op::kConcat: {
                std::vector<int> ids = {n.in[0]};
                if (n.in[1] >= 0) ids.push_back(n.in[1]);
                ids.insert(ids.end(), n.more_in.begin(), n.more_in.end());
                const std::size_t total = static_cast<std::size_t>(n.shape.back());
                const std::size_t rows = n.value.size() / total;
                std::size_t off = 0;
                for (int id : ids) {
                    Node& src = nodes_[static_cast<std::size_t>(id)];
                    const std::size_t w = static_cast<std::size_t>(src.shape.back());
                    if (src.requires_grad)
                        for (std::size_t r = 0; r < rows; ++r)
                            for (std::size_t j = 0; j < w; ++j)
                                src.grad[r * w + j] += g[r * total + off + j];
                    off += w;
                }
                break;
            }
            case Op::kSlice: {
                if (!a.requires_grad) break;
                const std::size_t width = static_cast<std::size_t>(last_dim(a.shape));
                const std::size_t w = static_cast<std::size_t>(n.hi - n.lo);
                const std::size_t rows = n.value.size() / w;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < w; ++j)
                        a.grad[r * width + static_cast<std::size_t>(n.lo) + j] += g[r * w + j];
                break;
            }
            case Op::kElementwiseMul: {
                if (a.shape == b->shape) {
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (a.requires_grad) a.grad[i] += g[i] * b->value[i];
                        if (b->requires_grad) b->grad[i] += g[i] * a.value[i];
                    }
                } else if (b->value.size() == 1) {
                    T acc = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (a.requires_grad) a.grad[i] += g[i] * b->value[0];
                        acc += g[i] * a.value[i];
                    }
                    if (b->requires_grad) b->grad[0] += acc;
                } else {  // a is the scalar
                    T acc = 0;
                    for (std::size_t i = 0; i < g.size(); ++i) {
                        if (b->requires_grad) b->grad[i] += g[i] * a.value[0];
                        acc += g[i] * b->value[i];
                    }
                    if (a.requires_grad) a.grad[0] += acc;
                }
                break;
            }
            case Op::kTransposedConv2d: backward_tconv(n, a, *b); break;
            case Op::kConv2d: backward_conv(n, a, *b); break;
            case Op::kLog: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] / a.value[i];
                break;
            }
            case Op::kExp: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i] * n.value[i];
                break;
            }
            case Op::kSum: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < a.value.size(); ++i) a.grad[i] += g[0];
                break;
            }
            case Op::kReshape: {
                if (a.requires_grad)
                    for (std::size_t i = 0; i < g.size(); ++i) a.grad[i] += g[i];
                break;
            }
            case Op::kLeaf:
                break;
        }
    }

    // Reduce an output-shaped gradient onto a possibly-broadcast input.
    void backward_broadcast(Node& in, const std::vector<T>& g, const Shape& out_shape) {
        if (!in.requires_grad) return;
        if (in.shape == out_shape) {
            for (std::size_t i = 0; i < g.size(); ++i) in.grad[i] += g[i];
        } else if (in.value.size() == 1) {
            T acc = 0;
            for (const T v : g) acc += v;
            in.grad[0] += acc;
        } else {  // row-broadcast vector over the last dim
            const std::size_t cols = in.value.size();
            for (std::size_t i = 0; i < g.size(); ++i) in.grad[i % cols] += g[i];
        }
    }

    void backward_matmul(Node& n, Node& a, Node& b) {
        const int m = n.lo, nn = n.hi, k = static_cast<int>(n.c);
        // dOpA = g * opB^T ; dOpB = opA^T * g, with the trans flags undone so
        // the accumulation lands in the operand's own storage layout.
        if (a.requires_grad) {
            if (!n.ta)
                detail::gemm<T>(false, !n.tb, m, k, nn, n.grad.data(), b.value.data(),
                                a.grad.data(), true);
            else
                detail::gemm<T>(n.tb, true, k, m, nn, b.value.data(), n.grad.data(),
                                a.grad.data(), true);
        }
        if (b.requires_grad) {
            if (!n.tb)
                detail::gemm<T>(!n.ta, false, k, nn, m, a.value.data(), n.grad.data(),
                                b.grad.data(), true);
            else
                detail::gemm<T>(true, n.ta, nn, k, m, n.grad.data(), a.value.data(),
                                b.grad.data(), true);
        }
    }

    static void conv_forward(const T* x, const T* w, T* y, int N, int Ci, int H, int W,
                             int Co, int kh, int kw, int s, int p, int Ho, int Wo) {
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        T acc = 0;
                        for (int ci = 0; ci < Ci; ++ci)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * s - p + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * s - p + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    acc += x[((static_cast<std::size_t>(n) * Ci + ci) * H + iy) * W + ix] *
                                           w[((static_cast<std::size_t>(co) * Ci + ci) * kh + ky) * kw + kx];
                                }
                            }
                        y[((static_cast<std::size_t>(n) * Co + co) * Ho + oy) * Wo + ox] = acc;
                    }
    }

    static void tconv_forward(const T* x, const T* w, T* y, int N, int Ci, int H, int W,
                              int Co, int kh, int kw, int s, int p, int Ho, int Wo) {
        // Gather form: y[n,co,oy,ox] = sum over (ci,ky,kx) with iy*s-p+ky == oy.
        for (int n = 0; n < N; ++n)
            for (int ci = 0; ci < Ci; ++ci)
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix) {
                        const T v = x[((static_cast<std::size_t>(n) * Ci + ci) * H + iy) * W + ix];
                        if (v == T(0)) continue;
                        for (int co = 0; co < Co; ++co)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int oy = iy * s - p + ky;
                                if (oy < 0 || oy >= Ho) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ox = ix * s - p + kx;
                                    if (ox < 0 || ox >= Wo) continue;
                                    y[((static_cast<std::size_t>(n) * Co + co) * Ho + oy) * Wo + ox] +=
                                        v * w[((static_cast<std::size_t>(ci) * Co + co) * kh + ky) * kw + kx];
                                }
                            }
                    }
    }

    void backward_conv(Node& n, Node& x, Node& w) {
        const int s = n.lo, p = n.hi;
        const int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int Co = w.shape[0], kh = w.shape[2], kw = w.shape[3];
        const int Ho = n.shape[2], Wo = n.shape[3];
        const std::vector<T>& g = n.grad;
        for (int nn = 0; nn < N; ++nn)
            for (int co = 0; co < Co; ++co)
                for (int oy = 0; oy < Ho; ++oy)
                    for (int ox = 0; ox < Wo; ++ox) {
                        const T gv = g[((static_cast<std::size_t>(nn) * Co + co) * Ho + oy) * Wo + ox];
                        if (gv == T(0)) continue;
                        for (int ci = 0; ci < Ci; ++ci)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int iy = oy * s - p + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ix = ox * s - p + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    const std::size_t xi =
                                        ((static_cast<std::size_t>(nn) * Ci + ci) * H + iy) * W + ix;
                                    const std::size_t wi =
                                        ((static_cast<std::size_t>(co) * Ci + ci) * kh + ky) * kw + kx;
                                    if (x.requires_grad) x.grad[xi] += gv * w.value[wi];
                                    if (w.requires_grad) w.grad[wi] += gv * x.value[xi];
                                }
                            }
                    }
    }

    void backward_tconv(Node& n, Node& x, Node& w) {
        const int s = n.lo, p = n.hi;
        const int N = x.shape[0], Ci = x.shape[1], H = x.shape[2], W = x.shape[3];
        const int Co = w.shape[1], kh = w.shape[2], kw = w.shape[3];
        const int Ho = n.shape[2], Wo = n.shape[3];
        const std::vector<T>& g = n.grad;
        for (int nn = 0; nn < N; ++nn)
            for (int ci = 0; ci < Ci; ++ci)
                for (int iy = 0; iy < H; ++iy)
                    for (int ix = 0; ix < W; ++ix) {
                        const std::size_t xi =
                            ((static_cast<std::size_t>(nn) * Ci + ci) * H + iy) * W + ix;
                        T xacc = 0;
                        for (int co = 0; co < Co; ++co)
                            for (int ky = 0; ky < kh; ++ky) {
                                const int oy = iy * s - p + ky;
                                if (oy < 0 || oy >= Ho) continue;
                                for (int kx = 0; kx < kw; ++kx) {
                                    const int ox = ix * s - p + kx;
                                    if (ox < 0 || ox >= Wo) continue;
                                    const T gv =
                                        g[((static_cast<std::size_t>(nn) * Co + co) * Ho + oy) * Wo + ox];
                                    const std::size_t wi =
                                        ((static_cast<std::size_t>(ci) * Co + co) * kh + ky) * kw + kx;
                                    if (x.requires_grad) xacc += gv * w.value[wi];
                                    if (w.requires_grad) w.grad[wi] += gv * x.value[xi];
                                }
                            }
                        if (x.requires_grad) x.grad[xi] += xacc;
                    }
    }
};

using Tape = TapeT<float>;

}  // namespace bhn
