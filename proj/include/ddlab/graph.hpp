#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "ddlab/tensor.hpp"

namespace ddlab {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline void matmul_kernel(const Tensor& a, const Tensor& b, Tensor& out) {
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Eigen::Map<const RowMat> A(a.data(), m, k);
    Eigen::Map<const RowMat> B(b.data(), k, n);
    Eigen::Map<RowMat> C(out.data(), m, n);
    C.noalias() = A * B;
}

}  // namespace detail

/// Reverse-mode automatic differentiation over a dynamically built graph.
///
/// Values are evaluated eagerly at node construction. `backward` emits the
/// gradient computation as ordinary graph nodes, which makes gradients
/// differentiable again: calling `backward` on a node produced by a previous
/// `backward` yields second-order derivatives. This is what powers both the
/// unrolled-training gradient and the gradient-of-gradient updates.
class Graph {
public:
    using Id = std::int32_t;

    enum class Op : std::uint8_t {
        Input, Constant,
        Add, Sub, Mul, Div, Neg, Scale, AddScalar,
        Exp, Log, Sqrt, Abs, Relu,
        ReluMask, SignConst, RowMaxConst, StopGrad,   // gradient blockers
        SumAll, BroadcastAll,
        SumAxis0, BroadcastRow,
        SumCols, BroadcastCol,
        MatMul, Transpose, Reshape,
        GatherRows, ScatterRows,
        SelectLabels, ScatterLabels,
        Im2Col3, Col2Im3,
        AvgPool2, UnpoolAvg2, Upsample2, SumPool2,
    };

    std::size_t node_count() const { return nodes_.size(); }

    const Tensor& value(Id id) const { return nodes_[static_cast<std::size_t>(id)].value; }

    Id input(Tensor v) { return push(Op::Input, {}, std::move(v), true); }
    Id constant(Tensor v) { return push(Op::Constant, {}, std::move(v), false); }
    Id zeros(const std::vector<int>& shape) { return constant(Tensor(shape)); }

    Id add(Id a, Id b) {
        check_same(a, b, "add");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += vb[i];
        return push(Op::Add, {a, b}, std::move(out));
    }

    Id sub(Id a, Id b) {
        check_same(a, b, "sub");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] -= vb[i];
        return push(Op::Sub, {a, b}, std::move(out));
    }

    Id mul(Id a, Id b) {
        check_same(a, b, "mul");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] *= vb[i];
        return push(Op::Mul, {a, b}, std::move(out));
    }

    Id div(Id a, Id b) {
        check_same(a, b, "div");
        Tensor out = value(a);
        const Tensor& vb = value(b);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] /= vb[i];
        return push(Op::Div, {a, b}, std::move(out));
    }

    Id neg(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = -v;
        return push(Op::Neg, {a}, std::move(out));
    }

    Id scale(Id a, double c) {
        Tensor out = value(a);
        for (double& v : out.vec()) v *= c;
        Id id = push(Op::Scale, {a}, std::move(out));
        node(id).c = c;
        return id;
    }

    Id add_scalar(Id a, double c) {
        Tensor out = value(a);
        for (double& v : out.vec()) v += c;
        Id id = push(Op::AddScalar, {a}, std::move(out));
        node(id).c = c;
        return id;
    }

    Id exp(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = std::exp(v);
        return push(Op::Exp, {a}, std::move(out));
    }

    Id log(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = std::log(v);
        return push(Op::Log, {a}, std::move(out));
    }

    Id sqrt(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = std::sqrt(v);
        return push(Op::Sqrt, {a}, std::move(out));
    }

    Id abs(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = std::abs(v);
        return push(Op::Abs, {a}, std::move(out));
    }

    Id relu(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = v > 0.0 ? v : 0.0;
        return push(Op::Relu, {a}, std::move(out));
    }

    /// 1 where a > 0, else 0. Treated as locally constant: carries no gradient.
    Id relu_mask(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = v > 0.0 ? 1.0 : 0.0;
        return push(Op::ReluMask, {a}, std::move(out), false, true);
    }

    /// sign(a) with zero gradient.
    Id sign_const(Id a) {
        Tensor out = value(a);
        for (double& v : out.vec()) v = v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0);
        return push(Op::SignConst, {a}, std::move(out), false, true);
    }

    /// Per-row maximum of a [m x n] matrix, shape [m], zero gradient.
    /// Used to shift logits inside a numerically stable log-sum-exp; the
    /// shift is mathematically exact for any constant, so blocking its
    /// gradient leaves all derivatives of the loss unchanged.
    Id rowmax_const(Id a) {
        const Tensor& v = value(a);
        const int m = v.dim(0), n = v.dim(1);
        Tensor out({m});
        for (int r = 0; r < m; ++r) {
            double mx = v.at(r, 0);
            for (int c = 1; c < n; ++c) mx = std::max(mx, v.at(r, c));
            out[static_cast<std::size_t>(r)] = mx;
        }
        return push(Op::RowMaxConst, {a}, std::move(out), false, true);
    }

    Id stop_grad(Id a) {
        return push(Op::StopGrad, {a}, Tensor(value(a)), false, true);
    }

    Id sum_all(Id a) {
        double s = 0.0;
        for (double v : value(a).vec()) s += v;
        return push(Op::SumAll, {a}, Tensor::scalar(s));
    }

    Id broadcast_all(Id a, const std::vector<int>& shape) {
        if (value(a).size() != 1) throw ContractError("broadcast_all expects scalar");
        Tensor out(shape, value(a)[0]);
        Id id = push(Op::BroadcastAll, {a}, std::move(out));
        node(id).shape = shape;
        return id;
    }

    /// [m x n] -> [n], summing over rows.
    Id sum_axis0(Id a) {
        const Tensor& v = value(a);
        const int m = v.dim(0), n = v.cols();
        Tensor out({n});
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) out[static_cast<std::size_t>(c)] += v.vec()[static_cast<std::size_t>(r) * n + c];
        return push(Op::SumAxis0, {a}, std::move(out));
    }

    /// [n] -> [m x n], repeating the row m times.
    Id broadcast_row(Id a, int m) {
        const Tensor& v = value(a);
        const int n = static_cast<int>(v.size());
        Tensor out({m, n});
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) out.at(r, c) = v[static_cast<std::size_t>(c)];
        Id id = push(Op::BroadcastRow, {a}, std::move(out));
        node(id).m = m;
        return id;
    }

    /// [m x n] -> [m], summing over columns.
    Id sum_cols(Id a) {
        const Tensor& v = value(a);
        const int m = v.dim(0), n = v.cols();
        Tensor out({m});
        for (int r = 0; r < m; ++r) {
            double s = 0.0;
            for (int c = 0; c < n; ++c) s += v.vec()[static_cast<std::size_t>(r) * n + c];
            out[static_cast<std::size_t>(r)] = s;
        }
        return push(Op::SumCols, {a}, std::move(out));
    }

    /// [m] -> [m x n], repeating the column n times.
    Id broadcast_col(Id a, int n) {
        const Tensor& v = value(a);
        const int m = static_cast<int>(v.size());
        Tensor out({m, n});
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) out.at(r, c) = v[static_cast<std::size_t>(r)];
        Id id = push(Op::BroadcastCol, {a}, std::move(out));
        node(id).m = n;
        return id;
    }

    Id matmul(Id a, Id b) {
        const Tensor& va = value(a);
        const Tensor& vb = value(b);
        if (va.rank() != 2 || vb.rank() != 2 || va.dim(1) != vb.dim(0))
            throw ContractError("matmul shape mismatch");
        Tensor out({va.dim(0), vb.dim(1)});
        detail::matmul_kernel(va, vb, out);
        return push(Op::MatMul, {a, b}, std::move(out));
    }

    Id transpose(Id a) {
        const Tensor& v = value(a);
        if (v.rank() != 2) throw ContractError("transpose expects rank-2");
        const int m = v.dim(0), n = v.dim(1);
        Tensor out({n, m});
        for (int r = 0; r < m; ++r)
            for (int c = 0; c < n; ++c) out.at(c, r) = v.at(r, c);
        return push(Op::Transpose, {a}, std::move(out));
    }

    Id reshape(Id a, std::vector<int> shape) {
        Tensor out = value(a).reshaped(shape);
        Id id = push(Op::Reshape, {a}, std::move(out));
        node(id).shape = value(a).shape();
        return id;
    }

    /// Select rows of a [m x n] matrix. Rows may repeat.
    Id gather_rows(Id a, std::shared_ptr<const std::vector<int>> rows) {
        const Tensor& v = value(a);
        const int n = v.cols();
        const int src_rows = v.dim(0);  // read before push: nodes_ may reallocate
        Tensor out({static_cast<int>(rows->size()), n});
        for (std::size_t i = 0; i < rows->size(); ++i) {
            const double* src = v.data() + static_cast<std::size_t>((*rows)[i]) * n;
            std::copy(src, src + n, out.data() + i * static_cast<std::size_t>(n));
        }
        Id id = push(Op::GatherRows, {a}, std::move(out));
        node(id).indices = std::move(rows);
        node(id).m = src_rows;
        return id;
    }

    /// Adjoint of gather_rows: scatter-add rows of a into an [m x n] zero matrix.
    Id scatter_rows(Id a, std::shared_ptr<const std::vector<int>> rows, int m) {
        const Tensor& v = value(a);
        const int n = v.cols();
        Tensor out({m, n});
        for (std::size_t i = 0; i < rows->size(); ++i) {
            double* dst = out.data() + static_cast<std::size_t>((*rows)[i]) * n;
            const double* src = v.data() + i * static_cast<std::size_t>(n);
            for (int c = 0; c < n; ++c) dst[c] += src[c];
        }
        Id id = push(Op::ScatterRows, {a}, std::move(out));
        node(id).indices = std::move(rows);
        node(id).m = m;
        return id;
    }

    /// out[i] = a[i, labels[i]] for a [m x K] matrix, shape [m].
    Id select_labels(Id a, std::shared_ptr<const std::vector<int>> labels) {
        const Tensor& v = value(a);
        const int n = v.dim(1);
        Tensor out({v.dim(0)});
        for (int r = 0; r < v.dim(0); ++r)
            out[static_cast<std::size_t>(r)] = v.at(r, (*labels)[static_cast<std::size_t>(r)]);
        Id id = push(Op::SelectLabels, {a}, std::move(out));
        node(id).indices = std::move(labels);
        node(id).m = n;
        return id;
    }

    /// Adjoint of select_labels: out[i, labels[i]] = a[i], zero elsewhere.
    Id scatter_labels(Id a, std::shared_ptr<const std::vector<int>> labels, int num_cols) {
        const Tensor& v = value(a);
        const int m = static_cast<int>(v.size());
        Tensor out({m, num_cols});
        for (int r = 0; r < m; ++r)
            out.at(r, (*labels)[static_cast<std::size_t>(r)]) += v[static_cast<std::size_t>(r)];
        Id id = push(Op::ScatterLabels, {a}, std::move(out));
        node(id).indices = std::move(labels);
        node(id).m = num_cols;
        return id;
    }

    struct ImageDims {
        int n, h, w, c;
        bool operator==(const ImageDims&) const = default;
    };

    /// 3x3, stride-1, zero-pad-1 patch extraction.
    /// [n*h*w*c] image batch -> [n*h*w, 9*c] column matrix; column order is
    /// (dy, dx, channel).
    Id im2col3(Id a, ImageDims d) {
        check_image(a, d, "im2col3");
        Tensor out({d.n * d.h * d.w, 9 * d.c});
        im2col3_kernel(value(a), d, out, /*transposed=*/false);
        Id id = push(Op::Im2Col3, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// Adjoint of im2col3: scatter-add 9*c columns back into image positions.
    Id col2im3(Id a, ImageDims d) {
        const Tensor& v = value(a);
        if (v.dim(0) != d.n * d.h * d.w || v.dim(1) != 9 * d.c)
            throw ContractError("col2im3 shape mismatch");
        Tensor out({d.n, d.h, d.w, d.c});
        im2col3_kernel(v, d, out, /*transposed=*/true);
        Id id = push(Op::Col2Im3, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// 2x2 average pooling; h and w must be even.
    Id avgpool2(Id a, ImageDims d) {
        check_image(a, d, "avgpool2");
        check_even(d, "avgpool2");
        Tensor out({d.n, d.h / 2, d.w / 2, d.c});
        pool2_kernel(value(a), d, out, PoolKind::Avg, /*up=*/false);
        Id id = push(Op::AvgPool2, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// Adjoint of avgpool2: each input cell receives a quarter of its pool value.
    Id unpool_avg2(Id a, ImageDims d) {
        check_even(d, "unpool_avg2");
        check_half_image(a, d, "unpool_avg2");
        Tensor out({d.n, d.h, d.w, d.c});
        pool2_kernel(value(a), d, out, PoolKind::Avg, /*up=*/true);
        Id id = push(Op::UnpoolAvg2, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// Nearest-neighbour 2x upsampling: [n,h,w,c] -> [n,2h,2w,c].
    /// `d` names the *output* dims (2h x 2w), matching its adjoint sumpool2.
    Id upsample2(Id a, ImageDims d) {
        check_even(d, "upsample2");
        check_half_image(a, d, "upsample2");
        Tensor out({d.n, d.h, d.w, d.c});
        pool2_kernel(value(a), d, out, PoolKind::Sum, /*up=*/true);
        Id id = push(Op::Upsample2, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// 2x2 sum pooling on an [n,h,w,c] input with even h, w.
    Id sumpool2(Id a, ImageDims d) {
        check_image(a, d, "sumpool2");
        check_even(d, "sumpool2");
        Tensor out({d.n, d.h / 2, d.w / 2, d.c});
        pool2_kernel(value(a), d, out, PoolKind::Sum, /*up=*/false);
        Id id = push(Op::SumPool2, {a}, std::move(out));
        node(id).img = d;
        return id;
    }

    /// Gradients of a scalar node with respect to each node in `wrt`.
    /// The gradient computation is appended to the graph as regular nodes,
    /// so the returned ids can themselves be differentiated.
    std::vector<Id> backward(Id root, std::span<const Id> wrt) {
        if (value(root).size() != 1) throw ContractError("backward root must be scalar");
        const std::size_t n0 = nodes_.size();
        std::vector<Id> adjoint(n0, kNone);
        std::vector<bool> needed(n0, false);

        // restrict work to differentiable ancestors of the root
        std::vector<Id> stack{root};
        needed[static_cast<std::size_t>(root)] = true;
        while (!stack.empty()) {
            Id cur = stack.back();
            stack.pop_back();
            const NodeRec& nd = node(cur);
            if (nd.blocks_grad) continue;
            for (int i = 0; i < nd.nin; ++i) {
                Id in = nd.in[static_cast<std::size_t>(i)];
                if (!needed[static_cast<std::size_t>(in)] && node(in).requires_grad) {
                    needed[static_cast<std::size_t>(in)] = true;
                    stack.push_back(in);
                }
            }
        }

        adjoint[static_cast<std::size_t>(root)] =
            constant(Tensor(value(root).shape(), 1.0));

        for (Id id = static_cast<Id>(n0) - 1; id >= 0; --id) {
            if (!needed[static_cast<std::size_t>(id)]) continue;
            Id gy = adjoint[static_cast<std::size_t>(id)];
            if (gy == kNone) continue;  // unreachable from root
            propagate(id, gy, adjoint, needed);
        }

        std::vector<Id> out;
        out.reserve(wrt.size());
        for (Id w : wrt) {
            Id g = (static_cast<std::size_t>(w) < n0) ? adjoint[static_cast<std::size_t>(w)] : kNone;
            out.push_back(g != kNone ? g : zeros(value(w).shape()));
        }
        return out;
    }

    std::vector<Id> backward(Id root, std::initializer_list<Id> wrt) {
        std::vector<Id> v(wrt);
        return backward(root, std::span<const Id>(v));
    }

private:
    static constexpr Id kNone = -1;

    struct NodeRec {
        Op op;
        std::array<Id, 2> in{kNone, kNone};
        int nin = 0;
        Tensor value;
        bool requires_grad = false;
        bool blocks_grad = false;
        double c = 0.0;             // Scale / AddScalar payload
        int m = 0;                  // row counts, label widths
        std::vector<int> shape;     // Reshape / BroadcastAll payload
        ImageDims img{0, 0, 0, 0};
        std::shared_ptr<const std::vector<int>> indices;
    };

    NodeRec& node(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
    const NodeRec& node(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }

    Id push(Op op, std::initializer_list<Id> ins, Tensor v,
            bool force_requires = false, bool blocks = false) {
        NodeRec n;
        n.op = op;
        n.nin = static_cast<int>(ins.size());
        int i = 0;
        bool req = force_requires;
        for (Id in : ins) {
            n.in[static_cast<std::size_t>(i++)] = in;
            req = req || node(in).requires_grad;
        }
        n.requires_grad = blocks ? false : req;
        n.blocks_grad = blocks;
        n.value = std::move(v);
        nodes_.push_back(std::move(n));
        return static_cast<Id>(nodes_.size() - 1);
    }

    void check_same(Id a, Id b, const char* what) const {
        if (!value(a).same_shape(value(b)))
            throw ContractError(std::string(what) + ": shape mismatch");
    }

    void check_image(Id a, ImageDims d, const char* what) const {
        if (value(a).size() != static_cast<std::size_t>(d.n) * d.h * d.w * d.c)
            throw ContractError(std::string(what) + ": image dims mismatch");
    }

    void check_half_image(Id a, ImageDims d, const char* what) const {
        if (value(a).size() != static_cast<std::size_t>(d.n) * (d.h / 2) * (d.w / 2) * d.c)
            throw ContractError(std::string(what) + ": half-resolution dims mismatch");
    }

    static void check_even(ImageDims d, const char* what) {
        if (d.h % 2 != 0 || d.w % 2 != 0)
            throw ContractError(std::string(what) + ": image sides must be even");
    }

    void accumulate(std::vector<Id>& adjoint, const std::vector<bool>& needed, Id target, Id g) {
        if (static_cast<std::size_t>(target) >= needed.size() || !needed[static_cast<std::size_t>(target)])
            return;
        Id& slot = adjoint[static_cast<std::size_t>(target)];
        slot = (slot == kNone) ? g : add(slot, g);
    }

    // Small copy of a node's metadata. Taken by value because nodes_ may
    // reallocate while gradient nodes are appended.
    struct NodeMeta {
        Op op;
        std::array<Id, 2> in;
        double c;
        int m;
        std::vector<int> shape;
        ImageDims img;
        std::shared_ptr<const std::vector<int>> indices;
    };

    void propagate(Id id, Id gy, std::vector<Id>& adjoint, const std::vector<bool>& needed) {
        const NodeRec& rec = node(id);
        const NodeMeta nd{rec.op, rec.in, rec.c, rec.m, rec.shape, rec.img, rec.indices};
        const Id a = nd.in[0], b = nd.in[1];
        auto acc = [&](Id t, Id g) { accumulate(adjoint, needed, t, g); };
        switch (nd.op) {
            case Op::Input:
            case Op::Constant:
                break;
            case Op::Add:
                acc(a, gy);
                acc(b, gy);
                break;
            case Op::Sub:
                acc(a, gy);
                acc(b, neg(gy));
                break;
            case Op::Mul:
                acc(a, mul(gy, b));
                acc(b, mul(gy, a));
                break;
            case Op::Div:
                acc(a, div(gy, b));
                acc(b, neg(div(mul(gy, id), b)));  // -gy * (a/b) / b
                break;
            case Op::Neg:
                acc(a, neg(gy));
                break;
            case Op::Scale:
                acc(a, scale(gy, nd.c));
                break;
            case Op::AddScalar:
                acc(a, gy);
                break;
            case Op::Exp:
                acc(a, mul(gy, id));
                break;
            case Op::Log:
                acc(a, div(gy, a));
                break;
            case Op::Sqrt:
                acc(a, scale(div(gy, id), 0.5));
                break;
            case Op::Abs:
                acc(a, mul(gy, sign_const(a)));
                break;
            case Op::Relu:
                acc(a, mul(gy, relu_mask(a)));
                break;
            case Op::ReluMask:
            case Op::SignConst:
            case Op::RowMaxConst:
            case Op::StopGrad:
                break;
            case Op::SumAll:
                acc(a, broadcast_all(gy, value(a).shape()));
                break;
            case Op::BroadcastAll:
                acc(a, sum_all(gy));
                break;
            case Op::SumAxis0:
                acc(a, broadcast_row(gy, value(a).dim(0)));
                break;
            case Op::BroadcastRow:
                acc(a, sum_axis0(gy));
                break;
            case Op::SumCols:
                acc(a, broadcast_col(gy, value(a).dim(1)));
                break;
            case Op::BroadcastCol:
                acc(a, sum_cols(gy));
                break;
            case Op::MatMul:
                acc(a, matmul(gy, transpose(b)));
                acc(b, matmul(transpose(a), gy));
                break;
            case Op::Transpose:
                acc(a, transpose(gy));
                break;
            case Op::Reshape:
                acc(a, reshape(gy, nd.shape));
                break;
            case Op::GatherRows:
                acc(a, scatter_rows(gy, nd.indices, nd.m));
                break;
            case Op::ScatterRows:
                acc(a, gather_rows(gy, nd.indices));
                break;
            case Op::SelectLabels:
                acc(a, scatter_labels(gy, nd.indices, nd.m));
                break;
            case Op::ScatterLabels:
                acc(a, select_labels(gy, nd.indices));
                break;
            case Op::Im2Col3:
                acc(a, col2im3(gy, nd.img));
                break;
            case Op::Col2Im3:
                acc(a, im2col3(gy, nd.img));
                break;
            case Op::AvgPool2:
                acc(a, unpool_avg2(gy, nd.img));
                break;
            case Op::UnpoolAvg2:
                acc(a, avgpool2(gy, nd.img));
                break;
            case Op::Upsample2:
                acc(a, sumpool2(gy, nd.img));
                break;
            case Op::SumPool2:
                acc(a, upsample2(gy, nd.img));
                break;
        }
    }

    // Shared kernel for im2col3 and its adjoint. With transposed=false, reads
    // the image `src` and writes the column matrix `dst`; with transposed=true,
    // `src` is a column matrix scatter-added into the image `dst`.
    static void im2col3_kernel(const Tensor& src, ImageDims d, Tensor& dst, bool transposed) {
        const int h = d.h, w = d.w, c = d.c;
        const std::size_t img_stride = static_cast<std::size_t>(h) * w * c;
        const std::size_t col_stride = 9u * static_cast<std::size_t>(c);
        for (int n = 0; n < d.n; ++n) {
            for (int y = 0; y < h; ++y) {
                for (int x = 0; x < w; ++x) {
                    const std::size_t row = (static_cast<std::size_t>(n) * h + y) * w + x;
                    for (int dy = -1; dy <= 1; ++dy) {
                        const int sy = y + dy;
                        if (sy < 0 || sy >= h) continue;
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int sx = x + dx;
                            if (sx < 0 || sx >= w) continue;
                            const std::size_t img_off =
                                static_cast<std::size_t>(n) * img_stride +
                                (static_cast<std::size_t>(sy) * w + sx) * c;
                            const std::size_t col_off =
                                row * col_stride +
                                static_cast<std::size_t>((dy + 1) * 3 + (dx + 1)) * c;
                            if (!transposed) {
                                for (int ch = 0; ch < c; ++ch)
                                    dst.vec()[col_off + static_cast<std::size_t>(ch)] =
                                        src.vec()[img_off + static_cast<std::size_t>(ch)];
                            } else {
                                for (int ch = 0; ch < c; ++ch)
                                    dst.vec()[img_off + static_cast<std::size_t>(ch)] +=
                                        src.vec()[col_off + static_cast<std::size_t>(ch)];
                            }
                        }
                    }
                }
            }
        }
    }

    enum class PoolKind { Avg, Sum };

    // 2x2 pooling kernels. `d` always names the full-resolution dims. With
    // up=false, src is full resolution and dst is half resolution; with
    // up=true the roles are reversed (unpool / upsample).
    static void pool2_kernel(const Tensor& src, ImageDims d, Tensor& dst, PoolKind kind, bool up) {
        const int hh = d.h / 2, hw = d.w / 2, c = d.c;
        const double f = (kind == PoolKind::Avg) ? 0.25 : 1.0;
        for (int n = 0; n < d.n; ++n) {
            for (int py = 0; py < hh; ++py) {
                for (int px = 0; px < hw; ++px) {
                    for (int ch = 0; ch < c; ++ch) {
                        const std::size_t half_off =
                            ((static_cast<std::size_t>(n) * hh + py) * hw + px) * c + ch;
                        double s = 0.0;
                        for (int dy = 0; dy < 2; ++dy) {
                            for (int dx = 0; dx < 2; ++dx) {
                                const std::size_t full_off =
                                    ((static_cast<std::size_t>(n) * d.h + 2 * py + dy) * d.w +
                                     (2 * px + dx)) * c + ch;
                                if (up)
                                    dst.vec()[full_off] = f * src.vec()[half_off];
                                else
                                    s += src.vec()[full_off];
                            }
                        }
                        if (!up) dst.vec()[half_off] = f * s;
                    }
                }
            }
        }
    }

    std::vector<NodeRec> nodes_;
};

}  // namespace ddlab
