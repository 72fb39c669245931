#include "cellmtl/ops.hpp"

#include "cellmtl/errors.hpp"
#include "cellmtl/kernels.hpp"
#include "gelu.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cellmtl::ops {
namespace {

using kernels::Conv2dGeom;

template <typename T>
using Node = DiffNode<T>;

// Strides of `in` aligned to the rank of `out`; broadcast axes get stride 0.
std::vector<std::size_t> aligned_strides(const Shape& in, const Shape& out)
{
    std::vector<std::size_t> s(out.size(), 0);
    std::size_t stride = 1;
    const std::size_t off = out.size() - in.size();
    for (std::size_t i = in.size(); i-- > 0;) {
        s[off + i] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    return s;
}

// Calls f(out_index, a_offset, b_offset) for every element of `out`.
template <typename F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f)
{
    const std::size_t r = out.size();
    const std::size_t n = shape_numel(out);
    if (n == 0)
        return;
    if (r == 0) {
        f(0, 0, 0);
        return;
    }
    const std::size_t inner = out[r - 1];
    std::vector<std::size_t> idx(r, 0);
    std::size_t oa = 0, ob = 0;
    for (std::size_t base = 0; base < n; base += inner) {
        for (std::size_t j = 0; j < inner; ++j)
            f(base + j, oa + j * sa[r - 1], ob + j * sb[r - 1]);
        for (std::size_t ax = r - 1; ax-- > 0;) {
            ++idx[ax];
            oa += sa[ax];
            ob += sb[ax];
            if (idx[ax] < out[ax])
                break;
            oa -= sa[ax] * idx[ax];
            ob -= sb[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

// Sums `g` (shaped like `out`) down to `target` following broadcasting rules.
template <typename T>
Tensor<T> reduce_to(const Tensor<T>& g, const Shape& target)
{
    if (g.shape() == target)
        return g;
    Tensor<T> r(target);
    const auto st = aligned_strides(target, g.shape());
    const std::vector<std::size_t> zero(g.rank(), 0);
    const T* gp = g.data();
    T* rp = r.data();
    for_each_broadcast(g.shape(), st, zero, [&](std::size_t i, std::size_t ia, std::size_t) { rp[ia] += gp[i]; });
    return r;
}

template <typename T>
void accumulate_reduced(Node<T>& parent, const Tensor<T>& g)
{
    if (!parent.requires_grad)
        return;
    if (g.shape() == parent.value.shape())
        parent.accumulate(g);
    else
        parent.accumulate(reduce_to(g, parent.value.shape()));
}

enum class BinOp { Add, Sub, Mul, Div };

template <typename T>
Var<T> binary(const Var<T>& a, const Var<T>& b, BinOp op, const char* tag)
{
    const Shape out_shape = broadcast_shape(a.shape(), b.shape());
    Tensor<T> out(out_shape);
    const T* ap = a.value().data();
    const T* bp = b.value().data();
    T* op_ = out.data();
    auto apply = [op](T x, T y) {
        switch (op) {
        case BinOp::Add: return x + y;
        case BinOp::Sub: return x - y;
        case BinOp::Mul: return x * y;
        case BinOp::Div: return x / y;
        }
        return T(0);
    };
    if (a.shape() == b.shape()) {
        const std::size_t n = out.numel();
        for (std::size_t i = 0; i < n; ++i)
            op_[i] = apply(ap[i], bp[i]);
    } else {
        const auto sa = aligned_strides(a.shape(), out_shape);
        const auto sb = aligned_strides(b.shape(), out_shape);
        for_each_broadcast(out_shape, sa, sb,
                           [&](std::size_t i, std::size_t ia, std::size_t ib) { op_[i] = apply(ap[ia], bp[ib]); });
    }
    return make_result<T>(std::move(out), tag, {a, b}, [op, out_shape](Node<T>& n) {
        Node<T>& na = *n.parents[0];
        Node<T>& nb = *n.parents[1];
        const Tensor<T>& g = n.grad;
        const T* gp = g.data();
        const T* av = na.value.data();
        const T* bv = nb.value.data();
        const bool same = na.value.shape() == nb.value.shape();
        const auto sa = aligned_strides(na.value.shape(), out_shape);
        const auto sb = aligned_strides(nb.value.shape(), out_shape);
        auto each = [&](auto&& f) {
            if (same) {
                for (std::size_t i = 0; i < g.numel(); ++i)
                    f(i, i, i);
            } else {
                for_each_broadcast(out_shape, sa, sb, f);
            }
        };
        if (na.requires_grad) {
            Tensor<T> ga(out_shape);
            T* p = ga.data();
            switch (op) {
            case BinOp::Add:
            case BinOp::Sub: ga = g; break;
            case BinOp::Mul: each([&](std::size_t i, std::size_t, std::size_t ib) { p[i] = gp[i] * bv[ib]; }); break;
            case BinOp::Div: each([&](std::size_t i, std::size_t, std::size_t ib) { p[i] = gp[i] / bv[ib]; }); break;
            }
            accumulate_reduced(na, ga);
        }
        if (nb.requires_grad) {
            Tensor<T> gb(out_shape);
            T* p = gb.data();
            switch (op) {
            case BinOp::Add: gb = g; break;
            case BinOp::Sub: each([&](std::size_t i, std::size_t, std::size_t) { p[i] = -gp[i]; }); break;
            case BinOp::Mul: each([&](std::size_t i, std::size_t ia, std::size_t) { p[i] = gp[i] * av[ia]; }); break;
            case BinOp::Div:
                each([&](std::size_t i, std::size_t ia, std::size_t ib) {
                    p[i] = -gp[i] * av[ia] / (bv[ib] * bv[ib]);
                });
                break;
            }
            accumulate_reduced(nb, gb);
        }
    });
}

// Elementwise map with derivative expressed through (x, y).
template <typename T, typename F, typename D>
Var<T> unary(const Var<T>& x, const char* tag, F f, D df)
{
    Tensor<T> out(x.shape());
    const T* xp = x.value().data();
    T* yp = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i)
        yp[i] = f(xp[i]);
    return make_result<T>(std::move(out), tag, {x}, [df](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        Tensor<T>& gx = nx.grad_buffer();
        const T* xv = nx.value.data();
        const T* yv = n.value.data();
        const T* g = n.grad.data();
        T* d = gx.data();
        for (std::size_t i = 0; i < gx.numel(); ++i)
            d[i] += g[i] * df(xv[i], yv[i]);
    });
}

int norm_axis(int axis, std::size_t rank)
{
    const int r = static_cast<int>(rank);
    const int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r)
        throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return a;
}

void split_at(const Shape& s, int axis, std::size_t& outer, std::size_t& mid, std::size_t& inner)
{
    outer = 1;
    inner = 1;
    for (int i = 0; i < axis; ++i)
        outer *= s[i];
    mid = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i)
        inner *= s[i];
}

} // namespace

Shape broadcast_shape(const Shape& a, const Shape& b)
{
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1)
            throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b) + ": axis " +
                                 std::to_string(i) + " has sizes " + std::to_string(da) + " and " +
                                 std::to_string(db));
        out[i] = std::max(da, db);
    }
    return out;
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b)
{
    return binary(a, b, BinOp::Add, "add");
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b)
{
    return binary(a, b, BinOp::Sub, "sub");
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b)
{
    return binary(a, b, BinOp::Mul, "mul");
}

template <typename T>
Var<T> div(const Var<T>& a, const Var<T>& b)
{
    return binary(a, b, BinOp::Div, "div");
}

template <typename T>
Var<T> affine(const Var<T>& x, T scale, T shift)
{
    return unary(
        x, "affine", [=](T v) { return scale * v + shift; }, [=](T, T) { return scale; });
}

template <typename T>
Var<T> gelu(const Var<T>& x)
{
    Tensor<T> out(x.shape());
    kernels::parallel::gelu_forward(out.numel(), x.value().data(), out.data());
    return make_result<T>(std::move(out), "gelu", {x}, [](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        kernels::parallel::gelu_backward(n.grad.numel(), nx.value.data(), n.grad.data(), nx.grad_buffer().data());
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& x)
{
    return unary(
        x, "sigmoid",
        [](T v) { return v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v)); },
        [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> log(const Var<T>& x)
{
    return unary(
        x, "log", [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

template <typename T>
Var<T> exp(const Var<T>& x)
{
    return unary(
        x, "exp", [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Var<T> sqrt(const Var<T>& x)
{
    return unary(
        x, "sqrt", [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Var<T> square(const Var<T>& x)
{
    return unary(
        x, "square", [](T v) { return v * v; }, [](T v, T) { return T(2) * v; });
}

template <typename T>
Var<T> pow_scalar(const Var<T>& x, T p)
{
    return unary(
        x, "pow", [=](T v) { return std::pow(v, p); },
        [=](T v, T) { return p == T(0) ? T(0) : p * std::pow(v, p - T(1)); });
}

template <typename T>
Var<T> clamp(const Var<T>& x, T lo, T hi)
{
    return unary(
        x, "clamp", [=](T v) { return std::min(std::max(v, lo), hi); },
        [=](T v, T) { return (v >= lo && v <= hi) ? T(1) : T(0); });
}

template <typename T>
Var<T> smooth_l1(const Var<T>& x, T beta)
{
    return unary(
        x, "smooth_l1",
        [=](T v) {
            const T a = std::abs(v);
            return a < beta ? T(0.5) * v * v / beta : a - T(0.5) * beta;
        },
        [=](T v, T) { return std::abs(v) < beta ? v / beta : (v > 0 ? T(1) : T(-1)); });
}

template <typename T>
Var<T> sum_all(const Var<T>& x)
{
    T acc = 0;
    for (T v : x.value().span())
        acc += v;
    return make_result<T>(Tensor<T>::scalar(acc), "sum_all", {x}, [](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        const T g = n.grad[0];
        for (T& d : nx.grad_buffer().span())
            d += g;
    });
}

template <typename T>
Var<T> mean_all(const Var<T>& x)
{
    const T inv = T(1) / T(x.numel());
    T acc = 0;
    for (T v : x.value().span())
        acc += v;
    return make_result<T>(Tensor<T>::scalar(acc * inv), "mean_all", {x}, [inv](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        const T g = n.grad[0] * inv;
        for (T& d : nx.grad_buffer().span())
            d += g;
    });
}

namespace {

template <typename T>
Var<T> reduce_axis(const Var<T>& x, int axis, bool average)
{
    const int a = norm_axis(axis, x.value().rank());
    std::size_t outer, mid, inner;
    split_at(x.shape(), a, outer, mid, inner);
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + a);
    if (out_shape.empty())
        out_shape = {1};
    const T scale = average ? T(1) / T(mid) : T(1);
    Tensor<T> out(out_shape);
    const T* xp = x.value().data();
    T* yp = out.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t m = 0; m < mid; ++m) {
            const T* src = xp + (o * mid + m) * inner;
            T* dst = yp + o * inner;
            for (std::size_t i = 0; i < inner; ++i)
                dst[i] += src[i];
        }
    if (average)
        for (T& v : out.span())
            v *= scale;
    return make_result<T>(std::move(out), average ? "mean" : "sum", {x}, [=](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        T* d = nx.grad_buffer().data();
        const T* g = n.grad.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t m = 0; m < mid; ++m) {
                T* dst = d + (o * mid + m) * inner;
                const T* src = g + o * inner;
                for (std::size_t i = 0; i < inner; ++i)
                    dst[i] += src[i] * scale;
            }
    });
}

} // namespace

template <typename T>
Var<T> sum(const Var<T>& x, int axis)
{
    return reduce_axis(x, axis, false);
}

template <typename T>
Var<T> mean(const Var<T>& x, int axis)
{
    return reduce_axis(x, axis, true);
}

template <typename T>
Var<T> reshape(const Var<T>& x, Shape shape)
{
    if (shape_numel(shape) != x.numel())
        throw DimensionError("reshape " + shape_str(x.shape()) + " -> " + shape_str(shape) + ": element count differs");
    return make_result<T>(x.value().reshaped(std::move(shape)), "reshape", {x}, [](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (nx.requires_grad)
            nx.accumulate(n.grad);
    });
}

namespace {

template <typename T>
void permute_copy(const T* src, const Shape& src_shape, const std::vector<std::size_t>& perm, T* dst, bool add)
{
    // dst has shape src_shape[perm[i]]; iterate over dst in order.
    const std::size_t r = src_shape.size();
    std::vector<std::size_t> src_strides(r);
    std::size_t s = 1;
    for (std::size_t i = r; i-- > 0;) {
        src_strides[i] = s;
        s *= src_shape[i];
    }
    Shape dst_shape(r);
    std::vector<std::size_t> step(r);
    for (std::size_t i = 0; i < r; ++i) {
        dst_shape[i] = src_shape[perm[i]];
        step[i] = src_strides[perm[i]];
    }
    const std::vector<std::size_t> zero(r, 0);
    for_each_broadcast(dst_shape, step, zero, [&](std::size_t i, std::size_t is, std::size_t) {
        if (add)
            dst[i] += src[is];
        else
            dst[i] = src[is];
    });
}

} // namespace

template <typename T>
Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm)
{
    const std::size_t r = x.value().rank();
    if (perm.size() != r)
        throw DimensionError("permute: " + std::to_string(perm.size()) + " axes given for rank " + std::to_string(r));
    std::vector<bool> used(r, false);
    for (auto p : perm) {
        if (p >= r || used[p])
            throw DimensionError("permute: invalid axis order");
        used[p] = true;
    }
    Shape out_shape(r);
    for (std::size_t i = 0; i < r; ++i)
        out_shape[i] = x.shape()[perm[i]];
    Tensor<T> out(out_shape);
    permute_copy(x.value().data(), x.shape(), perm, out.data(), false);
    std::vector<std::size_t> inv(r);
    for (std::size_t i = 0; i < r; ++i)
        inv[perm[i]] = i;
    return make_result<T>(std::move(out), "permute", {x}, [inv, out_shape](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        permute_copy(n.grad.data(), out_shape, inv, nx.grad_buffer().data(), true);
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis)
{
    if (xs.empty())
        throw DimensionError("concat of zero tensors");
    const Shape& s0 = xs[0].shape();
    const int a = norm_axis(axis, s0.size());
    Shape out_shape = s0;
    out_shape[a] = 0;
    for (const auto& x : xs) {
        if (x.shape().size() != s0.size())
            throw DimensionError("concat: rank mismatch " + shape_str(x.shape()) + " vs " + shape_str(s0));
        for (std::size_t i = 0; i < s0.size(); ++i)
            if (int(i) != a && x.shape()[i] != s0[i])
                throw DimensionError("concat: axis " + std::to_string(i) + " differs (" + shape_str(x.shape()) +
                                     " vs " + shape_str(s0) + ")");
        out_shape[a] += x.shape()[a];
    }
    std::size_t outer, mid, inner;
    split_at(out_shape, a, outer, mid, inner);
    Tensor<T> out(out_shape);
    std::vector<std::size_t> widths;
    std::size_t off = 0;
    for (const auto& x : xs) {
        const std::size_t w = x.shape()[a] * inner;
        const T* src = x.value().data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy(src + o * w, src + (o + 1) * w, out.data() + o * mid * inner + off);
        widths.push_back(w);
        off += w;
    }
    return make_result<T>(std::move(out), "concat", xs, [widths, outer, mid, inner](Node<T>& n) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < n.parents.size(); ++k) {
            Node<T>& p = *n.parents[k];
            const std::size_t w = widths[k];
            if (p.requires_grad) {
                T* d = p.grad_buffer().data();
                for (std::size_t o = 0; o < outer; ++o) {
                    const T* g = n.grad.data() + o * mid * inner + off;
                    for (std::size_t i = 0; i < w; ++i)
                        d[o * w + i] += g[i];
                }
            }
            off += w;
        }
    });
}

template <typename T>
Var<T> slice(const Var<T>& x, int axis, std::size_t start, std::size_t len)
{
    const int a = norm_axis(axis, x.value().rank());
    if (start + len > x.shape()[a])
        throw DimensionError("slice [" + std::to_string(start) + "," + std::to_string(start + len) +
                             ") exceeds axis " + std::to_string(a) + " of " + shape_str(x.shape()));
    std::size_t outer, mid, inner;
    split_at(x.shape(), a, outer, mid, inner);
    Shape out_shape = x.shape();
    out_shape[a] = len;
    Tensor<T> out(out_shape);
    const T* src = x.value().data();
    for (std::size_t o = 0; o < outer; ++o)
        std::copy(src + (o * mid + start) * inner, src + (o * mid + start + len) * inner,
                  out.data() + o * len * inner);
    return make_result<T>(std::move(out), "slice", {x}, [=](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        T* d = nx.grad_buffer().data();
        const T* g = n.grad.data();
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < len * inner; ++i)
                d[(o * mid + start) * inner + i] += g[o * len * inner + i];
    });
}

template <typename T>
Var<T> broadcast_to(const Var<T>& x, const Shape& shape)
{
    if (broadcast_shape(x.shape(), shape) != shape)
        throw DimensionError("cannot broadcast " + shape_str(x.shape()) + " to " + shape_str(shape));
    Tensor<T> out(shape);
    const auto sx = aligned_strides(x.shape(), shape);
    const std::vector<std::size_t> zero(shape.size(), 0);
    const T* xp = x.value().data();
    T* yp = out.data();
    for_each_broadcast(shape, sx, zero, [&](std::size_t i, std::size_t ix, std::size_t) { yp[i] = xp[ix]; });
    return make_result<T>(std::move(out), "broadcast_to", {x}, [](Node<T>& n) {
        accumulate_reduced(*n.parents[0], n.grad);
    });
}

template <typename T>
Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& index)
{
    if (x.value().rank() != 2 || x.shape()[0] != index.size())
        throw DimensionError("gather_rows expects [B,C] with B=" + std::to_string(index.size()) + ", got " +
                             shape_str(x.shape()));
    const std::size_t c = x.shape()[1];
    Tensor<T> out(Shape{index.size()});
    for (std::size_t b = 0; b < index.size(); ++b) {
        if (index[b] >= c)
            throw InputError("gather_rows: index " + std::to_string(index[b]) + " out of range [0," +
                             std::to_string(c) + ")");
        out[b] = x.value()[b * c + index[b]];
    }
    return make_result<T>(std::move(out), "gather_rows", {x}, [index, c](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        T* d = nx.grad_buffer().data();
        for (std::size_t b = 0; b < index.size(); ++b)
            d[b * c + index[b]] += n.grad[b];
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias)
{
    if (weight.value().rank() != 2)
        throw DimensionError("linear: weight must be [dout,din], got " + shape_str(weight.shape()));
    const std::size_t dout = weight.shape()[0], din = weight.shape()[1];
    if (x.value().rank() < 1 || x.shape().back() != din)
        throw DimensionError("linear: input last axis " + shape_str(x.shape()) + " != weight din " +
                             std::to_string(din));
    if (bias.defined() && (bias.value().rank() != 1 || bias.shape()[0] != dout))
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " != [" + std::to_string(dout) + "]");
    const std::size_t rows = x.numel() / din;
    Shape out_shape = x.shape();
    out_shape.back() = dout;
    Tensor<T> out(out_shape);
    kernels::parallel::gemm<T>(false, true, rows, dout, din, T(1), x.value().data(), weight.value().data(), T(0),
                               out.data());
    if (bias.defined()) {
        const T* bp = bias.value().data();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t o = 0; o < dout; ++o)
                out[r * dout + o] += bp[o];
    }
    std::vector<Var<T>> parents{x, weight};
    if (bias.defined())
        parents.push_back(bias);
    return make_result<T>(std::move(out), "linear", parents, [rows, din, dout](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        Node<T>& nw = *n.parents[1];
        const T* g = n.grad.data();
        if (nx.requires_grad)
            kernels::parallel::gemm<T>(false, false, rows, din, dout, T(1), g, nw.value.data(), T(1),
                                       nx.grad_buffer().data());
        if (nw.requires_grad)
            kernels::parallel::gemm<T>(true, false, dout, din, rows, T(1), g, nx.value.data(), T(1),
                                       nw.grad_buffer().data());
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            T* db = n.parents[2]->grad_buffer().data();
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t o = 0; o < dout; ++o)
                    db[o] += g[r * dout + o];
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t padding)
{
    const Shape& xs = x.shape();
    const Shape& ws = weight.shape();
    if (xs.size() != 4)
        throw DimensionError("conv2d: input must be [B,Cin,H,W], got " + shape_str(xs));
    if (ws.size() != 4)
        throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw], got " + shape_str(ws));
    if (ws[1] != xs[1])
        throw DimensionError("conv2d: input channels (axis 1 of input) " + std::to_string(xs[1]) +
                             " != weight channels (axis 1 of weight) " + std::to_string(ws[1]));
    if (ws[2] < 1 || ws[3] < 1 || stride < 1)
        throw DimensionError("conv2d: kernel and stride must be >= 1");
    // output size uses floor division, as in common frameworks: 28x28, 3x3, stride 2, pad 1 -> 14x14
    if (xs[2] + 2 * padding < ws[2] || xs[3] + 2 * padding < ws[3])
        throw DimensionError("conv2d: spatial axes (2,3) of " + shape_str(xs) + " incompatible with kernel " +
                             shape_str(ws) + ", stride " + std::to_string(stride) + ", padding " +
                             std::to_string(padding));
    if (bias.defined() && (bias.value().rank() != 1 || bias.shape()[0] != ws[0]))
        throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " != [" + std::to_string(ws[0]) + "]");
    Conv2dGeom g{xs[0], xs[1], xs[2], xs[3], ws[0], ws[2], ws[3], stride, padding};
    Tensor<T> out(Shape{g.batch, g.out_ch, g.out_h(), g.out_w()});
    kernels::parallel::conv2d_forward<T>(g, x.value().data(), weight.value().data(),
                                         bias.defined() ? bias.value().data() : nullptr, out.data());
    std::vector<Var<T>> parents{x, weight};
    if (bias.defined())
        parents.push_back(bias);
    return make_result<T>(std::move(out), "conv2d", parents, [g](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        Node<T>& nw = *n.parents[1];
        T* dx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
        T* dw = nw.requires_grad ? nw.grad_buffer().data() : nullptr;
        T* db = (n.parents.size() > 2 && n.parents[2]->requires_grad) ? n.parents[2]->grad_buffer().data() : nullptr;
        kernels::parallel::conv2d_backward<T>(g, nx.value.data(), nw.value.data(), n.grad.data(), dx, dw, db);
    });
}

template <typename T>
Var<T> conv1d_same(const Var<T>& x, const Var<T>& weight, const Var<T>& bias)
{
    if (x.value().rank() != 2)
        throw DimensionError("conv1d_same: input must be [B,L], got " + shape_str(x.shape()));
    const std::size_t k = weight.numel();
    if (k % 2 == 0)
        throw DimensionError("conv1d_same: kernel size must be odd, got " + std::to_string(k));
    const std::size_t B = x.shape()[0], L = x.shape()[1];
    const long pad = long(k / 2);
    Tensor<T> out(x.shape());
    const T* xp = x.value().data();
    const T* wp = weight.value().data();
    const T bv = bias.defined() ? bias.value()[0] : T(0);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t i = 0; i < L; ++i) {
            T acc = bv;
            for (std::size_t j = 0; j < k; ++j) {
                const long src = long(i) + long(j) - pad;
                if (src >= 0 && src < long(L))
                    acc += wp[j] * xp[b * L + src];
            }
            out[b * L + i] = acc;
        }
    std::vector<Var<T>> parents{x, weight};
    if (bias.defined())
        parents.push_back(bias);
    return make_result<T>(std::move(out), "conv1d_same", parents, [B, L, k, pad](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        Node<T>& nw = *n.parents[1];
        const T* g = n.grad.data();
        T* dx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
        T* dw = nw.requires_grad ? nw.grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < B; ++b)
            for (std::size_t i = 0; i < L; ++i) {
                const T gi = g[b * L + i];
                for (std::size_t j = 0; j < k; ++j) {
                    const long src = long(i) + long(j) - pad;
                    if (src < 0 || src >= long(L))
                        continue;
                    if (dx)
                        dx[b * L + src] += gi * nw.value[j];
                    if (dw)
                        dw[j] += gi * nx.value[b * L + src];
                }
            }
        if (n.parents.size() > 2 && n.parents[2]->requires_grad) {
            T acc = 0;
            for (std::size_t i = 0; i < B * L; ++i)
                acc += g[i];
            n.parents[2]->grad_buffer()[0] += acc;
        }
    });
}

template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, bool train,
                    T momentum, T eps)
{
    const Shape& xs = x.shape();
    if (xs.size() != 4)
        throw DimensionError("batch_norm2d: input must be [B,C,H,W], got " + shape_str(xs));
    const std::size_t B = xs[0], C = xs[1], HW = xs[2] * xs[3];
    if (gamma.numel() != C || beta.numel() != C || stats.running_mean.numel() != C || stats.running_var.numel() != C)
        throw DimensionError("batch_norm2d: parameter size != channel count (axis 1) " + std::to_string(C));
    const std::size_t count = B * HW;
    if (train && count < 2)
        throw InputError("batch_norm2d: train mode needs more than one value per channel");
    Tensor<T> out(xs);
    Tensor<T> xhat(xs);
    Tensor<T> rstd(Shape{C});
    const T* xp = x.value().data();
    const T* gp = gamma.value().data();
    const T* bp = beta.value().data();
#pragma omp parallel for schedule(static) if (B * C * HW > 65536)
    for (long c = 0; c < long(C); ++c) {
        T mu, var;
        if (train) {
            T s = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* r = xp + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i)
                    s += r[i];
            }
            mu = s / T(count);
            T v = 0;
            for (std::size_t b = 0; b < B; ++b) {
                const T* r = xp + (b * C + c) * HW;
                for (std::size_t i = 0; i < HW; ++i)
                    v += (r[i] - mu) * (r[i] - mu);
            }
            var = v / T(count);
            stats.running_mean[c] = (T(1) - momentum) * stats.running_mean[c] + momentum * mu;
            stats.running_var[c] =
                (T(1) - momentum) * stats.running_var[c] + momentum * var * T(count) / T(count - 1);
        } else {
            mu = stats.running_mean[c];
            var = stats.running_var[c];
        }
        const T rs = T(1) / std::sqrt(var + eps);
        rstd[c] = rs;
        for (std::size_t b = 0; b < B; ++b) {
            const std::size_t off = (b * C + c) * HW;
            for (std::size_t i = 0; i < HW; ++i) {
                const T h = (xp[off + i] - mu) * rs;
                xhat[off + i] = h;
                out[off + i] = gp[c] * h + bp[c];
            }
        }
    }
    return make_result<T>(
        std::move(out), "batch_norm2d", {x, gamma, beta},
        [xhat = std::move(xhat), rstd = std::move(rstd), B, C, HW, count, train](Node<T>& n) {
            Node<T>& nx = *n.parents[0];
            Node<T>& ng = *n.parents[1];
            Node<T>& nb = *n.parents[2];
            const T* g = n.grad.data();
            T* dx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
            T* dg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
            T* db = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
            const T* gam = ng.value.data();
#pragma omp parallel for schedule(static) if (B * C * HW > 65536)
            for (long c = 0; c < long(C); ++c) {
                T sg = 0, sgx = 0;
                for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t off = (b * C + c) * HW;
                    for (std::size_t i = 0; i < HW; ++i) {
                        sg += g[off + i];
                        sgx += g[off + i] * xhat[off + i];
                    }
                }
                if (db)
                    db[c] += sg;
                if (dg)
                    dg[c] += sgx;
                if (!dx)
                    continue;
                const T k = gam[c] * rstd[c];
                for (std::size_t b = 0; b < B; ++b) {
                    const std::size_t off = (b * C + c) * HW;
                    if (train) {
                        const T inv = T(1) / T(count);
                        for (std::size_t i = 0; i < HW; ++i)
                            dx[off + i] += k * (g[off + i] - inv * sg - xhat[off + i] * inv * sgx);
                    } else {
                        for (std::size_t i = 0; i < HW; ++i)
                            dx[off + i] += k * g[off + i];
                    }
                }
            }
        });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps)
{
    const std::size_t d = x.shape().back();
    if (gain.numel() != d || shift.numel() != d)
        throw DimensionError("layer_norm: gain/shift size != last axis " + std::to_string(d) + " of " +
                             shape_str(x.shape()));
    if (!(eps > T(0)))
        throw InputError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    Tensor<T> mean(Shape{rows}), rstd(Shape{rows});
    kernels::parallel::layer_norm_forward<T>(rows, d, x.value().data(), gain.value().data(), shift.value().data(),
                                             eps, out.data(), mean.data(), rstd.data());
    return make_result<T>(
        std::move(out), "layer_norm", {x, gain, shift},
        [mean = std::move(mean), rstd = std::move(rstd), rows, d](Node<T>& n) {
            Node<T>& nx = *n.parents[0];
            Node<T>& ng = *n.parents[1];
            Node<T>& ns = *n.parents[2];
            const T* g = n.grad.data();
            const T* xv = nx.value.data();
            const T* gain = ng.value.data();
            if (nx.requires_grad) {
                T* dx = nx.grad_buffer().data();
#pragma omp parallel for schedule(static) if (rows * d > 8192)
                for (long r = 0; r < long(rows); ++r) {
                    T m1 = 0, m2 = 0;
                    for (std::size_t i = 0; i < d; ++i) {
                        const T xh = (xv[r * d + i] - mean[r]) * rstd[r];
                        const T gh = g[r * d + i] * gain[i];
                        m1 += gh;
                        m2 += gh * xh;
                    }
                    m1 /= T(d);
                    m2 /= T(d);
                    for (std::size_t i = 0; i < d; ++i) {
                        const T xh = (xv[r * d + i] - mean[r]) * rstd[r];
                        dx[r * d + i] += rstd[r] * (g[r * d + i] * gain[i] - m1 - xh * m2);
                    }
                }
            }
            if (ng.requires_grad || ns.requires_grad) {
                T* dg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
                T* ds = ns.requires_grad ? ns.grad_buffer().data() : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) {
                        if (dg)
                            dg[i] += g[r * d + i] * (xv[r * d + i] - mean[r]) * rstd[r];
                        if (ds)
                            ds[i] += g[r * d + i];
                    }
            }
        });
}

template <typename T>
Var<T> softmax(const Var<T>& x)
{
    const std::size_t d = x.shape().back();
    const std::size_t rows = x.numel() / d;
    Tensor<T> out(x.shape());
    const T* xp = x.value().data();
    for (std::size_t r = 0; r < rows; ++r) {
        const T* xr = xp + r * d;
        T* yr = out.data() + r * d;
        const T mx = *std::max_element(xr, xr + d);
        T z = 0;
        for (std::size_t i = 0; i < d; ++i) {
            yr[i] = std::exp(xr[i] - mx);
            z += yr[i];
        }
        for (std::size_t i = 0; i < d; ++i)
            yr[i] /= z;
    }
    return make_result<T>(std::move(out), "softmax", {x}, [rows, d](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        T* dx = nx.grad_buffer().data();
        const T* y = n.value.data();
        const T* g = n.grad.data();
        for (std::size_t r = 0; r < rows; ++r) {
            T dot = 0;
            for (std::size_t i = 0; i < d; ++i)
                dot += g[r * d + i] * y[r * d + i];
            for (std::size_t i = 0; i < d; ++i)
                dx[r * d + i] += y[r * d + i] * (g[r * d + i] - dot);
        }
    });
}

template <typename T>
Var<T> dropout(const Var<T>& x, T p, bool train, Rng& rng)
{
    if (p < T(0) || p >= T(1))
        throw InputError("dropout probability must lie in [0,1)");
    if (!train || p == T(0))
        return x;
    Tensor<T> mask(x.shape());
    const T keep = T(1) / (T(1) - p);
    for (T& m : mask.span())
        m = rng.uniform() < double(p) ? T(0) : keep;
    Tensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i)
        out[i] = x.value()[i] * mask[i];
    return make_result<T>(std::move(out), "dropout", {x}, [mask = std::move(mask)](Node<T>& n) {
        Node<T>& nx = *n.parents[0];
        if (!nx.requires_grad)
            return;
        T* dx = nx.grad_buffer().data();
        for (std::size_t i = 0; i < mask.numel(); ++i)
            dx[i] += n.grad[i] * mask[i];
    });
}

template <typename T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v)
{
    const Shape& s = q.shape();
    if (s.size() != 4)
        throw DimensionError("attention: q must be [B,h,T,dh], got " + shape_str(s));
    if (k.shape() != s || v.shape() != s)
        throw DimensionError("attention: q " + shape_str(s) + ", k " + shape_str(k.shape()) + ", v " +
                             shape_str(v.shape()) + " must match on all axes");
    if (s[3] < 1)
        throw DimensionError("attention: head dim (axis 3) must be >= 1");
    const std::size_t heads = s[0] * s[1], tokens = s[2], hd = s[3];
    Tensor<T> out(s);
    Tensor<T> probs(Shape{heads, tokens, tokens});
    kernels::parallel::attention_forward<T>(heads, tokens, hd, q.value().data(), k.value().data(), v.value().data(),
                                            probs.data(), out.data());
    return make_result<T>(std::move(out), "attention", {q, k, v},
                          [probs = std::move(probs), heads, tokens, hd](Node<T>& n) {
                              Node<T>& nq = *n.parents[0];
                              Node<T>& nk = *n.parents[1];
                              Node<T>& nv = *n.parents[2];
                              // The kernel writes all three; scratch buffers absorb unused ones.
                              Tensor<T> sq, sk, sv;
                              auto target = [](Node<T>& p, Tensor<T>& scratch) -> T* {
                                  if (p.requires_grad)
                                      return p.grad_buffer().data();
                                  scratch = Tensor<T>(p.value.shape());
                                  return scratch.data();
                              };
                              T* dq = target(nq, sq);
                              T* dk = target(nk, sk);
                              T* dv = target(nv, sv);
                              kernels::parallel::attention_backward<T>(heads, tokens, hd, nq.value.data(),
                                                                       nk.value.data(), nv.value.data(), probs.data(),
                                                                       n.grad.data(), dq, dk, dv);
                          });
}

template <typename T>
Var<T> constant(Tensor<T> value)
{
    return Var<T>(std::move(value), false, "constant");
}

template <typename T>
Var<T> parameter(Tensor<T> value, std::string name)
{
    return Var<T>(std::move(value), true, std::move(name));
}

#define CELLMTL_INSTANTIATE_OPS(T)                                                                              \
    template Var<T> add<T>(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> sub<T>(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> mul<T>(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> div<T>(const Var<T>&, const Var<T>&);                                                       \
    template Var<T> affine<T>(const Var<T>&, T, T);                                                             \
    template Var<T> gelu<T>(const Var<T>&);                                                                     \
    template Var<T> sigmoid<T>(const Var<T>&);                                                                  \
    template Var<T> log<T>(const Var<T>&);                                                                      \
    template Var<T> exp<T>(const Var<T>&);                                                                      \
    template Var<T> sqrt<T>(const Var<T>&);                                                                     \
    template Var<T> square<T>(const Var<T>&);                                                                   \
    template Var<T> pow_scalar<T>(const Var<T>&, T);                                                            \
    template Var<T> clamp<T>(const Var<T>&, T, T);                                                              \
    template Var<T> smooth_l1<T>(const Var<T>&, T);                                                             \
    template Var<T> sum_all<T>(const Var<T>&);                                                                  \
    template Var<T> mean_all<T>(const Var<T>&);                                                                 \
    template Var<T> sum<T>(const Var<T>&, int);                                                                 \
    template Var<T> mean<T>(const Var<T>&, int);                                                                \
    template Var<T> reshape<T>(const Var<T>&, Shape);                                                           \
    template Var<T> permute<T>(const Var<T>&, const std::vector<std::size_t>&);                                 \
    template Var<T> concat<T>(const std::vector<Var<T>>&, int);                                                 \
    template Var<T> slice<T>(const Var<T>&, int, std::size_t, std::size_t);                                     \
    template Var<T> broadcast_to<T>(const Var<T>&, const Shape&);                                               \
    template Var<T> gather_rows<T>(const Var<T>&, const std::vector<std::size_t>&);                             \
    template Var<T> linear<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                     \
    template Var<T> conv2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);           \
    template Var<T> conv1d_same<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                \
    template Var<T> batch_norm2d<T>(const Var<T>&, const Var<T>&, const Var<T>&, BatchNormStats<T>&, bool, T, T); \
    template Var<T> layer_norm<T>(const Var<T>&, const Var<T>&, const Var<T>&, T);                              \
    template Var<T> softmax<T>(const Var<T>&);                                                                  \
    template Var<T> dropout<T>(const Var<T>&, T, bool, Rng&);                                                   \
    template Var<T> attention<T>(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
    template Var<T> constant<T>(Tensor<T>);                                                                     \
    template Var<T> parameter<T>(Tensor<T>, std::string);

CELLMTL_INSTANTIATE_OPS(float)
CELLMTL_INSTANTIATE_OPS(double)

} // namespace cellmtl::ops
