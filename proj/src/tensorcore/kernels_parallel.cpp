#include "cellmtl/kernels.hpp"

#include <Eigen/Dense>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

namespace cellmtl::kernels {

int num_threads()
{
    return omp_get_max_threads();
}

namespace parallel {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using CMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MMap = Eigen::Map<RowMat<T>>;

constexpr std::size_t kChunk = 8192;

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using CStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

// Column tiles hold whole output rows and stay near 256 KB, so the unfolded patch matrix is
// produced and consumed while it is still in L2 instead of streaming a full image-sized copy.
constexpr std::size_t kTileFloats = 64 * 1024;

std::size_t tile_rows(const Conv2dGeom& g)
{
    const std::size_t per_row = g.patch() * g.out_w();
    return std::clamp<std::size_t>(kTileFloats / std::max<std::size_t>(per_row, 1), 1, g.out_h());
}

// Unfolds output rows [oy0, oy1) into col, a [patch, (oy1 - oy0) * out_w] row-major matrix.
template <typename T>
void im2col_rows(const Conv2dGeom& g, const T* x, std::size_t oy0, std::size_t oy1, T* col)
{
    const std::size_t wo = g.out_w(), n = (oy1 - oy0) * wo;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                T* row = col + ((c * g.kh + i) * g.kw + j) * n;
                const T* xc = x + c * g.height * g.width;
                // valid ox range: 0 <= ox*stride + j - pad < width
                const long lo_num = long(g.pad) - long(j);
                const std::size_t ox_lo = lo_num <= 0 ? 0 : std::size_t((lo_num + long(g.stride) - 1) / long(g.stride));
                const long hi_num = long(g.width) + long(g.pad) - long(j) - 1;
                const std::size_t ox_hi = hi_num < 0 ? 0 : std::min(wo, std::size_t(hi_num / long(g.stride)) + 1);
                for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    T* out = row + (oy - oy0) * wo;
                    const long iy = long(oy * g.stride + i) - long(g.pad);
                    if (iy < 0 || iy >= long(g.height) || ox_lo >= ox_hi) {
                        std::fill(out, out + wo, T(0));
                        continue;
                    }
                    const T* xr = xc + iy * long(g.width);
                    const long shift = long(j) - long(g.pad);
                    std::fill(out, out + ox_lo, T(0));
                    if (g.stride == 1)
                        std::copy(xr + (long(ox_lo) + shift), xr + (long(ox_hi) + shift), out + ox_lo);
                    else
                        for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                            out[ox] = xr[long(ox * g.stride) + shift];
                    std::fill(out + ox_hi, out + wo, T(0));
                }
            }
}

// Adjoint of im2col_rows: scatters col back into dx.
template <typename T>
void col2im_rows_add(const Conv2dGeom& g, const T* col, std::size_t oy0, std::size_t oy1, T* dx)
{
    const std::size_t wo = g.out_w(), n = (oy1 - oy0) * wo;
    for (std::size_t c = 0; c < g.in_ch; ++c)
        for (std::size_t i = 0; i < g.kh; ++i)
            for (std::size_t j = 0; j < g.kw; ++j) {
                const T* row = col + ((c * g.kh + i) * g.kw + j) * n;
                T* dxc = dx + c * g.height * g.width;
                const long lo_num = long(g.pad) - long(j);
                const std::size_t ox_lo = lo_num <= 0 ? 0 : std::size_t((lo_num + long(g.stride) - 1) / long(g.stride));
                const long hi_num = long(g.width) + long(g.pad) - long(j) - 1;
                const std::size_t ox_hi = hi_num < 0 ? 0 : std::min(wo, std::size_t(hi_num / long(g.stride)) + 1);
                for (std::size_t oy = oy0; oy < oy1; ++oy) {
                    const long iy = long(oy * g.stride + i) - long(g.pad);
                    if (iy < 0 || iy >= long(g.height))
                        continue;
                    T* dr = dxc + iy * long(g.width);
                    const long shift = long(j) - long(g.pad);
                    const T* in = row + (oy - oy0) * wo;
                    for (std::size_t ox = ox_lo; ox < ox_hi; ++ox)
                        dr[long(ox * g.stride) + shift] += in[ox];
                }
            }
}

bool is_pointwise(const Conv2dGeom& g)
{
    return g.kh == 1 && g.kw == 1 && g.stride == 1 && g.pad == 0;
}

} // namespace

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c)
{
    CMap<T> A(a, trans_a ? k : m, trans_a ? m : k);
    CMap<T> B(b, trans_b ? n : k, trans_b ? k : n);
    MMap<T> C(c, m, n);
    if (beta == T(0))
        C.setZero();
    else if (beta != T(1))
        C *= beta;
    if (!trans_a && !trans_b)
        C.noalias() += alpha * A * B;
    else if (trans_a && !trans_b)
        C.noalias() += alpha * A.transpose() * B;
    else if (!trans_a && trans_b)
        C.noalias() += alpha * A * B.transpose();
    else
        C.noalias() += alpha * A.transpose() * B.transpose();
}

// One sample: y = conv(x) without bias; col is scratch of k * tile_rows(g) * out_w.
template <typename T>
void conv_sample(const Conv2dGeom& g, const T* xb, const T* w, T* yb, T* col)
{
    const std::size_t hw = g.out_h() * g.out_w(), wo = g.out_w();
    const std::size_t k = g.patch();
    CMap<T> W(w, g.out_ch, k);
    if (is_pointwise(g)) {
        MMap<T>(yb, g.out_ch, hw).noalias() = W * CMap<T>(xb, k, hw);
        return;
    }
    const std::size_t rows = tile_rows(g);
    for (std::size_t oy0 = 0; oy0 < g.out_h(); oy0 += rows) {
        const std::size_t oy1 = std::min(g.out_h(), oy0 + rows), n = (oy1 - oy0) * wo;
        im2col_rows(g, xb, oy0, oy1, col);
        StridedMap<T>(yb + oy0 * wo, g.out_ch, n, Eigen::OuterStride<>(hw)).noalias() = W * CMap<T>(col, k, n);
    }
}

// For stride 1 the input gradient is itself a convolution: dy convolved with the kernel flipped in
// space and transposed in channels, padded by k - 1 - pad. Its reduction runs over out_ch * kh * kw
// instead of out_ch, which keeps the GEMM compute-bound for thin layers. With very few input
// channels the transposed GEMM has too few rows, so those keep the unfold path.
bool transposed_backward(const Conv2dGeom& g)
{
    return g.stride == 1 && !is_pointwise(g) && g.kh == g.kw && g.pad < g.kh && g.in_ch >= 8;
}

Conv2dGeom transposed_geom(const Conv2dGeom& g)
{
    Conv2dGeom t = g;
    t.batch = 1;
    t.in_ch = g.out_ch;
    t.out_ch = g.in_ch;
    t.height = g.out_h();
    t.width = g.out_w();
    t.pad = g.kh - 1 - g.pad;
    return t;
}

template <typename T>
std::vector<T> flip_transpose(const Conv2dGeom& g, const T* w)
{
    std::vector<T> wt(g.out_ch * g.patch());
    for (std::size_t co = 0; co < g.out_ch; ++co)
        for (std::size_t ci = 0; ci < g.in_ch; ++ci)
            for (std::size_t i = 0; i < g.kh; ++i)
                for (std::size_t j = 0; j < g.kw; ++j)
                    wt[((ci * g.out_ch + co) * g.kh + (g.kh - 1 - i)) * g.kw + (g.kw - 1 - j)] =
                        w[((co * g.in_ch + ci) * g.kh + i) * g.kw + j];
    return wt;
}

template <typename T>
void conv2d_forward(const Conv2dGeom& g, const T* x, const T* w, const T* bias, T* y)
{
    const std::size_t hw = g.out_h() * g.out_w();
    const std::size_t scratch = is_pointwise(g) ? 0 : g.patch() * tile_rows(g) * g.out_w();
#pragma omp parallel
    {
        std::vector<T> col(scratch);
#pragma omp for schedule(static)
        for (long b = 0; b < long(g.batch); ++b) {
            T* yb = y + b * g.out_ch * hw;
            conv_sample(g, x + b * g.in_ch * g.height * g.width, w, yb, col.data());
            if (bias)
                for (std::size_t co = 0; co < g.out_ch; ++co) {
                    T* r = yb + co * hw;
                    const T bv = bias[co];
                    for (std::size_t p = 0; p < hw; ++p)
                        r[p] += bv;
                }
        }
    }
}

template <typename T>
void conv2d_backward(const Conv2dGeom& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db)
{
    const std::size_t hw = g.out_h() * g.out_w(), wo = g.out_w();
    const std::size_t in_size = g.in_ch * g.height * g.width;
    const std::size_t k = g.patch();
    const std::size_t wsize = g.out_ch * k;
    const bool pointwise = is_pointwise(g);
    const std::size_t rows = tile_rows(g);
    const bool via_transpose = dx && transposed_backward(g);
    const Conv2dGeom tg = transposed_geom(g);
    const std::vector<T> wt = via_transpose ? flip_transpose(g, w) : std::vector<T>();
    const std::size_t tscratch = via_transpose ? tg.patch() * tile_rows(tg) * tg.out_w() : 0;
    CMap<T> W(w, g.out_ch, k);
    // Per-sample weight-gradient partials are summed in batch order afterwards so the
    // result does not depend on the thread count.
    std::vector<T> dw_parts(dw ? g.batch * wsize : 0);
#pragma omp parallel
    {
        std::vector<T> col(pointwise ? 0 : k * rows * wo);
        std::vector<T> tcol(tscratch), dxs(via_transpose ? in_size : 0);
#pragma omp for schedule(static)
        for (long b = 0; b < long(g.batch); ++b) {
            const T* xb = x + b * in_size;
            const T* dyb = dy + b * g.out_ch * hw;
            T* dxb = dx ? dx + b * in_size : nullptr;
            if (pointwise) {
                if (dw)
                    MMap<T>(dw_parts.data() + b * wsize, g.out_ch, k).noalias() =
                        CMap<T>(dyb, g.out_ch, hw) * CMap<T>(xb, k, hw).transpose();
                if (dx)
                    MMap<T>(dxb, k, hw).noalias() += W.transpose() * CMap<T>(dyb, g.out_ch, hw);
                continue;
            }
            if (dw) {
                MMap<T> dW(dw_parts.data() + b * wsize, g.out_ch, k);
                dW.setZero();
                for (std::size_t oy0 = 0; oy0 < g.out_h(); oy0 += rows) {
                    const std::size_t oy1 = std::min(g.out_h(), oy0 + rows), n = (oy1 - oy0) * wo;
                    im2col_rows(g, xb, oy0, oy1, col.data());
                    dW.noalias() +=
                        CStridedMap<T>(dyb + oy0 * wo, g.out_ch, n, Eigen::OuterStride<>(hw)) * CMap<T>(col.data(), k, n).transpose();
                }
            }
            if (via_transpose) {
                conv_sample(tg, dyb, wt.data(), dxs.data(), tcol.data());
                for (std::size_t i = 0; i < in_size; ++i)
                    dxb[i] += dxs[i];
            } else if (dx) {
                for (std::size_t oy0 = 0; oy0 < g.out_h(); oy0 += rows) {
                    const std::size_t oy1 = std::min(g.out_h(), oy0 + rows), n = (oy1 - oy0) * wo;
                    MMap<T>(col.data(), k, n).noalias() =
                        W.transpose() * CStridedMap<T>(dyb + oy0 * wo, g.out_ch, n, Eigen::OuterStride<>(hw));
                    col2im_rows_add(g, col.data(), oy0, oy1, dxb);
                }
            }
        }
    }
    if (dw)
        for (std::size_t b = 0; b < g.batch; ++b) {
            const T* part = dw_parts.data() + b * wsize;
            for (std::size_t i = 0; i < wsize; ++i)
                dw[i] += part[i];
        }
    if (db)
        for (std::size_t b = 0; b < g.batch; ++b)
            for (std::size_t co = 0; co < g.out_ch; ++co) {
                const T* r = dy + (b * g.out_ch + co) * hw;
                T acc = 0;
                for (std::size_t p = 0; p < hw; ++p)
                    acc += r[p];
                db[co] += acc;
            }
}

template <typename T>
void attention_forward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                       const T* v, T* probs, T* out)
{
    const T scale = T(1) / std::sqrt(T(head_dim));
    const std::size_t hs = tokens * head_dim;
#pragma omp parallel for schedule(static)
    for (long h = 0; h < long(heads); ++h) {
        CMap<T> Q(q + h * hs, tokens, head_dim);
        CMap<T> K(k + h * hs, tokens, head_dim);
        CMap<T> V(v + h * hs, tokens, head_dim);
        MMap<T> P(probs + h * tokens * tokens, tokens, tokens);
        MMap<T> O(out + h * hs, tokens, head_dim);
        P.noalias() = scale * Q * K.transpose();
        for (std::size_t i = 0; i < tokens; ++i) {
            auto row = P.row(i);
            const T mx = row.maxCoeff();
            row = (row.array() - mx).exp();
            row /= row.sum();
        }
        O.noalias() = P * V;
    }
}

template <typename T>
void attention_backward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                        const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv)
{
    const T scale = T(1) / std::sqrt(T(head_dim));
    const std::size_t hs = tokens * head_dim;
#pragma omp parallel for schedule(static)
    for (long h = 0; h < long(heads); ++h) {
        CMap<T> Q(q + h * hs, tokens, head_dim);
        CMap<T> K(k + h * hs, tokens, head_dim);
        CMap<T> V(v + h * hs, tokens, head_dim);
        CMap<T> P(probs + h * tokens * tokens, tokens, tokens);
        CMap<T> dO(dout + h * hs, tokens, head_dim);
        MMap<T> dQ(dq + h * hs, tokens, head_dim);
        MMap<T> dK(dk + h * hs, tokens, head_dim);
        MMap<T> dV(dv + h * hs, tokens, head_dim);
        dV.noalias() += P.transpose() * dO;
        RowMat<T> dP = dO * V.transpose();
        Eigen::Matrix<T, Eigen::Dynamic, 1> rowdot = (dP.array() * P.array()).rowwise().sum();
        RowMat<T> dS = (P.array() * (dP.array().colwise() - rowdot.array())).matrix() * scale;
        dQ.noalias() += dS * K;
        dK.noalias() += dS.transpose() * Q;
    }
}

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* shift, T eps, T* y,
                        T* mean, T* rstd)
{
#pragma omp parallel for schedule(static) if (rows * d > kChunk)
    for (long r = 0; r < long(rows); ++r) {
        const T* xr = x + r * d;
        T mu = 0;
        for (std::size_t i = 0; i < d; ++i)
            mu += xr[i];
        mu /= T(d);
        T var = 0;
        for (std::size_t i = 0; i < d; ++i)
            var += (xr[i] - mu) * (xr[i] - mu);
        var /= T(d);
        const T rs = T(1) / std::sqrt(var + eps);
        T* yr = y + r * d;
        for (std::size_t i = 0; i < d; ++i)
            yr[i] = (xr[i] - mu) * rs * gain[i] + shift[i];
        mean[r] = mu;
        rstd[r] = rs;
    }
}

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y)
{
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const long chunks = long((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static) if (chunks > 1)
    for (long c = 0; c < chunks; ++c) {
        const std::size_t lo = c * kChunk;
        const std::size_t len = std::min(kChunk, n - lo);
        Eigen::Map<const Arr> xs(x + lo, len);
        Eigen::Map<Arr> ys(y + lo, len);
        const T kc = T(0.7978845608028654), ka = T(0.044715);
        ys = T(0.5) * xs * (T(1) + (kc * (xs + ka * xs.cube())).tanh());
    }
}

template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx)
{
    using Arr = Eigen::Array<T, Eigen::Dynamic, 1>;
    const long chunks = long((n + kChunk - 1) / kChunk);
#pragma omp parallel for schedule(static) if (chunks > 1)
    for (long c = 0; c < chunks; ++c) {
        const std::size_t lo = c * kChunk;
        const std::size_t len = std::min(kChunk, n - lo);
        Eigen::Map<const Arr> xs(x + lo, len);
        Eigen::Map<const Arr> gs(dy + lo, len);
        Eigen::Map<Arr> dxs(dx + lo, len);
        const T kc = T(0.7978845608028654), ka = T(0.044715);
        const Arr t = (kc * (xs + ka * xs.cube())).tanh();
        const Arr du = kc * (T(1) + T(3) * ka * xs.square());
        dxs += gs * (T(0.5) * (T(1) + t) + T(0.5) * xs * (T(1) - t.square()) * du);
    }
}

#define CELLMTL_INSTANTIATE(T)                                                                                  \
    template void gemm<T>(bool, bool, std::size_t, std::size_t, std::size_t, T, const T*, const T*, T, T*);    \
    template void conv2d_forward<T>(const Conv2dGeom&, const T*, const T*, const T*, T*);                       \
    template void conv2d_backward<T>(const Conv2dGeom&, const T*, const T*, const T*, T*, T*, T*);              \
    template void attention_forward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*, T*, \
                                       T*);                                                                     \
    template void attention_backward<T>(std::size_t, std::size_t, std::size_t, const T*, const T*, const T*,    \
                                        const T*, const T*, T*, T*, T*);                                        \
    template void layer_norm_forward<T>(std::size_t, std::size_t, const T*, const T*, const T*, T, T*, T*, T*); \
    template void gelu_forward<T>(std::size_t, const T*, T*);                                                   \
    template void gelu_backward<T>(std::size_t, const T*, const T*, T*);

CELLMTL_INSTANTIATE(float)
CELLMTL_INSTANTIATE(double)

} // namespace parallel
} // namespace cellmtl::kernels
