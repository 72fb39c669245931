#include "cellmtl/kernels.hpp"

#include "gelu.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace cellmtl::kernels::serial {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c)
{
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            T acc = 0;
            for (std::size_t p = 0; p < k; ++p) {
                const T av = trans_a ? a[p * m + i] : a[i * k + p];
                const T bv = trans_b ? b[j * k + p] : b[p * n + j];
                acc += av * bv;
            }
            c[i * n + j] = alpha * acc + (beta == T(0) ? T(0) : beta * c[i * n + j]);
        }
    }
}

template <typename T>
void conv2d_forward(const Conv2dGeom& g, const T* x, const T* w, const T* bias, T* y)
{
    const std::size_t ho = g.out_h(), wo = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t co = 0; co < g.out_ch; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    T acc = bias ? bias[co] : T(0);
                    for (std::size_t ci = 0; ci < g.in_ch; ++ci)
                        for (std::size_t i = 0; i < g.kh; ++i)
                            for (std::size_t j = 0; j < g.kw; ++j) {
                                const long iy = long(oy * g.stride + i) - long(g.pad);
                                const long ix = long(ox * g.stride + j) - long(g.pad);
                                if (iy < 0 || ix < 0 || iy >= long(g.height) || ix >= long(g.width))
                                    continue;
                                acc += x[((b * g.in_ch + ci) * g.height + iy) * g.width + ix] *
                                       w[((co * g.in_ch + ci) * g.kh + i) * g.kw + j];
                            }
                    y[((b * g.out_ch + co) * ho + oy) * wo + ox] = acc;
                }
}

template <typename T>
void conv2d_backward(const Conv2dGeom& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db)
{
    const std::size_t ho = g.out_h(), wo = g.out_w();
    for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t co = 0; co < g.out_ch; ++co)
            for (std::size_t oy = 0; oy < ho; ++oy)
                for (std::size_t ox = 0; ox < wo; ++ox) {
                    const T gy = dy[((b * g.out_ch + co) * ho + oy) * wo + ox];
                    if (db)
                        db[co] += gy;
                    for (std::size_t ci = 0; ci < g.in_ch; ++ci)
                        for (std::size_t i = 0; i < g.kh; ++i)
                            for (std::size_t j = 0; j < g.kw; ++j) {
                                const long iy = long(oy * g.stride + i) - long(g.pad);
                                const long ix = long(ox * g.stride + j) - long(g.pad);
                                if (iy < 0 || ix < 0 || iy >= long(g.height) || ix >= long(g.width))
                                    continue;
                                const std::size_t xi = ((b * g.in_ch + ci) * g.height + iy) * g.width + ix;
                                const std::size_t wi = ((co * g.in_ch + ci) * g.kh + i) * g.kw + j;
                                if (dx)
                                    dx[xi] += gy * w[wi];
                                if (dw)
                                    dw[wi] += gy * x[xi];
                            }
                }
}

template <typename T>
void attention_forward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                       const T* v, T* probs, T* out)
{
    const T scale = T(1) / std::sqrt(T(head_dim));
    const std::size_t hs = tokens * head_dim;
    for (std::size_t h = 0; h < heads; ++h) {
        const T* qh = q + h * hs;
        const T* kh = k + h * hs;
        const T* vh = v + h * hs;
        T* ph = probs + h * tokens * tokens;
        T* oh = out + h * hs;
        for (std::size_t i = 0; i < tokens; ++i) {
            T mx = -INFINITY;
            for (std::size_t j = 0; j < tokens; ++j) {
                T s = 0;
                for (std::size_t d = 0; d < head_dim; ++d)
                    s += qh[i * head_dim + d] * kh[j * head_dim + d];
                ph[i * tokens + j] = s * scale;
                mx = std::max(mx, ph[i * tokens + j]);
            }
            T z = 0;
            for (std::size_t j = 0; j < tokens; ++j) {
                ph[i * tokens + j] = std::exp(ph[i * tokens + j] - mx);
                z += ph[i * tokens + j];
            }
            for (std::size_t j = 0; j < tokens; ++j)
                ph[i * tokens + j] /= z;
            for (std::size_t d = 0; d < head_dim; ++d) {
                T acc = 0;
                for (std::size_t j = 0; j < tokens; ++j)
                    acc += ph[i * tokens + j] * vh[j * head_dim + d];
                oh[i * head_dim + d] = acc;
            }
        }
    }
}

template <typename T>
void attention_backward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                        const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv)
{
    const T scale = T(1) / std::sqrt(T(head_dim));
    const std::size_t hs = tokens * head_dim;
    std::vector<T> dp(tokens * tokens);
    for (std::size_t h = 0; h < heads; ++h) {
        const T* qh = q + h * hs;
        const T* kh = k + h * hs;
        const T* vh = v + h * hs;
        const T* ph = probs + h * tokens * tokens;
        const T* doh = dout + h * hs;
        for (std::size_t i = 0; i < tokens; ++i)
            for (std::size_t j = 0; j < tokens; ++j) {
                T s = 0;
                for (std::size_t d = 0; d < head_dim; ++d)
                    s += doh[i * head_dim + d] * vh[j * head_dim + d];
                dp[i * tokens + j] = s;
            }
        for (std::size_t j = 0; j < tokens; ++j)
            for (std::size_t d = 0; d < head_dim; ++d) {
                T acc = 0;
                for (std::size_t i = 0; i < tokens; ++i)
                    acc += ph[i * tokens + j] * doh[i * head_dim + d];
                dv[h * hs + j * head_dim + d] += acc;
            }
        for (std::size_t i = 0; i < tokens; ++i) {
            T rowdot = 0;
            for (std::size_t j = 0; j < tokens; ++j)
                rowdot += dp[i * tokens + j] * ph[i * tokens + j];
            for (std::size_t j = 0; j < tokens; ++j) {
                const T ds = ph[i * tokens + j] * (dp[i * tokens + j] - rowdot) * scale;
                for (std::size_t d = 0; d < head_dim; ++d) {
                    dq[h * hs + i * head_dim + d] += ds * kh[j * head_dim + d];
                    dk[h * hs + j * head_dim + d] += ds * qh[i * head_dim + d];
                }
            }
        }
    }
}

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* shift, T eps, T* y,
                        T* mean, T* rstd)
{
    for (std::size_t r = 0; r < rows; ++r) {
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
        for (std::size_t i = 0; i < d; ++i)
            y[r * d + i] = (xr[i] - mu) * rs * gain[i] + shift[i];
        mean[r] = mu;
        rstd[r] = rs;
    }
}

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y)
{
    for (std::size_t i = 0; i < n; ++i)
        y[i] = detail::gelu(x[i]);
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
    template void gelu_forward<T>(std::size_t, const T*, T*);

CELLMTL_INSTANTIATE(float)
CELLMTL_INSTANTIATE(double)

} // namespace cellmtl::kernels::serial
