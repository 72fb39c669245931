#pragma once

// Compute kernels behind the differentiable ops. Each kernel exists twice:
// `serial` is a direct loop-nest reference kept for testing and benchmarking;
// `parallel` is the production path (im2col + blocked GEMM, OpenMP over the
// batch). Both produce the same values up to floating-point reassociation.

#include <cstddef>

namespace cellmtl::kernels {

struct Conv2dGeom {
    std::size_t batch = 1;
    std::size_t in_ch = 1;
    std::size_t height = 1;
    std::size_t width = 1;
    std::size_t out_ch = 1;
    std::size_t kh = 1;
    std::size_t kw = 1;
    std::size_t stride = 1;
    std::size_t pad = 0;

    std::size_t out_h() const { return (height + 2 * pad - kh) / stride + 1; }
    std::size_t out_w() const { return (width + 2 * pad - kw) / stride + 1; }
    std::size_t patch() const { return in_ch * kh * kw; }
};

namespace serial {

/// Row-major C = alpha * op(A) * op(B) + beta * C with contiguous operands.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c);

template <typename T>
void conv2d_forward(const Conv2dGeom& g, const T* x, const T* w, const T* bias, T* y);

/// Any of dx, dw, db may be null. Gradients are accumulated (+=).
template <typename T>
void conv2d_backward(const Conv2dGeom& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db);

/// q, k, v, out: [heads, tokens, head_dim] with `heads` = batch*num_heads; probs: [heads, tokens, tokens].
template <typename T>
void attention_forward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                       const T* v, T* probs, T* out);

/// Gradients are accumulated (+=).
template <typename T>
void attention_backward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                        const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv);

/// Normalizes each of `rows` contiguous vectors of length d. mean/rstd receive per-row stats.
template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* shift, T eps, T* y,
                        T* mean, T* rstd);

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y);

} // namespace serial

namespace parallel {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, T alpha, const T* a,
          const T* b, T beta, T* c);

template <typename T>
void conv2d_forward(const Conv2dGeom& g, const T* x, const T* w, const T* bias, T* y);

template <typename T>
void conv2d_backward(const Conv2dGeom& g, const T* x, const T* w, const T* dy, T* dx, T* dw, T* db);

template <typename T>
void attention_forward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                       const T* v, T* probs, T* out);

template <typename T>
void attention_backward(std::size_t heads, std::size_t tokens, std::size_t head_dim, const T* q, const T* k,
                        const T* v, const T* probs, const T* dout, T* dq, T* dk, T* dv);

template <typename T>
void layer_norm_forward(std::size_t rows, std::size_t d, const T* x, const T* gain, const T* shift, T eps, T* y,
                        T* mean, T* rstd);

template <typename T>
void gelu_forward(std::size_t n, const T* x, T* y);

/// Derivative of the tanh-form GELU, multiplied into `dy` and accumulated into dx.
template <typename T>
void gelu_backward(std::size_t n, const T* x, const T* dy, T* dx);

} // namespace parallel

/// Number of worker threads the parallel kernels will use.
int num_threads();

} // namespace cellmtl::kernels
