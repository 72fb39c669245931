#pragma once

// Differentiable operations over Var<T>. Every op records a backward closure when
// any input requires grad; all of them are covered by finite-difference checks.
//
// Binary elementwise ops broadcast NumPy-style (shapes right-aligned, size-1 axes
// stretch).

#include "cellmtl/autograd.hpp"
#include "cellmtl/rng.hpp"

#include <cstddef>
#include <vector>

namespace cellmtl::ops {

Shape broadcast_shape(const Shape& a, const Shape& b);

// elementwise
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> sub(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> div(const Var<T>& a, const Var<T>& b);
/// scale * x + shift
template <typename T> Var<T> affine(const Var<T>& x, T scale, T shift);

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> sigmoid(const Var<T>& x);
template <typename T> Var<T> log(const Var<T>& x);
template <typename T> Var<T> exp(const Var<T>& x);
template <typename T> Var<T> sqrt(const Var<T>& x);
template <typename T> Var<T> square(const Var<T>& x);
template <typename T> Var<T> pow_scalar(const Var<T>& x, T p);
/// Clamps into [lo, hi]; gradient is zero where clamping is active.
template <typename T> Var<T> clamp(const Var<T>& x, T lo, T hi);
/// Elementwise Huber-style SmoothL1 with transition point `beta`.
template <typename T> Var<T> smooth_l1(const Var<T>& x, T beta = T(1));

// reductions
template <typename T> Var<T> sum_all(const Var<T>& x);
template <typename T> Var<T> mean_all(const Var<T>& x);
/// Reduces (and removes) one axis.
template <typename T> Var<T> sum(const Var<T>& x, int axis);
template <typename T> Var<T> mean(const Var<T>& x, int axis);

// shape
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
template <typename T> Var<T> permute(const Var<T>& x, const std::vector<std::size_t>& perm);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(const Var<T>& x, int axis, std::size_t start, std::size_t len);
template <typename T> Var<T> broadcast_to(const Var<T>& x, const Shape& shape);
/// out[b] = x[b, index[b]] for x of shape [B, C].
template <typename T> Var<T> gather_rows(const Var<T>& x, const std::vector<std::size_t>& index);

// network layers
/// x: [..., din], weight: [dout, din], bias: [dout] or undefined.
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);
/// Cross-correlation. x: [B, Cin, H, W], weight: [Cout, Cin, kh, kw], bias: [Cout] or undefined.
template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& weight, const Var<T>& bias, std::size_t stride, std::size_t padding);
/// Same-length 1-D convolution along the last axis of x: [B, L] with weight [k] (k odd) and bias [1].
template <typename T> Var<T> conv1d_same(const Var<T>& x, const Var<T>& weight, const Var<T>& bias);

template <typename T>
struct BatchNormStats {
    Tensor<T> running_mean;
    Tensor<T> running_var;
};

/// Per-channel normalization of x: [B, C, H, W]. Train mode normalizes with batch
/// statistics (biased variance) and updates the running estimates with `momentum`
/// (unbiased variance); eval mode normalizes with the running estimates.
template <typename T>
Var<T> batch_norm2d(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, BatchNormStats<T>& stats, bool train,
                    T momentum, T eps);
/// Normalizes the last axis to zero mean / unit (biased) variance, then gain * xhat + shift.
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& shift, T eps);
/// Max-shifted softmax over the last axis.
template <typename T> Var<T> softmax(const Var<T>& x);
/// Inverted dropout: in train mode zeroes with probability p and rescales survivors by 1/(1-p).
template <typename T> Var<T> dropout(const Var<T>& x, T p, bool train, Rng& rng);
/// softmax(q k^T / sqrt(dh)) v per head; q, k, v: [B, heads, T, dh].
template <typename T> Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v);

/// Leaf variable helpers.
template <typename T> Var<T> constant(Tensor<T> value);
template <typename T> Var<T> parameter(Tensor<T> value, std::string name = "param");

} // namespace cellmtl::ops
