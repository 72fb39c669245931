#pragma once

#include <cmath>

namespace cellmtl::detail {

// tanh-form GELU: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
inline constexpr double kGeluC = 0.7978845608028654;
inline constexpr double kGeluA = 0.044715;

template <typename T>
inline T gelu(T x)
{
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
inline T gelu_grad(T x)
{
    const T u = T(kGeluC) * (x + T(kGeluA) * x * x * x);
    const T t = std::tanh(u);
    const T du = T(kGeluC) * (T(1) + T(3 * kGeluA) * x * x);
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * du;
}

} // namespace cellmtl::detail
