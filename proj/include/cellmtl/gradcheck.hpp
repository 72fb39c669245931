#pragma once

#include "cellmtl/autograd.hpp"

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace cellmtl {

struct GradCheckOptions {
    /// Central-difference step; must lie in [1e-6, 1e-3].
    double eps = 1e-6;
    /// Blocks up to this size are swept exhaustively, larger ones sampled at this many coordinates.
    std::size_t coords_per_block = 32;
    /// When non-zero, blocks larger than `coords_per_block` are probed along this many
    /// random unit directions instead of sampled coordinates.
    std::size_t directions = 0;
    /// Gradient norms below this are compared in absolute terms.
    double abs_floor = 1e-8;
    std::uint64_t seed = 0x5eed;
};

struct GradCheckBlock {
    std::string name;
    std::size_t numel = 0;
    std::size_t probes = 0;
    double analytic_norm = 0;
    double numeric_norm = 0;
    /// ||analytic - numeric|| / max(||numeric||, abs_floor) over the probed entries.
    double rel_error = 0;
};

struct GradCheckResult {
    double loss = 0;
    double max_rel_error = 0;
    std::vector<GradCheckBlock> blocks;

    bool passed(double tol) const { return max_rel_error < tol; }
};

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Var<T>>>;

/// Compares reverse-mode gradients of the scalar `f` against central differences
/// (f(x+eps) - f(x-eps)) / (2 eps). `f` must be deterministic: it is re-evaluated for
/// every probe. Throws NumericalError if any evaluation is non-finite.
template <typename T>
GradCheckResult grad_check(const std::function<Var<T>()>& f, NamedParams<T> params,
                           const GradCheckOptions& options = {});

extern template GradCheckResult grad_check<float>(const std::function<Var<float>()>&, NamedParams<float>,
                                                  const GradCheckOptions&);
extern template GradCheckResult grad_check<double>(const std::function<Var<double>()>&, NamedParams<double>,
                                                   const GradCheckOptions&);

} // namespace cellmtl
