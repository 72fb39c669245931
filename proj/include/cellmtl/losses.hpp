#pragma once

#include "cellmtl/autograd.hpp"
#include "cellmtl/model.hpp"

#include <cstdint>
#include <vector>

namespace cellmtl {

struct LossWeights {
    double lambda_cls = 1.0;
    double lambda_reg = 1.0;
    double lambda_aux = 0.1;
    double gamma = 2.0;
    std::vector<double> alpha{1.0, 1.0, 1.0};
    double beta = 0.5;
    double pearson_eps = 1e-8;

    /// Throws ConfigError on negative weights, non-positive alpha or pearson_eps.
    void validate() const;
};

/// Unweighted loss terms of one evaluation, for logging.
struct LossBreakdown {
    double total = 0;
    double cls = 0;
    double reg = 0;
    double reg_smooth_l1 = 0;
    double reg_pearson = 0;
    double aux = 0;

    bool operator==(const LossBreakdown&) const = default;
};

template <typename T>
struct LossResult {
    Var<T> total;
    LossBreakdown parts;
};

/// Inverse class frequency normalized to mean 1. Absent classes are counted once.
std::vector<double> inverse_frequency_alpha(const std::vector<std::uint8_t>& labels, std::size_t n_classes);

/// mean_i -alpha[y_i] (1 - p_i)^gamma log p_i with p_i = probs[i, y_i] clamped to [1e-7, 1 - 1e-7].
template <typename T>
Var<T> focal_loss(const Var<T>& probs, const std::vector<std::uint8_t>& labels, const std::vector<double>& alpha,
                  double gamma);

template <typename T>
struct RegressionTerms {
    Var<T> total;
    Var<T> smooth_l1;
    Var<T> pearson; ///< mean over markers of (1 - r_m); undefined when skipped
};

/// SmoothL1 (transition 1) + beta * mean_m (1 - r_m). r_m is the across-batch Pearson
/// correlation with each standard deviation floored at sqrt(pearson_eps).
/// With fewer than two rows the correlation term is skipped and a warning is logged.
template <typename T>
RegressionTerms<T> regression_loss(const Var<T>& pred, const Var<T>& target, double beta, double pearson_eps);

/// 0.5 * (mse(h_fused, h_cls) + mse(h_fused, h_reg)); an undefined task feature is left out.
template <typename T>
Var<T> aux_consistency_loss(const Var<T>& h_fused, const Var<T>& h_cls, const Var<T>& h_reg);

/// Weighted sum of the three terms. Terms with zero weight, or whose head is disabled,
/// are left out of the graph entirely.
template <typename T>
LossResult<T> total_loss(const ForwardOutput<T>& out, const std::vector<std::uint8_t>& labels,
                         const Tensor<T>& targets, const LossWeights& weights);

} // namespace cellmtl
