#include "cellmtl/losses.hpp"

#include "cellmtl/errors.hpp"
#include "cellmtl/ops.hpp"

#include <spdlog/spdlog.h>

#include <cmath>
#include <limits>

namespace cellmtl {

void LossWeights::validate() const
{
    if (lambda_cls < 0 || lambda_reg < 0 || lambda_aux < 0)
        throw ConfigError("loss: lambda weights must be non-negative");
    if (gamma < 0 || beta < 0)
        throw ConfigError("loss: gamma and beta must be non-negative");
    if (!(pearson_eps > 0))
        throw ConfigError("loss: pearson_eps must be positive");
    for (double a : alpha)
        if (!(a > 0))
            throw ConfigError("loss: class weights alpha must be positive");
}

std::vector<double> inverse_frequency_alpha(const std::vector<std::uint8_t>& labels, std::size_t n_classes)
{
    std::vector<double> count(n_classes, 0.0);
    for (auto y : labels) {
        if (y >= n_classes)
            throw InputError("class label " + std::to_string(y) + " out of range");
        count[y] += 1.0;
    }
    std::vector<double> alpha(n_classes);
    double sum = 0;
    for (std::size_t c = 0; c < n_classes; ++c) {
        alpha[c] = 1.0 / std::max(count[c], 1.0);
        sum += alpha[c];
    }
    for (double& a : alpha)
        a *= double(n_classes) / sum;
    return alpha;
}

template <typename T>
Var<T> focal_loss(const Var<T>& probs, const std::vector<std::uint8_t>& labels, const std::vector<double>& alpha,
                  double gamma)
{
    if (probs.value().rank() != 2)
        throw DimensionError("focal_loss: probabilities must be [B,C], got " + shape_str(probs.shape()));
    const std::size_t B = probs.shape()[0], C = probs.shape()[1];
    if (labels.size() != B)
        throw DimensionError("focal_loss: " + std::to_string(labels.size()) + " labels for batch of " +
                             std::to_string(B) + " (axis 0)");
    if (alpha.size() != C)
        throw DimensionError("focal_loss: alpha has " + std::to_string(alpha.size()) + " entries, expected " +
                             std::to_string(C));
    if (B == 0)
        throw InputError("focal_loss: empty batch");

    Tensor<T> onehot({B, C});
    Tensor<T> weight({B});
    for (std::size_t i = 0; i < B; ++i) {
        if (labels[i] >= C)
            throw InputError("focal_loss: label " + std::to_string(labels[i]) + " out of range at row " +
                             std::to_string(i));
        onehot.at({i, labels[i]}) = T(1);
        weight[i] = T(-alpha[labels[i]]);
    }
    auto p = ops::sum(ops::mul(probs, ops::constant(std::move(onehot))), 1);
    p = ops::clamp(p, T(1e-7), T(1 - 1e-7));
    auto per = ops::mul(ops::log(p), ops::constant(std::move(weight)));
    if (gamma != 0)
        per = ops::mul(per, ops::pow_scalar(ops::affine(p, T(-1), T(1)), T(gamma)));
    return ops::mean_all(per);
}

template <typename T>
RegressionTerms<T> regression_loss(const Var<T>& pred, const Var<T>& target, double beta, double pearson_eps)
{
    if (pred.shape() != target.shape() || pred.value().rank() != 2)
        throw DimensionError("regression_loss: prediction " + shape_str(pred.shape()) + " and target " +
                             shape_str(target.shape()) + " must be equal [B,M] shapes");
    const std::size_t B = pred.shape()[0];
    if (B == 0)
        throw InputError("regression_loss: empty batch");

    RegressionTerms<T> out;
    out.smooth_l1 = ops::mean_all(ops::smooth_l1(ops::sub(pred, target), T(1)));
    out.total = out.smooth_l1;
    if (B < 2) {
        spdlog::warn("regression_loss: batch of {} row(s), Pearson term skipped", B);
        return out;
    }
    if (beta == 0)
        return out;

    const T inf = std::numeric_limits<T>::infinity();
    auto centre = [](const Var<T>& x) { return ops::sub(x, ops::mean(x, 0)); };
    auto pc = centre(pred);
    auto tc = centre(target);
    auto cov = ops::mean(ops::mul(pc, tc), 0);
    auto sd = [&](const Var<T>& c) { return ops::sqrt(ops::clamp(ops::mean(ops::square(c), 0), T(pearson_eps), inf)); };
    auto r = ops::div(cov, ops::mul(sd(pc), sd(tc)));
    out.pearson = ops::affine(ops::mean_all(r), T(-1), T(1));
    out.total = ops::add(out.smooth_l1, ops::affine(out.pearson, T(beta), T(0)));
    return out;
}

template <typename T>
Var<T> aux_consistency_loss(const Var<T>& h_fused, const Var<T>& h_cls, const Var<T>& h_reg)
{
    std::vector<Var<T>> terms;
    for (const auto* h : {&h_cls, &h_reg}) {
        if (!h->defined())
            continue;
        if (h->shape() != h_fused.shape())
            throw DimensionError("aux_consistency_loss: task feature " + shape_str(h->shape()) +
                                 " does not match fused " + shape_str(h_fused.shape()));
        terms.push_back(ops::mean_all(ops::square(ops::sub(h_fused, *h))));
    }
    if (terms.empty())
        throw InputError("aux_consistency_loss: no task features");
    if (terms.size() == 1)
        return terms[0];
    return ops::affine(ops::add(terms[0], terms[1]), T(0.5), T(0));
}

template <typename T>
LossResult<T> total_loss(const ForwardOutput<T>& out, const std::vector<std::uint8_t>& labels,
                         const Tensor<T>& targets, const LossWeights& w)
{
    w.validate();
    LossResult<T> res;
    std::vector<Var<T>> terms;
    if (w.lambda_cls > 0 && out.cls_probs.defined()) {
        auto l = focal_loss(out.cls_probs, labels, w.alpha, w.gamma);
        res.parts.cls = double(l.item());
        terms.push_back(ops::affine(l, T(w.lambda_cls), T(0)));
    }
    if (w.lambda_reg > 0 && out.reg_values.defined()) {
        auto r = regression_loss(out.reg_values, ops::constant(targets), w.beta, w.pearson_eps);
        res.parts.reg = double(r.total.item());
        res.parts.reg_smooth_l1 = double(r.smooth_l1.item());
        res.parts.reg_pearson = r.pearson.defined() ? double(r.pearson.item()) : 0.0;
        terms.push_back(ops::affine(r.total, T(w.lambda_reg), T(0)));
    }
    if (w.lambda_aux > 0 && (out.h_cls.defined() || out.h_reg.defined())) {
        auto a = aux_consistency_loss(out.h_fused, out.h_cls, out.h_reg);
        res.parts.aux = double(a.item());
        terms.push_back(ops::affine(a, T(w.lambda_aux), T(0)));
    }
    if (terms.empty()) {
        res.total = ops::constant(Tensor<T>::scalar(T(0)));
    } else {
        res.total = terms[0];
        for (std::size_t i = 1; i < terms.size(); ++i)
            res.total = ops::add(res.total, terms[i]);
    }
    res.parts.total = double(res.total.item());
    if (!std::isfinite(res.parts.total))
        throw NumericalError("non-finite total loss", "loss");
    return res;
}

#define CELLMTL_INSTANTIATE_LOSSES(T)                                                                              \
    template Var<T> focal_loss(const Var<T>&, const std::vector<std::uint8_t>&, const std::vector<double>&, double); \
    template RegressionTerms<T> regression_loss(const Var<T>&, const Var<T>&, double, double);                      \
    template Var<T> aux_consistency_loss(const Var<T>&, const Var<T>&, const Var<T>&);                             \
    template LossResult<T> total_loss(const ForwardOutput<T>&, const std::vector<std::uint8_t>&, const Tensor<T>&,   \
                                      const LossWeights&);

CELLMTL_INSTANTIATE_LOSSES(float)
CELLMTL_INSTANTIATE_LOSSES(double)

} // namespace cellmtl
