#include "cellmtl/pipeline.hpp"

#include <cmath>
#include <numbers>

namespace cellmtl {

double cosine_lr(std::size_t epoch, std::size_t epochs, double lr_init, double lr_final)
{
    if (epochs <= 1)
        return lr_init;
    const double progress = double(std::min(epoch, epochs - 1)) / double(epochs - 1);
    return lr_final + 0.5 * (lr_init - lr_final) * (1 + std::cos(std::numbers::pi * progress));
}

double clip_grad_norm(ParameterSet<float>& params, double max_norm)
{
    double sq = 0;
    for (const auto& [path, v] : params.entries())
        if (!v.grad().empty())
            for (float g : v.grad().span())
                sq += double(g) * g;
    const double norm = std::sqrt(sq);
    if (max_norm > 0 && norm > max_norm) {
        const float scale = float(max_norm / (norm + 1e-12));
        for (auto& [path, v] : params.entries())
            if (!v.grad().empty())
                for (float& g : v.mutable_grad().span())
                    g *= scale;
    }
    return norm;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay)
{
}

void AdamW::step(ParameterSet<float>& params, double lr)
{
    ++t_;
    for (auto& [path, v] : params.entries()) {
        if (v.grad().empty())
            continue;
        auto& st = state_[path];
        auto w = v.mutable_value().span();
        const auto g = v.grad().span();
        if (st.m.empty()) {
            st.m.assign(w.size(), 0.0);
            st.v.assign(w.size(), 0.0);
        }
        // per-parameter step count: a tensor that skipped steps gets the bias correction of its own history
        ++st.t;
        const double c1 = 1 - std::pow(beta1_, double(st.t)), c2 = 1 - std::pow(beta2_, double(st.t));
        for (std::size_t i = 0; i < w.size(); ++i) {
            st.m[i] = beta1_ * st.m[i] + (1 - beta1_) * g[i];
            st.v[i] = beta2_ * st.v[i] + (1 - beta2_) * double(g[i]) * g[i];
            const double update = (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + eps_);
            w[i] = float(double(w[i]) - lr * (update + wd_ * double(w[i])));
        }
    }
}

} // namespace cellmtl
