#include "cellmtl/gradcheck.hpp"

#include "cellmtl/errors.hpp"
#include "cellmtl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cellmtl {
namespace {

template <typename T>
double eval_scalar(const std::function<Var<T>()>& f, const std::string& context)
{
    const Var<T> y = f();
    if (y.numel() != 1)
        throw DimensionError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
    const double v = double(y.item());
    if (!std::isfinite(v))
        throw NumericalError("grad_check: non-finite function value while probing " + context, context);
    return v;
}

std::vector<std::size_t> sample_coords(std::size_t n, std::size_t k, Rng& rng)
{
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (n <= k)
        return idx;
    for (std::size_t i = 0; i < k; ++i)
        std::swap(idx[i], idx[i + rng.below(n - i)]);
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

} // namespace

template <typename T>
GradCheckResult grad_check(const std::function<Var<T>()>& f, NamedParams<T> params, const GradCheckOptions& options)
{
    if (options.eps < 1e-6 * (1 - 1e-9) || options.eps > 1e-3 * (1 + 1e-9))
        throw InputError("grad_check: eps must lie in [1e-6, 1e-3]");

    for (auto& [name, p] : params)
        p.zero_grad();
    GradCheckResult result;
    {
        const Var<T> y = f();
        if (y.numel() != 1)
            throw DimensionError("grad_check: function must return a scalar, got " + shape_str(y.shape()));
        result.loss = double(y.item());
        if (!std::isfinite(result.loss))
            throw NumericalError("grad_check: non-finite function value at the probe point", "root");
        y.backward();
    }

    Rng rng(options.seed);
    const T eps = T(options.eps);
    for (auto& [name, p] : params) {
        const std::size_t n = p.numel();
        std::vector<double> analytic(n, 0.0);
        if (p.grad().numel() == n)
            for (std::size_t i = 0; i < n; ++i)
                analytic[i] = double(p.grad()[i]);
        for (double a : analytic)
            if (!std::isfinite(a))
                throw NumericalError("grad_check: non-finite analytic gradient in " + name, name);

        std::vector<double> a_probe, n_probe;
        T* values = p.mutable_value().data();
        if (options.directions > 0 && n > options.coords_per_block) {
            std::vector<double> dir(n);
            const std::vector<T> saved(values, values + n);
            for (std::size_t k = 0; k < options.directions; ++k) {
                double norm = 0;
                for (double& d : dir) {
                    d = rng.normal();
                    norm += d * d;
                }
                norm = std::sqrt(norm);
                double dot = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    dir[i] /= norm;
                    dot += analytic[i] * dir[i];
                }
                for (std::size_t i = 0; i < n; ++i)
                    values[i] = saved[i] + eps * T(dir[i]);
                const double fp = eval_scalar(f, name);
                for (std::size_t i = 0; i < n; ++i)
                    values[i] = saved[i] - eps * T(dir[i]);
                const double fm = eval_scalar(f, name);
                std::copy(saved.begin(), saved.end(), values);
                a_probe.push_back(dot);
                n_probe.push_back((fp - fm) / (2.0 * double(eps)));
            }
        } else {
            for (std::size_t i : sample_coords(n, options.coords_per_block, rng)) {
                const T saved = values[i];
                values[i] = saved + eps;
                const double fp = eval_scalar(f, name);
                values[i] = saved - eps;
                const double fm = eval_scalar(f, name);
                values[i] = saved;
                a_probe.push_back(analytic[i]);
                // Divide by the step actually taken, which differs from eps after rounding in float.
                const double step = double(saved + eps) - double(saved - eps);
                n_probe.push_back((fp - fm) / step);
            }
        }

        GradCheckBlock block;
        block.name = name;
        block.numel = n;
        block.probes = a_probe.size();
        double diff = 0, an = 0, nn = 0;
        for (std::size_t i = 0; i < a_probe.size(); ++i) {
            diff += (a_probe[i] - n_probe[i]) * (a_probe[i] - n_probe[i]);
            an += a_probe[i] * a_probe[i];
            nn += n_probe[i] * n_probe[i];
        }
        block.analytic_norm = std::sqrt(an);
        block.numeric_norm = std::sqrt(nn);
        block.rel_error = std::sqrt(diff) / std::max(block.numeric_norm, options.abs_floor);
        result.max_rel_error = std::max(result.max_rel_error, block.rel_error);
        result.blocks.push_back(std::move(block));
    }
    return result;
}

template GradCheckResult grad_check<float>(const std::function<Var<float>()>&, NamedParams<float>,
                                           const GradCheckOptions&);
template GradCheckResult grad_check<double>(const std::function<Var<double>()>&, NamedParams<double>,
                                            const GradCheckOptions&);

} // namespace cellmtl
