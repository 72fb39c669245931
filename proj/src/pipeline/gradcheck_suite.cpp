#include "cellmtl/gradcheck.hpp"
#include "cellmtl/ops.hpp"
#include "cellmtl/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <type_traits>

namespace cellmtl {

namespace {

template <typename T>
Tensor<T> random_tensor(Shape shape, Rng& rng, double scale = 1.0)
{
    Tensor<T> t(std::move(shape));
    for (T& v : t.span())
        v = T(rng.normal() * scale);
    return t;
}

template <typename T>
Var<T> param(Shape shape, Rng& rng, double scale, std::string name)
{
    return ops::parameter<T>(random_tensor<T>(std::move(shape), rng, scale), std::move(name));
}

// sum(y * r) with a fixed random r, so every output element gets a distinct upstream gradient
template <typename T>
Var<T> probe(const Var<T>& y, std::uint64_t seed)
{
    Rng rng(seed);
    return ops::sum_all(ops::mul(y, ops::constant(random_tensor<T>(y.shape(), rng))));
}

template <typename T>
GradCheckOptions op_options(std::uint64_t seed)
{
    GradCheckOptions o;
    o.eps = std::is_same_v<T, double> ? 1e-6 : 1e-3;
    o.abs_floor = std::is_same_v<T, double> ? 1e-8 : 1e-4;
    o.seed = seed;
    return o;
}

template <typename T>
constexpr const char* precision_name()
{
    return std::is_same_v<T, double> ? "double" : "float";
}

template <typename T>
void op_suite(std::uint64_t seed, std::vector<GradCheckEntry>& out)
{
    Rng rng(derive_seed(seed, std::string("ops-") + precision_name<T>()));
    const double tol = std::is_same_v<T, double> ? kGradTolDouble : kGradTolFloat;
    std::uint64_t probe_seed = derive_seed(seed, "probe");

    auto run = [&](const std::string& name, const std::function<Var<T>()>& f, NamedParams<T> params) {
        const auto t0 = std::chrono::steady_clock::now();
        const auto r = grad_check<T>(f, std::move(params), op_options<T>(seed));
        out.push_back({name, precision_name<T>(), r.max_rel_error, tol,
                       std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()});
    };
    auto p = [&](const Var<T>& y) { return probe(y, probe_seed); };

    auto a = param<T>({3, 4, 5}, rng, 1.0, "a");
    auto b = param<T>({4, 1}, rng, 1.0, "b");
    // strictly positive input for log / sqrt / pow, away from clamp edges
    auto pos = ops::parameter<T>(Tensor<T>({3, 4}, T(1.5)), "pos");
    for (std::size_t i = 0; i < pos.numel(); ++i)
        pos.mutable_value()[i] += T(rng.uniform(0.0, 1.0));
    const NamedParams<T> ab{{"a", a}, {"b", b}};
    const NamedParams<T> pa{{"a", a}};
    const NamedParams<T> pp{{"pos", pos}};
    const auto one = ops::constant(Tensor<T>::scalar(T(1)));

    run("add", [&] { return p(ops::add(a, b)); }, ab);
    run("sub", [&] { return p(ops::sub(a, b)); }, ab);
    run("mul", [&] { return p(ops::mul(a, b)); }, ab);
    run("div", [&] { return p(ops::div(a, ops::add(ops::square(b), one))); }, ab);
    run("affine", [&] { return p(ops::affine(a, T(-2), T(0.5))); }, pa);
    run("gelu", [&] { return p(ops::gelu(a)); }, pa);
    run("sigmoid", [&] { return p(ops::sigmoid(a)); }, pa);
    run("exp", [&] { return p(ops::exp(a)); }, pa);
    run("log", [&] { return p(ops::log(pos)); }, pp);
    run("sqrt", [&] { return p(ops::sqrt(pos)); }, pp);
    run("square", [&] { return p(ops::square(a)); }, pa);
    run("pow_scalar", [&] { return p(ops::pow_scalar(pos, T(2.5))); }, pp);
    run("clamp", [&] { return p(ops::clamp(pos, T(1.7), T(2.2))); }, pp);
    run("smooth_l1", [&] { return p(ops::smooth_l1(ops::affine(a, T(2), T(0)))); }, pa);
    run("sum_all", [&] { return ops::sum_all(ops::square(a)); }, pa);
    run("mean_all", [&] { return ops::mean_all(ops::square(a)); }, pa);
    run("sum", [&] { return p(ops::sum(a, -1)); }, pa);
    run("mean", [&] { return p(ops::mean(a, 1)); }, pa);
    run("reshape", [&] { return p(ops::reshape(a, {12, 5})); }, pa);
    run("permute", [&] { return p(ops::permute(a, {2, 0, 1})); }, pa);
    run("concat", [&] { return p(ops::concat<T>({a, ops::square(a)}, 2)); }, pa);
    run("slice", [&] { return p(ops::slice(a, 1, 1, 2)); }, pa);
    run("broadcast_to", [&] { return p(ops::broadcast_to(b, {2, 4, 3})); }, {{"b", b}});
    auto m = param<T>({4, 3}, rng, 1.0, "m");
    run("gather_rows", [&] { return p(ops::gather_rows(m, {2, 0, 1, 2})); }, {{"m", m}});

    auto x = param<T>({2, 3, 5}, rng, 1.0, "x");
    auto w = param<T>({4, 5}, rng, 0.5, "w");
    auto bias = param<T>({4}, rng, 0.5, "bias");
    run("linear", [&] { return p(ops::linear(x, w, bias)); }, {{"x", x}, {"w", w}, {"bias", bias}});

    auto img = param<T>({2, 3, 6, 6}, rng, 1.0, "img");
    auto cw = param<T>({4, 3, 3, 3}, rng, 0.3, "cw");
    auto cb = param<T>({4}, rng, 0.3, "cb");
    run("conv2d", [&] { return p(ops::conv2d(img, cw, cb, 1, 1)); }, {{"img", img}, {"cw", cw}, {"cb", cb}});
    run("conv2d_strided", [&] { return p(ops::conv2d(img, cw, cb, 2, 1)); }, {{"img", img}, {"cw", cw}, {"cb", cb}});
    auto pw = param<T>({5, 3, 1, 1}, rng, 0.5, "pw");
    run("conv2d_pointwise", [&] { return p(ops::conv2d(img, pw, Var<T>(), 1, 0)); }, {{"img", img}, {"pw", pw}});
    // enough input channels to exercise the transposed input-gradient path
    auto wide = param<T>({1, 9, 5, 5}, rng, 1.0, "wide");
    auto ww = param<T>({3, 9, 3, 3}, rng, 0.3, "ww");
    run("conv2d_wide", [&] { return p(ops::conv2d(wide, ww, Var<T>(), 1, 1)); }, {{"wide", wide}, {"ww", ww}});

    auto seq = param<T>({3, 4}, rng, 1.0, "seq");
    auto k = param<T>({3}, rng, 1.0, "k");
    auto kb = param<T>({1}, rng, 1.0, "kb");
    run("conv1d_same", [&] { return p(ops::conv1d_same(seq, k, kb)); }, {{"seq", seq}, {"k", k}, {"kb", kb}});

    auto gamma = param<T>({3}, rng, 0.5, "gamma");
    auto beta = param<T>({3}, rng, 0.5, "beta");
    for (std::size_t i = 0; i < 3; ++i)
        gamma.mutable_value()[i] += T(1);
    run("batch_norm2d",
        [&] {
            ops::BatchNormStats<T> stats{Tensor<T>({3}), Tensor<T>({3}, T(1))};
            return p(ops::batch_norm2d(img, gamma, beta, stats, true, T(0.1), T(1e-5)));
        },
        {{"img", img}, {"gamma", gamma}, {"beta", beta}});

    auto lg = param<T>({5}, rng, 1.0, "lg");
    auto ls = param<T>({5}, rng, 1.0, "ls");
    run("layer_norm", [&] { return p(ops::layer_norm(a, lg, ls, T(1e-5))); }, {{"a", a}, {"lg", lg}, {"ls", ls}});
    run("softmax", [&] { return p(ops::softmax(a)); }, pa);
    run("dropout",
        [&] {
            Rng fixed(derive_seed(seed, "dropout"));
            return p(ops::dropout(a, T(0.3), true, fixed));
        },
        pa);
    auto q = param<T>({1, 2, 6, 4}, rng, 0.5, "q");
    auto kk = param<T>({1, 2, 6, 4}, rng, 0.5, "kk");
    auto v = param<T>({1, 2, 6, 4}, rng, 0.5, "v");
    run("attention", [&] { return p(ops::attention(q, kk, v)); }, {{"q", q}, {"kk", kk}, {"v", v}});
}

template <typename T>
GradCheckEntry model_check(const GradCheckSuiteOptions& opt)
{
    const auto t0 = std::chrono::steady_clock::now();
    HybridNet<T> net(opt.model_config, derive_seed(opt.seed, "gradcheck-model"));
    Rng rng(derive_seed(opt.seed, "gradcheck-input"));
    const std::size_t B = opt.model_batch;
    const auto& mc = net.config();
    const auto x = random_tensor<T>({B, mc.in_channels, mc.image_hw, mc.image_hw}, rng);
    const auto targets = random_tensor<T>({B, mc.n_markers}, rng);
    std::vector<std::uint8_t> y(B);
    for (std::size_t i = 0; i < B; ++i)
        y[i] = std::uint8_t(i % mc.n_classes);
    LossWeights w;
    w.alpha = {0.8, 1.1, 1.1};
    auto f = [&] {
        Rng drop(derive_seed(opt.seed, "gradcheck-dropout"));
        return total_loss(net.forward(ops::constant(x), Mode::train, drop), y, targets, w).total;
    };
    GradCheckOptions o = op_options<T>(opt.seed);
    o.directions = opt.directions;
    const auto r = grad_check<T>(f, net.params().entries(), o);
    const double tol = std::is_same_v<T, double> ? kGradTolDouble : kGradTolFloat;
    for (const auto& b : r.blocks)
        if (b.rel_error >= tol)
            spdlog::warn("gradcheck: model block {} rel. error {:.3g}", b.name, b.rel_error);
    return {"model+total_loss", precision_name<T>(), r.max_rel_error, tol,
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

// Central differences in float cannot resolve a deep composite: with eps <= 1e-3 and a loss near 1 the
// rounding noise of f(x+eps) - f(x-eps) is as large as the per-direction signal. The float backward is
// therefore compared, coordinate for coordinate, against the double backward on identical weights and
// inputs; the double backward is itself tied to central differences by the double entry.
GradCheckEntry model_float_check(const GradCheckSuiteOptions& opt)
{
    const auto t0 = std::chrono::steady_clock::now();
    HybridNet<float> nf(opt.model_config, derive_seed(opt.seed, "gradcheck-model"));
    HybridNet<double> nd(opt.model_config, derive_seed(opt.seed, "gradcheck-model"));
    auto& pf = nf.params().entries();
    auto& pd = nd.params().entries();
    for (std::size_t i = 0; i < pf.size(); ++i) {
        auto& dst = pd[i].second.mutable_value();
        const auto& src = pf[i].second.value();
        for (std::size_t j = 0; j < src.numel(); ++j)
            dst[j] = double(src[j]);
    }
    Rng rng(derive_seed(opt.seed, "gradcheck-input"));
    const std::size_t B = opt.model_batch;
    const auto& mc = nf.config();
    const auto xf = random_tensor<float>({B, mc.in_channels, mc.image_hw, mc.image_hw}, rng);
    const auto tf = random_tensor<float>({B, mc.n_markers}, rng);
    std::vector<std::uint8_t> y(B);
    for (std::size_t i = 0; i < B; ++i)
        y[i] = std::uint8_t(i % mc.n_classes);
    LossWeights w;
    w.alpha = {0.8, 1.1, 1.1};
    {
        Rng drop(derive_seed(opt.seed, "gradcheck-dropout"));
        total_loss(nf.forward(ops::constant(xf), Mode::train, drop), y, tf, w).total.backward();
    }
    {
        Rng drop(derive_seed(opt.seed, "gradcheck-dropout"));
        total_loss(nd.forward(ops::constant(xf.template cast<double>()), Mode::train, drop), y,
                   tf.template cast<double>(), w)
            .total.backward();
    }
    const double floor = 1e-4;
    double worst = 0;
    for (std::size_t i = 0; i < pf.size(); ++i) {
        const auto& a = pf[i].second;
        const auto& b = pd[i].second;
        if (a.grad().empty() || b.grad().empty()) {
            if (a.grad().empty() != b.grad().empty())
                worst = std::numeric_limits<double>::infinity();
            continue;
        }
        double diff = 0, ref = 0;
        for (std::size_t j = 0; j < b.grad().numel(); ++j) {
            const double d = double(a.grad()[j]) - b.grad()[j];
            diff += d * d;
            ref += b.grad()[j] * b.grad()[j];
        }
        const double rel = std::sqrt(diff) / std::max(std::sqrt(ref), floor);
        if (rel >= kGradTolFloat)
            spdlog::warn("gradcheck: float model block {} rel. error {:.3g}", pf[i].first, rel);
        worst = std::max(worst, rel);
    }
    return {"model+total_loss", "float", worst, kGradTolFloat,
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
}

std::string num(double v)
{
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

} // namespace

bool GradCheckReport::passed() const
{
    return !entries.empty() && std::all_of(entries.begin(), entries.end(), [](const auto& e) { return e.passed(); });
}

double GradCheckReport::max_rel_error(const std::string& precision) const
{
    double m = 0;
    for (const auto& e : entries)
        if (e.precision == precision)
            m = std::max(m, e.max_rel_error);
    return m;
}

GradCheckReport run_gradcheck(const GradCheckSuiteOptions& opt)
{
    GradCheckReport r;
    if (opt.ops) {
        op_suite<double>(opt.seed, r.entries);
        op_suite<float>(opt.seed, r.entries);
    }
    if (opt.model)
        r.entries.push_back(model_check<double>(opt));
    if (opt.model_float)
        r.entries.push_back(model_float_check(opt));
    return r;
}

std::string gradcheck_csv(const GradCheckReport& r)
{
    std::ostringstream out;
    out << "name,precision,max_rel_error,tolerance,passed\n";
    for (const auto& e : r.entries)
        out << e.name << ',' << e.precision << ',' << num(e.max_rel_error) << ',' << num(e.tolerance) << ','
            << (e.passed() ? "true" : "false") << '\n';
    return out.str();
}

} // namespace cellmtl
