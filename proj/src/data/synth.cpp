#include "cellmtl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace cellmtl {

namespace {

constexpr std::size_t kSide = 28;
constexpr double kEdgeWidth = 1.2;

// Per-morphology rendering constants, indexed by class.
constexpr std::array<double, kNumClasses> kCellRadius{6.0, 8.5, 9.5};
constexpr std::array<double, kNumClasses> kCytoHeight{0.6, 0.8, 0.9};
constexpr std::array<double, kNumClasses> kNucleusHeight{1.0, 0.8, 0.9};
constexpr std::array<double, kNumClasses> kGranuleAmp{0.25, 0.45, 0.3};
constexpr std::array<std::size_t, kNumClasses> kGranuleCount{6, 30, 12};
constexpr double kAbsorption = 0.12;

double smooth_step(double signed_dist)
{
    return 0.5 * (1.0 + std::tanh(signed_dist / kEdgeWidth));
}

struct Geometry {
    double cx, cy, radius, stretch, theta;
};

/// Signed distance (pixels, positive inside) to the nucleus of morphology k.
class Nucleus {
public:
    Nucleus(std::uint8_t k, const Geometry& g, Rng& rng) : k_(k)
    {
        const double R = g.radius;
        const double ct = std::cos(g.theta), st = std::sin(g.theta);
        if (k == 0) {
            const double a = rng.uniform(0.0, 2 * std::numbers::pi);
            centres_.push_back({g.cx + 0.08 * R * std::cos(a), g.cy + 0.08 * R * std::sin(a), 0.72 * R});
        } else if (k == 1) {
            const std::size_t lobes = 3 + rng.below(2);
            for (std::size_t j = 0; j < lobes; ++j) {
                const double a = g.theta + 2 * std::numbers::pi * double(j) / double(lobes) + rng.uniform(-0.3, 0.3);
                const double d = 0.38 * R * rng.uniform(0.85, 1.15);
                centres_.push_back({g.cx + d * std::cos(a), g.cy + d * std::sin(a), 0.22 * R * rng.uniform(0.9, 1.1)});
            }
        } else {
            // bean: an ellipse with a circular notch cut from one long side
            centres_.push_back({g.cx - 0.1 * R * st, g.cy + 0.1 * R * ct, 0.0});
            ax_ = 0.55 * R;
            ay_ = 0.42 * R;
            ct_ = ct;
            st_ = st;
            notch_ = {g.cx + 0.38 * R * st, g.cy - 0.38 * R * ct, 0.3 * R};
        }
    }

    double sdf(double x, double y) const
    {
        if (k_ != 2) {
            double best = -1e9;
            for (const auto& c : centres_)
                best = std::max(best, c.r - std::hypot(x - c.x, y - c.y));
            return best;
        }
        const double dx = x - centres_[0].x, dy = y - centres_[0].y;
        const double u = ct_ * dx + st_ * dy, v = -st_ * dx + ct_ * dy;
        const double e = std::sqrt((u / ax_) * (u / ax_) + (v / ay_) * (v / ay_));
        const double inside = (1.0 - e) * std::min(ax_, ay_);
        const double outside_notch = std::hypot(x - notch_.x, y - notch_.y) - notch_.r;
        return std::min(inside, outside_notch);
    }

private:
    struct Circle {
        double x, y, r;
    };
    std::uint8_t k_;
    std::vector<Circle> centres_;
    Circle notch_{};
    double ax_ = 0, ay_ = 0, ct_ = 1, st_ = 0;
};

Tensor<float> render(std::uint8_t k, const std::array<double, kNumMarkers>& t, const SynthConfig& cfg, Rng& rng)
{
    const double gain = cfg.texture_gain;
    Geometry g;
    g.cx = (kSide - 1) / 2.0 + rng.uniform(-2.0, 2.0);
    g.cy = (kSide - 1) / 2.0 + rng.uniform(-2.0, 2.0);
    g.radius = kCellRadius[k] * rng.uniform(0.9, 1.1);
    g.stretch = 1.0 + rng.uniform(0.0, 0.12);
    g.theta = rng.uniform(0.0, 2 * std::numbers::pi);
    const Nucleus nucleus(k, g, rng);

    const double h_cyto = kCytoHeight[k] * std::exp(gain * t[0]);
    const double a_gran = kGranuleAmp[k] * std::exp(gain * t[1]);
    const double h_nuc = kNucleusHeight[k] * std::exp(gain * t[2]);
    const double absorb = std::min(0.5, kAbsorption * std::exp(gain * t[3]));

    struct Granule {
        double x, y;
    };
    std::vector<Granule> granules;
    while (granules.size() < kGranuleCount[k]) {
        const double a = rng.uniform(0.0, 2 * std::numbers::pi), r = 0.85 * g.radius * std::sqrt(rng.uniform());
        granules.push_back({g.cx + r * std::cos(a), g.cy + r * std::sin(a)});
    }

    const double ct = std::cos(g.theta), st = std::sin(g.theta);
    std::vector<double> phase(kSide * kSide), cell(kSide * kSide);
    for (std::size_t y = 0; y < kSide; ++y)
        for (std::size_t x = 0; x < kSide; ++x) {
            const double dx = double(x) - g.cx, dy = double(y) - g.cy;
            const double u = (ct * dx + st * dy) / g.stretch, v = (-st * dx + ct * dy) * g.stretch;
            const double in_cell = smooth_step(g.radius - std::hypot(u, v));
            double p = h_cyto * in_cell + h_nuc * smooth_step(nucleus.sdf(double(x), double(y))) * in_cell;
            for (const auto& gr : granules) {
                const double d2 = (double(x) - gr.x) * (double(x) - gr.x) + (double(y) - gr.y) * (double(y) - gr.y);
                p += a_gran * std::exp(-d2 / (2 * 0.7 * 0.7));
            }
            phase[y * kSide + x] = p;
            cell[y * kSide + x] = in_cell;
        }

    auto at = [&](long y, long x) {
        y = std::clamp(y, 0L, long(kSide) - 1);
        x = std::clamp(x, 0L, long(kSide) - 1);
        return phase[std::size_t(y) * kSide + std::size_t(x)];
    };
    Tensor<float> img({4, kSide, kSide});
    for (std::size_t y = 0; y < kSide; ++y)
        for (std::size_t x = 0; x < kSide; ++x) {
            const long yi = long(y), xi = long(x);
            const double gx = 0.5 * (at(yi, xi + 1) - at(yi, xi - 1));
            const double gy = 0.5 * (at(yi + 1, xi) - at(yi - 1, xi));
            const double trans = 1.0 - absorb * cell[y * kSide + x];
            const std::array<double, 4> ch{trans * (1 + gx), trans * (1 - gx), trans * (1 + gy), trans * (1 - gy)};
            for (std::size_t c = 0; c < 4; ++c)
                img.at({c, y, x}) = float(ch[c] + cfg.noise_sigma * rng.normal());
        }
    return img;
}

double pearson(const std::vector<double>& a, const std::vector<double>& b)
{
    const double n = double(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i] / n;
        mb += b[i] / n;
    }
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return saa > 0 && sbb > 0 ? sab / std::sqrt(saa * sbb) : 0.0;
}

} // namespace

void SynthConfig::validate() const
{
    if (kappa < 0 || kappa > 1)
        throw ConfigError("synth: kappa must lie in [0,1]");
    if (morph_confusion < 0 || morph_confusion >= 1)
        throw ConfigError("synth: morph_confusion must lie in [0,1)");
    if (noise_sigma < 0 || texture_gain < 0)
        throw ConfigError("synth: noise_sigma and texture_gain must be non-negative");
    if (val_fraction < 0 || test_fraction < 0 || val_fraction + test_fraction >= 1)
        throw ConfigError("synth: split fractions must be non-negative and sum below 1");
    for (const auto& row : marker_std)
        for (double s : row)
            if (!(s > 0))
                throw ConfigError("synth: marker std must be positive");
}

std::array<double, kNumClasses> oracle_class_posterior(const SynthConfig& cfg, const SynthLatent& z)
{
    const double spread = cfg.kappa * cfg.kappa + (1 - cfg.kappa) * (1 - cfg.kappa);
    double total = 0;
    for (auto n : cfg.n_per_class)
        total += double(n);
    std::array<double, kNumClasses> logp{};
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const double p_morph = z.morph == c ? 1 - cfg.morph_confusion : cfg.morph_confusion / (kNumClasses - 1);
        double lp = std::log(double(cfg.n_per_class[c]) / total) + std::log(std::max(p_morph, 1e-300));
        for (std::size_t m = 0; m < kNumMarkers; ++m) {
            const double var = spread * cfg.marker_std[c][m] * cfg.marker_std[c][m];
            const double d = z.drive[m] - cfg.marker_mean[c][m];
            lp += -0.5 * d * d / var - 0.5 * std::log(2 * std::numbers::pi * var);
        }
        logp[c] = lp;
    }
    const double mx = *std::max_element(logp.begin(), logp.end());
    double s = 0;
    for (double& v : logp) {
        v = std::exp(v - mx);
        s += v;
    }
    for (double& v : logp)
        v /= s;
    return logp;
}

std::array<double, kNumMarkers> oracle_marker_mean(const SynthConfig& cfg, const SynthLatent& z)
{
    const auto post = oracle_class_posterior(cfg, z);
    const double spread = cfg.kappa * cfg.kappa + (1 - cfg.kappa) * (1 - cfg.kappa);
    const double slope = cfg.kappa / spread;
    std::array<double, kNumMarkers> out{};
    for (std::size_t c = 0; c < kNumClasses; ++c)
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            out[m] += post[c] * (cfg.marker_mean[c][m] + slope * (z.drive[m] - cfg.marker_mean[c][m]));
    return out;
}

OracleReport oracle_ceilings(const SynthConfig& cfg, const Dataset& ds, const std::vector<SynthLatent>& latents,
                             const std::vector<std::size_t>& indices)
{
    OracleReport rep;
    rep.n = indices.size();
    if (indices.empty())
        return rep;
    std::size_t correct = 0;
    std::array<std::vector<double>, kNumMarkers> pred, truth;
    for (std::size_t i : indices) {
        const auto post = oracle_class_posterior(cfg, latents[i]);
        const auto best = std::size_t(std::max_element(post.begin(), post.end()) - post.begin());
        correct += best == ds.records[i].cls;
        const auto mean = oracle_marker_mean(cfg, latents[i]);
        for (std::size_t m = 0; m < kNumMarkers; ++m) {
            pred[m].push_back(mean[m]);
            truth[m].push_back(ds.records[i].markers[m]);
        }
    }
    rep.accuracy_ceiling = double(correct) / double(indices.size());
    for (std::size_t m = 0; m < kNumMarkers; ++m) {
        rep.marker_r_ceiling[m] = pearson(pred[m], truth[m]);
        rep.mean_r_ceiling += rep.marker_r_ceiling[m] / kNumMarkers;
    }
    return rep;
}

SynthResult synthesize(const SynthConfig& cfg)
{
    cfg.validate();
    SynthResult res;
    auto& ds = res.dataset;
    ds.image_shape = {4, kSide, kSide};
    std::size_t total = 0;
    for (auto n : cfg.n_per_class)
        total += n;
    ds.records.resize(total);
    res.latents.resize(total);

    std::vector<std::uint8_t> cls_of(total);
    for (std::size_t c = 0, i = 0; c < kNumClasses; ++c)
        for (std::size_t j = 0; j < cfg.n_per_class[c]; ++j)
            cls_of[i++] = std::uint8_t(c);

#pragma omp parallel for schedule(dynamic, 16)
    for (std::size_t i = 0; i < total; ++i) {
        auto& rec = ds.records[i];
        char id[32];
        std::snprintf(id, sizeof id, "syn-%06zu", i);
        rec.id = id;
        Rng rng(derive_seed(cfg.seed, rec.id));
        const std::uint8_t c = cls_of[i];
        auto& z = res.latents[i];
        z.cls = c;
        std::array<double, kNumMarkers> m{}, u{};
        for (std::size_t k = 0; k < kNumMarkers; ++k)
            m[k] = rng.normal(cfg.marker_mean[c][k], cfg.marker_std[c][k]);
        for (std::size_t k = 0; k < kNumMarkers; ++k)
            u[k] = rng.normal(cfg.marker_mean[c][k], cfg.marker_std[c][k]);
        for (std::size_t k = 0; k < kNumMarkers; ++k)
            z.drive[k] = cfg.kappa * m[k] + (1 - cfg.kappa) * u[k];
        z.morph = c;
        if (rng.bernoulli(cfg.morph_confusion))
            z.morph = std::uint8_t((c + 1 + rng.below(kNumClasses - 1)) % kNumClasses);

        rec.cls = c;
        for (std::size_t k = 0; k < kNumMarkers; ++k)
            rec.markers[k] = float(m[k]);
        rec.image = render(z.morph, z.drive, cfg, rng);
    }

    // stratified split
    Rng split_rng(derive_seed(cfg.seed, "split"));
    for (std::size_t c = 0, start = 0; c < kNumClasses; start += cfg.n_per_class[c], ++c) {
        std::vector<std::size_t> idx(cfg.n_per_class[c]);
        for (std::size_t j = 0; j < idx.size(); ++j)
            idx[j] = start + j;
        for (std::size_t j = idx.size(); j > 1; --j)
            std::swap(idx[j - 1], idx[split_rng.below(j)]);
        const auto n_test = std::size_t(std::llround(cfg.test_fraction * double(idx.size())));
        const auto n_val = std::size_t(std::llround(cfg.val_fraction * double(idx.size())));
        for (std::size_t j = 0; j < idx.size(); ++j)
            (j < n_test ? ds.splits.test : j < n_test + n_val ? ds.splits.val : ds.splits.train).push_back(idx[j]);
    }
    for (auto* s : {&ds.splits.train, &ds.splits.val, &ds.splits.test})
        std::sort(s->begin(), s->end());

    std::vector<std::size_t> all(total);
    for (std::size_t i = 0; i < total; ++i)
        all[i] = i;
    res.oracle = oracle_ceilings(cfg, ds, res.latents, all);
    res.oracle_test = oracle_ceilings(cfg, ds, res.latents, ds.splits.test);
    return res;
}

} // namespace cellmtl
