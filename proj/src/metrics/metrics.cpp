#include "cellmtl/metrics.hpp"

#include "cellmtl/errors.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace cellmtl {

ClassScores class_scores(std::size_t tp, std::size_t fp, std::size_t fn)
{
    ClassScores s;
    s.support = tp + fn;
    s.precision = tp + fp ? double(tp) / double(tp + fp) : 0.0;
    s.recall = tp + fn ? double(tp) / double(tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

ClassificationMetrics classification_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth)
{
    if (pred.empty())
        throw InputError("classification_metrics: empty input");
    if (pred.size() != truth.size())
        throw InputError("classification_metrics: " + std::to_string(pred.size()) + " predictions for " +
                         std::to_string(truth.size()) + " labels");
    ClassificationMetrics out;
    out.n = pred.size();
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] >= kNumClasses || truth[i] >= kNumClasses)
            throw InputError("classification_metrics: label out of range at index " + std::to_string(i));
        ++out.confusion[truth[i]][pred[i]];
        correct += pred[i] == truth[i];
    }
    out.accuracy = double(correct) / double(out.n);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        std::size_t tp = out.confusion[c][c], fp = 0, fn = 0;
        for (std::size_t k = 0; k < kNumClasses; ++k)
            if (k != c) {
                fp += out.confusion[k][c];
                fn += out.confusion[c][k];
            }
        if (tp + fp == 0)
            spdlog::warn("classification_metrics: class {} never predicted, precision 0/0 reported as 0", kClassNames[c]);
        if (tp + fn == 0)
            spdlog::warn("classification_metrics: class {} absent from labels, recall 0/0 reported as 0", kClassNames[c]);
        out.per_class[c] = class_scores(tp, fp, fn);
        out.macro_precision += out.per_class[c].precision / kNumClasses;
        out.macro_recall += out.per_class[c].recall / kNumClasses;
        out.macro_f1 += out.per_class[c].f1 / kNumClasses;
    }
    return out;
}

RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target)
{
    if (pred.size() != target.size())
        throw InputError("regression_metrics: length mismatch");
    if (pred.size() < 2)
        throw InputError("regression_metrics: need at least two samples");
    const double n = double(pred.size());
    double mp = 0, mt = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mp += pred[i];
        mt += target[i];
    }
    mp /= n;
    mt /= n;
    double vp = 0, vt = 0, cov = 0, se = 0, ae = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double dp = pred[i] - mp, dt = target[i] - mt, e = pred[i] - target[i];
        vp += dp * dp;
        vt += dt * dt;
        cov += dp * dt;
        se += e * e;
        ae += std::abs(e);
    }
    vp /= n;
    vt /= n;
    cov /= n;
    RegressionMetrics m;
    m.rmse = std::sqrt(se / n);
    m.mae = ae / n;
    auto constant = [](std::span<const double> v) {
        return std::all_of(v.begin(), v.end(), [&](double x) { return x == v[0]; });
    };
    if (constant(pred) || constant(target)) {
        m.degenerate = true;
        return m;
    }
    m.pearson_r = std::clamp(cov / std::sqrt(vp * vt), -1.0, 1.0);
    m.ccc = std::clamp(2 * cov / (vp + vt + (mp - mt) * (mp - mt)), -1.0, 1.0);
    return m;
}

double auc_rank(std::span<const double> scores, std::span<const bool> positive)
{
    if (scores.size() != positive.size())
        throw InputError("auc_rank: length mismatch");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    for (double s : scores)
        if (std::isnan(s))
            throw InputError("auc_rank: NaN score");
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

    // doubled ranks keep everything integral so the result is a single rounding of an exact ratio
    std::uint64_t rank2_pos = 0, npos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]])
            ++j;
        const std::uint64_t avg2 = (i + 1) + j;
        for (std::size_t k = i; k < j; ++k)
            if (positive[order[k]]) {
                rank2_pos += avg2;
                ++npos;
            }
        i = j;
    }
    const std::uint64_t nneg = scores.size() - npos;
    if (npos == 0 || nneg == 0)
        return std::numeric_limits<double>::quiet_NaN();
    return double(rank2_pos - npos * (npos + 1)) / double(2 * npos * nneg);
}

RocCurve roc_curve(std::span<const double> scores, std::span<const bool> positive)
{
    RocCurve roc;
    roc.auc = auc_rank(scores, positive);
    const auto npos = std::size_t(std::count(positive.begin(), positive.end(), true));
    const std::size_t nneg = positive.size() - npos;
    if (npos == 0 || nneg == 0) {
        roc.degenerate = true;
        spdlog::warn("roc_curve: {} positives and {} negatives, AUC undefined", npos, nneg);
        return roc;
    }
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    roc.points.push_back({0, 0, std::numeric_limits<double>::infinity()});
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        while (i < order.size() && scores[order[i]] == s)
            (positive[order[i++]] ? tp : fp)++;
        roc.points.push_back({double(fp) / double(nneg), double(tp) / double(npos), s});
    }
    return roc;
}

std::array<RocCurve, kNumClasses> roc_auc_ovr(const Tensor<float>& probs, std::span<const std::uint8_t> truth)
{
    if (probs.rank() != 2 || probs.dim(1) != kNumClasses || probs.dim(0) != truth.size())
        throw DimensionError("roc_auc_ovr: expected probabilities [" + std::to_string(truth.size()) + ",3], got " +
                             shape_str(probs.shape()));
    std::array<RocCurve, kNumClasses> out;
    const std::size_t n = truth.size();
    std::vector<double> s(n);
    // std::vector<bool> is not contiguous
    auto pos = std::make_unique<bool[]>(n);
    for (std::size_t c = 0; c < kNumClasses; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            s[i] = probs.at({i, c});
            pos[i] = truth[i] == c;
        }
        out[c] = roc_curve(s, std::span<const bool>(pos.get(), n));
    }
    return out;
}

MarkerReport per_marker_report(const Tensor<float>& pred, const Tensor<float>& target,
                               const std::array<std::string, kNumMarkers>& names)
{
    if (pred.shape() != target.shape() || pred.rank() != 2 || pred.dim(1) != kNumMarkers)
        throw DimensionError("per_marker_report: expected matching [N,4] tensors, got " + shape_str(pred.shape()) +
                             " and " + shape_str(target.shape()));
    const std::size_t n = pred.dim(0);
    MarkerReport rep;
    std::vector<double> p(n), t(n);
    for (std::size_t m = 0; m < kNumMarkers; ++m) {
        for (std::size_t i = 0; i < n; ++i) {
            p[i] = pred.at({i, m});
            t[i] = target.at({i, m});
        }
        rep.rows.push_back({names[m], regression_metrics(p, t)});
        const auto& r = rep.rows.back().m;
        rep.mean.pearson_r += r.pearson_r / kNumMarkers;
        rep.mean.rmse += r.rmse / kNumMarkers;
        rep.mean.mae += r.mae / kNumMarkers;
        rep.mean.ccc += r.ccc / kNumMarkers;
        rep.mean.degenerate = rep.mean.degenerate || r.degenerate;
    }
    return rep;
}

namespace {

std::vector<std::uint8_t> argmax_rows(const Tensor<float>& probs)
{
    std::vector<std::uint8_t> out(probs.dim(0));
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < kNumClasses; ++c)
            if (probs.at({i, c}) > probs.at({i, best}))
                best = c;
        out[i] = std::uint8_t(best);
    }
    return out;
}

CohortStats cohort_stats(const Tensor<float>& probs, const std::vector<std::uint8_t>& pred, const Tensor<float>& reg)
{
    CohortStats s;
    const std::size_t n = pred.size();
    s.confidence_min = 1.0;
    std::size_t low = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ++s.predicted_count[pred[i]];
        const double conf = probs.at({i, pred[i]});
        s.confidence_mean += conf / double(n);
        s.confidence_min = std::min(s.confidence_min, conf);
        low += conf < 0.6;
    }
    s.low_confidence_fraction = double(low) / double(n);
    if (reg.numel() == 0)
        return s;
    for (std::size_t c = 0; c < kNumClasses; ++c)
        for (std::size_t m = 0; m < kNumMarkers; ++m) {
            double si = 0, si2 = 0, so = 0, so2 = 0;
            for (std::size_t i = 0; i < n; ++i) {
                const double v = reg.at({i, m});
                (pred[i] == c ? si : so) += v;
                (pred[i] == c ? si2 : so2) += v * v;
            }
            const double ni = double(s.predicted_count[c]), no = double(n) - ni;
            if (ni > 0) {
                s.marker_mean[c][m] = si / ni;
                s.marker_std[c][m] = std::sqrt(std::max(0.0, si2 / ni - s.marker_mean[c][m] * s.marker_mean[c][m]));
            }
            if (no > 0) {
                s.rest_mean[c][m] = so / no;
                s.rest_std[c][m] = std::sqrt(std::max(0.0, so2 / no - s.rest_mean[c][m] * s.rest_mean[c][m]));
            }
        }
    return s;
}

} // namespace

EvalReport build_report(const Tensor<float>& probs, const Tensor<float>& reg, std::span<const std::uint8_t> truth,
                        const Tensor<float>& targets, const std::array<std::string, kNumMarkers>& names)
{
    EvalReport rep;
    rep.n = truth.size();
    if (rep.n == 0)
        throw InputError("build_report: empty split");
    if (probs.numel() > 0) {
        const auto pred = argmax_rows(probs);
        rep.classification = classification_metrics(pred, truth);
        rep.roc = roc_auc_ovr(probs, truth);
        rep.cohort = cohort_stats(probs, pred, reg);
    }
    if (reg.numel() > 0)
        rep.regression = per_marker_report(reg, targets, names);
    return rep;
}

} // namespace cellmtl
