#include "cellmtl/summarizer.hpp"

#include "cellmtl/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace cellmtl {

using nlohmann::json;

namespace {

double round2(double v)
{
    const double r = std::round(v * 100.0) / 100.0;
    return r == 0 ? 0.0 : r; // no negative zero
}

} // namespace

std::string evidence_number(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", kEvidenceDecimals, round2(v));
    std::string s(buf);
    if (s.find('.') != std::string::npos) {
        while (s.back() == '0')
            s.pop_back();
        if (s.back() == '.')
            s.pop_back();
    }
    return s == "-0" ? "0" : s;
}

std::optional<double> cohens_d(double mean1, double sd1, double n1, double mean2, double sd2, double n2)
{
    if (n1 < 2 || n2 < 2)
        return std::nullopt;
    const double pooled = std::sqrt(((n1 - 1) * sd1 * sd1 + (n2 - 1) * sd2 * sd2) / (n1 + n2 - 2));
    if (!(pooled > 1e-12))
        return std::nullopt;
    return (mean1 - mean2) / pooled;
}

std::set<std::string> EvidenceBundle::numerals() const
{
    std::set<std::string> out{evidence_number(n)};
    for (const auto& c : cohort) {
        out.insert(evidence_number(c.count));
        out.insert(evidence_number(c.percent));
    }
    for (const auto& e : effects)
        if (e.defined)
            out.insert(evidence_number(e.d));
    for (const auto& m : markers)
        for (double v : {m.r, m.rmse, m.mae, m.ccc})
            out.insert(evidence_number(v));
    for (const auto& c : confusions)
        out.insert(evidence_number(c.count));
    for (const auto* o : {&accuracy_percent, &macro_f1, &confidence_mean, &low_confidence_percent, &mean_r, &mean_ccc})
        if (*o)
            out.insert(evidence_number(**o));
    return out;
}

std::set<std::string> EvidenceBundle::marker_tokens() const
{
    std::set<std::string> out;
    for (const auto& name : marker_names) {
        out.insert(name);
        std::size_t start = 0;
        while (true) {
            const auto pos = name.find('/', start);
            out.insert(name.substr(start, pos - start));
            if (pos == std::string::npos)
                break;
            start = pos + 1;
        }
    }
    return out;
}

EvidenceBundle build_evidence(const EvalReport& report, const std::array<std::string, kNumMarkers>& marker_names)
{
    if (!report.classification || !report.cohort)
        throw InputError("build_evidence: the report has no classification output");
    const auto& cls = *report.classification;
    const auto& co = *report.cohort;
    EvidenceBundle b;
    b.n = double(report.n);
    b.provenance["n"] = "n";
    b.marker_names.assign(marker_names.begin(), marker_names.end());

    for (std::size_t c = 0; c < kNumClasses; ++c) {
        const double count = double(co.predicted_count[c]);
        b.cohort.push_back({kClassNames[c], count, round2(100.0 * count / b.n)});
        const std::string key = "cohort[" + std::to_string(c) + "]";
        b.provenance[key + ".count"] = "cohort.predicted_count[" + std::to_string(c) + "]";
        b.provenance[key + ".percent"] = "100 * cohort.predicted_count[" + std::to_string(c) + "] / n";
    }

    b.accuracy_percent = round2(100.0 * cls.accuracy);
    b.macro_f1 = round2(cls.macro_f1);
    b.confidence_mean = round2(co.confidence_mean);
    b.low_confidence_percent = round2(100.0 * co.low_confidence_fraction);
    b.provenance["accuracy_percent"] = "100 * classification.accuracy";
    b.provenance["macro_f1"] = "classification.macro.f1";
    b.provenance["confidence_mean"] = "cohort.confidence_mean";
    b.provenance["low_confidence_percent"] = "100 * cohort.low_confidence_fraction";

    std::vector<ConfusionPair> pairs;
    for (std::size_t t = 0; t < kNumClasses; ++t)
        for (std::size_t p = 0; p < kNumClasses; ++p)
            if (t != p && cls.confusion[t][p] > 0)
                pairs.push_back({kClassNames[t], kClassNames[p], double(cls.confusion[t][p])});
    std::stable_sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) { return a.count > b.count; });
    if (pairs.size() > 3)
        pairs.resize(3);
    b.confusions = pairs;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        b.provenance["confusions[" + std::to_string(i) + "].count"] = "classification.confusion[" + pairs[i].truth +
                                                                       "][" + pairs[i].predicted + "]";

    if (report.regression) {
        const auto& reg = *report.regression;
        for (std::size_t m = 0; m < reg.rows.size(); ++m) {
            const auto& r = reg.rows[m];
            b.markers.push_back({r.name, round2(r.m.pearson_r), round2(r.m.rmse), round2(r.m.mae), round2(r.m.ccc),
                                 r.m.degenerate});
            b.provenance["markers[" + std::to_string(m) + "]"] = "regression.markers[" + std::to_string(m) + "]";
        }
        b.mean_r = round2(reg.mean.pearson_r);
        b.mean_ccc = round2(reg.mean.ccc);
        b.provenance["mean_r"] = "regression.mean.pearson_r";
        b.provenance["mean_ccc"] = "regression.mean.ccc";

        for (std::size_t c = 0; c < kNumClasses; ++c) {
            const double n1 = double(co.predicted_count[c]), n2 = b.n - n1;
            for (std::size_t m = 0; m < kNumMarkers; ++m) {
                // the cohort statistics carry population stds; convert to sample stds
                const double s1 = n1 > 1 ? co.marker_std[c][m] * std::sqrt(n1 / (n1 - 1)) : 0.0;
                const double s2 = n2 > 1 ? co.rest_std[c][m] * std::sqrt(n2 / (n2 - 1)) : 0.0;
                const auto d = cohens_d(co.marker_mean[c][m], s1, n1, co.rest_mean[c][m], s2, n2);
                b.effects.push_back({kClassNames[c], marker_names[m], d ? round2(*d) : 0.0, d.has_value()});
                b.provenance["effects[" + std::to_string(b.effects.size() - 1) + "].d"] =
                    "cohort.marker_mean/marker_std vs rest_mean/rest_std, class " + kClassNames[c] + ", marker " +
                    marker_names[m];
            }
        }
    }
    return b;
}

std::string evidence_to_json(const EvidenceBundle& b)
{
    // numbers go out as evidence_number strings parsed back, so the JSON shows exactly the emitted precision
    auto num = [](double v) { return json::parse(evidence_number(v)); };
    auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : json(nullptr); };
    json cohort = json::array(), effects = json::array(), markers = json::array(), conf = json::array();
    for (const auto& c : b.cohort)
        cohort.push_back({{"class", c.cls}, {"count", num(c.count)}, {"percent", num(c.percent)}});
    for (const auto& e : b.effects)
        effects.push_back({{"class", e.cls},
                           {"marker", e.marker},
                           {"cohens_d", e.defined ? num(e.d) : json(nullptr)},
                           {"defined", e.defined}});
    for (const auto& m : b.markers)
        markers.push_back({{"marker", m.marker},
                           {"pearson_r", num(m.r)},
                           {"rmse", num(m.rmse)},
                           {"mae", num(m.mae)},
                           {"ccc", num(m.ccc)},
                           {"degenerate", m.degenerate}});
    for (const auto& c : b.confusions)
        conf.push_back({{"true", c.truth}, {"predicted", c.predicted}, {"count", num(c.count)}});
    return json{{"schema", "cellmtl-evidence"},
                {"version", 1},
                {"n", num(b.n)},
                {"cohort", cohort},
                {"effect_sizes", effects},
                {"markers", markers},
                {"top_confusions", conf},
                {"accuracy_percent", opt(b.accuracy_percent)},
                {"macro_f1", opt(b.macro_f1)},
                {"confidence_mean", opt(b.confidence_mean)},
                {"low_confidence_percent", opt(b.low_confidence_percent)},
                {"mean_pearson_r", opt(b.mean_r)},
                {"mean_ccc", opt(b.mean_ccc)},
                {"marker_names", b.marker_names},
                {"provenance", b.provenance}}
        .dump(2);
}

} // namespace cellmtl
