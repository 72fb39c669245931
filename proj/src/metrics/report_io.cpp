#include "cellmtl/metrics.hpp"

#include "cellmtl/errors.hpp"

#include <json.hpp>

#include <charconv>
#include <cmath>
#include <fstream>

namespace cellmtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kReportVersion = 1;

std::string num(double v)
{
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    if (std::isnan(v))
        return "nan";
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

json scores_json(const RegressionMetrics& m)
{
    return {{"pearson_r", m.pearson_r}, {"rmse", m.rmse}, {"mae", m.mae}, {"ccc", m.ccc}, {"degenerate", m.degenerate}};
}

std::ofstream open_out(const fs::path& p)
{
    std::ofstream out(p, std::ios::trunc);
    if (!out)
        throw LoadError("cannot write " + p.string());
    return out;
}

} // namespace

std::string report_to_json(const EvalReport& r)
{
    json j = {{"schema", "cellmtl-eval-report"}, {"version", kReportVersion}, {"n", r.n}};
    if (r.classification) {
        const auto& c = *r.classification;
        json per = json::array();
        for (std::size_t k = 0; k < kNumClasses; ++k)
            per.push_back({{"class", kClassNames[k]},
                           {"precision", c.per_class[k].precision},
                           {"recall", c.per_class[k].recall},
                           {"f1", c.per_class[k].f1},
                           {"support", c.per_class[k].support}});
        j["classification"] = {
            {"accuracy", c.accuracy},
            {"macro", {{"precision", c.macro_precision}, {"recall", c.macro_recall}, {"f1", c.macro_f1}}},
            {"per_class", per},
            {"confusion", c.confusion}};
    }
    if (r.roc) {
        json roc = json::array();
        for (std::size_t k = 0; k < kNumClasses; ++k) {
            const auto& curve = (*r.roc)[k];
            // NaN is not representable in JSON; a degenerate curve carries a null AUC
            roc.push_back({{"class", kClassNames[k]},
                           {"auc", curve.degenerate ? json(nullptr) : json(curve.auc)},
                           {"degenerate", curve.degenerate},
                           {"points", curve.points.size()}});
        }
        j["roc"] = roc;
    }
    if (r.regression) {
        json rows = json::array();
        for (const auto& row : r.regression->rows) {
            auto s = scores_json(row.m);
            s["name"] = row.name;
            rows.push_back(s);
        }
        j["regression"] = {{"markers", rows}, {"mean", scores_json(r.regression->mean)}};
    }
    if (r.cohort) {
        const auto& c = *r.cohort;
        j["cohort"] = {{"predicted_count", c.predicted_count},
                       {"marker_mean", c.marker_mean},
                       {"marker_std", c.marker_std},
                       {"rest_mean", c.rest_mean},
                       {"rest_std", c.rest_std},
                       {"confidence_mean", c.confidence_mean},
                       {"confidence_min", c.confidence_min},
                       {"low_confidence_fraction", c.low_confidence_fraction}};
    }
    return j.dump(2);
}

std::vector<fs::path> write_report(const EvalReport& r, const fs::path& dir)
{
    fs::create_directories(dir);
    std::vector<fs::path> written;

    const auto json_path = dir / "report.json";
    open_out(json_path) << report_to_json(r) << '\n';
    written.push_back(json_path);

    if (r.classification) {
        const auto& c = *r.classification;
        const auto p = dir / "classification.csv";
        auto out = open_out(p);
        out << "class,precision,recall,f1,support\n";
        for (std::size_t k = 0; k < kNumClasses; ++k)
            out << kClassNames[k] << ',' << num(c.per_class[k].precision) << ',' << num(c.per_class[k].recall) << ','
                << num(c.per_class[k].f1) << ',' << c.per_class[k].support << '\n';
        out << "Macro Avg.," << num(c.macro_precision) << ',' << num(c.macro_recall) << ',' << num(c.macro_f1) << ','
            << c.n << '\n';
        written.push_back(p);

        const auto cp = dir / "confusion.csv";
        auto cm = open_out(cp);
        cm << "true,predicted,count\n";
        for (std::size_t t = 0; t < kNumClasses; ++t)
            for (std::size_t q = 0; q < kNumClasses; ++q)
                cm << kClassNames[t] << ',' << kClassNames[q] << ',' << c.confusion[t][q] << '\n';
        written.push_back(cp);
    }
    if (r.roc) {
        const auto p = dir / "roc.csv";
        auto out = open_out(p);
        out << "class,fpr,tpr,threshold\n";
        for (std::size_t k = 0; k < kNumClasses; ++k)
            for (const auto& pt : (*r.roc)[k].points)
                out << kClassNames[k] << ',' << num(pt.fpr) << ',' << num(pt.tpr) << ',' << num(pt.threshold) << '\n';
        written.push_back(p);
    }
    if (r.regression) {
        const auto p = dir / "markers.csv";
        auto out = open_out(p);
        out << "marker,rmse,mae,pearson_r,ccc,degenerate\n";
        auto row = [&](const std::string& name, const RegressionMetrics& m) {
            out << '"' << name << "\"," << num(m.rmse) << ',' << num(m.mae) << ',' << num(m.pearson_r) << ','
                << num(m.ccc) << ',' << (m.degenerate ? 1 : 0) << '\n';
        };
        for (const auto& r_ : r.regression->rows)
            row(r_.name, r_.m);
        row("Mean", r.regression->mean);
        written.push_back(p);
    }
    return written;
}

} // namespace cellmtl
