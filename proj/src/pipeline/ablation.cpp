#include "cellmtl/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <charconv>
#include <cmath>
#include <sstream>

namespace cellmtl {

namespace {

AblationCell summarize(std::vector<double> values)
{
    AblationCell c;
    for (double v : values)
        c.mean += v / double(values.size());
    for (double v : values)
        c.std += (v - c.mean) * (v - c.mean) / double(values.size());
    c.std = std::sqrt(c.std);
    c.per_seed = std::move(values);
    return c;
}

std::string num(double v)
{
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

} // namespace

const AblationRow& AblationTable::row(const std::string& variant) const
{
    for (const auto& r : rows)
        if (r.variant == variant)
            return r;
    throw InputError("ablation table has no row '" + variant + "'");
}

AblationTable ablate(const TrainConfig& base, const Dataset& ds, const std::vector<std::string>& variants,
                     const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& eval_indices)
{
    if (seeds.empty())
        throw ConfigError("ablate: at least one seed is required");
    if (seeds.size() < 3)
        spdlog::warn("ablate: {} seed(s); at least 3 are recommended for mean and spread", seeds.size());
    AblationTable table;
    table.seeds = seeds;
    for (const auto& v : variants) {
        AblationRow row;
        row.variant = v;
        std::vector<double> acc, f1, r, rmse;
        for (auto seed : seeds) {
            TrainConfig cfg = apply_variant(base, v);
            cfg.seed = seed;
            spdlog::info("ablate: variant {} seed {}", v, seed);
            auto res = train(cfg, ds);
            auto rep = evaluate(res.best, ds, eval_indices);
            if (rep.classification) {
                acc.push_back(rep.accuracy());
                f1.push_back(rep.classification->macro_f1);
            }
            if (rep.regression) {
                r.push_back(rep.mean_pearson());
                rmse.push_back(rep.regression->mean.rmse);
            }
            row.reports.push_back(std::move(rep));
            row.logs.push_back(std::move(res.log));
        }
        if (!acc.empty()) {
            row.accuracy = summarize(acc);
            row.macro_f1 = summarize(f1);
        }
        if (!r.empty()) {
            row.pearson_r = summarize(r);
            row.rmse = summarize(rmse);
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

std::string ablation_csv(const AblationTable& table)
{
    std::ostringstream out;
    out << "name,acc,acc_std,f1,f1_std,pearson_r,pearson_r_std,rmse,rmse_std\n";
    auto cell = [&](const std::optional<AblationCell>& c) {
        if (c)
            out << ',' << num(c->mean) << ',' << num(c->std);
        else
            out << ",,";
    };
    for (const auto& r : table.rows) {
        out << r.variant;
        cell(r.accuracy);
        cell(r.macro_f1);
        cell(r.pearson_r);
        cell(r.rmse);
        out << '\n';
    }
    return out.str();
}

} // namespace cellmtl
