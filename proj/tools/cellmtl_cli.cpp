// cellmtl: command-line driver for synthesis, training, evaluation, ablation, gradient checking,
// summaries and figure data. Every command stages its output and promotes it only on success.

#include "cellmtl/hash.hpp"
#include "cellmtl/pipeline.hpp"
#include "cellmtl/summarizer.hpp"

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cellmtl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Files that carry wall-clock values and so stay out of the hashed manifest.
bool is_timing_file(const fs::path& p)
{
    const auto name = p.filename().string();
    return name == "timing.json" || name == "command_timing.json";
}

class UsageError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Options {
    std::string config;
    std::string out = "cellmtl-out";
    std::optional<std::uint64_t> seed;
    std::string checkpoint;
    std::string variant;
    std::string endpoint;

    std::string data;
    std::optional<std::size_t> n_per_class;
    std::optional<std::size_t> epochs;
    std::string split = "test";
    std::size_t n_seeds = 3;
    std::vector<std::string> variants;
    bool quick = false;
};

void write_text(const fs::path& p, const std::string& s)
{
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << s;
    if (!out)
        throw LoadError("cannot write " + p.string());
}

std::string read_text(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    if (!in)
        throw LoadError("cannot read " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Output directory staged beside the target. Entries are moved into place by commit(); anything
// left in the staging area is deleted on destruction.
class Stage {
public:
    explicit Stage(fs::path out) : out_(std::move(out))
    {
        created_ = fs::create_directories(out_);
        dir_ = out_ / ".staging";
        fs::remove_all(dir_);
        fs::create_directories(dir_);
    }
    ~Stage()
    {
        std::error_code ec;
        fs::remove_all(dir_, ec);
        if (created_ && fs::is_empty(out_, ec))
            fs::remove(out_, ec);
    }
    Stage(const Stage&) = delete;
    Stage& operator=(const Stage&) = delete;

    const fs::path& dir() const { return dir_; }

    /// Moves the named entries (all when empty) into the output directory.
    void commit(const std::vector<std::string>& only = {})
    {
        for (const auto& e : fs::directory_iterator(dir_)) {
            const auto name = e.path().filename().string();
            if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end())
                continue;
            const fs::path dst = out_ / name;
            fs::remove_all(dst);
            fs::rename(e.path(), dst);
        }
    }

private:
    fs::path out_, dir_;
    bool created_ = false;
};

void write_manifest(const fs::path& dir, const std::string& command)
{
    std::vector<fs::path> files;
    for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && !is_timing_file(e.path()) && e.path().filename() != "artifacts.json")
            files.push_back(fs::relative(e.path(), dir));
    std::sort(files.begin(), files.end());
    json list = json::array();
    for (const auto& f : files)
        list.push_back({{"path", f.generic_string()},
                        {"sha256", sha256_file(dir / f)},
                        {"bytes", fs::file_size(dir / f)}});
    write_text(dir / "artifacts.json",
               json{{"schema", "cellmtl-artifacts"}, {"version", 1}, {"command", command}, {"artifacts", list}}.dump(2) +
                   "\n");
}

RunConfig resolve_config(const Options& o)
{
    RunConfig cfg = o.config.empty() ? RunConfig{} : load_config(o.config);
    if (o.seed) {
        cfg.train.seed = *o.seed;
        cfg.synth.seed = *o.seed;
    }
    if (!o.variant.empty())
        cfg.train.variant = o.variant;
    if (!o.endpoint.empty())
        cfg.endpoint.url = o.endpoint;
    if (o.n_per_class)
        cfg.synth.n_per_class.fill(*o.n_per_class);
    if (o.epochs)
        cfg.train.epochs = *o.epochs;
    cfg.train.validate();
    cfg.synth.validate();
    return cfg;
}

// --data, or the configured synthetic cohort
Dataset obtain_dataset(const Options& o, const RunConfig& cfg)
{
    if (!o.data.empty())
        return load_dataset(o.data);
    spdlog::info("no --data given, synthesizing the configured cohort (seed {})", cfg.synth.seed);
    return synthesize(cfg.synth).dataset;
}

json stats_to_json(const ZScoreStats& s)
{
    return {{"marker_mean", s.marker_mean},
            {"marker_std", s.marker_std},
            {"channel_mean", s.channel_mean},
            {"channel_std", s.channel_std}};
}

ZScoreStats stats_from_json(const json& j)
{
    ZScoreStats s;
    s.marker_mean = j.at("marker_mean").get<std::array<double, kNumMarkers>>();
    s.marker_std = j.at("marker_std").get<std::array<double, kNumMarkers>>();
    s.channel_mean = j.at("channel_mean").get<std::vector<double>>();
    s.channel_std = j.at("channel_std").get<std::vector<double>>();
    return s;
}

std::vector<std::size_t> all_indices(const Dataset& ds)
{
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return idx;
}

// Applies the statistics stored with a checkpoint, or refits on the train split when there are none.
void normalize_for(const fs::path& checkpoint, Dataset& ds)
{
    const fs::path p = checkpoint / "normalization.json";
    if (fs::exists(p)) {
        zscore_apply(ds.records, all_indices(ds), stats_from_json(json::parse(read_text(p))));
        return;
    }
    spdlog::warn("{} has no normalization.json; refitting z-scores on the train split", checkpoint.string());
    zscore_dataset(ds);
}

std::vector<std::size_t> pick_split(const Dataset& ds, const std::string& split)
{
    if (split == "train")
        return ds.splits.train;
    if (split == "val")
        return ds.splits.val;
    if (split == "all")
        return all_indices(ds);
    if (ds.splits.test.empty()) {
        spdlog::warn("dataset has no test split, evaluating every record");
        return all_indices(ds);
    }
    return ds.splits.test;
}

struct Loaded {
    HybridNet<float> model;
    Dataset ds;
    std::vector<std::size_t> idx;
};

Loaded load_for_eval(const Options& o, const RunConfig& cfg)
{
    if (o.checkpoint.empty())
        throw UsageError("--checkpoint is required");
    HybridNet<float> model(checkpoint_config(o.checkpoint));
    load_checkpoint(model.params(), o.checkpoint);
    Dataset ds = obtain_dataset(o, cfg);
    normalize_for(o.checkpoint, ds);
    auto idx = pick_split(ds, o.split);
    if (idx.empty())
        throw InputError("split '" + o.split + "' is empty");
    return {std::move(model), std::move(ds), std::move(idx)};
}

std::string num(double v)
{
    if (std::isnan(v))
        return "";
    char buf[40];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

json oracle_json(const OracleReport& r)
{
    return {{"accuracy_ceiling", r.accuracy_ceiling},
            {"marker_r_ceiling", r.marker_r_ceiling},
            {"mean_r_ceiling", r.mean_r_ceiling},
            {"n", r.n}};
}

// Commands. Each writes into `dir` and returns extra timing fields.

json cmd_synth(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    const auto res = synthesize(cfg.synth);
    write_dataset(res.dataset, dir / "dataset");
    write_text(dir / "oracle.json", json{{"all", oracle_json(res.oracle)}, {"test", oracle_json(res.oracle_test)}}.dump(2) + "\n");
    write_text(dir / "config.toml", render_config(cfg));
    spdlog::info("synthesized {} records, oracle accuracy ceiling {:.3f}, mean r ceiling {:.3f}", res.dataset.size(),
                 res.oracle.accuracy_ceiling, res.oracle.mean_r_ceiling);
    (void)o;
    return json::object();
}

json cmd_train(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    Dataset ds = obtain_dataset(o, cfg);
    const auto stats = zscore_dataset(ds);
    const std::string norm = stats_to_json(stats).dump(2) + "\n";
    write_text(dir / "config.toml", render_config(cfg));
    write_text(dir / "normalization.json", norm);
    auto res = train(cfg.train, ds, dir);
    for (const char* sub : {"best", "last"})
        write_text(dir / sub / "normalization.json", norm);
    if (!ds.splits.test.empty()) {
        const auto rep = evaluate(res.best, ds, ds.splits.test);
        write_report(rep, dir / "test");
        spdlog::info("test accuracy {:.4f}, mean r {:.4f}", rep.accuracy(), rep.mean_pearson());
    }
    return {{"epoch_seconds", res.log.epoch_seconds}};
}

json cmd_eval(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    auto l = load_for_eval(o, cfg);
    const auto rep = evaluate(l.model, l.ds, l.idx);
    write_report(rep, dir);
    write_text(dir / "evidence.json", evidence_to_json(build_evidence(rep, l.ds.marker_names)) + "\n");
    spdlog::info("accuracy {:.4f}, mean r {:.4f} over {} records", rep.accuracy(), rep.mean_pearson(), rep.n);
    return json::object();
}

json cmd_ablate(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    Dataset ds = obtain_dataset(o, cfg);
    zscore_dataset(ds);
    std::vector<std::string> variants = o.variants;
    if (variants.empty())
        variants = o.variant.empty() ? variant_names() : std::vector<std::string>{o.variant};
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < o.n_seeds; ++i)
        seeds.push_back(cfg.train.seed + i);
    const auto eval_idx = pick_split(ds, o.split);
    const auto table = ablate(cfg.train, ds, variants, seeds, eval_idx);
    write_text(dir / "ablation.csv", ablation_csv(table));
    json rows = json::array();
    for (const auto& r : table.rows) {
        json row{{"variant", r.variant}};
        auto cell = [&](const char* key, const std::optional<AblationCell>& c) {
            if (c)
                row[key] = {{"mean", c->mean}, {"std", c->std}, {"per_seed", c->per_seed}};
        };
        cell("accuracy", r.accuracy);
        cell("macro_f1", r.macro_f1);
        cell("pearson_r", r.pearson_r);
        cell("rmse", r.rmse);
        rows.push_back(row);
    }
    write_text(dir / "ablation.json", json{{"seeds", seeds}, {"rows", rows}}.dump(2) + "\n");
    write_text(dir / "config.toml", render_config(cfg));
    return json::object();
}

json cmd_gradcheck(const Options& o, const RunConfig& cfg, const fs::path& dir, bool& passed)
{
    GradCheckSuiteOptions g;
    g.model_config = apply_variant(cfg.train, cfg.train.variant).model;
    g.seed = cfg.train.seed;
    g.model = !o.quick;
    g.model_float = !o.quick;
    const auto r = run_gradcheck(g);
    write_text(dir / "gradcheck.csv", gradcheck_csv(r));
    passed = r.passed();
    spdlog::info("gradcheck: {} checks, max rel. error {:.3g} (double) {:.3g} (float): {}", r.entries.size(),
                 r.max_rel_error("double"), r.max_rel_error("float"), passed ? "pass" : "FAIL");
    json t = json::object();
    for (const auto& e : r.entries)
        t[e.name + "/" + e.precision] = e.seconds;
    return {{"checks", t}};
}

json cmd_summarize(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    auto l = load_for_eval(o, cfg);
    const auto rep = evaluate(l.model, l.ds, l.idx);
    const auto bundle = build_evidence(rep, l.ds.marker_names);
    const auto out = llm_summarize(bundle, cfg.endpoint);
    if (!out.notice.empty())
        spdlog::warn("summarize: {}", out.notice);
    write_text(dir / "evidence.json", evidence_to_json(bundle) + "\n");
    write_text(dir / "summary.txt", out.text + "\n");
    write_text(dir / "summary.json", json{{"text", out.text},
                                          {"used_endpoint", out.used_endpoint},
                                          {"fell_back", out.fell_back},
                                          {"dropped", out.dropped},
                                          {"notice", out.notice}}
                                             .dump(2) +
                                         "\n");
    std::cout << out.text << "\n";
    return json::object();
}

double quantile(std::vector<double> v, double q)
{
    std::sort(v.begin(), v.end());
    const double pos = q * double(v.size() - 1);
    const auto lo = std::size_t(pos);
    const auto hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - double(lo)) * (v[hi] - v[lo]);
}

json cmd_export(const Options& o, const RunConfig& cfg, const fs::path& dir)
{
    auto l = load_for_eval(o, cfg);
    const auto pred = predict(l.model, l.ds, l.idx);
    const auto& mc = l.model.config();
    const bool has_cls = !mc.reg_only, has_reg = !mc.cls_only;
    const std::size_t n = l.idx.size();

    std::vector<std::uint8_t> labels(n), predicted(n);
    std::vector<double> confidence(n, 0.0);
    Tensor<float> targets({n, kNumMarkers});
    for (std::size_t i = 0; i < n; ++i) {
        const auto& r = l.ds.records[l.idx[i]];
        labels[i] = r.cls;
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            targets.at({i, m}) = r.markers[m];
        if (has_cls) {
            std::size_t best = 0;
            for (std::size_t c = 1; c < kNumClasses; ++c)
                if (pred.cls_probs.at({i, c}) > pred.cls_probs.at({i, best}))
                    best = c;
            predicted[i] = std::uint8_t(best);
            confidence[i] = pred.cls_probs.at({i, best});
        }
    }

    // one row per record
    std::ostringstream samples;
    samples << "id,true_class,predicted_class,confidence";
    if (has_cls)
        for (const auto& c : kClassNames)
            samples << ",p_" << c;
    if (has_reg)
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            samples << ",true_" << l.ds.marker_names[m] << ",pred_" << l.ds.marker_names[m];
    samples << "\n";
    for (std::size_t i = 0; i < n; ++i) {
        samples << l.ds.records[l.idx[i]].id << ',' << kClassNames[labels[i]] << ','
                << (has_cls ? kClassNames[predicted[i]] : "") << ',' << (has_cls ? num(confidence[i]) : "");
        if (has_cls)
            for (std::size_t c = 0; c < kNumClasses; ++c)
                samples << ',' << num(pred.cls_probs.at({i, c}));
        if (has_reg)
            for (std::size_t m = 0; m < kNumMarkers; ++m)
                samples << ',' << num(targets.at({i, m})) << ',' << num(pred.reg_values.at({i, m}));
        samples << "\n";
    }
    write_text(dir / "sample_predictions.csv", samples.str());

    const auto rep = build_report(pred.cls_probs, pred.reg_values, labels, targets, l.ds.marker_names);
    if (rep.classification) {
        std::ostringstream conf;
        conf << "true_class,predicted_class,count,row_fraction\n";
        for (std::size_t t = 0; t < kNumClasses; ++t) {
            const auto& row = rep.classification->confusion[t];
            const double total = double(std::accumulate(row.begin(), row.end(), std::size_t{0}));
            for (std::size_t p = 0; p < kNumClasses; ++p)
                conf << kClassNames[t] << ',' << kClassNames[p] << ',' << row[p] << ','
                     << num(total > 0 ? double(row[p]) / total : 0.0) << "\n";
        }
        write_text(dir / "confusion_long.csv", conf.str());
    }
    if (rep.roc) {
        std::ostringstream roc;
        roc << "class,fpr,tpr,threshold,auc\n";
        for (std::size_t c = 0; c < kNumClasses; ++c)
            for (const auto& p : (*rep.roc)[c].points)
                roc << kClassNames[c] << ',' << num(p.fpr) << ',' << num(p.tpr) << ','
                    << (std::isfinite(p.threshold) ? num(p.threshold) : "inf") << ',' << num((*rep.roc)[c].auc) << "\n";
        write_text(dir / "roc_long.csv", roc.str());
    }
    if (has_reg) {
        // scatter (true vs predicted per marker) and violin / ridge (per class) share one long table
        std::ostringstream lng;
        lng << "id,marker,true_class,predicted_class,true_value,predicted_value\n";
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            for (std::size_t i = 0; i < n; ++i)
                lng << l.ds.records[l.idx[i]].id << ',' << l.ds.marker_names[m] << ',' << kClassNames[labels[i]] << ','
                    << (has_cls ? kClassNames[predicted[i]] : "") << ',' << num(targets.at({i, m})) << ','
                    << num(pred.reg_values.at({i, m})) << "\n";
        write_text(dir / "markers_long.csv", lng.str());

        std::ostringstream metrics;
        metrics << "marker,pearson_r,rmse,mae,ccc\n";
        for (const auto& r : rep.regression->rows)
            metrics << r.name << ',' << num(r.m.pearson_r) << ',' << num(r.m.rmse) << ',' << num(r.m.mae) << ','
                    << num(r.m.ccc) << "\n";
        write_text(dir / "marker_metrics.csv", metrics.str());

        std::ostringstream dist;
        dist << "marker,true_class,source,n,mean,sd,q05,q25,median,q75,q95\n";
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            for (std::size_t c = 0; c < kNumClasses; ++c)
                for (const char* source : {"true", "predicted"}) {
                    std::vector<double> v;
                    for (std::size_t i = 0; i < n; ++i)
                        if (labels[i] == c)
                            v.push_back(source[0] == 't' ? targets.at({i, m}) : pred.reg_values.at({i, m}));
                    dist << l.ds.marker_names[m] << ',' << kClassNames[c] << ',' << source << ',' << v.size();
                    if (v.empty()) {
                        dist << ",,,,,,,\n";
                        continue;
                    }
                    const double mean = std::accumulate(v.begin(), v.end(), 0.0) / double(v.size());
                    double ss = 0;
                    for (double x : v)
                        ss += (x - mean) * (x - mean);
                    dist << ',' << num(mean) << ',' << num(v.size() > 1 ? std::sqrt(ss / double(v.size() - 1)) : 0.0);
                    for (double q : {0.05, 0.25, 0.5, 0.75, 0.95})
                        dist << ',' << num(quantile(v, q));
                    dist << "\n";
                }
        write_text(dir / "marker_distributions.csv", dist.str());
    }
    write_text(dir / "fusion.csv", "branch,weight\ncnn," + num(pred.fusion_weights[0]) + "\nvit," +
                                       num(pred.fusion_weights[1]) + "\n");
    return json::object();
}

void add_common(CLI::App& sub, Options& o, bool data)
{
    if (data) {
        sub.add_option("--data", o.data, "dataset container directory or manifest (default: synthesize from config)");
        sub.add_option("--split", o.split, "records to use: test, val, train or all")
            ->check(CLI::IsMember({"test", "val", "train", "all"}));
    }
}

} // namespace

int main(int argc, char** argv)
{
    spdlog::set_default_logger(spdlog::stderr_color_st("cellmtl"));

    CLI::App app{"cellmtl: hybrid CNN/ViT cell classification and marker regression"};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("--config", o.config, "TOML-style configuration file")->check(CLI::ExistingFile);
    app.add_option("--out", o.out, "output directory");
    app.add_option("--seed", o.seed, "seed for synthesis and training");
    app.add_option("--checkpoint", o.checkpoint, "checkpoint directory")->check(CLI::ExistingDirectory);
    app.add_option("--variant", o.variant, "model variant")->check(CLI::IsMember(variant_names()));
    app.add_option("--endpoint", o.endpoint, "summarization endpoint URL");

    auto* synth = app.add_subcommand("synth", "write a synthetic cohort with its oracle ceilings");
    synth->add_option("--n", o.n_per_class, "records per class")->check(CLI::PositiveNumber);
    auto* trn = app.add_subcommand("train", "train a model; writes best/, last/ and train_log.json");
    add_common(*trn, o, true);
    trn->add_option("--epochs", o.epochs, "override train.epochs")->check(CLI::PositiveNumber);
    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint; writes report, tables, ROC and evidence");
    add_common(*ev, o, true);
    auto* abl = app.add_subcommand("ablate", "train and evaluate variants over several seeds");
    add_common(*abl, o, true);
    abl->add_option("--seeds", o.n_seeds, "number of seeds, counting up from --seed")->check(CLI::PositiveNumber);
    abl->add_option("--variants", o.variants, "variants to run (default: all)")->check(CLI::IsMember(variant_names()));
    abl->add_option("--epochs", o.epochs, "override train.epochs")->check(CLI::PositiveNumber);
    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the full model");
    gc->add_flag("--ops-only", o.quick, "skip the full-model checks");
    auto* sum = app.add_subcommand("summarize", "grounded text summary of a checkpoint's predictions");
    add_common(*sum, o, true);
    auto* fig = app.add_subcommand("export-figures", "long-format CSV data for plots");
    add_common(*fig, o, true);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }
    CLI::App* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();

    RunConfig cfg;
    try {
        cfg = resolve_config(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    }
    if ((name == "eval" || name == "summarize" || name == "export-figures") && o.checkpoint.empty()) {
        std::cerr << "error: " << name << " requires --checkpoint\n\n" << cmd->help();
        return kExitUsage;
    }

    const auto t0 = std::chrono::steady_clock::now();
    try {
        Stage stage(o.out);
        json timing;
        bool passed = true;
        try {
            if (name == "synth")
                timing = cmd_synth(o, cfg, stage.dir());
            else if (name == "train")
                timing = cmd_train(o, cfg, stage.dir());
            else if (name == "eval")
                timing = cmd_eval(o, cfg, stage.dir());
            else if (name == "ablate")
                timing = cmd_ablate(o, cfg, stage.dir());
            else if (name == "gradcheck")
                timing = cmd_gradcheck(o, cfg, stage.dir(), passed);
            else if (name == "summarize")
                timing = cmd_summarize(o, cfg, stage.dir());
            else
                timing = cmd_export(o, cfg, stage.dir());
        } catch (const TrainingAborted& e) {
            // keep what explains the failure, drop everything else
            spdlog::error("{}", e.what());
            stage.commit({"last-good", "diagnostic.json", "train_log.json"});
            return kExitRuntime;
        }
        write_manifest(stage.dir(), name);
        timing["command"] = name;
        timing["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        write_text(stage.dir() / "command_timing.json", timing.dump(2) + "\n");
        stage.commit();
        spdlog::info("{}: artifacts in {}", name, o.out);
        return passed ? kExitOk : kExitRuntime;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        spdlog::error("{}: {}", name, e.what());
        return kExitRuntime;
    }
}
