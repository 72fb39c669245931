#include "cellmtl/pipeline.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace cellmtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Batch {
    Tensor<float> images;
    std::vector<std::uint8_t> labels;
    Tensor<float> targets;
};

Batch make_batch(const std::vector<CellRecord>& recs)
{
    const std::size_t B = recs.size();
    const Shape& s = recs.front().image.shape();
    const std::size_t per = recs.front().image.numel();
    Batch b{Tensor<float>({B, s[0], s[1], s[2]}), std::vector<std::uint8_t>(B), Tensor<float>({B, kNumMarkers})};
    for (std::size_t i = 0; i < B; ++i) {
        std::copy(recs[i].image.data(), recs[i].image.data() + per, b.images.data() + i * per);
        b.labels[i] = recs[i].cls;
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            b.targets.at({i, m}) = recs[i].markers[m];
    }
    return b;
}

std::size_t argmax_row(const Tensor<float>& p, std::size_t i)
{
    std::size_t best = 0;
    for (std::size_t c = 1; c < p.dim(1); ++c)
        if (p.at({i, c}) > p.at({i, best}))
            best = c;
    return best;
}

/// Model-selection score: mean of the available accuracy and mean r.
double selection_score(const EvalReport& r)
{
    if (r.classification && r.regression)
        return (r.accuracy() + r.mean_pearson()) / 2;
    return r.classification ? r.accuracy() : r.mean_pearson();
}

json opt(const std::optional<double>& v)
{
    return v ? json(*v) : json(nullptr);
}

void write_text(const fs::path& p, const std::string& s)
{
    std::ofstream out(p, std::ios::trunc);
    out << s;
    if (!out)
        throw LoadError("cannot write " + p.string());
}

} // namespace

std::string train_log_to_json(const TrainLog& log)
{
    json epochs = json::array();
    for (const auto& e : log.epochs)
        epochs.push_back({{"epoch", e.epoch},
                          {"lr", e.lr},
                          {"loss",
                           {{"total", e.loss.total},
                            {"cls", e.loss.cls},
                            {"reg", e.loss.reg},
                            {"reg_smooth_l1", e.loss.reg_smooth_l1},
                            {"reg_pearson", e.loss.reg_pearson},
                            {"aux", e.loss.aux}}},
                          {"train_accuracy_running", e.train_accuracy_running},
                          {"train_accuracy", opt(e.train_accuracy)},
                          {"train_mean_r", opt(e.train_mean_r)},
                          {"val_accuracy", opt(e.val_accuracy)},
                          {"val_mean_r", opt(e.val_mean_r)},
                          {"fusion_weights", e.fusion_weights},
                          {"grad_norm_mean", e.grad_norm_mean},
                          {"steps", e.steps}});
    return json{{"schema", "cellmtl-train-log"},
                {"version", 1},
                {"best_epoch", log.best_epoch},
                {"best_score", log.best_score},
                {"epochs", epochs}}
        .dump(2);
}

Predictions predict(HybridNet<float>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch_size)
{
    const auto& mc = model.config();
    Predictions out;
    const std::size_t n = indices.size();
    if (!mc.reg_only)
        out.cls_probs = Tensor<float>({n, mc.n_classes});
    if (!mc.cls_only)
        out.reg_values = Tensor<float>({n, mc.n_markers});
    double gc = 0, gr = 0;
    for (std::size_t start = 0; start < n; start += batch_size) {
        const std::size_t end = std::min(n, start + batch_size);
        std::vector<CellRecord> recs;
        for (std::size_t i = start; i < end; ++i)
            recs.push_back(ds.records[indices[i]]);
        const auto b = make_batch(recs);
        const auto o = model.infer(b.images);
        if (!mc.reg_only)
            std::copy(o.cls_probs.value().data(), o.cls_probs.value().data() + o.cls_probs.value().numel(),
                      out.cls_probs.data() + start * mc.n_classes);
        if (!mc.cls_only)
            std::copy(o.reg_values.value().data(), o.reg_values.value().data() + o.reg_values.value().numel(),
                      out.reg_values.data() + start * mc.n_markers);
        out.fusion_weights = o.fusion_weights;
        gc += o.gate_mean_cls * double(end - start);
        gr += o.gate_mean_reg * double(end - start);
    }
    if (n > 0) {
        out.gate_mean_cls = gc / double(n);
        out.gate_mean_reg = gr / double(n);
    }
    return out;
}

EvalReport evaluate(HybridNet<float>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch_size)
{
    if (indices.empty())
        throw InputError("evaluate: empty split");
    const auto pred = predict(model, ds, indices, batch_size);
    std::vector<std::uint8_t> labels;
    Tensor<float> targets({indices.size(), kNumMarkers});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto& r = ds.records[indices[i]];
        labels.push_back(r.cls);
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            targets.at({i, m}) = r.markers[m];
    }
    return build_report(pred.cls_probs, pred.reg_values, labels, targets, ds.marker_names);
}

EvalReport evaluate(const fs::path& checkpoint, const Dataset& ds, const std::vector<std::size_t>& indices)
{
    HybridNet<float> model(checkpoint_config(checkpoint));
    load_checkpoint(model.params(), checkpoint);
    return evaluate(model, ds, indices);
}

TrainResult train(const TrainConfig& cfg_in, const Dataset& ds, const fs::path& out_dir)
{
    if (ds.splits.train.empty())
        throw InputError("train: empty train split");
    TrainConfig cfg = apply_variant(cfg_in, cfg_in.variant);
    if (cfg.alpha_from_train) {
        std::vector<std::uint8_t> labels;
        labels.reserve(ds.splits.train.size());
        for (std::size_t i : ds.splits.train)
            labels.push_back(ds.records.at(i).cls);
        cfg.loss.alpha = inverse_frequency_alpha(labels, cfg.model.n_classes);
    }
    cfg.validate();
    if (ds.splits.train.size() < 2)
        throw InputError("train: the train split needs at least two records");
    const bool have_val = !ds.splits.val.empty();
    if (!have_val)
        spdlog::warn("train: no validation split, the last epoch is kept as the best checkpoint");

    TrainResult res{TrainLog{}, HybridNet<float>(cfg.model, derive_seed(cfg.seed, "init")),
                    HybridNet<float>(cfg.model, derive_seed(cfg.seed, "init"))};
    auto& model = res.last;
    AdamW opt(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
    Rng dropout_rng(derive_seed(cfg.seed, "dropout"));
    if (!out_dir.empty())
        fs::create_directories(out_dir);

    std::vector<std::size_t> order = ds.splits.train;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        EpochLog el;
        el.epoch = epoch;
        el.lr = cosine_lr(epoch, cfg.epochs, cfg.lr_init, cfg.lr_final);

        Rng shuffle(derive_seed(cfg.seed, "shuffle-" + std::to_string(epoch)));
        for (std::size_t j = order.size(); j > 1; --j)
            std::swap(order[j - 1], order[shuffle.below(j)]);
        const std::uint64_t aug_base = derive_seed(cfg.seed, "augment-" + std::to_string(epoch));

        std::size_t batches = 0, correct = 0, seen = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2)
                break; // a trailing single row cannot feed the correlation term
            std::vector<CellRecord> recs(end - start);
#pragma omp parallel for schedule(static)
            for (std::size_t i = start; i < end; ++i) {
                const auto& r = ds.records[order[i]];
                if (cfg.augment) {
                    Rng rng(derive_seed(aug_base, order[i]));
                    recs[i - start] = augment(r, rng);
                } else {
                    recs[i - start] = r;
                }
            }
            const auto b = make_batch(recs);

            try {
                const auto out = model.forward(ops::constant(b.images), Mode::train, dropout_rng);
                const auto loss = total_loss(out, b.labels, b.targets, cfg.loss);
                loss.total.backward();
                const double norm = clip_grad_norm(model.params(), cfg.grad_clip);
                if (!std::isfinite(norm))
                    throw NumericalError("non-finite gradient norm at step " + std::to_string(step));
                opt.step(model.params(), el.lr);
                model.params().zero_grad();

                el.loss.total += loss.parts.total;
                el.loss.cls += loss.parts.cls;
                el.loss.reg += loss.parts.reg;
                el.loss.reg_smooth_l1 += loss.parts.reg_smooth_l1;
                el.loss.reg_pearson += loss.parts.reg_pearson;
                el.loss.aux += loss.parts.aux;
                el.grad_norm_mean += norm;
                if (out.cls_probs.defined())
                    for (std::size_t i = 0; i < b.labels.size(); ++i)
                        correct += argmax_row(out.cls_probs.value(), i) == b.labels[i];
                seen += b.labels.size();
            } catch (const NumericalError& e) {
                const std::string what = "epoch " + std::to_string(epoch) + ", step " + std::to_string(step) + ": " +
                                         e.what();
                spdlog::error("train: aborting, {}", what);
                if (!out_dir.empty()) {
                    model.params().zero_grad();
                    save_checkpoint(model.params(), cfg.model, out_dir / "last-good");
                    write_text(out_dir / "diagnostic.json",
                               json{{"epoch", epoch}, {"step", step}, {"error", e.what()}}.dump(2) + "\n");
                    write_text(out_dir / "train_log.json", train_log_to_json(res.log) + "\n");
                }
                throw TrainingAborted(what);
            }
            ++batches;
            ++step;
        }
        if (batches > 0) {
            for (double* v : {&el.loss.total, &el.loss.cls, &el.loss.reg, &el.loss.reg_smooth_l1, &el.loss.reg_pearson,
                              &el.loss.aux, &el.grad_norm_mean})
                *v /= double(batches);
        }
        el.steps = batches;
        el.train_accuracy_running = seen ? double(correct) / double(seen) : 0.0;

        if (cfg.eval_train_each_epoch) {
            const auto rep = evaluate(model, ds, ds.splits.train);
            if (rep.classification)
                el.train_accuracy = rep.accuracy();
            if (rep.regression)
                el.train_mean_r = rep.mean_pearson();
        }
        double score = 0;
        if (have_val) {
            const auto rep = evaluate(model, ds, ds.splits.val);
            if (rep.classification)
                el.val_accuracy = rep.accuracy();
            if (rep.regression)
                el.val_mean_r = rep.mean_pearson();
            score = selection_score(rep);
        }
        {
            NoGradGuard ng;
            const auto& a = model.params().at("fuse.alpha").value();
            const double m = std::max(a[0], a[1]);
            const double e0 = std::exp(a[0] - m), e1 = std::exp(a[1] - m);
            el.fusion_weights = {e0 / (e0 + e1), e1 / (e0 + e1)};
        }

        const bool improved = !have_val || epoch == 0 || score > res.log.best_score;
        if (improved) {
            res.log.best_epoch = epoch;
            res.log.best_score = score;
            copy_parameters(res.best.params(), model.params());
        }
        res.log.epochs.push_back(el);
        res.log.epoch_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
        spdlog::info("epoch {}/{} lr {:.3g} loss {:.4f} running acc {:.3f}{}{} ({:.1f}s)", epoch + 1, cfg.epochs, el.lr,
                     el.loss.total, el.train_accuracy_running,
                     el.val_accuracy ? fmt::format(" val acc {:.3f}", *el.val_accuracy) : std::string(),
                     el.val_mean_r ? fmt::format(" val r {:.3f}", *el.val_mean_r) : std::string(),
                     res.log.epoch_seconds.back());

        if (!out_dir.empty()) {
            if (improved)
                save_checkpoint(res.best.params(), cfg.model, out_dir / "best");
            if (cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0)
                save_checkpoint(model.params(), cfg.model, out_dir / ("epoch-" + std::to_string(epoch + 1)));
        }
    }
    if (!out_dir.empty()) {
        save_checkpoint(model.params(), cfg.model, out_dir / "last");
        write_text(out_dir / "train_log.json", train_log_to_json(res.log) + "\n");
        write_text(out_dir / "timing.json", json{{"epoch_seconds", res.log.epoch_seconds}}.dump(2) + "\n");
    }
    return res;
}

} // namespace cellmtl
