#include "cellmtl/hash.hpp"
#include "cellmtl/pipeline.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

using namespace cellmtl;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_model()
{
    ModelConfig m;
    m.cnn_stem_out = 8;
    m.cnn_token_dim = 16;
    m.inception_modules = 1;
    m.vit_dim = 16;
    m.vit_heads = 2;
    m.vit_blocks = 1;
    m.vit_mlp_ratio = 2;
    m.fused_dim = 16;
    return m;
}

TrainConfig tiny_train(std::size_t epochs = 2)
{
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = 8;
    t.model = tiny_model();
    t.seed = 5;
    return t;
}

Dataset tiny_dataset(std::uint64_t seed = 3)
{
    SynthConfig s;
    s.n_per_class = {8, 8, 8};
    s.val_fraction = 0.25;
    s.test_fraction = 0.25;
    s.seed = seed;
    auto res = synthesize(s);
    zscore_dataset(res.dataset);
    return res.dataset;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("cellmtl_pipe_" + tag + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::map<std::string, Storage<float>> snapshot(const ParameterSet<float>& p)
{
    std::map<std::string, Storage<float>> out;
    for (const auto& [path, v] : p.entries())
        out[path] = v.value().storage();
    return out;
}

} // namespace

TEST_CASE("config: defaults, round trip and strictness")
{
    const auto empty = parse_config("");
    CHECK(render_config(empty) == render_config(RunConfig{}));
    CHECK(empty.train.epochs == 200);
    CHECK(empty.train.batch_size == 32);
    CHECK(empty.train.lr_init == 1e-3);
    CHECK(empty.train.weight_decay == 1e-4);

    const auto cfg = parse_config(R"(
# a comment
[train]
epochs = 7
batch_size = 16
lr_init = 2.5e-3
augment = false
variant = "cnn_only"

[loss]
alpha = [0.6, 1.2, 1.2]
gamma = 0

[synth]
n_per_class = [5, 6, 7]
kappa = 0.25

[summarizer]
url = "http://127.0.0.1:9/v1"
timeout_s = 1.5
)");
    CHECK(cfg.train.epochs == 7);
    CHECK(cfg.train.batch_size == 16);
    CHECK(cfg.train.lr_init == 2.5e-3);
    CHECK_FALSE(cfg.train.augment);
    CHECK(cfg.train.variant == "cnn_only");
    CHECK(cfg.train.loss.alpha == std::vector<double>{0.6, 1.2, 1.2});
    CHECK(cfg.train.loss.gamma == 0);
    CHECK(cfg.synth.n_per_class == std::array<std::size_t, 3>{5, 6, 7});
    CHECK(cfg.synth.kappa == 0.25);
    CHECK(cfg.endpoint.url == "http://127.0.0.1:9/v1");
    CHECK(cfg.endpoint.timeout_s == 1.5);

    const auto text = render_config(cfg);
    CHECK(render_config(parse_config(text)) == text);

    auto message = [](const std::string& body) {
        try {
            parse_config(body);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message("[train]\nepoch = 3\n").find("train.epoch") != std::string::npos);
    CHECK(message("[trainer]\nepochs = 3\n").find("[trainer]") != std::string::npos);
    CHECK(message("epochs = 3\n").find("epochs") != std::string::npos);
    CHECK(message("[train]\nepochs = three\n").find("train.epochs") != std::string::npos);
    CHECK(message("[train]\naugment = 1\n").find("true or false") != std::string::npos);
    CHECK(message("[train]\nbatch_size = 1\n").find("batch_size") != std::string::npos);
    CHECK(message("[train]\nepochs = 0\n").find("epochs") != std::string::npos);
    CHECK(message("[train]\nvariant = \"tiny\"\n").find("tiny") != std::string::npos);
    CHECK(message("[loss]\nalpha = [1, 2]\n").find("loss.alpha") != std::string::npos);
}

TEST_CASE("variants set model flags and loss weights")
{
    const TrainConfig base;
    CHECK(apply_variant(base, "cnn_only").model.cnn_only);
    CHECK(apply_variant(base, "vit_only").model.vit_only);
    CHECK(apply_variant(base, "no_gating").model.no_gating);
    const auto c = apply_variant(base, "cls_only");
    CHECK(c.model.cls_only);
    CHECK(c.loss.lambda_reg == 0);
    const auto r = apply_variant(base, "reg_only");
    CHECK(r.model.reg_only);
    CHECK(r.loss.lambda_cls == 0);
    const auto f = apply_variant(c, "full");
    CHECK_FALSE(f.model.cls_only);
    CHECK_THROWS_AS(apply_variant(base, "resnet"), ConfigError);
}

TEST_CASE("cosine schedule endpoints")
{
    CHECK(cosine_lr(0, 200, 1e-3, 1e-5) == 1e-3);
    CHECK(std::abs(cosine_lr(199, 200, 1e-3, 1e-5) - 1e-5) < 1e-9);
    CHECK(cosine_lr(100, 201, 1e-3, 1e-5) == doctest::Approx((1e-3 + 1e-5) / 2).epsilon(1e-12));
    for (std::size_t e = 1; e < 200; ++e)
        CHECK(cosine_lr(e, 200, 1e-3, 1e-5) <= cosine_lr(e - 1, 200, 1e-3, 1e-5));
    CHECK(cosine_lr(0, 1, 1e-3, 1e-5) == 1e-3);
}

TEST_CASE("AdamW: hand-computed first step, zero lr and untouched parameters")
{
    ParameterSet<float> p;
    p.add("a", Tensor<float>({2}, {1.0f, -2.0f}));
    p.add("b", Tensor<float>({1}, {3.0f}));
    p.at("a").mutable_grad() = Tensor<float>({2}, {0.5f, -4.0f});

    SUBCASE("zero learning rate leaves parameters bit-identical")
    {
        AdamW opt;
        const auto before = snapshot(p);
        opt.step(p, 0.0);
        CHECK(snapshot(p) == before);
    }
    SUBCASE("first step moves each weight by lr * (sign(g) + wd * w)")
    {
        AdamW opt(0.9, 0.999, 1e-8, 0.01);
        opt.step(p, 0.1);
        // bias-corrected m/sqrt(v) = g/|g| on the first step, up to eps
        const double a0 = 1.0 - 0.1 * (0.5 / (0.5 + 1e-8) + 0.01 * 1.0);
        const double a1 = -2.0 - 0.1 * (-4.0 / (4.0 + 1e-8) + 0.01 * -2.0);
        CHECK(p.at("a").value()[0] == doctest::Approx(a0).epsilon(1e-7));
        CHECK(p.at("a").value()[1] == doctest::Approx(a1).epsilon(1e-7));
        // no gradient: no update and no weight decay
        CHECK(p.at("b").value()[0] == 3.0f);
    }
}

TEST_CASE("gradient clipping rescales to the requested global norm")
{
    ParameterSet<float> p;
    p.add("a", Tensor<float>({2}, 0.0f));
    p.add("b", Tensor<float>({1}, 0.0f));
    p.at("a").mutable_grad() = Tensor<float>({2}, {3.0f, 0.0f});
    p.at("b").mutable_grad() = Tensor<float>({1}, {4.0f});
    CHECK(clip_grad_norm(p, 10.0) == doctest::Approx(5.0));
    CHECK(p.at("a").grad()[0] == 3.0f);
    CHECK(clip_grad_norm(p, 1.0) == doctest::Approx(5.0));
    CHECK(p.at("a").grad()[0] == doctest::Approx(0.6).epsilon(1e-6));
    CHECK(p.at("b").grad()[0] == doctest::Approx(0.8).epsilon(1e-6));
}

TEST_CASE("a zero loss weight keeps the parameters only it reaches unchanged")
{
    const auto ds = tiny_dataset();
    TrainConfig cfg = tiny_train(1);
    cfg.loss.lambda_reg = 0;
    cfg.eval_train_each_epoch = false;
    HybridNet<float> fresh(cfg.model, derive_seed(cfg.seed, "init"));
    const auto before = snapshot(fresh.params());
    const auto res = train(cfg, ds);
    const auto after = snapshot(res.last.params());
    std::size_t head_params = 0, changed_elsewhere = 0;
    for (const auto& [path, v] : before) {
        if (path.rfind("head.reg.", 0) == 0) {
            ++head_params;
            CHECK_MESSAGE(after.at(path) == v, path);
        } else if (after.at(path) != v) {
            ++changed_elsewhere;
        }
    }
    CHECK(head_params > 0);
    CHECK(changed_elsewhere > 0);
    CHECK(res.log.epochs[0].loss.reg == 0);
}

TEST_CASE("training is deterministic and its artifacts hash identically")
{
    const auto ds = tiny_dataset();
    const auto cfg = tiny_train(2);
    TempDir a("det_a"), b("det_b");
    const auto ra = train(cfg, ds, a.path);
    const auto rb = train(cfg, ds, b.path);
    CHECK(ra.log == rb.log);
    CHECK(train_log_to_json(ra.log) == train_log_to_json(rb.log));
    REQUIRE(ra.log.epochs.size() == 2);
    for (const char* f : {"last/weights.bin", "last/manifest.json", "best/weights.bin", "train_log.json"})
        CHECK_MESSAGE(sha256_file(a.path / f) == sha256_file(b.path / f), f);
    CHECK(fs::exists(a.path / "timing.json"));
    CHECK(train_log_to_json(ra.log).find("seconds") == std::string::npos);

    TrainConfig other = cfg;
    other.seed = 6;
    CHECK_FALSE(train(other, ds).log == ra.log);
}

TEST_CASE("train log is complete and finite; learning-rate endpoints are logged")
{
    const auto ds = tiny_dataset();
    const auto cfg = tiny_train(3);
    const auto res = train(cfg, ds);
    REQUIRE(res.log.epochs.size() == 3);
    CHECK(res.log.epochs.front().lr == 1e-3);
    CHECK(std::abs(res.log.epochs.back().lr - 1e-5) < 1e-9);
    for (const auto& e : res.log.epochs) {
        for (double v : {e.loss.total, e.loss.cls, e.loss.reg, e.loss.aux, e.grad_norm_mean, e.train_accuracy_running})
            CHECK(std::isfinite(v));
        REQUIRE(e.train_accuracy);
        REQUIRE(e.val_accuracy);
        REQUIRE(e.val_mean_r);
        CHECK(std::isfinite(*e.val_mean_r));
        CHECK(e.fusion_weights[0] + e.fusion_weights[1] == doctest::Approx(1.0));
        CHECK(e.steps == 2); // 12 train records, batch 8, trailing batch of 4 kept
        CHECK(e.loss.total == doctest::Approx(e.loss.cls + e.loss.reg + 0.1 * e.loss.aux).epsilon(1e-6));
    }
}

TEST_CASE("evaluating the train split reproduces the logged final accuracy")
{
    const auto ds = tiny_dataset();
    auto res = train(tiny_train(2), ds);
    const auto rep = evaluate(res.last, ds, ds.splits.train);
    REQUIRE(res.log.epochs.back().train_accuracy);
    CHECK(rep.accuracy() == *res.log.epochs.back().train_accuracy);
    CHECK(rep.mean_pearson() == *res.log.epochs.back().train_mean_r);
}

TEST_CASE("checkpoint round trip gives a byte-identical evaluation report")
{
    const auto ds = tiny_dataset();
    TempDir dir("ckpt");
    auto res = train(tiny_train(2), ds, dir.path);
    const auto direct = report_to_json(evaluate(res.last, ds, ds.splits.test));
    const auto loaded = report_to_json(evaluate(dir.path / "last", ds, ds.splits.test));
    CHECK(direct == loaded);
    const auto best = report_to_json(evaluate(res.best, ds, ds.splits.test));
    CHECK(best == report_to_json(evaluate(dir.path / "best", ds, ds.splits.test)));

    HybridNet<float> full(ModelConfig{}, 1);
    try {
        load_checkpoint(full.params(), dir.path / "last");
        FAIL("expected LoadError");
    } catch (const LoadError& e) {
        CHECK(std::string(e.what()).find("cnn.stem.conv.weight") != std::string::npos);
    }
}

TEST_CASE("best checkpoint follows the validation score")
{
    const auto ds = tiny_dataset();
    const auto res = train(tiny_train(3), ds);
    double best = -1;
    std::size_t arg = 0;
    for (const auto& e : res.log.epochs) {
        const double s = (*e.val_accuracy + *e.val_mean_r) / 2;
        if (s > best) {
            best = s;
            arg = e.epoch;
        }
    }
    CHECK(res.log.best_epoch == arg);
    CHECK(res.log.best_score == best);
}

TEST_CASE("non-finite training aborts with a last-good checkpoint and a block-path diagnostic")
{
    const auto ds = tiny_dataset();
    TrainConfig cfg = tiny_train(3);
    cfg.lr_init = 1e30;
    cfg.lr_final = 1e30;
    cfg.grad_clip = 0;
    TempDir dir("abort");
    testing::LogCapture log;
    try {
        train(cfg, ds, dir.path);
        FAIL("expected TrainingAborted");
    } catch (const TrainingAborted& e) {
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
    CHECK(fs::exists(dir.path / "last-good" / "weights.bin"));
    CHECK(fs::exists(dir.path / "diagnostic.json"));
    std::ifstream diag(dir.path / "diagnostic.json");
    const std::string body((std::istreambuf_iterator<char>(diag)), {});
    CHECK(body.find("\"error\"") != std::string::npos);
}

TEST_CASE("train rejects unusable inputs")
{
    Dataset empty;
    CHECK_THROWS_AS(train(tiny_train(1), empty), InputError);
    TrainConfig bad = tiny_train(1);
    bad.batch_size = 1;
    CHECK_THROWS_AS(train(bad, tiny_dataset()), ConfigError);
}

TEST_CASE("ablation rows, empty cells and per-seed reproducibility")
{
    const auto ds = tiny_dataset();
    TrainConfig cfg = tiny_train(1);
    cfg.eval_train_each_epoch = false;
    testing::LogCapture log;
    const auto table = ablate(cfg, ds, {"full", "cls_only", "reg_only"}, {1, 2}, ds.splits.test);
    CHECK(log.contains("at least 3"));
    REQUIRE(table.rows.size() == 3);
    const auto& full = table.row("full");
    CHECK(full.accuracy);
    CHECK(full.macro_f1);
    CHECK(full.pearson_r);
    CHECK(full.rmse);
    CHECK(full.accuracy->per_seed.size() == 2);
    CHECK(table.row("cls_only").accuracy);
    CHECK_FALSE(table.row("cls_only").pearson_r);
    CHECK_FALSE(table.row("reg_only").accuracy);
    CHECK(table.row("reg_only").rmse);

    const auto csv = ablation_csv(table);
    CHECK(csv.find("name,acc,acc_std,f1,f1_std,pearson_r,pearson_r_std,rmse,rmse_std\n") == 0);
    CHECK(csv.find("\ncls_only,") != std::string::npos);
    CHECK(csv.find(",,,,\n", csv.find("\ncls_only,")) != std::string::npos);
    CHECK(csv.find("\nreg_only,,,,,") != std::string::npos);

    TrainConfig again = apply_variant(cfg, "full");
    again.seed = 2;
    auto res = train(again, ds);
    CHECK(report_to_json(evaluate(res.best, ds, ds.splits.test)) == report_to_json(full.reports[1]));
    CHECK(std::abs(full.accuracy->mean - (full.accuracy->per_seed[0] + full.accuracy->per_seed[1]) / 2) < 1e-15);
}
