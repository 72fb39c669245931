#pragma once

#include "cellmtl/data.hpp"
#include "cellmtl/losses.hpp"
#include "cellmtl/metrics.hpp"
#include "cellmtl/model.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace cellmtl {

// Configuration.

struct TrainConfig {
    std::size_t epochs = 200;
    std::size_t batch_size = 32;
    double lr_init = 1e-3;
    double lr_final = 1e-5;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double grad_clip = 5.0; ///< global L2 norm; 0 disables
    std::uint64_t seed = 0;
    bool augment = true;
    /// Evaluate the whole train split in eval mode after every epoch (exact train accuracy).
    bool eval_train_each_epoch = true;
    /// Write `epoch-N` checkpoints every N epochs when an output directory is given; 0 disables.
    std::size_t checkpoint_every = 0;
    std::string variant = "full";
    /// Replace loss.alpha with the inverse class frequency of the train split.
    bool alpha_from_train = true;
    LossWeights loss;
    ModelConfig model;

    /// Throws ConfigError. Requires epochs >= 1 and batch_size >= 2.
    void validate() const;
};

/// Known ablation variants: full, cnn_only, vit_only, no_gating, cls_only, reg_only.
const std::vector<std::string>& variant_names();
/// Returns cfg with the variant's model flags and loss weights applied; ConfigError on an unknown name.
TrainConfig apply_variant(TrainConfig cfg, const std::string& variant);

struct EndpointConfig {
    std::string url;                              ///< empty = no endpoint
    std::string token_env = "CELLMTL_LLM_TOKEN"; ///< environment variable holding the bearer token
    double timeout_s = 10;
};

/// Everything a config file can set.
struct RunConfig {
    TrainConfig train;
    SynthConfig synth;
    EndpointConfig endpoint;
};

/// Parses the TOML-style text format. Sections: [train], [loss], [model], [synth], [summarizer].
/// Unknown sections or keys and malformed values raise ConfigError naming the key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Renders every field, so that parse_config(render_config(c)) == c.
std::string render_config(const RunConfig& cfg);

// Optimization.

/// Cosine decay from lr_init at epoch 0 to lr_final at the last epoch.
double cosine_lr(std::size_t epoch, std::size_t epochs, double lr_init, double lr_final);

/// Rescales gradients in place so their global L2 norm is at most max_norm; returns the norm before clipping.
double clip_grad_norm(ParameterSet<float>& params, double max_norm);

/// Adam with decoupled weight decay. Parameters without a gradient in the current step are left
/// untouched, including their weight decay.
class AdamW {
public:
    AdamW(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8, double weight_decay = 1e-4);
    void step(ParameterSet<float>& params, double lr);
    std::size_t steps() const { return t_; }

private:
    struct Moments {
        std::vector<double> m, v;
        std::size_t t = 0;
    };
    double beta1_, beta2_, eps_, wd_;
    std::size_t t_ = 0;
    std::map<std::string, Moments> state_;
};

// Training.

struct EpochLog {
    std::size_t epoch = 0;
    double lr = 0;
    LossBreakdown loss; ///< batch means
    double train_accuracy_running = 0; ///< train-mode predictions during the epoch
    std::optional<double> train_accuracy; ///< eval-mode pass over the train split
    std::optional<double> train_mean_r;
    std::optional<double> val_accuracy;
    std::optional<double> val_mean_r;
    std::array<double, 2> fusion_weights{}; ///< after the epoch
    double grad_norm_mean = 0;
    std::size_t steps = 0;

    bool operator==(const EpochLog&) const = default;
};

struct TrainLog {
    std::vector<EpochLog> epochs;
    std::size_t best_epoch = 0;
    double best_score = 0;
    /// Wall-clock seconds per epoch; excluded from equality and from to_json.
    std::vector<double> epoch_seconds;

    bool operator==(const TrainLog& o) const
    {
        return epochs == o.epochs && best_epoch == o.best_epoch && best_score == o.best_score;
    }
};

std::string train_log_to_json(const TrainLog& log);

struct TrainResult {
    TrainLog log;
    HybridNet<float> last;
    HybridNet<float> best;
};

/// Thrown when training meets a non-finite loss or gradient. When an output directory was
/// given, `last-good` holds the parameters before the failing step and `diagnostic.json` the report.
class TrainingAborted : public NumericalError {
public:
    using NumericalError::NumericalError;
};

/// Trains on ds.splits.train; val drives model selection when present. `out_dir`, if non-empty,
/// receives `last/`, `best/`, periodic checkpoints and `train_log.json`.
TrainResult train(const TrainConfig& cfg, const Dataset& ds, const std::filesystem::path& out_dir = {});

/// Eval-mode predictions over `indices`, batched.
Predictions predict(HybridNet<float>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch_size = 64);

EvalReport evaluate(HybridNet<float>& model, const Dataset& ds, const std::vector<std::size_t>& indices,
                    std::size_t batch_size = 64);
/// Loads a checkpoint directory and evaluates it.
EvalReport evaluate(const std::filesystem::path& checkpoint, const Dataset& ds, const std::vector<std::size_t>& indices);

// Ablation.

struct AblationCell {
    double mean = 0;
    double std = 0; ///< population std over seeds
    std::vector<double> per_seed;
};

struct AblationRow {
    std::string variant;
    std::optional<AblationCell> accuracy, macro_f1, pearson_r, rmse;
    std::vector<EvalReport> reports; ///< one per seed
    std::vector<TrainLog> logs;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::vector<std::uint64_t> seeds;
    const AblationRow& row(const std::string& variant) const;
};

/// Trains every variant for every seed on the same dataset and evaluates on `eval_indices`.
AblationTable ablate(const TrainConfig& base, const Dataset& ds, const std::vector<std::string>& variants,
                     const std::vector<std::uint64_t>& seeds, const std::vector<std::size_t>& eval_indices);

/// CSV with columns name,acc,acc_std,f1,f1_std,pearson_r,pearson_r_std,rmse,rmse_std; empty cells for
/// metrics a variant does not produce.
std::string ablation_csv(const AblationTable& table);

// Gradient checking.

struct GradCheckEntry {
    std::string name;
    std::string precision; ///< "double" or "float"
    double max_rel_error = 0;
    double tolerance = 0;
    double seconds = 0;
    bool passed() const { return max_rel_error < tolerance; }
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    bool passed() const;
    double max_rel_error(const std::string& precision) const;
};

struct GradCheckSuiteOptions {
    bool ops = true;           ///< every tensor op in double and float
    bool model = true;         ///< full model + total loss in double
    bool model_float = true;   ///< float backward of the full model against the double backward
    std::size_t model_batch = 2;
    std::size_t directions = 2; ///< random directions per large parameter block
    ModelConfig model_config;
    std::uint64_t seed = 0;
};

/// Tolerances: relative error below 1e-4 in double and 1e-2 in float.
inline constexpr double kGradTolDouble = 1e-4;
inline constexpr double kGradTolFloat = 1e-2;

GradCheckReport run_gradcheck(const GradCheckSuiteOptions& opt);
/// Per-check rows; timing lives in a separate field so the rest is reproducible.
std::string gradcheck_csv(const GradCheckReport& r);

} // namespace cellmtl
