#pragma once

#include "cellmtl/autograd.hpp"
#include "cellmtl/ops.hpp"
#include "cellmtl/rng.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace cellmtl {

struct ModelConfig {
    std::size_t in_channels = 4;
    std::size_t image_hw = 28;
    std::size_t cnn_stem_out = 64;
    std::size_t cnn_token_dim = 192;
    std::size_t cnn_tokens = 196;
    std::size_t inception_modules = 2;
    std::size_t vit_patch = 4;
    std::size_t vit_dim = 128;
    std::size_t vit_blocks = 2;
    std::size_t vit_heads = 4;
    std::size_t vit_mlp_ratio = 4;
    std::size_t fused_dim = 256;
    std::size_t n_classes = 3;
    std::size_t n_markers = 4;
    double head_dropout = 0.4;
    double refine_dropout = 0.2;
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
    double ln_eps = 1e-5;

    // ablation flags
    bool cnn_only = false;
    bool vit_only = false;
    bool no_gating = false;
    bool cls_only = false;
    bool reg_only = false;

    std::size_t vit_tokens() const { return (image_hw / vit_patch) * (image_hw / vit_patch) + 1; }
    std::size_t patch_dim() const { return in_channels * vit_patch * vit_patch; }

    /// Throws ConfigError if the geometry is inconsistent.
    void validate() const;
};

enum class Mode { train, eval };

/// Ordered parameter map keyed by hierarchical path, plus BatchNorm running statistics.
template <typename T>
class ParameterSet {
public:
    Var<T> add(const std::string& path, Tensor<T> value);
    ops::BatchNormStats<T>& add_bn(const std::string& path, std::size_t channels);

    const Var<T>& at(const std::string& path) const;
    Var<T>& at(const std::string& path);
    bool contains(const std::string& path) const { return index_.count(path) != 0; }

    const std::vector<std::pair<std::string, Var<T>>>& entries() const { return params_; }
    /// Mutable access to the tensors; the set of paths itself must not be changed through it.
    std::vector<std::pair<std::string, Var<T>>>& entries() { return params_; }
    std::map<std::string, ops::BatchNormStats<T>>& bn_stats() { return bn_; }
    const std::map<std::string, ops::BatchNormStats<T>>& bn_stats() const { return bn_; }

    std::size_t count() const;
    void zero_grad();

private:
    std::vector<std::pair<std::string, Var<T>>> params_;
    std::map<std::string, std::size_t> index_;
    std::map<std::string, ops::BatchNormStats<T>> bn_;
};

template <typename T>
struct ForwardOutput {
    Var<T> cls_probs;  ///< [B,n_classes], undefined when reg_only
    Var<T> reg_values; ///< [B,n_markers], undefined when cls_only
    Var<T> h_fused;    ///< [B,fused_dim]
    Var<T> h_cls;      ///< refined, before gating
    Var<T> h_reg;
    std::array<double, 2> fusion_weights{};
    double gate_mean_cls = 0;
    double gate_mean_reg = 0;
};

/// Plain-value predictions for evaluation and reporting.
struct Predictions {
    Tensor<float> cls_probs;
    Tensor<float> reg_values;
    std::array<double, 2> fusion_weights{};
    double gate_mean_cls = 0;
    double gate_mean_reg = 0;
};

/// Intermediate values of one gating step.
template <typename T>
struct GateTrace {
    Var<T> gate;  ///< sigmoid activations g
    Var<T> mixed; ///< m, the linear map of the concatenated task features
    Var<T> pre_norm;
    double mean = 0;
};

template <typename T>
class HybridNet {
public:
    explicit HybridNet(ModelConfig cfg, std::uint64_t seed = 0);

    const ModelConfig& config() const { return cfg_; }
    ParameterSet<T>& params() { return params_; }
    const ParameterSet<T>& params() const { return params_; }
    std::size_t parameter_count() const { return params_.count(); }

    ForwardOutput<T> forward(const Var<T>& x, Mode mode, Rng& dropout_rng);
    /// Eval-mode forward without graph recording.
    ForwardOutput<T> infer(const Tensor<T>& x);

    // sub-blocks, exposed for testing
    Var<T> eca_weight(const Var<T>& x);
    Var<T> cnn_branch(const Var<T>& x, Mode mode);
    Var<T> vit_branch(const Var<T>& x);
    Var<T> fuse(const Var<T>& f_cnn, const Var<T>& f_vit, std::array<double, 2>* weights = nullptr);
    Var<T> refine(const std::string& task, const Var<T>& h, Mode mode, Rng& rng);
    Var<T> gate(const std::string& task, const Var<T>& h_cls, const Var<T>& h_reg, GateTrace<T>* trace = nullptr);
    Var<T> head(const std::string& task, const Var<T>& h, Mode mode, Rng& rng);

private:
    Var<T> p(const std::string& path) const { return params_.at(path); }
    Var<T> lin(const std::string& path, const Var<T>& x) const;
    Var<T> ln(const std::string& path, const Var<T>& x) const;
    Var<T> conv_bn_gelu(const std::string& path, const Var<T>& x, std::size_t stride, std::size_t pad, Mode mode);
    Var<T> inception(const std::string& path, const Var<T>& x, Mode mode);
    Var<T> vit_block(const std::string& path, const Var<T>& x);
    Var<T> check(const std::string& path, Var<T> v) const;

    ModelConfig cfg_;
    ParameterSet<T> params_;
};

/// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& cfg);

/// Copies parameter values (and BatchNorm statistics) between precisions; paths must match.
template <typename Dst, typename Src>
void copy_parameters(ParameterSet<Dst>& dst, const ParameterSet<Src>& src);

/// Writes `manifest.json` and `weights.bin` (little-endian float32) into `dir`.
void save_checkpoint(const ParameterSet<float>& params, const ModelConfig& cfg, const std::filesystem::path& dir);
/// Loads a checkpoint into an existing parameter set; shapes and paths must match. Throws LoadError.
void load_checkpoint(ParameterSet<float>& params, const std::filesystem::path& dir);
/// Reads the model configuration stored in a checkpoint manifest.
ModelConfig checkpoint_config(const std::filesystem::path& dir);

extern template class ParameterSet<float>;
extern template class ParameterSet<double>;
extern template class HybridNet<float>;
extern template class HybridNet<double>;

} // namespace cellmtl
