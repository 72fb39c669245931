#include "cellmtl/errors.hpp"
#include "cellmtl/model.hpp"

namespace cellmtl {

void ModelConfig::validate() const
{
    auto fail = [](const std::string& m) { throw ConfigError("model: " + m); };
    if (in_channels == 0 || image_hw == 0 || cnn_stem_out == 0 || cnn_token_dim == 0 || vit_dim == 0 ||
        fused_dim == 0 || n_classes < 2 || n_markers == 0)
        fail("all widths must be positive and n_classes >= 2");
    if (image_hw % 2 != 0 || cnn_tokens != (image_hw / 2) * (image_hw / 2))
        fail("cnn_tokens must equal (image_hw/2)^2 = " + std::to_string((image_hw / 2) * (image_hw / 2)));
    if (vit_patch == 0 || image_hw % vit_patch != 0)
        fail("image_hw must be divisible by vit_patch");
    if (vit_heads == 0 || vit_dim % vit_heads != 0)
        fail("vit_dim must be divisible by vit_heads");
    if (head_dropout < 0 || head_dropout >= 1 || refine_dropout < 0 || refine_dropout >= 1)
        fail("dropout rates must lie in [0,1)");
    if (cnn_only && vit_only)
        fail("cnn_only and vit_only are mutually exclusive");
    if (cls_only && reg_only)
        fail("cls_only and reg_only are mutually exclusive");
}

template <typename T>
Var<T> ParameterSet<T>::add(const std::string& path, Tensor<T> value)
{
    if (index_.count(path))
        throw ConfigError("duplicate parameter path " + path);
    index_[path] = params_.size();
    params_.emplace_back(path, ops::parameter(std::move(value), path));
    return params_.back().second;
}

template <typename T>
ops::BatchNormStats<T>& ParameterSet<T>::add_bn(const std::string& path, std::size_t channels)
{
    auto [it, inserted] = bn_.emplace(path, ops::BatchNormStats<T>{Tensor<T>({channels}), Tensor<T>({channels}, T(1))});
    if (!inserted)
        throw ConfigError("duplicate batch-norm path " + path);
    return it->second;
}

template <typename T>
const Var<T>& ParameterSet<T>::at(const std::string& path) const
{
    auto it = index_.find(path);
    if (it == index_.end())
        throw ConfigError("unknown parameter path " + path);
    return params_[it->second].second;
}

template <typename T>
Var<T>& ParameterSet<T>::at(const std::string& path)
{
    auto it = index_.find(path);
    if (it == index_.end())
        throw ConfigError("unknown parameter path " + path);
    return params_[it->second].second;
}

template <typename T>
std::size_t ParameterSet<T>::count() const
{
    std::size_t n = 0;
    for (const auto& [_, v] : params_)
        n += v.numel();
    return n;
}

template <typename T>
void ParameterSet<T>::zero_grad()
{
    for (auto& [_, v] : params_)
        v.zero_grad();
}

std::size_t expected_parameter_count(const ModelConfig& c)
{
    auto linear = [](std::size_t din, std::size_t dout) { return din * dout + dout; };
    auto conv_bn = [](std::size_t cin, std::size_t cout, std::size_t k) { return cin * cout * k * k + 2 * cout; };
    const std::size_t s = c.cnn_stem_out;
    const std::size_t b1 = s * 3 / 8, b2 = s * 3 / 8, b3 = s - b1 - b2;

    std::size_t n = 3 + 1; // eca
    n += conv_bn(c.in_channels, s, 3);
    n += c.inception_modules * (conv_bn(s, b1, 1) + conv_bn(s, b2, 3) + conv_bn(s, b3, 3) + conv_bn(b3, b3, 3));
    n += conv_bn(s, c.cnn_token_dim, 3);

    const std::size_t d = c.vit_dim, hid = d * c.vit_mlp_ratio;
    n += linear(c.patch_dim(), d) + d + c.vit_tokens() * d;
    n += c.vit_blocks * (4 * d + 4 * linear(d, d) - d + linear(d, hid) + linear(hid, d));

    const std::size_t f = c.fused_dim;
    n += 2 + linear(c.cnn_token_dim, f) + linear(d, f) + 2 * f;
    n += 2 * (2 * linear(f, f) + 2 * f);
    n += 2 * (2 * linear(2 * f, f) + 2 * f);
    const std::size_t head_body = linear(f, f / 2) + f + linear(f / 2, f / 4) + f / 2;
    n += head_body + linear(f / 4, c.n_classes);
    n += head_body + linear(f / 4, c.n_markers);
    return n;
}

template <typename Dst, typename Src>
void copy_parameters(ParameterSet<Dst>& dst, const ParameterSet<Src>& src)
{
    if (dst.entries().size() != src.entries().size())
        throw DimensionError("copy_parameters: parameter sets differ in size");
    for (const auto& [path, v] : src.entries()) {
        Var<Dst>& d = dst.at(path);
        if (d.shape() != v.shape())
            throw DimensionError("copy_parameters: shape mismatch at " + path);
        d.mutable_value() = v.value().template cast<Dst>();
    }
    for (const auto& [path, st] : src.bn_stats()) {
        auto it = dst.bn_stats().find(path);
        if (it == dst.bn_stats().end())
            throw DimensionError("copy_parameters: missing batch-norm stats " + path);
        it->second.running_mean = st.running_mean.template cast<Dst>();
        it->second.running_var = st.running_var.template cast<Dst>();
    }
}

template class ParameterSet<float>;
template class ParameterSet<double>;
template void copy_parameters(ParameterSet<float>&, const ParameterSet<float>&);
template void copy_parameters(ParameterSet<float>&, const ParameterSet<double>&);
template void copy_parameters(ParameterSet<double>&, const ParameterSet<float>&);
template void copy_parameters(ParameterSet<double>&, const ParameterSet<double>&);

} // namespace cellmtl
