#include "cellmtl/errors.hpp"
#include "cellmtl/model.hpp"

#include <cmath>

namespace cellmtl {

namespace {

template <typename T>
Tensor<T> normal_tensor(Shape shape, Rng& rng, double std)
{
    Tensor<T> t(std::move(shape));
    for (T& v : t.span())
        v = T(rng.normal() * std);
    return t;
}

} // namespace

template <typename T>
HybridNet<T>::HybridNet(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg))
{
    cfg_.validate();
    Rng rng(derive_seed(seed, "model-init"));
    auto& P = params_;

    auto linear = [&](const std::string& path, std::size_t din, std::size_t dout, double std = -1) {
        P.add(path + ".weight", normal_tensor<T>({dout, din}, rng, std > 0 ? std : 1.0 / std::sqrt(double(din))));
        P.add(path + ".bias", Tensor<T>({dout}));
    };
    auto layer_norm = [&](const std::string& path, std::size_t d) {
        P.add(path + ".gain", Tensor<T>({d}, T(1)));
        P.add(path + ".shift", Tensor<T>({d}));
    };
    auto conv_bn = [&](const std::string& path, std::size_t cin, std::size_t cout, std::size_t k) {
        P.add(path + ".conv.weight", normal_tensor<T>({cout, cin, k, k}, rng, 1.0 / std::sqrt(double(cin * k * k))));
        P.add(path + ".bn.gamma", Tensor<T>({cout}, T(1)));
        P.add(path + ".bn.beta", Tensor<T>({cout}));
        P.add_bn(path + ".bn", cout);
    };

    P.add("eca.conv.weight", normal_tensor<T>({3}, rng, 1.0 / std::sqrt(3.0)));
    P.add("eca.conv.bias", Tensor<T>({1}));

    const std::size_t s = cfg_.cnn_stem_out;
    const std::size_t b1 = s * 3 / 8, b2 = s * 3 / 8, b3 = s - b1 - b2;
    conv_bn("cnn.stem", cfg_.in_channels, s, 3);
    for (std::size_t i = 0; i < cfg_.inception_modules; ++i) {
        const std::string path = "cnn.inception" + std::to_string(i);
        conv_bn(path + ".b1", s, b1, 1);
        conv_bn(path + ".b2", s, b2, 3);
        conv_bn(path + ".b3a", s, b3, 3);
        conv_bn(path + ".b3b", b3, b3, 3);
    }
    conv_bn("cnn.reduce", s, cfg_.cnn_token_dim, 3);

    const std::size_t d = cfg_.vit_dim;
    linear("vit.patch", cfg_.patch_dim(), d, 0.02);
    P.add("vit.cls", normal_tensor<T>({1, 1, d}, rng, 0.02));
    P.add("vit.pos", normal_tensor<T>({1, cfg_.vit_tokens(), d}, rng, 0.02));
    for (std::size_t i = 0; i < cfg_.vit_blocks; ++i) {
        const std::string path = "vit.block" + std::to_string(i);
        layer_norm(path + ".ln1", d);
        for (const char* name : {".q", ".v", ".proj"})
            linear(path + name, d, d);
        // no key bias: it shifts every score of a query row equally and cancels in the softmax
        P.add(path + ".k.weight", normal_tensor<T>({d, d}, rng, 1.0 / std::sqrt(double(d))));
        layer_norm(path + ".ln2", d);
        linear(path + ".fc1", d, d * cfg_.vit_mlp_ratio);
        linear(path + ".fc2", d * cfg_.vit_mlp_ratio, d);
    }

    const std::size_t f = cfg_.fused_dim;
    P.add("fuse.alpha", Tensor<T>({2}));
    linear("fuse.cnn", cfg_.cnn_token_dim, f);
    linear("fuse.vit", d, f);
    layer_norm("fuse.ln", f);

    for (const char* t : {"cls", "reg"}) {
        const std::string path = std::string("refine.") + t;
        linear(path + ".fc1", f, f);
        layer_norm(path + ".ln", f);
        linear(path + ".fc2", f, f);
    }
    for (const char* t : {"cls", "reg"}) {
        const std::string path = std::string("gate.") + t;
        linear(path + ".g", 2 * f, f);
        linear(path + ".m", 2 * f, f);
        layer_norm(path + ".ln", f);
    }
    for (const char* t : {"cls", "reg"}) {
        const std::string path = std::string("head.") + t;
        linear(path + ".fc1", f, f / 2);
        layer_norm(path + ".ln1", f / 2);
        linear(path + ".fc2", f / 2, f / 4);
        layer_norm(path + ".ln2", f / 4);
        linear(path + ".out", f / 4, std::string(t) == "cls" ? cfg_.n_classes : cfg_.n_markers);
    }
}

template <typename T>
Var<T> HybridNet<T>::check(const std::string& path, Var<T> v) const
{
    if (!v.value().all_finite())
        throw NumericalError("non-finite activation in " + path, path);
    return v;
}

template <typename T>
Var<T> HybridNet<T>::lin(const std::string& path, const Var<T>& x) const
{
    return ops::linear(x, p(path + ".weight"), p(path + ".bias"));
}

template <typename T>
Var<T> HybridNet<T>::ln(const std::string& path, const Var<T>& x) const
{
    return ops::layer_norm(x, p(path + ".gain"), p(path + ".shift"), T(cfg_.ln_eps));
}

template <typename T>
Var<T> HybridNet<T>::conv_bn_gelu(const std::string& path, const Var<T>& x, std::size_t stride, std::size_t pad,
                                  Mode mode)
{
    auto y = ops::conv2d(x, p(path + ".conv.weight"), Var<T>(), stride, pad);
    y = ops::batch_norm2d(y, p(path + ".bn.gamma"), p(path + ".bn.beta"), params_.bn_stats().at(path + ".bn"),
                          mode == Mode::train, T(cfg_.bn_momentum), T(cfg_.bn_eps));
    return ops::gelu(y);
}

template <typename T>
Var<T> HybridNet<T>::inception(const std::string& path, const Var<T>& x, Mode mode)
{
    auto a = conv_bn_gelu(path + ".b1", x, 1, 0, mode);
    auto b = conv_bn_gelu(path + ".b2", x, 1, 1, mode);
    auto c = conv_bn_gelu(path + ".b3b", conv_bn_gelu(path + ".b3a", x, 1, 1, mode), 1, 1, mode);
    return ops::add(x, ops::concat<T>({a, b, c}, 1));
}

template <typename T>
Var<T> HybridNet<T>::eca_weight(const Var<T>& x)
{
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels)
        throw DimensionError("eca: expected [B," + std::to_string(cfg_.in_channels) + ",H,W] input, got " +
                             shape_str(s) + " (axis 1 is the channel axis)");
    auto pooled = ops::mean(ops::mean(x, 3), 2);
    auto w = ops::sigmoid(ops::conv1d_same(pooled, p("eca.conv.weight"), p("eca.conv.bias")));
    return ops::mul(x, ops::reshape(w, {s[0], s[1], 1, 1}));
}

template <typename T>
Var<T> HybridNet<T>::cnn_branch(const Var<T>& x, Mode mode)
{
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_hw || s[3] != cfg_.image_hw)
        throw DimensionError("cnn: input " + shape_str(s) + " does not match config");
    auto h = check("cnn.stem", conv_bn_gelu("cnn.stem", x, 1, 1, mode));
    for (std::size_t i = 0; i < cfg_.inception_modules; ++i) {
        const std::string path = "cnn.inception" + std::to_string(i);
        h = check(path, inception(path, h, mode));
    }
    h = check("cnn.reduce", conv_bn_gelu("cnn.reduce", h, 2, 1, mode));
    h = ops::reshape(h, {s[0], cfg_.cnn_token_dim, cfg_.cnn_tokens});
    return ops::permute(h, {0, 2, 1});
}

template <typename T>
Var<T> HybridNet<T>::vit_block(const std::string& path, const Var<T>& x)
{
    const std::size_t B = x.shape()[0], N = x.shape()[1], D = cfg_.vit_dim, H = cfg_.vit_heads;
    auto heads = [&](const Var<T>& t) { return ops::permute(ops::reshape(t, {B, N, H, D / H}), {0, 2, 1, 3}); };
    auto h = ln(path + ".ln1", x);
    auto k = ops::linear(h, p(path + ".k.weight"), Var<T>());
    auto a = ops::attention(heads(lin(path + ".q", h)), heads(k), heads(lin(path + ".v", h)));
    a = ops::reshape(ops::permute(a, {0, 2, 1, 3}), {B, N, D});
    auto y = ops::add(x, lin(path + ".proj", a));
    auto m = lin(path + ".fc2", ops::gelu(lin(path + ".fc1", ln(path + ".ln2", y))));
    return ops::add(y, m);
}

template <typename T>
Var<T> HybridNet<T>::vit_branch(const Var<T>& x)
{
    const auto& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.in_channels || s[2] != cfg_.image_hw || s[3] != cfg_.image_hw)
        throw DimensionError("vit: input " + shape_str(s) + " does not match config");
    const std::size_t B = s[0], C = s[1], P = cfg_.vit_patch, G = cfg_.image_hw / P;
    auto patches = ops::reshape(x, {B, C, G, P, G, P});
    patches = ops::reshape(ops::permute(patches, {0, 2, 4, 1, 3, 5}), {B, G * G, C * P * P});
    auto tokens = lin("vit.patch", patches);
    auto cls = ops::broadcast_to(p("vit.cls"), {B, 1, cfg_.vit_dim});
    auto h = ops::add(ops::concat<T>({cls, tokens}, 1), p("vit.pos"));
    for (std::size_t i = 0; i < cfg_.vit_blocks; ++i) {
        const std::string path = "vit.block" + std::to_string(i);
        h = check(path, vit_block(path, h));
    }
    return h;
}

template <typename T>
Var<T> HybridNet<T>::fuse(const Var<T>& f_cnn, const Var<T>& f_vit, std::array<double, 2>* weights)
{
    Var<T> h_cnn, h_vit;
    if (f_cnn.defined())
        h_cnn = lin("fuse.cnn", ops::mean(f_cnn, 1));
    if (f_vit.defined()) {
        const std::size_t B = f_vit.shape()[0];
        h_vit = lin("fuse.vit", ops::reshape(ops::slice(f_vit, 1, 0, 1), {B, cfg_.vit_dim}));
    }
    if (!h_vit.defined()) {
        if (weights)
            *weights = {1.0, 0.0};
        return ln("fuse.ln", h_cnn);
    }
    if (!h_cnn.defined()) {
        if (weights)
            *weights = {0.0, 1.0};
        return ln("fuse.ln", h_vit);
    }
    auto w = ops::softmax(p("fuse.alpha"));
    if (weights)
        *weights = {double(w.value()[0]), double(w.value()[1])};
    auto mixed = ops::add(ops::mul(h_cnn, ops::slice(w, 0, 0, 1)), ops::mul(h_vit, ops::slice(w, 0, 1, 1)));
    return ln("fuse.ln", mixed);
}

template <typename T>
Var<T> HybridNet<T>::refine(const std::string& task, const Var<T>& h, Mode mode, Rng& rng)
{
    const std::string path = "refine." + task;
    auto r = ops::gelu(ln(path + ".ln", lin(path + ".fc1", h)));
    r = ops::dropout(r, T(cfg_.refine_dropout), mode == Mode::train, rng);
    return ops::add(h, lin(path + ".fc2", r));
}

template <typename T>
Var<T> HybridNet<T>::gate(const std::string& task, const Var<T>& h_cls, const Var<T>& h_reg, GateTrace<T>* trace)
{
    const std::string path = "gate." + task;
    auto c = ops::concat<T>({h_cls, h_reg}, 1);
    auto g = ops::sigmoid(lin(path + ".g", c));
    auto m = lin(path + ".m", c);
    const auto& own = task == "cls" ? h_cls : h_reg;
    auto mixed = ops::add(ops::mul(own, g), ops::mul(m, ops::affine(g, T(-1), T(1))));
    if (trace) {
        double s = 0;
        for (T v : g.value().span())
            s += double(v);
        *trace = {g, m, mixed, s / double(g.numel())};
    }
    return ln(path + ".ln", mixed);
}

template <typename T>
Var<T> HybridNet<T>::head(const std::string& task, const Var<T>& h, Mode mode, Rng& rng)
{
    const std::string path = "head." + task;
    const bool train = mode == Mode::train;
    const T pd = T(cfg_.head_dropout);
    auto z = ops::dropout(ops::gelu(ln(path + ".ln1", lin(path + ".fc1", h))), pd, train, rng);
    z = ops::dropout(ops::gelu(ln(path + ".ln2", lin(path + ".fc2", z))), pd, train, rng);
    auto out = lin(path + ".out", z);
    return task == "cls" ? ops::softmax(out) : out;
}

template <typename T>
ForwardOutput<T> HybridNet<T>::forward(const Var<T>& x, Mode mode, Rng& rng)
{
    ForwardOutput<T> out;
    auto xw = check("eca", eca_weight(x));
    Var<T> f_cnn = cfg_.vit_only ? Var<T>() : cnn_branch(xw, mode);
    Var<T> f_vit = cfg_.cnn_only ? Var<T>() : vit_branch(xw);
    out.h_fused = check("fuse", fuse(f_cnn, f_vit, &out.fusion_weights));

    const bool need_cls = !cfg_.reg_only || !cfg_.no_gating;
    const bool need_reg = !cfg_.cls_only || !cfg_.no_gating;
    if (need_cls)
        out.h_cls = check("refine.cls", refine("cls", out.h_fused, mode, rng));
    if (need_reg)
        out.h_reg = check("refine.reg", refine("reg", out.h_fused, mode, rng));

    if (!cfg_.reg_only) {
        GateTrace<T> trace;
        auto h = cfg_.no_gating ? out.h_cls : check("gate.cls", gate("cls", out.h_cls, out.h_reg, &trace));
        out.gate_mean_cls = trace.mean;
        out.cls_probs = check("head.cls", head("cls", h, mode, rng));
    }
    if (!cfg_.cls_only) {
        GateTrace<T> trace;
        auto h = cfg_.no_gating ? out.h_reg : check("gate.reg", gate("reg", out.h_cls, out.h_reg, &trace));
        out.gate_mean_reg = trace.mean;
        out.reg_values = check("head.reg", head("reg", h, mode, rng));
    }
    return out;
}

template <typename T>
ForwardOutput<T> HybridNet<T>::infer(const Tensor<T>& x)
{
    NoGradGuard guard;
    Rng unused(0);
    return forward(ops::constant(x), Mode::eval, unused);
}

template class HybridNet<float>;
template class HybridNet<double>;

} // namespace cellmtl
