#include "cellmtl/pipeline.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace cellmtl {

namespace {

using Inputs = std::vector<std::string>;

struct Field {
    std::function<void(const Inputs&)> set;
    std::function<std::string()> get;
};

const std::string& single(const std::string& key, const Inputs& in)
{
    if (in.size() != 1)
        throw ConfigError("config key '" + key + "' expects a single value, got " + std::to_string(in.size()));
    return in[0];
}

double to_double(const std::string& key, const std::string& s)
{
    double v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size())
        throw ConfigError("config key '" + key + "': '" + s + "' is not a number");
    return v;
}

std::uint64_t to_uint(const std::string& key, const std::string& s)
{
    std::uint64_t v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size())
        throw ConfigError("config key '" + key + "': '" + s + "' is not a non-negative integer");
    return v;
}

std::string fmt(double v)
{
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    std::string s(buf, end);
    // keep floats recognizable as floats in the rendered file
    if (s.find_first_of(".eEn") == std::string::npos)
        s += ".0";
    return s;
}

template <typename Range>
std::string fmt_array(const Range& r)
{
    std::string s = "[";
    bool first = true;
    for (const auto& v : r) {
        if (!first)
            s += ", ";
        first = false;
        if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>)
            s += fmt(v);
        else
            s += std::to_string(v);
    }
    return s + "]";
}

Field real(const std::string& key, double& ref)
{
    return {[&ref, key](const Inputs& in) { ref = to_double(key, single(key, in)); }, [&ref] { return fmt(ref); }};
}

template <typename U>
Field integer(const std::string& key, U& ref)
{
    return {[&ref, key](const Inputs& in) { ref = U(to_uint(key, single(key, in))); },
            [&ref] { return std::to_string(ref); }};
}

Field boolean(const std::string& key, bool& ref)
{
    return {[&ref, key](const Inputs& in) {
                const auto& s = single(key, in);
                if (s != "true" && s != "false")
                    throw ConfigError("config key '" + key + "': expected true or false, got '" + s + "'");
                ref = s == "true";
            },
            [&ref] { return std::string(ref ? "true" : "false"); }};
}

Field text(const std::string& key, std::string& ref)
{
    return {[&ref, key](const Inputs& in) { ref = single(key, in); }, [&ref] { return '"' + ref + '"'; }};
}

std::map<std::string, std::map<std::string, Field>> fields(RunConfig& c)
{
    auto& t = c.train;
    auto& l = t.loss;
    auto& m = t.model;
    auto& s = c.synth;
    auto& e = c.endpoint;
    std::map<std::string, std::map<std::string, Field>> f;

    f["train"] = {{"epochs", integer("train.epochs", t.epochs)},
                  {"batch_size", integer("train.batch_size", t.batch_size)},
                  {"lr_init", real("train.lr_init", t.lr_init)},
                  {"lr_final", real("train.lr_final", t.lr_final)},
                  {"weight_decay", real("train.weight_decay", t.weight_decay)},
                  {"beta1", real("train.beta1", t.beta1)},
                  {"beta2", real("train.beta2", t.beta2)},
                  {"adam_eps", real("train.adam_eps", t.adam_eps)},
                  {"grad_clip", real("train.grad_clip", t.grad_clip)},
                  {"seed", integer("train.seed", t.seed)},
                  {"augment", boolean("train.augment", t.augment)},
                  {"eval_train_each_epoch", boolean("train.eval_train_each_epoch", t.eval_train_each_epoch)},
                  {"checkpoint_every", integer("train.checkpoint_every", t.checkpoint_every)},
                  {"variant", text("train.variant", t.variant)},
                  {"alpha_from_train", boolean("train.alpha_from_train", t.alpha_from_train)}};

    f["loss"] = {{"lambda_cls", real("loss.lambda_cls", l.lambda_cls)},
                 {"lambda_reg", real("loss.lambda_reg", l.lambda_reg)},
                 {"lambda_aux", real("loss.lambda_aux", l.lambda_aux)},
                 {"gamma", real("loss.gamma", l.gamma)},
                 {"beta", real("loss.beta", l.beta)},
                 {"pearson_eps", real("loss.pearson_eps", l.pearson_eps)},
                 {"alpha",
                  {[&l](const Inputs& in) {
                       if (in.size() != kNumClasses)
                           throw ConfigError("config key 'loss.alpha' expects 3 values");
                       l.alpha.clear();
                       for (const auto& v : in)
                           l.alpha.push_back(to_double("loss.alpha", v));
                   },
                   [&l] { return fmt_array(l.alpha); }}}};

    f["model"] = {{"cnn_stem_out", integer("model.cnn_stem_out", m.cnn_stem_out)},
                  {"cnn_token_dim", integer("model.cnn_token_dim", m.cnn_token_dim)},
                  {"inception_modules", integer("model.inception_modules", m.inception_modules)},
                  {"vit_dim", integer("model.vit_dim", m.vit_dim)},
                  {"vit_blocks", integer("model.vit_blocks", m.vit_blocks)},
                  {"vit_heads", integer("model.vit_heads", m.vit_heads)},
                  {"vit_mlp_ratio", integer("model.vit_mlp_ratio", m.vit_mlp_ratio)},
                  {"fused_dim", integer("model.fused_dim", m.fused_dim)},
                  {"head_dropout", real("model.head_dropout", m.head_dropout)},
                  {"refine_dropout", real("model.refine_dropout", m.refine_dropout)},
                  {"bn_momentum", real("model.bn_momentum", m.bn_momentum)}};

    f["synth"] = {{"n_per_class",
                   {[&s](const Inputs& in) {
                        if (in.size() != kNumClasses)
                            throw ConfigError("config key 'synth.n_per_class' expects 3 values");
                        for (std::size_t i = 0; i < kNumClasses; ++i)
                            s.n_per_class[i] = to_uint("synth.n_per_class", in[i]);
                    },
                    [&s] { return fmt_array(s.n_per_class); }}},
                  {"kappa", real("synth.kappa", s.kappa)},
                  {"morph_confusion", real("synth.morph_confusion", s.morph_confusion)},
                  {"noise_sigma", real("synth.noise_sigma", s.noise_sigma)},
                  {"texture_gain", real("synth.texture_gain", s.texture_gain)},
                  {"val_fraction", real("synth.val_fraction", s.val_fraction)},
                  {"test_fraction", real("synth.test_fraction", s.test_fraction)},
                  {"seed", integer("synth.seed", s.seed)}};

    f["summarizer"] = {{"url", text("summarizer.url", e.url)},
                       {"token_env", text("summarizer.token_env", e.token_env)},
                       {"timeout_s", real("summarizer.timeout_s", e.timeout_s)}};
    return f;
}

} // namespace

RunConfig parse_config(const std::string& body)
{
    RunConfig cfg;
    auto table = fields(cfg);
    std::istringstream in(body);
    std::vector<CLI::ConfigItem> items;
    try {
        items = CLI::ConfigTOML().from_config(in);
    } catch (const CLI::Error& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    for (const auto& it : items) {
        if (it.name == "++" || it.name == "--")
            continue; // section open/close markers
        if (it.parents.size() != 1)
            throw ConfigError("config key '" + it.fullname() + "' is not inside a known section");
        const auto sec = table.find(it.parents[0]);
        if (sec == table.end())
            throw ConfigError("unknown config section [" + it.parents[0] + "]");
        const auto field = sec->second.find(it.name);
        if (field == sec->second.end())
            throw ConfigError("unknown config key '" + it.parents[0] + "." + it.name + "'");
        field->second.set(it.inputs);
    }
    cfg.train.validate();
    cfg.synth.validate();
    return cfg;
}

RunConfig load_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open config file " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

std::string render_config(const RunConfig& cfg)
{
    RunConfig copy = cfg;
    std::ostringstream out;
    bool first = true;
    for (const auto& [section, keys] : fields(copy)) {
        out << (first ? "" : "\n") << '[' << section << "]\n";
        first = false;
        for (const auto& [key, field] : keys)
            out << key << " = " << field.get() << '\n';
    }
    return out.str();
}

void TrainConfig::validate() const
{
    if (epochs < 1)
        throw ConfigError("train.epochs must be at least 1");
    if (batch_size < 2)
        throw ConfigError("train.batch_size must be at least 2 (the correlation term needs two rows)");
    if (!(lr_init > 0) || !(lr_final >= 0))
        throw ConfigError("train learning rates must be positive");
    if (weight_decay < 0 || grad_clip < 0)
        throw ConfigError("train.weight_decay and train.grad_clip must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
        throw ConfigError("optimizer moments must lie in [0,1) and adam_eps must be positive");
    const auto& names = variant_names();
    if (std::find(names.begin(), names.end(), variant) == names.end())
        throw ConfigError("unknown variant '" + variant + "'");
    loss.validate();
    model.validate();
}

const std::vector<std::string>& variant_names()
{
    static const std::vector<std::string> names{"full", "cnn_only", "vit_only", "no_gating", "cls_only", "reg_only"};
    return names;
}

TrainConfig apply_variant(TrainConfig cfg, const std::string& variant)
{
    const auto& names = variant_names();
    if (std::find(names.begin(), names.end(), variant) == names.end())
        throw ConfigError("unknown variant '" + variant + "'");
    cfg.variant = variant;
    auto& m = cfg.model;
    m.cnn_only = variant == "cnn_only";
    m.vit_only = variant == "vit_only";
    m.no_gating = variant == "no_gating";
    m.cls_only = variant == "cls_only";
    m.reg_only = variant == "reg_only";
    if (m.cls_only)
        cfg.loss.lambda_reg = 0;
    if (m.reg_only)
        cfg.loss.lambda_cls = 0;
    return cfg;
}

} // namespace cellmtl
