#include "cellmtl/errors.hpp"
#include "cellmtl/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <set>

namespace cellmtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are written in host order");

constexpr const char* kFormat = "cellmtl-checkpoint";
constexpr int kVersion = 1;

json config_to_json(const ModelConfig& c)
{
    return {{"in_channels", c.in_channels},   {"image_hw", c.image_hw},
            {"cnn_stem_out", c.cnn_stem_out}, {"cnn_token_dim", c.cnn_token_dim},
            {"cnn_tokens", c.cnn_tokens},     {"inception_modules", c.inception_modules},
            {"vit_patch", c.vit_patch},       {"vit_dim", c.vit_dim},
            {"vit_blocks", c.vit_blocks},     {"vit_heads", c.vit_heads},
            {"vit_mlp_ratio", c.vit_mlp_ratio}, {"fused_dim", c.fused_dim},
            {"n_classes", c.n_classes},       {"n_markers", c.n_markers},
            {"head_dropout", c.head_dropout}, {"refine_dropout", c.refine_dropout},
            {"bn_momentum", c.bn_momentum},   {"bn_eps", c.bn_eps},
            {"ln_eps", c.ln_eps},             {"cnn_only", c.cnn_only},
            {"vit_only", c.vit_only},         {"no_gating", c.no_gating},
            {"cls_only", c.cls_only},         {"reg_only", c.reg_only}};
}

ModelConfig config_from_json(const json& j)
{
    ModelConfig c;
    auto get = [&](const char* k, auto& field) {
        if (j.contains(k))
            field = j.at(k).get<std::decay_t<decltype(field)>>();
    };
    get("in_channels", c.in_channels);
    get("image_hw", c.image_hw);
    get("cnn_stem_out", c.cnn_stem_out);
    get("cnn_token_dim", c.cnn_token_dim);
    get("cnn_tokens", c.cnn_tokens);
    get("inception_modules", c.inception_modules);
    get("vit_patch", c.vit_patch);
    get("vit_dim", c.vit_dim);
    get("vit_blocks", c.vit_blocks);
    get("vit_heads", c.vit_heads);
    get("vit_mlp_ratio", c.vit_mlp_ratio);
    get("fused_dim", c.fused_dim);
    get("n_classes", c.n_classes);
    get("n_markers", c.n_markers);
    get("head_dropout", c.head_dropout);
    get("refine_dropout", c.refine_dropout);
    get("bn_momentum", c.bn_momentum);
    get("bn_eps", c.bn_eps);
    get("ln_eps", c.ln_eps);
    get("cnn_only", c.cnn_only);
    get("vit_only", c.vit_only);
    get("no_gating", c.no_gating);
    get("cls_only", c.cls_only);
    get("reg_only", c.reg_only);
    return c;
}

json read_manifest(const fs::path& dir)
{
    std::ifstream in(dir / "manifest.json");
    if (!in)
        throw LoadError("checkpoint: cannot open " + (dir / "manifest.json").string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw LoadError(std::string("checkpoint: malformed manifest: ") + e.what());
    }
    if (m.value("format", "") != kFormat || m.value("version", 0) != kVersion)
        throw LoadError("checkpoint: unsupported format or version");
    if (m.value("dtype", "") != "f32le")
        throw LoadError("checkpoint: unsupported dtype " + m.value("dtype", std::string("?")));
    return m;
}

} // namespace

void save_checkpoint(const ParameterSet<float>& params, const ModelConfig& cfg, const fs::path& dir)
{
    fs::create_directories(dir);
    json tensors = json::array();
    std::ofstream blob(dir / "weights.bin", std::ios::binary | std::ios::trunc);
    if (!blob)
        throw LoadError("checkpoint: cannot write " + (dir / "weights.bin").string());
    std::size_t offset = 0;
    auto write = [&](const std::string& path, const std::string& kind, const Tensor<float>& t) {
        blob.write(reinterpret_cast<const char*>(t.data()), std::streamsize(t.numel() * sizeof(float)));
        tensors.push_back({{"path", path}, {"kind", kind}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel() * sizeof(float);
    };
    for (const auto& [path, v] : params.entries())
        write(path, "param", v.value());
    for (const auto& [path, st] : params.bn_stats()) {
        write(path + ".running_mean", "bn_mean", st.running_mean);
        write(path + ".running_var", "bn_var", st.running_var);
    }
    blob.close();
    if (!blob)
        throw LoadError("checkpoint: write failed");

    json m = {{"format", kFormat},  {"version", kVersion},  {"dtype", "f32le"}, {"blob", "weights.bin"},
              {"blob_bytes", offset}, {"config", config_to_json(cfg)}, {"tensors", tensors}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << m.dump(2) << '\n';
    if (!out)
        throw LoadError("checkpoint: cannot write manifest");
}

void load_checkpoint(ParameterSet<float>& params, const fs::path& dir)
{
    const json m = read_manifest(dir);
    std::ifstream blob(dir / m.at("blob").get<std::string>(), std::ios::binary);
    if (!blob)
        throw LoadError("checkpoint: cannot open blob");
    blob.seekg(0, std::ios::end);
    const auto size = std::size_t(blob.tellg());
    if (size != m.at("blob_bytes").get<std::size_t>())
        throw LoadError("checkpoint: blob size " + std::to_string(size) + " does not match manifest");

    // resolve every entry first so a mismatch reports all offending paths and leaves the model untouched
    struct Slot {
        Tensor<float>* target;
        std::size_t offset;
    };
    std::vector<Slot> slots;
    std::vector<std::string> problems;
    std::set<std::string> seen;
    for (const auto& t : m.at("tensors")) {
        const auto path = t.at("path").get<std::string>();
        const auto kind = t.at("kind").get<std::string>();
        const auto shape = t.at("shape").get<Shape>();
        const auto offset = t.at("offset").get<std::size_t>();
        Tensor<float>* target = nullptr;
        if (kind == "param") {
            if (!params.contains(path)) {
                problems.push_back(path + " (not in model)");
                continue;
            }
            target = &params.at(path).mutable_value();
            seen.insert(path);
        } else {
            const std::string suffix = kind == "bn_mean" ? ".running_mean" : ".running_var";
            const std::string bn_path = path.substr(0, path.size() - suffix.size());
            auto it = params.bn_stats().find(bn_path);
            if (it == params.bn_stats().end()) {
                problems.push_back(path + " (batch-norm buffer not in model)");
                continue;
            }
            target = kind == "bn_mean" ? &it->second.running_mean : &it->second.running_var;
        }
        if (target->shape() != shape) {
            problems.push_back(path + " (file " + shape_str(shape) + ", model " + shape_str(target->shape()) + ")");
            continue;
        }
        if (offset + target->numel() * sizeof(float) > size) {
            problems.push_back(path + " (extends past end of blob)");
            continue;
        }
        slots.push_back({target, offset});
    }
    for (const auto& [path, v] : params.entries())
        if (!seen.count(path) && !std::any_of(problems.begin(), problems.end(),
                                              [&](const std::string& p) { return p.rfind(path + " ", 0) == 0; }))
            problems.push_back(path + " (missing from checkpoint)");
    if (!problems.empty()) {
        std::string msg = "checkpoint: " + std::to_string(problems.size()) + " incompatible tensor(s):";
        for (const auto& p : problems)
            msg += "\n  " + p;
        throw LoadError(msg);
    }
    for (const auto& s : slots) {
        blob.seekg(std::streamoff(s.offset));
        blob.read(reinterpret_cast<char*>(s.target->data()), std::streamsize(s.target->numel() * sizeof(float)));
    }
}

ModelConfig checkpoint_config(const fs::path& dir)
{
    return config_from_json(read_manifest(dir).at("config"));
}

} // namespace cellmtl
