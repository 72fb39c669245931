#include "cellmtl/data.hpp"
#include "cellmtl/hash.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <bit>
#include <charconv>
#include <fstream>
#include <sstream>

namespace cellmtl {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

static_assert(std::endian::native == std::endian::little, "container blobs are written in host order");

constexpr int kVersion = 1;

std::string format_float(float v)
{
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, end);
}

float parse_float(std::string_view s, std::size_t line)
{
    float v = 0;
    auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || end != s.data() + s.size())
        throw ManifestError("labels.csv line " + std::to_string(line) + ": bad number '" + std::string(s) + "'");
    return v;
}

std::vector<std::string_view> split_csv(std::string_view line)
{
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto pos = line.find(',', start);
        out.push_back(line.substr(start, pos - start));
        if (pos == std::string_view::npos)
            break;
        start = pos + 1;
    }
    return out;
}

} // namespace

void write_dataset(const Dataset& ds, const fs::path& dir)
{
    ds.validate();
    fs::create_directories(dir);
    {
        std::ofstream blob(dir / "images.bin", std::ios::binary | std::ios::trunc);
        for (const auto& r : ds.records)
            blob.write(reinterpret_cast<const char*>(r.image.data()), std::streamsize(r.image.numel() * sizeof(float)));
        if (!blob)
            throw LoadError("cannot write " + (dir / "images.bin").string());
    }
    {
        std::ofstream csv(dir / "labels.csv", std::ios::trunc);
        csv << "id,cls,m1,m2,m3,m4\n";
        for (const auto& r : ds.records) {
            if (r.id.find_first_of(",\n") != std::string::npos)
                throw InputError("record id '" + r.id + "' contains a separator");
            csv << r.id << ',' << int(r.cls);
            for (float m : r.markers)
                csv << ',' << format_float(m);
            csv << '\n';
        }
        if (!csv)
            throw LoadError("cannot write " + (dir / "labels.csv").string());
    }
    json m = {{"version", kVersion},
              {"dtype", "f32le"},
              {"image_shape", ds.image_shape},
              {"record_count", ds.records.size()},
              {"splits", {{"train", ds.splits.train}, {"val", ds.splits.val}, {"test", ds.splits.test}}},
              {"marker_names", ds.marker_names},
              {"images", "images.bin"},
              {"labels", "labels.csv"},
              {"images_sha256", sha256_file(dir / "images.bin")}};
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    out << m.dump(2) << '\n';
    if (!out)
        throw LoadError("cannot write manifest");
}

Dataset load_dataset(const fs::path& manifest_or_dir)
{
    const fs::path manifest = fs::is_directory(manifest_or_dir) ? manifest_or_dir / "manifest.json" : manifest_or_dir;
    const fs::path dir = manifest.parent_path();
    std::ifstream in(manifest);
    if (!in)
        throw ManifestError("cannot open manifest " + manifest.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw ManifestError("malformed manifest " + manifest.string() + ": " + e.what());
    }

    Dataset ds;
    if (!m.is_object())
        throw ManifestError("manifest must be a JSON object");
    if (m.empty() || m.value("record_count", std::size_t(1)) == 0) {
        if (m.contains("image_shape"))
            ds.image_shape = m.at("image_shape").get<Shape>();
        return ds;
    }

    std::size_t count = 0;
    try {
        if (m.at("version").get<int>() != kVersion)
            throw ManifestError("unsupported container version " + m.at("version").dump());
        if (m.at("dtype").get<std::string>() != "f32le")
            throw ManifestError("unsupported dtype " + m.at("dtype").dump());
        ds.image_shape = m.at("image_shape").get<Shape>();
        count = m.at("record_count").get<std::size_t>();
        const auto& sp = m.at("splits");
        ds.splits.train = sp.value("train", std::vector<std::size_t>{});
        ds.splits.val = sp.value("val", std::vector<std::size_t>{});
        ds.splits.test = sp.value("test", std::vector<std::size_t>{});
        if (m.contains("marker_names"))
            ds.marker_names = m.at("marker_names").get<std::array<std::string, kNumMarkers>>();
    } catch (const json::exception& e) {
        throw ManifestError(std::string("malformed manifest: ") + e.what());
    }
    if (ds.image_shape.size() != 3)
        throw ManifestError("image_shape must have three axes, got " + shape_str(ds.image_shape));

    const fs::path blob_path = dir / m.value("images", std::string("images.bin"));
    if (!fs::exists(blob_path))
        throw MissingBlobError("image blob " + blob_path.string() + " not found");
    const std::size_t per = shape_numel(ds.image_shape);
    const std::uintmax_t expected = std::uintmax_t(count) * per * sizeof(float);
    const std::uintmax_t actual = fs::file_size(blob_path);
    if (actual != expected)
        throw BlobSizeError("image blob " + blob_path.string() + ": expected " + std::to_string(expected) +
                            " bytes for " + std::to_string(count) + " records of " + shape_str(ds.image_shape) +
                            ", found " + std::to_string(actual));
    if (m.contains("images_sha256")) {
        const auto digest = sha256_file(blob_path);
        if (digest != m.at("images_sha256").get<std::string>())
            throw ChecksumError("image blob checksum mismatch: manifest " + m.at("images_sha256").get<std::string>() +
                                ", file " + digest);
    }

    ds.records.resize(count);
    std::ifstream blob(blob_path, std::ios::binary);
    for (auto& r : ds.records) {
        r.image = Tensor<float>(ds.image_shape);
        blob.read(reinterpret_cast<char*>(r.image.data()), std::streamsize(per * sizeof(float)));
    }

    const fs::path labels_path = dir / m.value("labels", std::string("labels.csv"));
    std::ifstream csv(labels_path);
    if (!csv)
        throw MissingBlobError("labels file " + labels_path.string() + " not found");
    std::string line;
    std::getline(csv, line);
    if (line.rfind("id,cls,m1,m2,m3,m4", 0) != 0)
        throw ManifestError("labels.csv: unexpected header '" + line + "'");
    std::size_t row = 0;
    while (std::getline(csv, line)) {
        if (line.empty())
            continue;
        if (row >= count)
            throw ManifestError("labels.csv has more rows than record_count " + std::to_string(count));
        const auto f = split_csv(line);
        if (f.size() != 2 + kNumMarkers)
            throw ManifestError("labels.csv line " + std::to_string(row + 2) + ": expected 6 fields");
        auto& r = ds.records[row];
        r.id = std::string(f[0]);
        int cls = -1;
        std::from_chars(f[1].data(), f[1].data() + f[1].size(), cls);
        if (cls < 0 || cls >= int(kNumClasses))
            throw ManifestError("labels.csv line " + std::to_string(row + 2) + ": class out of range");
        r.cls = std::uint8_t(cls);
        for (std::size_t k = 0; k < kNumMarkers; ++k)
            r.markers[k] = parse_float(f[2 + k], row + 2);
        ++row;
    }
    if (row != count)
        throw ManifestError("labels.csv has " + std::to_string(row) + " rows, manifest declares " +
                            std::to_string(count));

    if (ds.image_shape == Shape{3, 128, 128}) {
        spdlog::warn("load_dataset: RGB 128x128 records resampled to 4x28x28 grayscale (approximation)");
        for (auto& r : ds.records)
            r.image = rgb_to_dpc(r.image);
        ds.image_shape = {4, 28, 28};
    }
    try {
        ds.validate();
    } catch (const InputError& e) {
        throw ManifestError(e.what());
    }
    return ds;
}

Tensor<float> rgb_to_dpc(const Tensor<float>& rgb)
{
    if (rgb.rank() != 3 || rgb.dim(0) != 3)
        throw DimensionError("rgb_to_dpc: expected [3,H,W], got " + shape_str(rgb.shape()));
    const std::size_t H = rgb.dim(1), W = rgb.dim(2), O = 28;
    Tensor<float> out({4, O, O});
    const double sy = double(H) / O, sx = double(W) / O;
    for (std::size_t oy = 0; oy < O; ++oy)
        for (std::size_t ox = 0; ox < O; ++ox) {
            // box filter over the source footprint with fractional edge weights
            const double y0 = oy * sy, y1 = y0 + sy, x0 = ox * sx, x1 = x0 + sx;
            double acc = 0, wsum = 0;
            for (std::size_t y = std::size_t(y0); y < std::min<double>(H, std::ceil(y1)); ++y) {
                const double wy = std::min<double>(y + 1, y1) - std::max<double>(y, y0);
                for (std::size_t x = std::size_t(x0); x < std::min<double>(W, std::ceil(x1)); ++x) {
                    const double wx = std::min<double>(x + 1, x1) - std::max<double>(x, x0);
                    const double g = 0.299 * rgb.at({0, y, x}) + 0.587 * rgb.at({1, y, x}) + 0.114 * rgb.at({2, y, x});
                    acc += wy * wx * g;
                    wsum += wy * wx;
                }
            }
            const float v = float(acc / wsum);
            for (std::size_t c = 0; c < 4; ++c)
                out.at({c, oy, ox}) = v;
        }
    return out;
}

} // namespace cellmtl
