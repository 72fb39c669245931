#include "cellmtl/data.hpp"
#include "cellmtl/hash.hpp"
#include "test_util.hpp"

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <json.hpp>

using namespace cellmtl;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag)
        : path(fs::temp_directory_path() / ("cellmtl_" + tag + "_" + std::to_string(::getpid())))
    {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

CellRecord flat_record(float marker, std::string id)
{
    CellRecord r;
    r.image = Tensor<float>({4, 28, 28}, 1.0f);
    r.markers = {marker, marker, marker, marker};
    r.id = std::move(id);
    return r;
}

SynthConfig small_synth(std::uint64_t seed, std::size_t per_class = 10)
{
    SynthConfig c;
    c.n_per_class = {per_class, per_class, per_class};
    c.seed = seed;
    return c;
}

bool same_bits(const Tensor<float>& a, const Tensor<float>& b)
{
    return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

bool same_dataset(const Dataset& a, const Dataset& b)
{
    if (a.size() != b.size() || a.image_shape != b.image_shape || a.splits.train != b.splits.train ||
        a.splits.val != b.splits.val || a.splits.test != b.splits.test || a.marker_names != b.marker_names)
        return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const auto &x = a.records[i], &y = b.records[i];
        if (x.id != y.id || x.cls != y.cls || std::memcmp(x.markers.data(), y.markers.data(), sizeof x.markers) != 0 ||
            !same_bits(x.image, y.image))
            return false;
    }
    return true;
}

double corr(const std::vector<double>& a, const std::vector<double>& b)
{
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= double(a.size());
    mb /= double(b.size());
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        sab += (a[i] - ma) * (b[i] - mb);
        saa += (a[i] - ma) * (a[i] - ma);
        sbb += (b[i] - mb) * (b[i] - mb);
    }
    return sab / std::sqrt(saa * sbb);
}

double image_mean(const Tensor<float>& t)
{
    double s = 0;
    for (float v : t.span())
        s += v;
    return s / double(t.numel());
}

} // namespace

TEST_CASE("zscore: population statistics on a three-value marker")
{
    std::vector<CellRecord> recs{flat_record(1, "a"), flat_record(2, "b"), flat_record(3, "c")};
    recs[1].image.fill(3.0f);
    const std::vector<std::size_t> all{0, 1, 2};
    const auto stats = zscore_fit(recs, all);
    CHECK(stats.marker_mean[0] == doctest::Approx(2.0));
    CHECK(stats.marker_std[0] == doctest::Approx(std::sqrt(2.0 / 3.0)));
    zscore_apply(recs, all, stats);
    CHECK(recs[0].markers[0] == doctest::Approx(-1.2247).epsilon(1e-4));
    CHECK(recs[1].markers[0] == doctest::Approx(0.0));
    CHECK(recs[2].markers[0] == doctest::Approx(1.2247).epsilon(1e-4));
}

TEST_CASE("zscore: train split becomes standard and a second fit is the identity")
{
    auto syn = synthesize(small_synth(3, 20));
    auto& ds = syn.dataset;
    zscore_dataset(ds);
    const auto again = zscore_fit(ds.records, ds.splits.train);
    for (std::size_t m = 0; m < kNumMarkers; ++m) {
        CHECK(std::abs(again.marker_mean[m]) < 1e-6);
        CHECK(std::abs(again.marker_std[m] - 1) < 1e-6);
    }
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(std::abs(again.channel_mean[c]) < 1e-6);
        CHECK(std::abs(again.channel_std[c] - 1) < 1e-6);
    }
    const auto before = ds.records;
    zscore_apply(ds.records, ds.splits.train, again);
    for (std::size_t i : ds.splits.train)
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            CHECK(std::abs(ds.records[i].markers[m] - before[i].markers[m]) < 1e-6);
}

TEST_CASE("zscore: held-out split uses train statistics and is not re-centred")
{
    testing::LogCapture log; // flat images trigger the channel-floor warning
    std::vector<CellRecord> recs{flat_record(0, "a"), flat_record(2, "b"), flat_record(10, "t1"), flat_record(12, "t2")};
    const auto stats = zscore_fit(recs, {0, 1});
    zscore_apply(recs, {0, 1}, stats);
    zscore_apply(recs, {2, 3}, stats);
    CHECK(recs[2].markers[0] == doctest::Approx(9.0));
    CHECK(recs[3].markers[0] == doctest::Approx(11.0));
}

TEST_CASE("zscore: constant marker floors the std and warns")
{
    testing::LogCapture log;
    std::vector<CellRecord> recs{flat_record(4, "a"), flat_record(4, "b")};
    const auto stats = zscore_fit(recs, {0, 1});
    CHECK(stats.marker_std[0] == kStdFloor);
    CHECK(log.contains("constant on the training split"));
    zscore_apply(recs, {0, 1}, stats);
    CHECK(recs[0].markers[0] == 0.0f);
    CHECK_THROWS_AS(zscore_fit(recs, {}), InputError);
}

TEST_CASE("augment: identity draw leaves the image bitwise unchanged")
{
    auto syn = synthesize(small_synth(1, 2));
    const auto& r = syn.dataset.records[0];
    const auto out = augment(r, AugmentDraw{});
    CHECK(same_bits(out.image, r.image));
}

TEST_CASE("augment: flip mirrors columns, swaps left/right channels and is an involution")
{
    auto syn = synthesize(small_synth(1, 2));
    const auto& r = syn.dataset.records[1];
    AugmentDraw flip;
    flip.flip = true;
    const auto once = augment(r, flip);
    for (std::size_t y = 0; y < 28; ++y)
        for (std::size_t x = 0; x < 28; ++x) {
            CHECK(once.image.at({0, y, x}) == r.image.at({1, y, 27 - x}));
            CHECK(once.image.at({1, y, x}) == r.image.at({0, y, 27 - x}));
            CHECK(once.image.at({2, y, x}) == r.image.at({2, y, 27 - x}));
        }
    CHECK(same_bits(augment(once, flip).image, r.image));

    double s0 = 0, s1 = 0;
    for (float v : r.image.span())
        s0 += v;
    for (float v : once.image.span())
        s1 += v;
    CHECK(s0 == s1);
}

TEST_CASE("augment: random affine keeps mean intensity within 2% and never touches labels")
{
    auto syn = synthesize(small_synth(9, 4));
    Rng rng(17);
    for (const auto& r : syn.dataset.records) {
        for (int k = 0; k < 5; ++k) {
            const auto d = draw_augment(rng);
            CHECK(std::abs(d.angle_deg) <= 10);
            CHECK(std::abs(d.tx) <= 2);
            CHECK(std::abs(d.ty) <= 2);
            const auto out = augment(r, d);
            CHECK(out.cls == r.cls);
            CHECK(out.markers == r.markers);
            CHECK(out.id == r.id);
            CHECK(out.image.all_finite());
            const double m0 = image_mean(r.image), m1 = image_mean(out.image);
            CHECK(std::abs(m1 - m0) / std::abs(m0) < 0.02);
        }
    }
}

TEST_CASE("augment: flip probability is about one half")
{
    Rng rng(4);
    int flips = 0;
    for (int i = 0; i < 4000; ++i)
        flips += draw_augment(rng).flip;
    CHECK(std::abs(flips / 4000.0 - 0.5) < 0.03);
}

TEST_CASE("container: round-trip is bit-exact")
{
    TempDir tmp("roundtrip");
    auto syn = synthesize(small_synth(5, 7));
    syn.dataset.marker_names = {"m1", "m2", "m3", "m4"};
    syn.dataset.records[0].markers[2] = 1.0f / 3.0f;
    syn.dataset.records[1].markers[0] = -1e-30f;
    write_dataset(syn.dataset, tmp.path);
    CHECK(fs::exists(tmp.path / "manifest.json"));
    const auto back = load_dataset(tmp.path / "manifest.json");
    CHECK(same_dataset(back, syn.dataset));
    CHECK(same_dataset(load_dataset(tmp.path), syn.dataset));

    std::ifstream labels(tmp.path / "labels.csv");
    std::string header;
    std::getline(labels, header);
    CHECK(header == "id,cls,m1,m2,m3,m4");
}

TEST_CASE("container: empty manifest yields an empty dataset")
{
    TempDir tmp("empty");
    std::ofstream(tmp.path / "manifest.json") << "{}";
    const auto ds = load_dataset(tmp.path);
    CHECK(ds.size() == 0);
    CHECK(ds.splits.train.empty());
}

TEST_CASE("container: load failures are distinct")
{
    TempDir tmp("fail");
    auto syn = synthesize(small_synth(2, 2));
    write_dataset(syn.dataset, tmp.path);

    SUBCASE("wrong byte length names expected and actual bytes")
    {
        fs::resize_file(tmp.path / "images.bin", 6 * 4 * 28 * 28 * 4 - 8);
        try {
            load_dataset(tmp.path);
            FAIL("expected BlobSizeError");
        } catch (const BlobSizeError& e) {
            const std::string msg = e.what();
            CHECK(msg.find("expected 75264 bytes") != std::string::npos);
            CHECK(msg.find("found 75256") != std::string::npos);
        }
    }
    SUBCASE("checksum mismatch")
    {
        std::fstream f(tmp.path / "images.bin", std::ios::in | std::ios::out | std::ios::binary);
        f.seekp(100);
        f.put('\x7f');
        f.close();
        CHECK_THROWS_AS(load_dataset(tmp.path), ChecksumError);
    }
    SUBCASE("missing blob")
    {
        fs::remove(tmp.path / "images.bin");
        CHECK_THROWS_AS(load_dataset(tmp.path), MissingBlobError);
    }
    SUBCASE("malformed manifest")
    {
        std::ofstream(tmp.path / "manifest.json") << "{\"version\": 1,";
        CHECK_THROWS_AS(load_dataset(tmp.path), ManifestError);
    }
    SUBCASE("unsupported dtype")
    {
        auto m = nlohmann::json::parse(std::ifstream(tmp.path / "manifest.json"));
        m["dtype"] = "f64le";
        std::ofstream(tmp.path / "manifest.json") << m.dump();
        CHECK_THROWS_AS(load_dataset(tmp.path), ManifestError);
    }
    SUBCASE("all failures are load errors")
    {
        fs::remove(tmp.path / "labels.csv");
        CHECK_THROWS_AS(load_dataset(tmp.path), LoadError);
    }
}

TEST_CASE("container: RGB 128x128 records are converted to 4x28x28 with a warning")
{
    TempDir tmp("rgb");
    Dataset ds;
    ds.image_shape = {3, 128, 128};
    CellRecord r;
    r.image = Tensor<float>({3, 128, 128});
    for (std::size_t y = 0; y < 128; ++y)
        for (std::size_t x = 0; x < 128; ++x) {
            r.image.at({0, y, x}) = 1.0f;
            r.image.at({1, y, x}) = 0.5f;
            r.image.at({2, y, x}) = 0.0f;
        }
    r.id = "bccd-1";
    ds.records.push_back(r);
    ds.splits.test = {0};
    write_dataset(ds, tmp.path);
    testing::LogCapture log;
    const auto back = load_dataset(tmp.path);
    CHECK(log.contains("approximation"));
    CHECK(back.image_shape == Shape{4, 28, 28});
    const float lum = 0.299f + 0.587f * 0.5f;
    for (float v : back.records[0].image.span())
        CHECK(v == doctest::Approx(lum).epsilon(1e-6));
}

TEST_CASE("synth: same seed is bit-identical, another seed differs")
{
    const auto a = synthesize(small_synth(11));
    const auto b = synthesize(small_synth(11));
    const auto c = synthesize(small_synth(12));
    CHECK(same_dataset(a.dataset, b.dataset));
    CHECK_FALSE(same_dataset(a.dataset, c.dataset));
    CHECK(std::memcmp(&a.oracle, &b.oracle, sizeof a.oracle) == 0);
    CHECK(std::memcmp(&a.oracle_test, &b.oracle_test, sizeof a.oracle_test) == 0);
}

TEST_CASE("synth: class counts, ids and stratified splits")
{
    SynthConfig cfg = small_synth(4);
    cfg.n_per_class = {13, 40, 7};
    cfg.val_fraction = 0.1;
    const auto res = synthesize(cfg);
    const auto& ds = res.dataset;
    std::array<std::size_t, 3> counts{};
    for (const auto& r : ds.records)
        ++counts[r.cls];
    CHECK(counts == cfg.n_per_class);
    CHECK(ds.records.front().id == "syn-000000");
    CHECK(ds.splits.train.size() + ds.splits.val.size() + ds.splits.test.size() == 60);
    // per class: round(0.2 n) test, round(0.1 n) val
    CHECK(ds.splits.test.size() == 3 + 8 + 1);
    CHECK(ds.splits.val.size() == 1 + 4 + 1);
    CHECK_NOTHROW(ds.validate());
}

TEST_CASE("synth: default marker means for CD45 and CD16")
{
    const SynthConfig cfg;
    CHECK(cfg.marker_mean[0][0] == -0.18);
    CHECK(cfg.marker_mean[0][1] == -0.72);
    CHECK(cfg.marker_mean[1][0] == 0.32);
    CHECK(cfg.marker_mean[1][1] == 0.65);
    CHECK(cfg.marker_mean[2][0] == 0.24);
    CHECK(cfg.marker_mean[2][1] == -0.13);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t m = 2; m < 4; ++m) {
            CHECK(std::abs(cfg.marker_mean[c][m]) == 0.5);
            CHECK(cfg.marker_std[c][m] == 0.9);
        }
    CHECK(kMarkerNames[0] == "CD45");
    CHECK(kMarkerNames[1] == "CD16");
}

TEST_CASE("synth: markers follow the class-conditional Gaussians")
{
    SynthConfig cfg = small_synth(21, 1500);
    const auto res = synthesize(cfg);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t m = 0; m < 4; ++m) {
            double s = 0, s2 = 0;
            for (const auto& r : res.dataset.records)
                if (r.cls == c) {
                    s += r.markers[m];
                    s2 += r.markers[m] * r.markers[m];
                }
            const double mean = s / 1500, sd = std::sqrt(s2 / 1500 - mean * mean);
            // 4 standard errors
            CHECK(std::abs(mean - cfg.marker_mean[c][m]) < 4 * cfg.marker_std[c][m] / std::sqrt(1500.0));
            CHECK(std::abs(sd - cfg.marker_std[c][m]) < 0.06);
        }
}

TEST_CASE("synth: kappa controls the marker/texture coupling")
{
    SynthConfig cfg = small_synth(8, 300);
    cfg.kappa = 1;
    const auto full = synthesize(cfg);
    for (std::size_t i = 0; i < full.latents.size(); ++i)
        for (std::size_t m = 0; m < 4; ++m)
            CHECK(float(full.latents[i].drive[m]) == full.dataset.records[i].markers[m]);
    CHECK(full.oracle.mean_r_ceiling == doctest::Approx(1.0).epsilon(1e-6));

    cfg.kappa = 0;
    const auto none = synthesize(cfg);
    // within class the drive carries no information about the marker
    for (std::size_t m = 0; m < 4; ++m) {
        std::vector<double> d, v;
        for (std::size_t i = 0; i < none.latents.size(); ++i)
            if (none.latents[i].cls == 0) {
                d.push_back(none.latents[i].drive[m]);
                v.push_back(none.dataset.records[i].markers[m]);
            }
        CHECK(std::abs(corr(d, v)) < 4 / std::sqrt(double(d.size())));
    }
    // the oracle can do no better than knowing the true class mean
    for (std::size_t m = 0; m < 4; ++m) {
        std::vector<double> class_mean, truth;
        for (const auto& r : none.dataset.records) {
            class_mean.push_back(cfg.marker_mean[r.cls][m]);
            truth.push_back(r.markers[m]);
        }
        const double bound = corr(class_mean, truth);
        CHECK(none.oracle.marker_r_ceiling[m] <= bound + 0.02);
        CHECK(none.oracle.marker_r_ceiling[m] > 0.8 * bound);
    }
}

TEST_CASE("synth: oracle posterior is a distribution favouring the rendered morphology")
{
    const SynthConfig cfg;
    SynthLatent z;
    z.morph = 1;
    z.drive = {0.32, 0.65, -0.5, -0.5};
    const auto p = oracle_class_posterior(cfg, z);
    CHECK(p[0] + p[1] + p[2] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(p[1] > 0.95);
    const auto mean = oracle_marker_mean(cfg, z);
    for (std::size_t m = 0; m < 4; ++m)
        CHECK(mean[m] == doctest::Approx(z.drive[m]).epsilon(1e-12));

    auto res = synthesize(small_synth(2, 200));
    CHECK(res.oracle.accuracy_ceiling > 0.95);
    CHECK(res.oracle.accuracy_ceiling <= 1.0);
    CHECK(res.oracle_test.n == res.dataset.splits.test.size());
}

TEST_CASE("synth: morphologies differ in cell size")
{
    // the DPC channel difference is zero outside the cell, so its support measures the cell area
    SynthConfig cfg = small_synth(6, 40);
    cfg.noise_sigma = 0;
    cfg.morph_confusion = 0;
    const auto res = synthesize(cfg);
    std::array<double, 3> area{};
    for (const auto& r : res.dataset.records) {
        std::size_t n = 0;
        for (std::size_t y = 0; y < 28; ++y)
            for (std::size_t x = 0; x < 28; ++x)
                n += std::abs(r.image.at({0, y, x}) - r.image.at({1, y, x})) > 0.01f;
        area[r.cls] += double(n) / 40;
    }
    CHECK(area[0] < area[1]);
    CHECK(area[0] < area[2]);
}

TEST_CASE("synth: invalid configuration is rejected")
{
    SynthConfig cfg;
    cfg.kappa = 1.5;
    CHECK_THROWS_AS(synthesize(cfg), ConfigError);
    cfg = SynthConfig{};
    cfg.test_fraction = 0.7;
    cfg.val_fraction = 0.4;
    CHECK_THROWS_AS(synthesize(cfg), ConfigError);
}
