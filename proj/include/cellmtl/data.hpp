#pragma once

#include "cellmtl/errors.hpp"
#include "cellmtl/rng.hpp"
#include "cellmtl/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace cellmtl {

inline constexpr std::size_t kNumClasses = 3;
inline constexpr std::size_t kNumMarkers = 4;

/// Class names in label order.
inline const std::array<std::string, kNumClasses> kClassNames{"Lymphocyte", "Granulocyte", "Monocyte"};
/// Default display names of the four regression targets m1..m4.
inline const std::array<std::string, kNumMarkers> kMarkerNames{"CD45", "CD16", "CD3/CD19/CD56", "CD123/HLA-DR/CD14"};

struct CellRecord {
    Tensor<float> image; ///< [C,H,W]
    std::uint8_t cls = 0;
    std::array<float, kNumMarkers> markers{};
    std::string id;
};

struct Splits {
    std::vector<std::size_t> train, val, test;
};

struct Dataset {
    Shape image_shape{4, 28, 28};
    std::vector<CellRecord> records;
    Splits splits;
    std::array<std::string, kNumMarkers> marker_names = kMarkerNames;

    std::size_t size() const { return records.size(); }
    /// Throws InputError if a record violates the record invariants or a split index is out of range.
    void validate() const;
};

// Distinct failure kinds when materializing a container.
class ManifestError : public LoadError {
public:
    using LoadError::LoadError;
};
class MissingBlobError : public LoadError {
public:
    using LoadError::LoadError;
};
class BlobSizeError : public LoadError {
public:
    using LoadError::LoadError;
};
class ChecksumError : public LoadError {
public:
    using LoadError::LoadError;
};

/// Writes `manifest.json`, `images.bin` and `labels.csv` into `dir`.
void write_dataset(const Dataset& ds, const std::filesystem::path& dir);
/// Accepts the container directory or its manifest path. 3x128x128 RGB containers are
/// converted on load with `rgb_to_dpc` (an approximation, logged as a warning).
Dataset load_dataset(const std::filesystem::path& manifest_or_dir);

/// Area-resamples an RGB [3,H,W] image to 28x28 grayscale and replicates it into four channels.
Tensor<float> rgb_to_dpc(const Tensor<float>& rgb);

struct ZScoreStats {
    std::array<double, kNumMarkers> marker_mean{};
    std::array<double, kNumMarkers> marker_std{};
    std::vector<double> channel_mean;
    std::vector<double> channel_std;
};

inline constexpr double kStdFloor = 1e-6;

/// Population statistics over the given records; stds are floored at 1e-6 with a warning.
ZScoreStats zscore_fit(const std::vector<CellRecord>& records, const std::vector<std::size_t>& indices);
void zscore_apply(std::vector<CellRecord>& records, const std::vector<std::size_t>& indices, const ZScoreStats& stats);
/// Fits on the train split and applies to every split.
ZScoreStats zscore_dataset(Dataset& ds);

struct AugmentDraw {
    bool flip = false;
    double angle_deg = 0;
    double tx = 0;
    double ty = 0;
};

struct AugmentConfig {
    double flip_prob = 0.5;
    double max_rotation_deg = 10;
    double max_translation = 2;
};

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg = {});
/// Horizontal flip (swapping the left/right illumination channels 0 and 1), then rotation
/// about the image centre and translation with bilinear sampling and edge replication.
CellRecord augment(const CellRecord& rec, const AugmentDraw& draw);
inline CellRecord augment(const CellRecord& rec, Rng& rng, const AugmentConfig& cfg = {})
{
    return augment(rec, draw_augment(rng, cfg));
}

// Synthetic generator.

struct SynthConfig {
    std::array<std::size_t, kNumClasses> n_per_class{200, 200, 200};
    /// Class-conditional marker means [class][marker] and standard deviations.
    std::array<std::array<double, kNumMarkers>, kNumClasses> marker_mean{{
        {-0.18, -0.72, 0.5, -0.5},
        {0.32, 0.65, -0.5, -0.5},
        {0.24, -0.13, -0.5, 0.5},
    }};
    std::array<std::array<double, kNumMarkers>, kNumClasses> marker_std{{
        {0.95, 0.81, 0.9, 0.9},
        {0.88, 0.92, 0.9, 0.9},
        {1.04, 0.87, 0.9, 0.9},
    }};
    /// Coupling between marker value and rendered texture, in [0,1].
    double kappa = 1.0;
    /// Probability that a cell is rendered with another class's morphology.
    double morph_confusion = 0.03;
    /// Per-pixel Gaussian noise on every illumination channel.
    double noise_sigma = 0.02;
    /// Log-amplitude gain of each texture drive.
    double texture_gain = 0.4;
    double val_fraction = 0.0;
    double test_fraction = 0.2;
    std::uint64_t seed = 0;

    void validate() const;
};

/// Generative latents of one synthetic record.
struct SynthLatent {
    std::uint8_t cls = 0;
    std::uint8_t morph = 0; ///< class whose morphology was rendered
    std::array<double, kNumMarkers> drive{};
};

struct OracleReport {
    double accuracy_ceiling = 0;
    std::array<double, kNumMarkers> marker_r_ceiling{};
    double mean_r_ceiling = 0;
    std::size_t n = 0;
};

struct SynthResult {
    Dataset dataset;
    std::vector<SynthLatent> latents;
    OracleReport oracle;      ///< over every emitted record
    OracleReport oracle_test; ///< over the test split
};

SynthResult synthesize(const SynthConfig& cfg);

/// Bayes-optimal class posterior given the rendered morphology and texture drives.
std::array<double, kNumClasses> oracle_class_posterior(const SynthConfig& cfg, const SynthLatent& z);
/// Bayes-optimal marker prediction E[m | morph, drive].
std::array<double, kNumMarkers> oracle_marker_mean(const SynthConfig& cfg, const SynthLatent& z);
/// Ceilings of the oracle predictors evaluated on the given records.
OracleReport oracle_ceilings(const SynthConfig& cfg, const Dataset& ds, const std::vector<SynthLatent>& latents,
                             const std::vector<std::size_t>& indices);

} // namespace cellmtl
