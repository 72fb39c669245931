#pragma once

#include "cellmtl/data.hpp"
#include "cellmtl/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cellmtl {

using ConfusionMatrix = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>; ///< rows = true class

struct ClassScores {
    double precision = 0;
    double recall = 0;
    double f1 = 0;
    std::size_t support = 0; ///< true count
};

struct ClassificationMetrics {
    double accuracy = 0;
    std::array<ClassScores, kNumClasses> per_class{};
    double macro_precision = 0;
    double macro_recall = 0;
    double macro_f1 = 0;
    ConfusionMatrix confusion{};
    std::size_t n = 0;
};

/// Precision/recall/F1 for one class from raw counts; 0/0 yields 0 (the caller decides whether to warn).
ClassScores class_scores(std::size_t tp, std::size_t fp, std::size_t fn);

/// Labels must be in {0,1,2} and of equal non-zero length; InputError otherwise.
ClassificationMetrics classification_metrics(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth);

struct RegressionMetrics {
    double pearson_r = 0;
    double rmse = 0;
    double mae = 0;
    double ccc = 0;
    bool degenerate = false; ///< a zero-variance input; r and ccc are reported as 0
};

/// Population (1/N) moments throughout. Requires N >= 2.
RegressionMetrics regression_metrics(std::span<const double> pred, std::span<const double> target);

struct RocPoint {
    double fpr = 0;
    double tpr = 0;
    double threshold = 0; ///< predict positive when score >= threshold
};

struct RocCurve {
    std::vector<RocPoint> points;
    double auc = 0;
    bool degenerate = false; ///< no positives or no negatives; auc is NaN
};

/// Mann-Whitney rank statistic, ties counted one half.
double auc_rank(std::span<const double> scores, std::span<const bool> positive);
/// Threshold sweep over distinct scores, from (0,0) to (1,1), with the rank-statistic AUC.
RocCurve roc_curve(std::span<const double> scores, std::span<const bool> positive);
/// One-vs-rest curves from class probabilities [N,3].
std::array<RocCurve, kNumClasses> roc_auc_ovr(const Tensor<float>& probs, std::span<const std::uint8_t> truth);

struct MarkerRow {
    std::string name;
    RegressionMetrics m;
};

struct MarkerReport {
    std::vector<MarkerRow> rows;
    RegressionMetrics mean; ///< unweighted mean of the rows
};

/// pred and target are [N,4].
MarkerReport per_marker_report(const Tensor<float>& pred, const Tensor<float>& target,
                               const std::array<std::string, kNumMarkers>& names);

/// Per-predicted-class cohort statistics used by the summary layer.
struct CohortStats {
    std::array<std::size_t, kNumClasses> predicted_count{};
    /// Mean and population std of predicted markers per predicted class.
    std::array<std::array<double, kNumMarkers>, kNumClasses> marker_mean{};
    std::array<std::array<double, kNumMarkers>, kNumClasses> marker_std{};
    /// Mean and std of predicted markers over everything outside each predicted class.
    std::array<std::array<double, kNumMarkers>, kNumClasses> rest_mean{};
    std::array<std::array<double, kNumMarkers>, kNumClasses> rest_std{};
    double confidence_mean = 0; ///< mean of the max class probability
    double confidence_min = 0;
    double low_confidence_fraction = 0; ///< max probability below 0.6
};

struct EvalReport {
    std::size_t n = 0;
    std::optional<ClassificationMetrics> classification;
    std::optional<std::array<RocCurve, kNumClasses>> roc;
    std::optional<MarkerReport> regression;
    std::optional<CohortStats> cohort;

    /// Aggregate Pearson r: the mean over markers.
    double mean_pearson() const { return regression ? regression->mean.pearson_r : 0.0; }
    double accuracy() const { return classification ? classification->accuracy : 0.0; }
};

/// Builds every metric that the available outputs allow. `probs` [N,3] and `reg` [N,4] may be empty tensors.
EvalReport build_report(const Tensor<float>& probs, const Tensor<float>& reg, std::span<const std::uint8_t> truth,
                        const Tensor<float>& targets, const std::array<std::string, kNumMarkers>& names);

// Serialization.

/// Versioned JSON rendering; doubles are written with round-trip precision so equal reports give equal bytes.
std::string report_to_json(const EvalReport& r);
/// Writes report.json, classification.csv, confusion.csv, markers.csv and roc.csv (those that apply)
/// and returns the written paths.
std::vector<std::filesystem::path> write_report(const EvalReport& r, const std::filesystem::path& dir);

} // namespace cellmtl
