#include "cellmtl/data.hpp"

#include <spdlog/spdlog.h>

#include <cmath>

namespace cellmtl {

void Dataset::validate() const
{
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (r.image.shape() != image_shape)
            throw InputError("record " + r.id + ": image shape " + shape_str(r.image.shape()) + " != " +
                             shape_str(image_shape));
        if (!r.image.all_finite())
            throw InputError("record " + r.id + ": non-finite pixel");
        if (r.cls >= kNumClasses)
            throw InputError("record " + r.id + ": class " + std::to_string(r.cls) + " out of range");
        for (float m : r.markers)
            if (!std::isfinite(m))
                throw InputError("record " + r.id + ": non-finite marker");
    }
    for (const auto* split : {&splits.train, &splits.val, &splits.test})
        for (std::size_t i : *split)
            if (i >= records.size())
                throw InputError("split index " + std::to_string(i) + " out of range");
}

ZScoreStats zscore_fit(const std::vector<CellRecord>& records, const std::vector<std::size_t>& indices)
{
    if (indices.empty())
        throw InputError("zscore_fit: empty training split");
    const std::size_t C = records[indices[0]].image.dim(0);
    const std::size_t hw = records[indices[0]].image.numel() / C;
    ZScoreStats s;
    s.channel_mean.assign(C, 0.0);
    s.channel_std.assign(C, 0.0);
    const double n = double(indices.size());

    for (std::size_t i : indices) {
        const auto& r = records[i];
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            s.marker_mean[m] += r.markers[m] / n;
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < hw; ++k)
                acc += r.image[c * hw + k];
            s.channel_mean[c] += acc / (n * double(hw));
        }
    }
    for (std::size_t i : indices) {
        const auto& r = records[i];
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            s.marker_std[m] += std::pow(r.markers[m] - s.marker_mean[m], 2) / n;
        for (std::size_t c = 0; c < C; ++c) {
            double acc = 0;
            for (std::size_t k = 0; k < hw; ++k)
                acc += std::pow(r.image[c * hw + k] - s.channel_mean[c], 2);
            s.channel_std[c] += acc / (n * double(hw));
        }
    }
    auto finish = [](double& v, const std::string& what) {
        v = std::sqrt(v);
        if (v < kStdFloor) {
            spdlog::warn("zscore_fit: {} is constant on the training split, std floored at {}", what, kStdFloor);
            v = kStdFloor;
        }
    };
    for (std::size_t m = 0; m < kNumMarkers; ++m)
        finish(s.marker_std[m], "marker m" + std::to_string(m + 1));
    for (std::size_t c = 0; c < C; ++c)
        finish(s.channel_std[c], "image channel " + std::to_string(c));
    return s;
}

void zscore_apply(std::vector<CellRecord>& records, const std::vector<std::size_t>& indices, const ZScoreStats& s)
{
    for (std::size_t i : indices) {
        auto& r = records[i];
        const std::size_t C = r.image.dim(0), hw = r.image.numel() / C;
        if (C != s.channel_mean.size())
            throw DimensionError("zscore_apply: record has " + std::to_string(C) + " channels, stats have " +
                                 std::to_string(s.channel_mean.size()));
        for (std::size_t m = 0; m < kNumMarkers; ++m)
            r.markers[m] = float((r.markers[m] - s.marker_mean[m]) / s.marker_std[m]);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t k = 0; k < hw; ++k)
                r.image[c * hw + k] = float((r.image[c * hw + k] - s.channel_mean[c]) / s.channel_std[c]);
    }
}

ZScoreStats zscore_dataset(Dataset& ds)
{
    auto stats = zscore_fit(ds.records, ds.splits.train);
    for (const auto* split : {&ds.splits.train, &ds.splits.val, &ds.splits.test})
        zscore_apply(ds.records, *split, stats);
    return stats;
}

} // namespace cellmtl
