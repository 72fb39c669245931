#include "cellmtl/data.hpp"

#include <cmath>
#include <numbers>

namespace cellmtl {

AugmentDraw draw_augment(Rng& rng, const AugmentConfig& cfg)
{
    AugmentDraw d;
    d.flip = rng.bernoulli(cfg.flip_prob);
    d.angle_deg = rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg);
    d.tx = rng.uniform(-cfg.max_translation, cfg.max_translation);
    d.ty = rng.uniform(-cfg.max_translation, cfg.max_translation);
    return d;
}

CellRecord augment(const CellRecord& rec, const AugmentDraw& d)
{
    CellRecord out = rec;
    const std::size_t C = rec.image.dim(0), H = rec.image.dim(1), W = rec.image.dim(2);
    if (d.flip) {
        for (std::size_t c = 0; c < C; ++c) {
            // channels 0 and 1 are the left/right illumination pair; a mirror exchanges them
            const std::size_t src = C >= 2 && c < 2 ? 1 - c : c;
            for (std::size_t y = 0; y < H; ++y)
                for (std::size_t x = 0; x < W; ++x)
                    out.image.at({c, y, x}) = rec.image.at({src, y, W - 1 - x});
        }
    }
    if (d.angle_deg == 0 && d.tx == 0 && d.ty == 0)
        return out;

    const Tensor<float> src = out.image;
    const double th = d.angle_deg * std::numbers::pi / 180.0;
    const double cs = std::cos(th), sn = std::sin(th);
    const double cx = (double(W) - 1) / 2, cy = (double(H) - 1) / 2;
    auto clampi = [](long v, long hi) { return std::clamp(v, 0L, hi); };
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) {
            // inverse map: output pixel -> source location
            const double px = double(x) - cx - d.tx, py = double(y) - cy - d.ty;
            const double sx = cs * px + sn * py + cx, sy = -sn * px + cs * py + cy;
            const double fx = std::floor(sx), fy = std::floor(sy);
            const double ax = sx - fx, ay = sy - fy;
            const long x0 = clampi(long(fx), long(W) - 1), x1 = clampi(long(fx) + 1, long(W) - 1);
            const long y0 = clampi(long(fy), long(H) - 1), y1 = clampi(long(fy) + 1, long(H) - 1);
            for (std::size_t c = 0; c < C; ++c) {
                const float* p = src.data() + c * H * W;
                const double v = (1 - ay) * ((1 - ax) * p[y0 * W + x0] + ax * p[y0 * W + x1]) +
                                 ay * ((1 - ax) * p[y1 * W + x0] + ax * p[y1 * W + x1]);
                out.image.at({c, y, x}) = float(v);
            }
        }
    return out;
}

} // namespace cellmtl
