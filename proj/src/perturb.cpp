#include "polygonizer/perturb.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "polygonizer/error.hpp"

namespace polygonizer {

namespace {

constexpr std::size_t kMaxErasePlacements = 1u << 20;

}  // namespace

std::string to_string(PerturbKind kind) {
    switch (kind) {
        case PerturbKind::Erase: return "erase";
        case PerturbKind::Downsample: return "downsample";
        case PerturbKind::Rotate: return "rotate";
    }
    return "unknown";
}

PerturbKind parse_perturb_kind(const std::string& name) {
    if (name == "erase") return PerturbKind::Erase;
    if (name == "downsample") return PerturbKind::Downsample;
    if (name == "rotate") return PerturbKind::Rotate;
    throw Error(ErrorCode::Usage, "unknown perturbation kind '" + name + "' (erase|downsample|rotate)");
}

void PerturbationSpec::validate() const {
    if (!std::isfinite(level)) throw Error(ErrorCode::InvalidArgument, "perturbation level must be finite");
    if (kind == PerturbKind::Erase && (level < 0.0 || level > 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "erase fraction must lie in [0, 1]");
    }
    if (kind == PerturbKind::Downsample && level != 1 && level != 2 && level != 4 && level != 8) {
        throw Error(ErrorCode::InvalidArgument, "downsample factor must be 1, 2, 4 or 8");
    }
}

Image erase(const Image& image, double fraction, std::mt19937_64& rng, const Fill& fill,
            const EraseConfig& config) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    const std::size_t total = h * w;
    Image out = image;
    if (fraction <= 0.0) return out;

    std::vector<std::uint8_t> erased(total, 0);
    std::size_t count = 0;
    const auto target = std::min(total, static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total))));
    const auto slack = static_cast<std::size_t>(std::floor(config.tolerance * static_cast<double>(total)));
    const double mean_area = std::max(1.0, config.mean_patch_fraction * static_cast<double>(total));
    std::uniform_real_distribution<double> area_scale(0.25, 4.0);
    std::uniform_real_distribution<double> log_aspect(std::log(0.3), std::log(3.3));

    auto mark = [&](std::size_t i) {
        if (!erased[i]) {
            erased[i] = 1;
            ++count;
        }
    };
    for (std::size_t placed = 0; count < target && placed < kMaxErasePlacements; ++placed) {
        // A rectangle never covers more than the remaining budget, so the
        // overshoot stays within the tolerance.
        const double budget = static_cast<double>(target - count + slack);
        const double area = std::min(area_scale(rng) * mean_area, budget);
        const double aspect = std::exp(log_aspect(rng));
        auto rh = static_cast<std::size_t>(std::clamp(std::round(std::sqrt(area * aspect)), 1.0, double(h)));
        auto rw = static_cast<std::size_t>(std::clamp(std::round(area / static_cast<double>(rh)), 1.0, double(w)));
        while (static_cast<double>(rh * rw) > budget) {
            if (rh >= rw && rh > 1) --rh;
            else if (rw > 1) --rw;
            else break;
        }
        const std::size_t y0 = std::uniform_int_distribution<std::size_t>(0, h - rh)(rng);
        const std::size_t x0 = std::uniform_int_distribution<std::size_t>(0, w - rw)(rng);
        for (std::size_t y = y0; y < y0 + rh; ++y)
            for (std::size_t x = x0; x < x0 + rw; ++x) mark(y * w + x);
    }
    for (std::size_t i = 0; i < total && count < target; ++i) mark(i);

    for (std::size_t c = 0; c < image.dim(0); ++c) {
        for (std::size_t i = 0; i < total; ++i) {
            if (erased[i]) out.data[c * total + i] = static_cast<float>(fill[c % 3]);
        }
    }
    return out;
}

std::size_t changed_pixels(const Image& a, const Image& b) {
    const std::size_t plane = a.dim(1) * a.dim(2);
    std::size_t n = 0;
    for (std::size_t i = 0; i < plane; ++i) {
        bool diff = false;
        for (std::size_t c = 0; c < a.dim(0); ++c) diff = diff || a.data[c * plane + i] != b.data[c * plane + i];
        n += diff ? 1 : 0;
    }
    return n;
}

Image downsample(const Image& image, int factor) {
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (factor < 1 || h % static_cast<std::size_t>(factor) != 0 || w % static_cast<std::size_t>(factor) != 0) {
        throw Error(ErrorCode::InvalidArgument,
                    "downsample factor " + std::to_string(factor) + " does not divide " + std::to_string(w) + "x" +
                        std::to_string(h));
    }
    if (factor == 1) return image;
    const auto f = static_cast<std::size_t>(factor);
    Image out({ch, h, w});
    for (std::size_t c = 0; c < ch; ++c) {
        const float* src = image.data.data() + c * h * w;
        float* dst = out.data.data() + c * h * w;
        for (std::size_t by = 0; by < h; by += f) {
            for (std::size_t bx = 0; bx < w; bx += f) {
                double sum = 0.0;
                for (std::size_t y = by; y < by + f; ++y)
                    for (std::size_t x = bx; x < bx + f; ++x) sum += src[y * w + x];
                const auto mean = static_cast<float>(sum / static_cast<double>(f * f));
                for (std::size_t y = by; y < by + f; ++y)
                    for (std::size_t x = bx; x < bx + f; ++x) dst[y * w + x] = mean;
            }
        }
    }
    return out;
}

RotatedSample rotate_sample(const Image& image, const PolygonRing& ring, double degrees, const Fill& fill) {
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    const Point2 center{static_cast<double>(w) / 2.0, static_cast<double>(h) / 2.0};
    RotatedSample out;
    out.ring = rotate_ring(ring, degrees, center);
    for (const Point2& p : out.ring.vertices) {
        out.clipped = out.clipped || p.x < 0.0 || p.y < 0.0 || p.x >= double(w) || p.y >= double(h);
    }
    if (degrees == 0.0) {
        out.image = image;
        return out;
    }

    // Inverse map: each output pixel center samples the source at R^-1 (q - c) + c.
    const auto [cs, sn] = cos_sin_deg(degrees);
    out.image = Image({ch, h, w});
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            const double qx = x + 0.5 - center.x;
            const double qy = y + 0.5 - center.y;
            const double u = cs * qx + sn * qy + center.x - 0.5;
            const double v = -sn * qx + cs * qy + center.y - 0.5;
            const bool inside = u > -0.5 - 1e-9 && v > -0.5 - 1e-9 && u < w - 0.5 + 1e-9 && v < h - 0.5 + 1e-9;
            const double uc = std::clamp(u, 0.0, double(w - 1));
            const double vc = std::clamp(v, 0.0, double(h - 1));
            const auto x0 = static_cast<std::size_t>(uc);
            const auto y0 = static_cast<std::size_t>(vc);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const std::size_t y1 = std::min(y0 + 1, h - 1);
            const double tx = uc - static_cast<double>(x0);
            const double ty = vc - static_cast<double>(y0);
            for (std::size_t c = 0; c < ch; ++c) {
                double value = fill[c % 3];
                if (inside) {
                    const float* src = image.data.data() + c * h * w;
                    value = (src[y0 * w + x0] * (1 - tx) + src[y0 * w + x1] * tx) * (1 - ty) +
                            (src[y1 * w + x0] * (1 - tx) + src[y1 * w + x1] * tx) * ty;
                }
                out.image.data[(c * h + y) * w + x] = static_cast<float>(std::clamp(value, 0.0, 1.0));
            }
        }
    }
    return out;
}

std::mt19937_64 perturb_rng(std::uint64_t seed, double level, std::uint64_t index) {
    const auto bits = std::bit_cast<std::uint64_t>(level);
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(bits), static_cast<std::uint32_t>(bits >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

Sample apply_perturbation(const Sample& sample, const PerturbationSpec& spec, const Fill& fill,
                          std::uint64_t index) {
    spec.validate();
    Sample out = sample;
    switch (spec.kind) {
        case PerturbKind::Erase: {
            std::mt19937_64 rng = perturb_rng(spec.seed, spec.level, index);
            out.image = erase(sample.image, spec.level, rng, fill);
            break;
        }
        case PerturbKind::Downsample:
            out.image = downsample(sample.image, static_cast<int>(spec.level));
            break;
        case PerturbKind::Rotate: {
            RotatedSample r = rotate_sample(sample.image, sample.ring, spec.level, fill);
            out.image = std::move(r.image);
            out.ring = canonicalize(r.ring);
            break;
        }
    }
    return out;
}

}  // namespace polygonizer
