#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <string>

#include "polygonizer/data.hpp"

namespace polygonizer {

enum class PerturbKind { Erase, Downsample, Rotate };

std::string to_string(PerturbKind kind);
PerturbKind parse_perturb_kind(const std::string& name);

struct PerturbationSpec {
    PerturbKind kind = PerturbKind::Erase;
    double level = 0.0;  // erased fraction, downsampling factor, or degrees
    std::uint64_t seed = 0;

    void validate() const;
};

using Fill = std::array<double, 3>;

struct EraseConfig {
    /// Mean rectangle area as a fraction of the image.
    double mean_patch_fraction = 0.01;
    /// Allowed overshoot of the erased fraction.
    double tolerance = 0.01;
};

/// Erases random axis-aligned rectangles until at least `fraction` of the
/// pixels carry `fill`, overshooting by no more than the tolerance.
Image erase(const Image& image, double fraction, std::mt19937_64& rng, const Fill& fill,
            const EraseConfig& config = {});

/// Count of pixels that differ from `image` in any channel.
std::size_t changed_pixels(const Image& a, const Image& b);

/// Average-pools by factor x factor, then upsamples back by pixel replication.
Image downsample(const Image& image, int factor);

struct RotatedSample {
    Image image;
    PolygonRing ring;
    bool clipped = false;  // some ring vertex left [0, D)
};

/// Rotates image and ring by `degrees` about the image center with the
/// rotate_ring convention; the image is sampled bilinearly and uncovered
/// pixels take `fill`.
RotatedSample rotate_sample(const Image& image, const PolygonRing& ring, double degrees, const Fill& fill);

/// Stream for perturbing sample `index` at `level`.
std::mt19937_64 perturb_rng(std::uint64_t seed, double level, std::uint64_t index);

/// Applies the spec to one sample. `fill` is the per-channel dataset mean.
Sample apply_perturbation(const Sample& sample, const PerturbationSpec& spec, const Fill& fill,
                          std::uint64_t index);

}  // namespace polygonizer
