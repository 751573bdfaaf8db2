#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polygonizer/geometry.hpp"
#include "polygonizer/tensor.hpp"

namespace polygonizer {

using Image = tc::Tensor<float>;  // [3, H, W], values in [0, 1]

enum class Provenance { Synthetic, Ingested };

struct Sample {
    std::string id;
    Image image;
    PolygonRing ring;
    Provenance provenance = Provenance::Synthetic;
};

struct Dataset {
    int grid_size = 0;
    std::vector<Sample> samples;
};

struct SceneConfig {
    int image_size = 64;
    int min_vertices = 4;
    int max_vertices = 12;
    int margin = 4;
    /// Fraction of buildings kept axis-aligned; the rest are rotated rectilinear
    /// footprints and therefore not rectilinear in the image frame.
    double rectilinear_probability = 1.0;
    /// Shortest building side as a fraction of the usable extent.
    double min_extent = 0.35;
    std::array<double, 2> foreground{0.45, 0.95};
    std::array<double, 2> background{0.05, 0.55};
    /// Cast-shadow length in pixels along `shadow_azimuth_deg` (0 = +x, 90 = +y).
    std::array<double, 2> shadow_length{1.5, 4.0};
    double shadow_azimuth_deg = 45.0;
    double shadow_darkening = 0.45;
    double noise_sigma = 0.04;
    double tint = 0.05;  // per-channel jitter, as a fraction of roof/ground contrast
    std::uint64_t seed = 0;

    void validate() const;
    friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

void to_json(nlohmann::json& j, const SceneConfig& c);
void from_json(const nlohmann::json& j, SceneConfig& c);

/// Independent stream for sample `index` of a run seeded with `seed`.
std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index);

/// Canonical rectilinear ring: a rectangle with up to four corner notches,
/// vertices on bin centers (k + 0.5).
PolygonRing gen_rectilinear_ring(std::mt19937_64& rng, const SceneConfig& config);

/// Ring for one scene: rectilinear, or a rotated rectilinear footprint with
/// probability 1 - rectilinear_probability.
PolygonRing gen_building_ring(std::mt19937_64& rng, const SceneConfig& config);

/// Anti-aliased roof over a cast shadow and background, plus Gaussian noise.
Sample render_scene(const PolygonRing& ring, const SceneConfig& config, std::mt19937_64& rng);

Dataset generate_dataset(const SceneConfig& config, std::size_t count);

struct Padded {
    Image image;
    Point2 offset;  // added to ring coordinates
};

/// Pads the shorter side at the bottom/right; content stays at the top-left.
Padded pad_to_square(const Image& image, float fill);

/// Bilinear resize with pixel-center alignment.
Image resize(const Image& image, std::size_t height, std::size_t width);

std::array<double, 3> channel_means(const Dataset& dataset);

Image read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Image& image);

/// `generator`, when not null, is stored alongside the samples (e.g. the effective config).
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir,
                  const nlohmann::json& generator = nullptr);
Dataset load_dataset(const std::filesystem::path& dir);

struct IngestConfig {
    int image_size = 64;
    double crop_margin = 0.0;  // pixels added around each ground-truth box
};

struct IngestReport {
    Dataset dataset;
    std::size_t skipped_multi_ring = 0;
    std::size_t skipped_missing_image = 0;
    std::size_t skipped_invalid = 0;
    std::vector<std::string> problems;
};

/// Reads COCO-style `images`/`annotations` with polygon segmentations. Image
/// files must be binary PPM.
IngestReport load_coco_subset(const std::filesystem::path& annotation_path,
                              const std::filesystem::path& image_dir, const IngestConfig& config);

}  // namespace polygonizer
