#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polygonizer/geometry.hpp"

namespace polygonizer {

// A prediction without a ring (fewer than three vertices, malformed tokens)
// is a failure and scores as the worst case on every metric.
struct EvalPair {
    std::string id;
    std::optional<PolygonRing> pred;
    PolygonRing gt;
    bool terminated = true;
};

struct MetricsConfig {
    std::size_t iou_resolution = 256;
    double mta_sample_step = 0.5;
    std::vector<double> thresholds = default_thresholds();

    /// 0.50, 0.55, ..., 0.95
    static std::vector<double> default_thresholds();
};

void to_json(nlohmann::json& j, const MetricsConfig& c);
void from_json(const nlohmann::json& j, MetricsConfig& c);

/// Rasterized IoU over the square frame spanning both rings' joint bounding
/// box, `resolution` pixels per side.
double iou(const PolygonRing& a, const PolygonRing& b, std::size_t resolution = 256);

/// Largest angle, folded to [0, 90] degrees, between the pred boundary
/// tangent at evenly spaced samples and the gt tangent at the nearest gt
/// boundary point. When the nearest point is shared by several gt edges the
/// smallest angle is used.
double max_tangent_angle_error(const PolygonRing& pred, const PolygonRing& gt,
                               double sample_step = 0.5);

/// IoU scaled by 1 - |Np - Ng| / (Np + Ng).
double c_iou(double iou_value, std::size_t n_pred, std::size_t n_gt);

struct PairScore {
    bool failed = false;
    double iou = 0.0;
    double mta_deg = 90.0;
    double c_iou = 0.0;
    std::size_t n_pred = 0;
    std::size_t n_gt = 0;
};

PairScore score_pair(const EvalPair& pair, const MetricsConfig& config);

/// Mean of |V_pred| / |V_gt|; failures contribute 0.
double n_ratio(std::span<const PairScore> scores);

struct ApAr {
    double ap = 0.0, ap50 = 0.0, ap75 = 0.0;
    double ar = 0.0, ar50 = 0.0, ar75 = 0.0;
};

/// One prediction per image: precision and recall at each threshold are both
/// the fraction of pairs whose IoU reaches it.
ApAr ap_ar(std::span<const double> ious, std::span<const double> thresholds);

struct MetricsRow {
    nlohmann::json level = "none";
    ApAr apar;
    double iou = 0.0;
    double mta_deg = 0.0;
    double mta_median_deg = 0.0;
    double n_ratio = 0.0;
    double c_iou = 0.0;
    std::size_t n_samples = 0;
    std::size_t n_failed = 0;
    std::size_t n_unterminated = 0;
};

MetricsRow summarize(nlohmann::json level, std::span<const PairScore> scores,
                     std::span<const EvalPair> pairs, const MetricsConfig& config);

void to_json(nlohmann::json& j, const MetricsRow& row);

inline constexpr int kMetricsVersion = 1;

nlohmann::json metrics_document(const nlohmann::json& config, std::span<const MetricsRow> rows);

}  // namespace polygonizer
