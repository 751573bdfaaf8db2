#include "polygonizer/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "polygonizer/error.hpp"

namespace polygonizer {

using json = nlohmann::json;

namespace {

constexpr double kTieTolerance = 1e-9;

struct Edge {
    Point2 a;
    Point2 b;
    Point2 dir;  // unit tangent
    double length;
};

std::vector<Edge> edges_of(const PolygonRing& ring) {
    std::vector<Edge> out;
    const std::size_t n = ring.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Point2 a = ring.vertices[i];
        const Point2 b = ring.vertices[(i + 1) % n];
        const double len = std::hypot(b.x - a.x, b.y - a.y);
        if (len == 0.0) continue;
        out.push_back({a, b, {(b.x - a.x) / len, (b.y - a.y) / len}, len});
    }
    return out;
}

double distance_to_edge(const Edge& e, Point2 p) {
    const double t = std::clamp((p.x - e.a.x) * e.dir.x + (p.y - e.a.y) * e.dir.y, 0.0, e.length);
    return std::hypot(e.a.x + t * e.dir.x - p.x, e.a.y + t * e.dir.y - p.y);
}

double line_angle_deg(Point2 u, Point2 v) {
    return std::atan2(std::abs(u.x * v.y - u.y * v.x), std::abs(u.x * v.x + u.y * v.y)) * 180.0 / M_PI;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

std::vector<double> MetricsConfig::default_thresholds() {
    std::vector<double> t;
    for (int k = 0; k < 10; ++k) t.push_back((10.0 + k) / 20.0);
    return t;
}

void to_json(json& j, const MetricsConfig& c) {
    j = json{{"iou_resolution", c.iou_resolution},
             {"mta_sample_step", c.mta_sample_step},
             {"thresholds", c.thresholds}};
}

void from_json(const json& j, MetricsConfig& c) {
    const MetricsConfig d;
    c.iou_resolution = j.value("iou_resolution", d.iou_resolution);
    c.mta_sample_step = j.value("mta_sample_step", d.mta_sample_step);
    c.thresholds = j.value("thresholds", d.thresholds);
}

double iou(const PolygonRing& a, const PolygonRing& b, std::size_t resolution) {
    const BoundingBox ba = bounding_box(a);
    const BoundingBox bb = bounding_box(b);
    const double x0 = std::min(ba.min_x, bb.min_x);
    const double y0 = std::min(ba.min_y, bb.min_y);
    const double side = std::max(std::max(ba.max_x, bb.max_x) - x0, std::max(ba.max_y, bb.max_y) - y0);
    if (!(side > 0.0)) return 0.0;
    const double scale = static_cast<double>(resolution) / side;
    const BinaryMask ma = rasterize(scale_translate(a, scale, {-x0 * scale, -y0 * scale}), resolution);
    const BinaryMask mb = rasterize(scale_translate(b, scale, {-x0 * scale, -y0 * scale}), resolution);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < ma.bits.size(); ++i) {
        inter += static_cast<std::size_t>(ma.bits[i] & mb.bits[i]);
        uni += static_cast<std::size_t>(ma.bits[i] | mb.bits[i]);
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double max_tangent_angle_error(const PolygonRing& pred, const PolygonRing& gt, double sample_step) {
    if (!(sample_step > 0.0)) throw Error(ErrorCode::InvalidArgument, "mta sample step must be positive");
    const std::vector<Edge> pe = edges_of(pred);
    const std::vector<Edge> ge = edges_of(gt);
    if (pe.empty() || ge.empty()) return 90.0;

    double worst = 0.0;
    double offset = 0.5 * sample_step;  // arc length into the current edge
    for (const Edge& e : pe) {
        for (; offset < e.length; offset += sample_step) {
            const Point2 p{e.a.x + offset * e.dir.x, e.a.y + offset * e.dir.y};
            double best_dist = std::numeric_limits<double>::infinity();
            double best_angle = 90.0;
            for (const Edge& g : ge) {
                const double d = distance_to_edge(g, p);
                const double angle = line_angle_deg(e.dir, g.dir);
                if (d < best_dist - kTieTolerance) {
                    best_dist = d;
                    best_angle = angle;
                } else if (d <= best_dist + kTieTolerance) {
                    best_angle = std::min(best_angle, angle);
                }
            }
            worst = std::max(worst, best_angle);
        }
        offset -= e.length;
    }
    return worst;
}

double c_iou(double iou_value, std::size_t n_pred, std::size_t n_gt) {
    if (n_pred + n_gt == 0) return 0.0;
    // Same as iou * (1 - |Np - Ng| / (Np + Ng)) with one rounding fewer.
    return iou_value * static_cast<double>(2 * std::min(n_pred, n_gt)) / static_cast<double>(n_pred + n_gt);
}

PairScore score_pair(const EvalPair& pair, const MetricsConfig& config) {
    PairScore s;
    s.n_gt = pair.gt.size();
    if (!pair.pred) {
        s.failed = true;
        return s;
    }
    s.n_pred = pair.pred->size();
    s.iou = iou(*pair.pred, pair.gt, config.iou_resolution);
    s.mta_deg = max_tangent_angle_error(*pair.pred, pair.gt, config.mta_sample_step);
    s.c_iou = c_iou(s.iou, s.n_pred, s.n_gt);
    return s;
}

double n_ratio(std::span<const PairScore> scores) {
    if (scores.empty()) return 0.0;
    double sum = 0.0;
    for (const PairScore& s : scores) {
        if (!s.failed && s.n_gt > 0) sum += static_cast<double>(s.n_pred) / static_cast<double>(s.n_gt);
    }
    return sum / static_cast<double>(scores.size());
}

ApAr ap_ar(std::span<const double> ious, std::span<const double> thresholds) {
    if (ious.empty()) throw Error(ErrorCode::InvalidArgument, "ap_ar needs at least one pair");
    if (thresholds.empty()) throw Error(ErrorCode::InvalidArgument, "ap_ar needs at least one threshold");
    auto pass_fraction = [&](double tau) {
        std::size_t n = 0;
        for (double v : ious) n += v >= tau ? 1 : 0;
        return static_cast<double>(n) / static_cast<double>(ious.size());
    };
    ApAr r;
    double sum = 0.0;
    for (double tau : thresholds) sum += pass_fraction(tau);
    r.ap = r.ar = sum / static_cast<double>(thresholds.size());
    r.ap50 = r.ar50 = pass_fraction(0.5);
    r.ap75 = r.ar75 = pass_fraction(0.75);
    return r;
}

MetricsRow summarize(json level, std::span<const PairScore> scores, std::span<const EvalPair> pairs,
                     const MetricsConfig& config) {
    MetricsRow row;
    row.level = std::move(level);
    row.n_samples = scores.size();
    std::vector<double> ious, mtas;
    double c_sum = 0.0;
    for (const PairScore& s : scores) {
        ious.push_back(s.iou);
        mtas.push_back(s.mta_deg);
        c_sum += s.c_iou;
        row.n_failed += s.failed ? 1 : 0;
    }
    for (const EvalPair& p : pairs) row.n_unterminated += p.terminated ? 0 : 1;
    row.apar = ap_ar(ious, config.thresholds);
    const double n = static_cast<double>(scores.size());
    row.iou = std::accumulate(ious.begin(), ious.end(), 0.0) / n;
    row.mta_deg = std::accumulate(mtas.begin(), mtas.end(), 0.0) / n;
    row.mta_median_deg = median(mtas);
    row.n_ratio = n_ratio(scores);
    row.c_iou = c_sum / n;
    return row;
}

void to_json(json& j, const MetricsRow& r) {
    j = json{{"level", r.level},
             {"ap", r.apar.ap},
             {"ap50", r.apar.ap50},
             {"ap75", r.apar.ap75},
             {"ar", r.apar.ar},
             {"ar50", r.apar.ar50},
             {"ar75", r.apar.ar75},
             {"iou", r.iou},
             {"mta_deg", r.mta_deg},
             {"mta_median_deg", r.mta_median_deg},
             {"n_ratio", r.n_ratio},
             {"c_iou", r.c_iou},
             {"n_samples", r.n_samples},
             {"n_failed", r.n_failed},
             {"n_unterminated", r.n_unterminated}};
}

json metrics_document(const json& config, std::span<const MetricsRow> rows) {
    json out_rows = json::array();
    for (const MetricsRow& r : rows) out_rows.push_back(r);
    return json{{"version", kMetricsVersion}, {"config", config}, {"rows", out_rows}};
}

}  // namespace polygonizer
