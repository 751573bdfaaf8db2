#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "polygonizer/error.hpp"
#include "polygonizer/metrics.hpp"

using namespace polygonizer;

namespace {

PolygonRing square(double x0, double y0, double side) {
    return PolygonRing{{{x0, y0}, {x0 + side, y0}, {x0 + side, y0 + side}, {x0, y0 + side}}};
}

PolygonRing rect(double x0, double y0, double x1, double y1) {
    return PolygonRing{{{x0, y0}, {x1, y0}, {x1, y1}, {x0, y1}}};
}

PolygonRing octagon() {
    PolygonRing r;
    for (int k = 0; k < 8; ++k) r.vertices.push_back({10 + 5 * std::cos(k * M_PI / 4), 10 + 5 * std::sin(k * M_PI / 4)});
    return r;
}

}  // namespace

TEST_CASE("iou") {
    CHECK(iou(square(0, 0, 10), square(0, 0, 10)) == 1.0);
    CHECK(iou(square(0, 0, 10), square(20, 20, 5)) == 0.0);
    CHECK(iou(square(0, 0, 1), square(0.5, 0.5, 1)) == doctest::Approx(1.0 / 7.0).epsilon(0.07));
    CHECK(std::abs(iou(square(0, 0, 1), square(0.5, 0.5, 1)) - 1.0 / 7.0) <= 0.01);

    std::mt19937_64 rng(1);
    for (int i = 0; i < 100; ++i) {
        const PolygonRing a = oracle::random_convex(rng, 0, 64);
        const PolygonRing b = oracle::random_convex(rng, 0, 64);
        const double exact = oracle::convex_iou(a, b);
        CHECK(std::abs(iou(a, b) - exact) <= 0.01);
        CHECK(iou(a, b) == iou(b, a));
        CHECK(iou(a, a) == 1.0);
    }
}

TEST_CASE("max_tangent_angle_error") {
    const PolygonRing sq = square(10, 10, 20);
    CHECK(max_tangent_angle_error(sq, sq) == 0.0);
    const PolygonRing diamond = rotate_ring(sq, 45.0, {20, 20});
    CHECK(max_tangent_angle_error(sq, diamond) == doctest::Approx(45.0).epsilon(1.0 / 45.0));
    CHECK(max_tangent_angle_error(diamond, sq) == doctest::Approx(45.0).epsilon(1.0 / 45.0));
    // Concentric axis-aligned rectangles with equal margins.
    CHECK(max_tangent_angle_error(rect(10, 10, 30, 20), rect(8, 8, 32, 22)) == 0.0);
    CHECK(max_tangent_angle_error(rect(8, 8, 32, 22), rect(10, 10, 30, 20)) == 0.0);

    // Brute-force oracle: dense sampling of both boundaries.
    auto brute = [](const PolygonRing& p, const PolygonRing& g) {
        double worst = 0.0;
        const std::size_t n = p.size(), m = g.size();
        for (std::size_t i = 0; i < n; ++i) {
            const Point2 a = p.vertices[i], b = p.vertices[(i + 1) % n];
            const double len = std::hypot(b.x - a.x, b.y - a.y);
            const Point2 t{(b.x - a.x) / len, (b.y - a.y) / len};
            for (double s = 0.05; s < len; s += 0.1) {
                const Point2 q{a.x + s * t.x, a.y + s * t.y};
                double best = 1e300, angle = 90;
                for (std::size_t j = 0; j < m; ++j) {
                    const Point2 c = g.vertices[j], d = g.vertices[(j + 1) % m];
                    const double l2 = std::hypot(d.x - c.x, d.y - c.y);
                    const Point2 u{(d.x - c.x) / l2, (d.y - c.y) / l2};
                    const double proj = std::clamp((q.x - c.x) * u.x + (q.y - c.y) * u.y, 0.0, l2);
                    const double dist = std::hypot(c.x + proj * u.x - q.x, c.y + proj * u.y - q.y);
                    const double ang = std::acos(std::min(1.0, std::abs(t.x * u.x + t.y * u.y))) * 180 / M_PI;
                    if (dist < best - 1e-9) {
                        best = dist;
                        angle = ang;
                    } else if (dist <= best + 1e-9) {
                        angle = std::min(angle, ang);
                    }
                }
                worst = std::max(worst, angle);
            }
        }
        return worst;
    };
    const PolygonRing tilted = rotate_ring(sq, 20.0, {20, 20});
    CHECK(max_tangent_angle_error(sq, tilted) == doctest::Approx(brute(sq, tilted)).epsilon(0.02));

    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> angle(0, 360);
    for (int i = 0; i < 20; ++i) {
        const PolygonRing a = oracle::random_convex(rng, 0, 64);
        const PolygonRing b = oracle::random_convex(rng, 0, 64);
        const double deg = angle(rng);
        const double base = max_tangent_angle_error(a, b);
        const double rotated = max_tangent_angle_error(rotate_ring(a, deg, {32, 32}), rotate_ring(b, deg, {32, 32}));
        CHECK(std::abs(base - rotated) <= 1e-6);
        CHECK(base >= 0.0);
        CHECK(base <= 90.0);
    }
}

TEST_CASE("c_iou and n_ratio") {
    CHECK(c_iou(0.9, 8, 4) == 0.6);
    CHECK(c_iou(0.8, 4, 4) == 0.8);
    CHECK(c_iou(1.0, 5, 5) == 1.0);

    std::vector<PairScore> s(2);
    s[0].n_pred = 4;
    s[0].n_gt = 4;
    s[1].n_pred = 8;
    s[1].n_gt = 4;
    CHECK(n_ratio(std::span<const PairScore>(s.data(), 1)) == 1.0);
    CHECK(n_ratio(std::span<const PairScore>(s.data() + 1, 1)) == 2.0);
    CHECK(n_ratio(s) == 1.5);
    s[1].failed = true;
    CHECK(n_ratio(s) == 0.5);
}

TEST_CASE("ap_ar") {
    const auto t = MetricsConfig::default_thresholds();
    REQUIRE(t.size() == 10);
    CHECK(t.front() == 0.5);
    CHECK(t.back() == 0.95);

    const std::vector<double> perfect(5, 1.0);
    CHECK(ap_ar(perfect, t).ap == 1.0);
    CHECK(ap_ar(perfect, t).ar == 1.0);
    const std::vector<double> sixty(5, 0.6);
    CHECK(ap_ar(sixty, t).ap == doctest::Approx(0.3));
    CHECK(ap_ar(sixty, t).ap50 == 1.0);
    CHECK(ap_ar(sixty, t).ap75 == 0.0);
    const std::vector<double> failed(5, 0.0);
    CHECK(ap_ar(failed, t).ap == 0.0);
    CHECK_THROWS_AS(ap_ar(std::vector<double>{}, t), Error);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(0, 1);
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v(7);
        for (double& x : v) x = u(rng);
        const ApAr r = ap_ar(v, t);
        CHECK(r.ap <= r.ap50);
        CHECK(r.ar <= r.ar50);
        CHECK(r.ap75 <= r.ap50);
    }
}

TEST_CASE("score_pair and summarize") {
    const MetricsConfig cfg;
    const EvalPair same{"a", octagon(), octagon(), true};
    const PairScore s = score_pair(same, cfg);
    CHECK(s.iou == 1.0);
    CHECK(s.mta_deg == 0.0);
    CHECK(s.c_iou == 1.0);
    const MetricsRow row = summarize("none", std::span<const PairScore>(&s, 1), std::span<const EvalPair>(&same, 1), cfg);
    CHECK(row.apar.ap == 1.0);
    CHECK(row.apar.ar == 1.0);
    CHECK(row.iou == 1.0);
    CHECK(row.c_iou == 1.0);
    CHECK(row.mta_deg == 0.0);
    CHECK(row.n_ratio == 1.0);

    const EvalPair fail{"b", std::nullopt, octagon(), false};
    const PairScore f = score_pair(fail, cfg);
    CHECK(f.failed);
    CHECK(f.iou == 0.0);
    CHECK(f.mta_deg == 90.0);
    CHECK(f.c_iou == 0.0);

    const std::vector<PairScore> both{s, f};
    const std::vector<EvalPair> pairs{same, fail};
    const MetricsRow mixed = summarize(2, both, pairs, cfg);
    CHECK(mixed.iou == 0.5);
    CHECK(mixed.n_failed == 1);
    CHECK(mixed.n_unterminated == 1);
    CHECK(mixed.mta_median_deg == 45.0);

    const nlohmann::json doc = metrics_document({{"seed", 1}}, std::vector<MetricsRow>{row, mixed});
    CHECK(doc["version"] == 1);
    CHECK(doc["rows"].size() == 2);
    for (const char* key : {"level", "ap", "ap50", "ap75", "ar", "ar50", "ar75", "iou", "mta_deg", "n_ratio",
                            "c_iou", "n_samples"}) {
        CHECK(doc["rows"][0].contains(key));
    }
    CHECK(doc["rows"][1]["level"] == 2);
}
