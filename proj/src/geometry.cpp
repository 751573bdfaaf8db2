#include "polygonizer/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "polygonizer/error.hpp"

namespace polygonizer {

namespace {

void require_ring(const PolygonRing& ring) {
    if (ring.size() < 3) {
        throw Error(ErrorCode::InvalidRing,
                    "ring has " + std::to_string(ring.size()) + " vertices, need at least 3");
    }
}

double cross(Point2 o, Point2 a, Point2 b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

int orientation(Point2 o, Point2 a, Point2 b) {
    const double c = cross(o, a, b);
    return (c > 0.0) - (c < 0.0);
}

bool on_segment(Point2 a, Point2 b, Point2 p) {
    return std::min(a.x, b.x) <= p.x && p.x <= std::max(a.x, b.x) && std::min(a.y, b.y) <= p.y &&
           p.y <= std::max(a.y, b.y);
}

bool segments_intersect(Point2 a, Point2 b, Point2 c, Point2 d) {
    const int o1 = orientation(a, b, c);
    const int o2 = orientation(a, b, d);
    const int o3 = orientation(c, d, a);
    const int o4 = orientation(c, d, b);
    if (o1 != o2 && o3 != o4) return true;
    if (o1 == 0 && on_segment(a, b, c)) return true;
    if (o2 == 0 && on_segment(a, b, d)) return true;
    if (o3 == 0 && on_segment(c, d, a)) return true;
    if (o4 == 0 && on_segment(c, d, b)) return true;
    return false;
}

bool lex_less(Point2 a, Point2 b) { return a.y < b.y || (a.y == b.y && a.x < b.x); }

}  // namespace

std::size_t BinaryMask::popcount() const {
    return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

double signed_area(const PolygonRing& ring) {
    require_ring(ring);
    const auto& v = ring.vertices;
    double sum = 0.0;
    for (std::size_t i = 0, n = v.size(); i < n; ++i) {
        const Point2& a = v[i];
        const Point2& b = v[(i + 1) % n];
        sum += a.x * b.y - b.x * a.y;
    }
    return 0.5 * sum;
}

double perimeter(const PolygonRing& ring) {
    double total = 0.0;
    const auto& v = ring.vertices;
    for (std::size_t i = 0, n = v.size(); i < n; ++i) {
        const Point2& a = v[i];
        const Point2& b = v[(i + 1) % n];
        total += std::hypot(b.x - a.x, b.y - a.y);
    }
    return total;
}

BoundingBox bounding_box(const PolygonRing& ring) {
    require_ring(ring);
    BoundingBox box{ring.vertices[0].x, ring.vertices[0].y, ring.vertices[0].x,
                    ring.vertices[0].y};
    for (const Point2& p : ring.vertices) {
        box.min_x = std::min(box.min_x, p.x);
        box.min_y = std::min(box.min_y, p.y);
        box.max_x = std::max(box.max_x, p.x);
        box.max_y = std::max(box.max_y, p.y);
    }
    return box;
}

bool is_simple(const PolygonRing& ring) {
    const auto& v = ring.vertices;
    const std::size_t n = v.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i) {
        if (v[i] == v[(i + 1) % n]) return false;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const Point2 a = v[i];
        const Point2 b = v[(i + 1) % n];
        for (std::size_t j = i + 1; j < n; ++j) {
            const Point2 c = v[j];
            const Point2 d = v[(j + 1) % n];
            const bool adjacent_next = j == i + 1;
            const bool adjacent_wrap = i == 0 && j == n - 1;
            if (adjacent_next || adjacent_wrap) {
                // Adjacent edges share one endpoint; they may only overlap
                // there, so a collinear fold-back is an intersection.
                const Point2 shared = adjacent_next ? b : a;
                const Point2 p = adjacent_next ? a : b;
                const Point2 q = adjacent_next ? d : c;
                if (orientation(p, shared, q) == 0) {
                    const double dot =
                        (p.x - shared.x) * (q.x - shared.x) + (p.y - shared.y) * (q.y - shared.y);
                    if (dot > 0.0) return false;
                }
                continue;
            }
            if (segments_intersect(a, b, c, d)) return false;
        }
    }
    return true;
}

bool is_canonical(const PolygonRing& ring) {
    if (ring.size() < 3) return false;
    if (signed_area(ring) <= 0.0) return false;
    const auto& v = ring.vertices;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (v[i] == v[(i + 1) % v.size()]) return false;
        if (i > 0 && !lex_less(v[0], v[i])) return false;
    }
    return true;
}

PolygonRing dedupe_consecutive(const PolygonRing& ring) {
    PolygonRing out;
    out.vertices.reserve(ring.size());
    for (const Point2& p : ring.vertices) {
        if (out.vertices.empty() || !(out.vertices.back() == p)) out.vertices.push_back(p);
    }
    while (out.vertices.size() > 1 && out.vertices.front() == out.vertices.back()) {
        out.vertices.pop_back();
    }
    return out;
}

PolygonRing canonicalize(const PolygonRing& ring) {
    PolygonRing out = dedupe_consecutive(ring);
    require_ring(out);
    const double area = signed_area(out);
    if (std::abs(area) < kDegenerateArea) {
        throw Error(ErrorCode::DegenerateRing, "ring has zero area");
    }
    if (area < 0.0) std::reverse(out.vertices.begin(), out.vertices.end());
    const auto first = std::min_element(out.vertices.begin(), out.vertices.end(), lex_less);
    std::rotate(out.vertices.begin(), first, out.vertices.end());
    return out;
}

bool contains(const PolygonRing& ring, Point2 p) {
    const auto& v = ring.vertices;
    bool inside = false;
    for (std::size_t i = 0, n = v.size(), j = n - 1; i < n; j = i++) {
        const Point2 a = v[j];
        const Point2 b = v[i];
        if ((a.y > p.y) != (b.y > p.y)) {
            const double x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if (x > p.x) inside = !inside;
        }
    }
    return inside;
}

BinaryMask rasterize(const PolygonRing& ring, std::size_t resolution) {
    return rasterize(ring, resolution, resolution);
}

BinaryMask rasterize(const PolygonRing& ring, std::size_t width, std::size_t height) {
    require_ring(ring);
    if (width == 0 || height == 0) {
        throw Error(ErrorCode::InvalidArgument, "raster size must be positive");
    }
    BinaryMask mask;
    mask.width = width;
    mask.height = height;
    mask.bits.assign(width * height, 0);
    for (const Point2& p : ring.vertices) {
        if (p.x < 0.0 || p.y < 0.0 || p.x > static_cast<double>(width) ||
            p.y > static_cast<double>(height)) {
            mask.clipped = true;
        }
    }

    const auto& v = ring.vertices;
    const std::size_t n = v.size();
    std::vector<double> xs;
    xs.reserve(n);
    for (std::size_t row = 0; row < height; ++row) {
        const double y = static_cast<double>(row) + 0.5;
        xs.clear();
        for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
            const Point2 a = v[j];
            const Point2 b = v[i];
            // Same half-open crossing rule as contains().
            if ((a.y > y) != (b.y > y)) {
                xs.push_back(a.x + (y - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        std::sort(xs.begin(), xs.end());
        const double w = static_cast<double>(width);
        for (std::size_t k = 0; k + 1 < xs.size(); k += 2) {
            // Pixel centers with x0 <= j + 0.5 < x1.
            const double lo = std::clamp(std::ceil(xs[k] - 0.5), 0.0, w);
            const double hi = std::clamp(std::ceil(xs[k + 1] - 0.5), 0.0, w);
            for (auto col = static_cast<std::size_t>(lo); col < static_cast<std::size_t>(hi);
                 ++col) {
                mask.bits[row * width + col] = 1;
            }
        }
    }
    return mask;
}

std::pair<double, double> cos_sin_deg(double degrees) {
    const double turns = degrees / 90.0;
    if (turns == std::floor(turns) && std::abs(turns) < 1e15) {
        static constexpr double kCos[4] = {1, 0, -1, 0};
        static constexpr double kSin[4] = {0, 1, 0, -1};
        const auto q = static_cast<std::size_t>(((static_cast<long long>(turns) % 4) + 4) % 4);
        return {kCos[q], kSin[q]};
    }
    const double rad = degrees * std::numbers::pi / 180.0;
    return {std::cos(rad), std::sin(rad)};
}

PolygonRing rotate_ring(const PolygonRing& ring, double degrees, Point2 center) {
    const auto [c, s] = cos_sin_deg(degrees);
    PolygonRing out;
    out.vertices.reserve(ring.size());
    for (const Point2& p : ring.vertices) {
        const double dx = p.x - center.x;
        const double dy = p.y - center.y;
        out.vertices.push_back({center.x + dx * c - dy * s, center.y + dx * s + dy * c});
    }
    return out;
}

PolygonRing scale_translate(const PolygonRing& ring, double scale, Point2 offset) {
    PolygonRing out;
    out.vertices.reserve(ring.size());
    for (const Point2& p : ring.vertices) {
        out.vertices.push_back({p.x * scale + offset.x, p.y * scale + offset.y});
    }
    return out;
}

}  // namespace polygonizer
