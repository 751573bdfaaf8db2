#pragma once

#include <cstddef>
#include <cstdint>
#include <utility>
#include <vector>

namespace polygonizer {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

// Implicitly closed vertex list in pixel coordinates. The closing edge from
// the last vertex back to the first is never stored.
struct PolygonRing {
    std::vector<Point2> vertices;

    std::size_t size() const { return vertices.size(); }
    friend bool operator==(const PolygonRing&, const PolygonRing&) = default;
};

struct BoundingBox {
    double min_x = 0.0;
    double min_y = 0.0;
    double max_x = 0.0;
    double max_y = 0.0;

    double width() const { return max_x - min_x; }
    double height() const { return max_y - min_y; }
};

// Row-major occupancy grid. `clipped` records that some ring coordinate fell
// outside the raster frame.
struct BinaryMask {
    std::size_t width = 0;
    std::size_t height = 0;
    std::vector<std::uint8_t> bits;
    bool clipped = false;

    bool at(std::size_t row, std::size_t col) const { return bits[row * width + col] != 0; }
    std::size_t popcount() const;
};

inline constexpr double kDegenerateArea = 1e-9;

/// Shoelace area; positive for counter-clockwise rings. Throws InvalidRing
/// for fewer than three vertices.
double signed_area(const PolygonRing& ring);
double perimeter(const PolygonRing& ring);
BoundingBox bounding_box(const PolygonRing& ring);

/// True when no two edges intersect other than adjacent edges sharing their
/// common endpoint.
bool is_simple(const PolygonRing& ring);

bool is_canonical(const PolygonRing& ring);

/// Drops consecutive duplicates, including a trailing copy of the first vertex.
PolygonRing dedupe_consecutive(const PolygonRing& ring);

/// Counter-clockwise orientation, first vertex is the minimum by (y, x).
/// Consecutive duplicates are removed first. Idempotent.
PolygonRing canonicalize(const PolygonRing& ring);

/// Even-odd membership of a point.
bool contains(const PolygonRing& ring, Point2 p);

/// Scanline even-odd fill sampled at pixel centers (j + 0.5, i + 0.5).
BinaryMask rasterize(const PolygonRing& ring, std::size_t resolution);
BinaryMask rasterize(const PolygonRing& ring, std::size_t width, std::size_t height);

/// Counter-clockwise rotation (in the x-right, y-up sense of signed_area)
/// about `center`.
/// (cos, sin) of an angle in degrees; exact at multiples of 90.
std::pair<double, double> cos_sin_deg(double degrees);

PolygonRing rotate_ring(const PolygonRing& ring, double degrees, Point2 center);

/// p -> p * scale + offset, applied to every vertex.
PolygonRing scale_translate(const PolygonRing& ring, double scale, Point2 offset);

}  // namespace polygonizer
