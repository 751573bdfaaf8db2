#include "polygonizer/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "polygonizer/codec.hpp"
#include "polygonizer/error.hpp"

namespace polygonizer {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kMaxAttempts = 100;

double uniform(std::mt19937_64& rng, double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

void require(bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::InvalidArgument, "scene config: " + what);
}

bool in_range(const std::array<double, 2>& r) { return r[0] >= 0.0 && r[0] <= r[1] && r[1] <= 1.0; }

bool ring_in_frame(const PolygonRing& ring, double lo, double hi) {
    for (const Point2& p : ring.vertices) {
        if (p.x < lo || p.y < lo || p.x > hi || p.y > hi) return false;
    }
    return true;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

json parse_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Schema, path.string() + ": " + e.what());
    }
}

PolygonRing ring_from_json(const json& j) {
    PolygonRing ring;
    for (const auto& p : j) ring.vertices.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    return ring;
}

// Cuts a rectangle of size (a along the edge towards prev, b towards next) out
// of corner `p`, replacing it with three vertices.
void push_notch(std::vector<Point2>& out, Point2 prev, Point2 p, Point2 next, double cut_x, double cut_y) {
    auto toward = [](Point2 from, Point2 to, double len) {
        const double dx = to.x - from.x;
        const double dy = to.y - from.y;
        const double n = std::hypot(dx, dy);
        return Point2{dx / n * len, dy / n * len};
    };
    const bool prev_vertical = prev.x == p.x;
    const Point2 back = toward(p, prev, prev_vertical ? cut_y : cut_x);
    const Point2 fwd = toward(p, next, prev_vertical ? cut_x : cut_y);
    out.push_back({p.x + back.x, p.y + back.y});
    out.push_back({p.x + back.x + fwd.x, p.y + back.y + fwd.y});
    out.push_back({p.x + fwd.x, p.y + fwd.y});
}

}  // namespace

void SceneConfig::validate() const {
    require(image_size >= 16, "image_size must be at least 16");
    require(margin >= 1 && 2 * margin + 8 <= image_size, "margin leaves no room for a building");
    require(min_vertices >= 4 && min_vertices <= max_vertices && max_vertices <= 12,
            "vertex range must satisfy 4 <= min <= max <= 12");
    require(min_vertices % 2 == 0 || min_vertices < max_vertices,
            "vertex range must contain an even count");
    require(rectilinear_probability >= 0.0 && rectilinear_probability <= 1.0,
            "rectilinear_probability must lie in [0, 1]");
    require(min_extent > 0.0 && min_extent <= 1.0, "min_extent must lie in (0, 1]");
    require(in_range(foreground) && in_range(background), "intensity ranges must lie in [0, 1]");
    require(shadow_length[0] >= 0.0 && shadow_length[0] <= shadow_length[1], "bad shadow_length range");
    require(shadow_darkening >= 0.0 && shadow_darkening <= 1.0, "shadow_darkening must lie in [0, 1]");
    require(noise_sigma >= 0.0, "noise_sigma must be non-negative");
    require(tint >= 0.0 && tint <= 0.5, "tint must lie in [0, 0.5]");
}

void to_json(json& j, const SceneConfig& c) {
    j = json{{"image_size", c.image_size},
             {"min_vertices", c.min_vertices},
             {"max_vertices", c.max_vertices},
             {"margin", c.margin},
             {"rectilinear_probability", c.rectilinear_probability},
             {"min_extent", c.min_extent},
             {"foreground", c.foreground},
             {"background", c.background},
             {"shadow_length", c.shadow_length},
             {"shadow_azimuth_deg", c.shadow_azimuth_deg},
             {"shadow_darkening", c.shadow_darkening},
             {"noise_sigma", c.noise_sigma},
             {"tint", c.tint},
             {"seed", c.seed}};
}

void from_json(const json& j, SceneConfig& c) {
    const SceneConfig d;
    c.image_size = j.value("image_size", d.image_size);
    c.min_vertices = j.value("min_vertices", d.min_vertices);
    c.max_vertices = j.value("max_vertices", d.max_vertices);
    c.margin = j.value("margin", d.margin);
    c.rectilinear_probability = j.value("rectilinear_probability", d.rectilinear_probability);
    c.min_extent = j.value("min_extent", d.min_extent);
    c.foreground = j.value("foreground", d.foreground);
    c.background = j.value("background", d.background);
    c.shadow_length = j.value("shadow_length", d.shadow_length);
    c.shadow_azimuth_deg = j.value("shadow_azimuth_deg", d.shadow_azimuth_deg);
    c.shadow_darkening = j.value("shadow_darkening", d.shadow_darkening);
    c.noise_sigma = j.value("noise_sigma", d.noise_sigma);
    c.tint = j.value("tint", d.tint);
    c.seed = j.value("seed", d.seed);
}

std::mt19937_64 sample_rng(std::uint64_t seed, std::uint64_t index) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
    return std::mt19937_64(seq);
}

PolygonRing gen_rectilinear_ring(std::mt19937_64& rng, const SceneConfig& config) {
    config.validate();
    const int lo = config.margin;
    const int hi = config.image_size - 1 - config.margin;
    const int usable = hi - lo;
    const int min_side = std::max(6, static_cast<int>(std::lround(config.min_extent * usable)));
    const int min_n = config.min_vertices + config.min_vertices % 2;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        const int n = min_n + 2 * uniform_int(rng, 0, (config.max_vertices - min_n) / 2);
        const int w = uniform_int(rng, std::min(min_side, usable), usable);
        const int h = uniform_int(rng, std::min(min_side, usable), usable);
        const int x0 = uniform_int(rng, lo, hi - w);
        const int y0 = uniform_int(rng, lo, hi - h);
        const std::array<Point2, 4> corners{Point2{double(x0), double(y0)}, Point2{double(x0 + w), double(y0)},
                                            Point2{double(x0 + w), double(y0 + h)},
                                            Point2{double(x0), double(y0 + h)}};
        std::array<int, 4> order{0, 1, 2, 3};
        std::shuffle(order.begin(), order.end(), rng);
        std::array<bool, 4> notched{};
        for (int k = 0; k < (n - 4) / 2; ++k) notched[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])] = true;
        // Cuts stay below half of each side so notches never meet.
        const int max_cx = w / 2 - 1;
        const int max_cy = h / 2 - 1;
        if ((n > 4) && (max_cx < 2 || max_cy < 2)) continue;

        PolygonRing ring;
        for (std::size_t c = 0; c < 4; ++c) {
            const Point2 p = corners[c];
            if (!notched[c]) {
                ring.vertices.push_back(p);
                continue;
            }
            const double cx = uniform_int(rng, 2, max_cx);
            const double cy = uniform_int(rng, 2, max_cy);
            push_notch(ring.vertices, corners[(c + 3) % 4], p, corners[(c + 1) % 4], cx, cy);
        }
        for (Point2& p : ring.vertices) p = {p.x + 0.5, p.y + 0.5};
        ring = canonicalize(ring);
        if (static_cast<int>(ring.size()) == n && is_simple(ring)) return ring;
    }
    throw Error(ErrorCode::Generation, "no valid rectilinear ring after " + std::to_string(kMaxAttempts) +
                                           " attempts");
}

PolygonRing gen_building_ring(std::mt19937_64& rng, const SceneConfig& config) {
    if (std::bernoulli_distribution(config.rectilinear_probability)(rng)) {
        return gen_rectilinear_ring(rng, config);
    }
    const TokenVocabulary vocab(config.image_size);
    const double lo = config.margin;
    const double hi = config.image_size - config.margin;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        const PolygonRing base = gen_rectilinear_ring(rng, config);
        const BoundingBox box = bounding_box(base);
        const double angle = uniform(rng, 0.0, 90.0);
        const PolygonRing rotated = rotate_ring(
            base, angle, {(box.min_x + box.max_x) / 2.0, (box.min_y + box.max_y) / 2.0});
        if (!ring_in_frame(rotated, lo, hi)) continue;
        try {
            // Snap to bin centers so the ring is exactly representable as tokens.
            const PolygonRing snapped = decode_tokens(encode_polygon(rotated, vocab), vocab).ring;
            if (snapped.size() == base.size() && is_simple(snapped)) return snapped;
        } catch (const Error&) {
        }
    }
    throw Error(ErrorCode::Generation, "no valid rotated ring after " + std::to_string(kMaxAttempts) +
                                           " attempts");
}

Sample render_scene(const PolygonRing& ring, const SceneConfig& config, std::mt19937_64& rng) {
    const auto d = static_cast<std::size_t>(config.image_size);
    const BinaryMask roof = rasterize(ring, d);

    const double length = uniform(rng, config.shadow_length[0], config.shadow_length[1]);
    const double az = config.shadow_azimuth_deg * M_PI / 180.0;
    std::vector<std::uint8_t> shadow(d * d, 0);
    const int steps = static_cast<int>(std::ceil(length * 2.0));
    for (int k = 1; k <= steps; ++k) {
        const double f = length * k / steps;
        const BinaryMask m = rasterize(scale_translate(ring, 1.0, {f * std::cos(az), f * std::sin(az)}), d);
        for (std::size_t i = 0; i < shadow.size(); ++i) shadow[i] |= m.bits[i];
    }

    const double fg = uniform(rng, config.foreground[0], config.foreground[1]);
    const double bg = uniform(rng, config.background[0], std::min(config.background[1], fg));
    std::array<double, 3> roof_rgb{};
    std::array<double, 3> ground_rgb{};
    for (std::size_t c = 0; c < 3; ++c) {
        // Mild per-channel tint, never crossing the roof/ground ordering.
        roof_rgb[c] = std::clamp(fg + uniform(rng, -1.0, 1.0) * config.tint * (fg - bg), 0.0, 1.0);
        ground_rgb[c] = std::clamp(bg + uniform(rng, -1.0, 1.0) * config.tint * (fg - bg), 0.0, 1.0);
    }

    Sample s;
    s.ring = ring;
    s.provenance = Provenance::Synthetic;
    s.image = Image({3, d, d});
    std::normal_distribution<double> noise(0.0, config.noise_sigma);
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t i = 0; i < d * d; ++i) {
            double v = roof.bits[i] ? roof_rgb[c]
                       : shadow[i]  ? ground_rgb[c] * config.shadow_darkening
                                    : ground_rgb[c];
            if (config.noise_sigma > 0.0) v += noise(rng);
            s.image.data[c * d * d + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
        }
    }
    return s;
}

Dataset generate_dataset(const SceneConfig& config, std::size_t count) {
    config.validate();
    Dataset ds;
    ds.grid_size = config.image_size;
    ds.samples.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::mt19937_64 rng = sample_rng(config.seed, i);
        const PolygonRing ring = gen_building_ring(rng, config);
        Sample s = render_scene(ring, config, rng);
        char id[32];
        std::snprintf(id, sizeof id, "s%06zu", i);
        s.id = id;
        ds.samples.push_back(std::move(s));
    }
    return ds;
}

Padded pad_to_square(const Image& image, float fill) {
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    const std::size_t s = std::max(h, w);
    Padded out{Image({ch, s, s}, fill), {0.0, 0.0}};
    for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t y = 0; y < h; ++y)
            std::copy_n(image.data.begin() + static_cast<std::ptrdiff_t>((c * h + y) * w), w,
                        out.image.data.begin() + static_cast<std::ptrdiff_t>((c * s + y) * s));
    return out;
}

Image resize(const Image& image, std::size_t height, std::size_t width) {
    const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
    Image out({ch, height, width});
    const double sy = static_cast<double>(h) / static_cast<double>(height);
    const double sx = static_cast<double>(w) / static_cast<double>(width);
    for (std::size_t y = 0; y < height; ++y) {
        const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
        const auto y0 = static_cast<std::size_t>(fy);
        const std::size_t y1 = std::min(y0 + 1, h - 1);
        const double ty = fy - static_cast<double>(y0);
        for (std::size_t x = 0; x < width; ++x) {
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
            const auto x0 = static_cast<std::size_t>(fx);
            const std::size_t x1 = std::min(x0 + 1, w - 1);
            const double tx = fx - static_cast<double>(x0);
            for (std::size_t c = 0; c < ch; ++c) {
                const float* src = image.data.data() + c * h * w;
                const double top = src[y0 * w + x0] * (1 - tx) + src[y0 * w + x1] * tx;
                const double bottom = src[y1 * w + x0] * (1 - tx) + src[y1 * w + x1] * tx;
                out.data[(c * height + y) * width + x] = static_cast<float>(top * (1 - ty) + bottom * ty);
            }
        }
    }
    return out;
}

std::array<double, 3> channel_means(const Dataset& dataset) {
    std::array<double, 3> sum{};
    std::size_t n = 0;
    for (const Sample& s : dataset.samples) {
        const std::size_t plane = s.image.dim(1) * s.image.dim(2);
        for (std::size_t c = 0; c < 3; ++c) {
            for (std::size_t i = 0; i < plane; ++i) sum[c] += s.image.data[c * plane + i];
        }
        n += plane;
    }
    if (n == 0) return {0.5, 0.5, 0.5};
    for (double& v : sum) v /= static_cast<double>(n);
    return sum;
}

Image read_ppm(const fs::path& path) {
    const std::string bytes = read_file(path);
    std::size_t pos = 0;
    auto next_token = [&]() {
        while (pos < bytes.size()) {
            if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
                ++pos;
            } else {
                break;
            }
        }
        const std::size_t start = pos;
        while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos]))) ++pos;
        return bytes.substr(start, pos - start);
    };
    const std::string magic = next_token();
    if (magic != "P6") throw Error(ErrorCode::Io, path.string() + ": not a binary PPM (P6)");
    std::size_t w = 0, h = 0, maxval = 0;
    try {
        w = std::stoul(next_token());
        h = std::stoul(next_token());
        maxval = std::stoul(next_token());
    } catch (const std::exception&) {
        throw Error(ErrorCode::Io, path.string() + ": malformed PPM header");
    }
    if (maxval != 255 || w == 0 || h == 0) {
        throw Error(ErrorCode::Io, path.string() + ": only 8-bit PPM with non-zero size is supported");
    }
    ++pos;  // single whitespace before the raster
    if (bytes.size() < pos + w * h * 3) throw Error(ErrorCode::Io, path.string() + ": truncated PPM raster");
    Image img({3, h, w});
    for (std::size_t i = 0; i < w * h; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            img.data[c * w * h + i] = static_cast<unsigned char>(bytes[pos + i * 3 + c]) / 255.0f;
        }
    }
    return img;
}

void write_ppm(const fs::path& path, const Image& image) {
    const std::size_t h = image.dim(1), w = image.dim(2);
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    const std::size_t header = out.size();
    out.resize(header + w * h * 3);
    for (std::size_t i = 0; i < w * h; ++i) {
        for (std::size_t c = 0; c < 3; ++c) {
            const float v = std::clamp(image.data[c * w * h + i], 0.0f, 1.0f);
            out[header + i * 3 + c] = static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0f)));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f || !f.write(out.data(), static_cast<std::streamsize>(out.size()))) {
        throw Error(ErrorCode::Io, "cannot write " + path.string());
    }
}

void save_dataset(const Dataset& dataset, const fs::path& dir, const json& generator) {
    std::error_code ec;
    fs::create_directories(dir / "images", ec);
    if (ec) throw Error(ErrorCode::Io, "cannot create " + (dir / "images").string() + ": " + ec.message());
    json samples = json::array();
    for (const Sample& s : dataset.samples) {
        const std::string rel = "images/" + s.id + ".ppm";
        write_ppm(dir / rel, s.image);
        json ring = json::array();
        for (const Point2& p : s.ring.vertices) ring.push_back({p.x, p.y});
        samples.push_back({{"id", s.id},
                           {"image", rel},
                           {"ring", ring},
                           {"provenance", s.provenance == Provenance::Synthetic ? "synthetic" : "ingested"}});
    }
    json doc{{"version", 1}, {"grid_size", dataset.grid_size}, {"samples", samples}};
    if (!generator.is_null()) doc["generator"] = generator;
    std::ofstream f(dir / "annotations.json", std::ios::binary);
    f << doc.dump(1) << '\n';
    if (!f) throw Error(ErrorCode::Io, "cannot write " + (dir / "annotations.json").string());
}

Dataset load_dataset(const fs::path& dir) {
    const fs::path ann = dir / "annotations.json";
    const json doc = parse_json(ann);
    Dataset ds;
    std::vector<std::string> problems;
    try {
        if (doc.at("version").get<int>() != 1) {
            throw Error(ErrorCode::Schema, ann.string() + ": unsupported version " + doc.at("version").dump());
        }
        ds.grid_size = doc.at("grid_size").get<int>();
        const auto d = static_cast<std::size_t>(ds.grid_size);
        for (const json& js : doc.at("samples")) {
            Sample s;
            s.id = js.at("id").get<std::string>();
            const std::string prov = js.at("provenance").get<std::string>();
            if (prov != "synthetic" && prov != "ingested") {
                problems.push_back(s.id + ": unknown provenance '" + prov + "'");
                continue;
            }
            s.provenance = prov == "synthetic" ? Provenance::Synthetic : Provenance::Ingested;
            s.ring = ring_from_json(js.at("ring"));
            const fs::path img = dir / js.at("image").get<std::string>();
            if (!fs::exists(img)) {
                problems.push_back(s.id + ": missing image " + img.string());
                continue;
            }
            s.image = read_ppm(img);
            if (s.image.dim(1) != d || s.image.dim(2) != d) {
                problems.push_back(s.id + ": image is " + std::to_string(s.image.dim(2)) + "x" +
                                   std::to_string(s.image.dim(1)) + ", grid_size is " + std::to_string(d));
                continue;
            }
            if (s.ring.size() < 3 || !ring_in_frame(s.ring, 0.0, std::nextafter(double(d), 0.0))) {
                problems.push_back(s.id + ": ring missing or outside [0, grid_size)");
                continue;
            }
            ds.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Schema, ann.string() + ": " + e.what());
    }
    if (!problems.empty()) {
        std::string msg = ann.string() + ": " + std::to_string(problems.size()) + " bad sample(s)";
        for (const std::string& p : problems) msg += "; " + p;
        throw Error(ErrorCode::Io, msg);
    }
    return ds;
}

IngestReport load_coco_subset(const fs::path& annotation_path, const fs::path& image_dir,
                              const IngestConfig& config) {
    const json doc = parse_json(annotation_path);
    IngestReport report;
    report.dataset.grid_size = config.image_size;
    const auto d = static_cast<std::size_t>(config.image_size);
    const double top = std::nextafter(static_cast<double>(d), 0.0);
    try {
        std::map<long long, std::string> files;
        for (const json& im : doc.at("images")) files[im.at("id").get<long long>()] = im.at("file_name").get<std::string>();
        std::map<std::string, Image> cache;
        for (const json& an : doc.at("annotations")) {
            const std::string id = "coco-" + an.at("id").dump();
            const json& seg = an.at("segmentation");
            if (!seg.is_array() || seg.size() != 1) {
                ++report.skipped_multi_ring;
                report.problems.push_back(id + ": segmentation is not a single ring");
                continue;
            }
            const auto file = files.find(an.at("image_id").get<long long>());
            const fs::path path = file == files.end() ? fs::path() : image_dir / file->second;
            if (file == files.end() || !fs::exists(path)) {
                ++report.skipped_missing_image;
                report.problems.push_back(id + ": missing image " + path.string());
                continue;
            }
            auto cached = cache.find(path.string());
            if (cached == cache.end()) cached = cache.emplace(path.string(), read_ppm(path)).first;
            const Image& full = cached->second;
            const double iw = static_cast<double>(full.dim(2));
            const double ih = static_cast<double>(full.dim(1));

            const json& box = an.at("bbox");
            const double m = config.crop_margin;
            const auto x0 = static_cast<std::size_t>(std::clamp(std::floor(box.at(0).get<double>() - m), 0.0, iw - 1));
            const auto y0 = static_cast<std::size_t>(std::clamp(std::floor(box.at(1).get<double>() - m), 0.0, ih - 1));
            const auto x1 = static_cast<std::size_t>(
                std::clamp(std::ceil(box.at(0).get<double>() + box.at(2).get<double>() + m), double(x0 + 1), iw));
            const auto y1 = static_cast<std::size_t>(
                std::clamp(std::ceil(box.at(1).get<double>() + box.at(3).get<double>() + m), double(y0 + 1), ih));
            Image crop({3, y1 - y0, x1 - x0});
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t y = y0; y < y1; ++y)
                    for (std::size_t x = x0; x < x1; ++x)
                        crop.data[(c * (y1 - y0) + y - y0) * (x1 - x0) + x - x0] =
                            full.data[(c * full.dim(1) + y) * full.dim(2) + x];
            const Padded padded = pad_to_square(crop, 0.0f);
            const double scale = static_cast<double>(d) / static_cast<double>(padded.image.dim(1));

            const json& flat = seg.at(0);
            PolygonRing ring;
            for (std::size_t k = 0; k + 1 < flat.size(); k += 2) {
                const double x = (flat[k].get<double>() - static_cast<double>(x0) + padded.offset.x) * scale;
                const double y = (flat[k + 1].get<double>() - static_cast<double>(y0) + padded.offset.y) * scale;
                ring.vertices.push_back({std::clamp(x, 0.0, top), std::clamp(y, 0.0, top)});
            }
            try {
                ring = canonicalize(ring);
            } catch (const Error& e) {
                ++report.skipped_invalid;
                report.problems.push_back(id + ": " + e.what());
                continue;
            }
            Sample s;
            s.id = id;
            s.provenance = Provenance::Ingested;
            s.ring = std::move(ring);
            s.image = resize(padded.image, d, d);
            report.dataset.samples.push_back(std::move(s));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::Schema, annotation_path.string() + ": " + e.what());
    }
    return report;
}

}  // namespace polygonizer
