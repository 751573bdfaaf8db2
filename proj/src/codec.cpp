#include "polygonizer/codec.hpp"

#include <cmath>
#include <string>

#include "polygonizer/error.hpp"

namespace polygonizer {

namespace {

int quantize(double value, int grid_size) {
    if (!(value >= 0.0 && value < static_cast<double>(grid_size))) {
        throw Error(ErrorCode::OutOfRange, "coordinate " + std::to_string(value) +
                                               " outside [0, " + std::to_string(grid_size) + ")");
    }
    return static_cast<int>(std::floor(value));
}

double bin_center(int bin) { return static_cast<double>(bin) + 0.5; }

}  // namespace

TokenVocabulary::TokenVocabulary(int grid_size) : grid_size_(grid_size) {
    if (grid_size < 8) {
        throw Error(ErrorCode::InvalidArgument,
                    "grid size must be at least 8, got " + std::to_string(grid_size));
    }
}

TokenSequence make_sequence(std::vector<int> tokens, const TokenVocabulary& vocab) {
    TokenSequence seq;
    seq.dims.reserve(tokens.size());
    seq.positions.reserve(tokens.size());
    for (std::size_t p = 0; p < tokens.size(); ++p) {
        const int t = tokens[p];
        const bool special = t == vocab.start_id() || t == vocab.stop_id();
        seq.dims.push_back(special ? TokenDim::Special : input_dim(static_cast<int>(p)));
        seq.positions.push_back(static_cast<int>(p));
    }
    seq.tokens = std::move(tokens);
    return seq;
}

TokenSequence encode_polygon(const PolygonRing& ring, const TokenVocabulary& vocab) {
    const PolygonRing canonical = canonicalize(ring);
    // Quantizing can merge vertices or move the lexicographic minimum, so the
    // bin-center ring is canonicalized again before emission.
    PolygonRing centers;
    centers.vertices.reserve(canonical.size());
    for (const Point2& p : canonical.vertices) {
        centers.vertices.push_back({bin_center(quantize(p.x, vocab.grid_size())),
                                    bin_center(quantize(p.y, vocab.grid_size()))});
    }
    const PolygonRing quantized = canonicalize(centers);

    std::vector<int> tokens;
    tokens.reserve(2 * quantized.size() + 2);
    tokens.push_back(vocab.start_id());
    for (const Point2& p : quantized.vertices) {
        tokens.push_back(static_cast<int>(std::floor(p.x)));
        tokens.push_back(static_cast<int>(std::floor(p.y)));
    }
    tokens.push_back(vocab.stop_id());
    return make_sequence(std::move(tokens), vocab);
}

DecodedRing decode_tokens(const TokenSequence& seq, const TokenVocabulary& vocab) {
    if (seq.tokens.empty() || seq.tokens.front() != vocab.start_id()) {
        throw Error(ErrorCode::MalformedSequence, "sequence does not begin with <s>");
    }
    DecodedRing out;
    out.terminated = false;
    std::vector<int> coords;
    for (std::size_t p = 1; p < seq.tokens.size(); ++p) {
        const int t = seq.tokens[p];
        if (t == vocab.stop_id()) {
            out.terminated = true;
            break;
        }
        if (!vocab.is_coordinate(t)) {
            throw Error(ErrorCode::MalformedSequence,
                        "token " + std::to_string(t) + " at position " + std::to_string(p) +
                            " is not a coordinate");
        }
        coords.push_back(t);
    }
    if (coords.size() % 2 != 0) {
        if (out.terminated) {
            throw Error(ErrorCode::MalformedSequence,
                        "odd number of coordinate tokens (" + std::to_string(coords.size()) + ")");
        }
        coords.pop_back();
    }
    PolygonRing ring;
    for (std::size_t i = 0; i + 1 < coords.size(); i += 2) {
        ring.vertices.push_back({bin_center(coords[i]), bin_center(coords[i + 1])});
    }
    ring = dedupe_consecutive(ring);
    if (ring.size() < 3) {
        throw Error(ErrorCode::TooFewVertices,
                    "decoded " + std::to_string(ring.size()) + " vertices, need at least 3");
    }
    out.ring = canonicalize(ring);
    return out;
}

double roundtrip_error(const PolygonRing& ring, const TokenVocabulary& vocab) {
    // Validates the ring exactly like encode_polygon does.
    (void)encode_polygon(ring, vocab);
    double worst = 0.0;
    for (const Point2& p : ring.vertices) {
        const double dx = p.x - bin_center(quantize(p.x, vocab.grid_size()));
        const double dy = p.y - bin_center(quantize(p.y, vocab.grid_size()));
        worst = std::max(worst, std::hypot(dx, dy));
    }
    return worst;
}

}  // namespace polygonizer
