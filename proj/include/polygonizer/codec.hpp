#pragma once

#include <cstdint>
#include <vector>

#include "polygonizer/geometry.hpp"

namespace polygonizer {

enum class TokenDim : std::uint8_t { X = 0, Y = 1, Special = 2 };

inline constexpr int kNumTokenDims = 3;

// Shared coordinate vocabulary for both axes: ids [0, D) are pixel bins,
// followed by <s> and </s>.
class TokenVocabulary {
public:
    explicit TokenVocabulary(int grid_size);

    int grid_size() const { return grid_size_; }
    int start_id() const { return grid_size_; }
    int stop_id() const { return grid_size_ + 1; }
    int vocab_size() const { return grid_size_ + 2; }
    bool is_coordinate(int token) const { return token >= 0 && token < grid_size_; }

private:
    int grid_size_;
};

struct TokenSequence {
    std::vector<int> tokens;
    std::vector<TokenDim> dims;
    std::vector<int> positions;

    std::size_t size() const { return tokens.size(); }
    friend bool operator==(const TokenSequence&, const TokenSequence&) = default;
};

/// Dimension of the token fed to the decoder at `position`. Stop tokens are
/// never fed back, so every position past 0 is a coordinate.
constexpr TokenDim input_dim(int position) {
    if (position == 0) return TokenDim::Special;
    return position % 2 == 1 ? TokenDim::X : TokenDim::Y;
}

/// Fills dims/positions for a raw token list. Start and stop ids map to
/// Special; everything else follows input_dim().
TokenSequence make_sequence(std::vector<int> tokens, const TokenVocabulary& vocab);

TokenSequence encode_polygon(const PolygonRing& ring, const TokenVocabulary& vocab);

struct DecodedRing {
    PolygonRing ring;
    bool terminated = true;
};

DecodedRing decode_tokens(const TokenSequence& seq, const TokenVocabulary& vocab);

/// Largest distance between a vertex and the center of its coordinate bin.
double roundtrip_error(const PolygonRing& ring, const TokenVocabulary& vocab);

}  // namespace polygonizer
