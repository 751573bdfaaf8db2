#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace polygonizer {

enum class ErrorCode {
    InvalidRing,
    DegenerateRing,
    OutOfRange,
    MalformedSequence,
    TooFewVertices,
    Shape,
    SequenceOverflow,
    EmptyKeys,
    TargetOutOfRange,
    NonScalarOutput,
    Generation,
    Schema,
    Io,
    Usage,
    GridMismatch,
    InvalidArgument,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::InvalidRing: return "invalid-ring";
        case ErrorCode::DegenerateRing: return "degenerate-ring";
        case ErrorCode::OutOfRange: return "out-of-range";
        case ErrorCode::MalformedSequence: return "malformed-sequence";
        case ErrorCode::TooFewVertices: return "too-few-vertices";
        case ErrorCode::Shape: return "shape";
        case ErrorCode::SequenceOverflow: return "sequence-overflow";
        case ErrorCode::EmptyKeys: return "empty-keys";
        case ErrorCode::TargetOutOfRange: return "target-out-of-range";
        case ErrorCode::NonScalarOutput: return "non-scalar-output";
        case ErrorCode::Generation: return "generation";
        case ErrorCode::Schema: return "schema";
        case ErrorCode::Io: return "io";
        case ErrorCode::Usage: return "usage";
        case ErrorCode::GridMismatch: return "grid-mismatch";
        case ErrorCode::InvalidArgument: return "invalid-argument";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace polygonizer
