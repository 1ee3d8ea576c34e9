#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace euprint {

enum class ErrorCode {
    LengthMismatch,
    NonFiniteTiming,
    NegativeTiming,
    InvalidConfig,
    MalformedDocument,
    SchemaViolation,
    EmptyDataset,
    SingleClassDataset,
    DimensionMismatch,
    InsufficientSamplesPerClass,
    ZeroBaseRate,
    ShapeMismatch,
    NoValidTriplets,
    InsufficientData,
    EmptyGallery,
    EmptyPopulation,
    UntrainedModel,
    InsufficientPairs,
    InsufficientCollections,
    SpanTooShort,
    CorruptLine,
    StoreWriteFailure,
    BodyTooLarge,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Exception carrying a machine-readable reason code.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace euprint
