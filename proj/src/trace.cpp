#include "euprint/trace.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace euprint {

std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::LengthMismatch: return "LengthMismatch";
        case ErrorCode::NonFiniteTiming: return "NonFiniteTiming";
        case ErrorCode::NegativeTiming: return "NegativeTiming";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::MalformedDocument: return "MalformedDocument";
        case ErrorCode::SchemaViolation: return "SchemaViolation";
        case ErrorCode::EmptyDataset: return "EmptyDataset";
        case ErrorCode::SingleClassDataset: return "SingleClassDataset";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::InsufficientSamplesPerClass: return "InsufficientSamplesPerClass";
        case ErrorCode::ZeroBaseRate: return "ZeroBaseRate";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::NoValidTriplets: return "NoValidTriplets";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::EmptyGallery: return "EmptyGallery";
        case ErrorCode::EmptyPopulation: return "EmptyPopulation";
        case ErrorCode::UntrainedModel: return "UntrainedModel";
        case ErrorCode::InsufficientPairs: return "InsufficientPairs";
        case ErrorCode::InsufficientCollections: return "InsufficientCollections";
        case ErrorCode::SpanTooShort: return "SpanTooShort";
        case ErrorCode::CorruptLine: return "CorruptLine";
        case ErrorCode::StoreWriteFailure: return "StoreWriteFailure";
        case ErrorCode::BodyTooLarge: return "BodyTooLarge";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

namespace {

constexpr std::array<std::pair<TimingMethod, std::string_view>, 3> kMethods = {{
    {TimingMethod::Onscreen, "onscreen"},
    {TimingMethod::Offscreen, "offscreen"},
    {TimingMethod::GpuTimer, "gpu"},
}};

constexpr std::array<std::pair<StallOperator, std::string_view>, 11> kOperators = {{
    {StallOperator::Sin, "sin"},
    {StallOperator::Mul, "mul"},
    {StallOperator::Sinh, "sinh"},
    {StallOperator::Exp2, "exp2"},
    {StallOperator::Pow, "pow"},
    {StallOperator::Atanh, "atanh"},
    {StallOperator::Acosh, "acosh"},
    {StallOperator::Sqrt, "sqrt"},
    {StallOperator::Fract, "fract"},
    {StallOperator::Log2, "log2"},
    {StallOperator::Tanh, "tanh"},
}};

}  // namespace

std::string_view to_string(TimingMethod m) {
    for (const auto& [k, v] : kMethods)
        if (k == m) return v;
    return "?";
}

std::string_view to_string(StallOperator op) {
    for (const auto& [k, v] : kOperators)
        if (k == op) return v;
    return "?";
}

std::optional<TimingMethod> parse_timing_method(std::string_view s) {
    for (const auto& [k, v] : kMethods)
        if (v == s) return k;
    return std::nullopt;
}

std::optional<StallOperator> parse_stall_operator(std::string_view s) {
    for (const auto& [k, v] : kOperators)
        if (v == s) return k;
    return std::nullopt;
}

bool uses_advanced_math(StallOperator op) {
    switch (op) {
        case StallOperator::Mul:
        case StallOperator::Fract:
        case StallOperator::Sqrt:
            return false;
        default:
            return true;
    }
}

std::size_t CollectorConfig::expected_length() const {
    if (subset_mode) return std::size_t{1} << point_count;
    return std::size_t(point_count) * std::size_t(iterations_per_point);
}

void CollectorConfig::validate() const {
    if (point_count <= 0) throw Error(ErrorCode::InvalidConfig, "point_count must be positive");
    if (iterations_per_point <= 0)
        throw Error(ErrorCode::InvalidConfig, "iterations_per_point must be positive");
    if (stall_loop_length <= 0)
        throw Error(ErrorCode::InvalidConfig, "stall_loop_length must be positive");
    if (subset_mode && method == TimingMethod::Onscreen)
        throw Error(ErrorCode::InvalidConfig, "subset mode requires offscreen or GPU timing");
    if (subset_mode && point_count > 20)
        throw Error(ErrorCode::InvalidConfig, "subset mode supports at most 20 points");
}

CollectorConfig wild_collector_config() {
    return CollectorConfig{TimingMethod::Offscreen, StallOperator::Sinh, 10, 1, true, 2000};
}

TraceValidation validate_trace(const Trace& t) {
    const std::size_t expected = t.config.expected_length();
    if (t.timings.size() != expected) {
        return {false, ErrorCode::LengthMismatch,
                "expected " + std::to_string(expected) + " timings, got " +
                    std::to_string(t.timings.size())};
    }
    for (std::size_t i = 0; i < t.timings.size(); ++i) {
        if (!std::isfinite(t.timings[i]))
            return {false, ErrorCode::NonFiniteTiming, "timing " + std::to_string(i)};
    }
    for (std::size_t i = 0; i < t.timings.size(); ++i) {
        if (t.timings[i] < 0.0)
            return {false, ErrorCode::NegativeTiming, "timing " + std::to_string(i)};
    }
    return {};
}

PreprocessedTrace preprocess(std::span<const double> timings) {
    if (timings.size() != kPreprocessedLength) {
        throw Error(ErrorCode::LengthMismatch,
                    "preprocess needs 1024 timings, got " + std::to_string(timings.size()));
    }
    const double n = double(timings.size());
    const double mean = std::accumulate(timings.begin(), timings.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : timings) ss += (v - mean) * (v - mean);
    const double sd = std::sqrt(ss / n);

    PreprocessedTrace out;
    if (!(sd > 0.0) || !std::isfinite(sd)) return out;  // constant trace: all zeros
    for (std::size_t i = 0; i < timings.size(); ++i) out.values[i] = (timings[i] - mean) / sd;
    return out;
}

const std::string& FingerprintRecord::attribute(std::string_view key) const {
    static const std::string empty;
    const auto it = attributes.find(std::string(key));
    return it == attributes.end() ? empty : it->second;
}

void validate_record(const FingerprintRecord& r) {
    if (r.traces.size() != kTracesPerRecord) {
        throw Error(ErrorCode::SchemaViolation,
                    "record needs exactly 7 traces, got " + std::to_string(r.traces.size()));
    }
    for (const auto& t : r.traces) {
        if (!(t.config == r.traces.front().config))
            throw Error(ErrorCode::SchemaViolation, "traces must share one collector config");
        t.config.validate();
        if (auto v = validate_trace(t); !v) throw Error(*v.reason, v.detail);
    }
    for (auto key : kAttributeKeys) {
        if (!r.attributes.contains(std::string(key)))
            throw Error(ErrorCode::SchemaViolation, "missing attribute " + std::string(key));
    }
    if (r.attributes.size() != kAttributeKeys.size())
        throw Error(ErrorCode::SchemaViolation, "unknown attribute key");
}

}  // namespace euprint
