#pragma once

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "euprint/error.hpp"
#include "euprint/timestamp.hpp"

namespace euprint {

enum class TimingMethod { Onscreen, Offscreen, GpuTimer };

enum class StallOperator { Sin, Mul, Sinh, Exp2, Pow, Atanh, Acosh, Sqrt, Fract, Log2, Tanh };

std::string_view to_string(TimingMethod m);
std::string_view to_string(StallOperator op);
std::optional<TimingMethod> parse_timing_method(std::string_view s);
std::optional<StallOperator> parse_stall_operator(std::string_view s);

/// Operators that execute on the shared advanced-math units.
bool uses_advanced_math(StallOperator op);

struct CollectorConfig {
    TimingMethod method = TimingMethod::Offscreen;
    StallOperator op = StallOperator::Sinh;
    int point_count = 10;
    int iterations_per_point = 1;
    // Offscreen/GPU only: iterate every stall subset of the points.
    bool subset_mode = true;
    int stall_loop_length = 2000;

    std::size_t expected_length() const;

    /// Throws Error(InvalidConfig) when an invariant is broken.
    void validate() const;

    friend bool operator==(const CollectorConfig&, const CollectorConfig&) = default;
};

/// Configuration used by the in-the-wild collections: sinh operator, all
/// 2^10 subsets of ten points, offscreen timing.
CollectorConfig wild_collector_config();

struct Trace {
    CollectorConfig config;
    std::vector<double> timings;  // milliseconds
    Timestamp collected_at{};
    std::string client_id;
    std::string method_reported;  // WebGL renderer string

    friend bool operator==(const Trace&, const Trace&) = default;
};

struct TraceValidation {
    bool ok = true;
    std::optional<ErrorCode> reason;
    std::string detail;

    explicit operator bool() const { return ok; }
};

TraceValidation validate_trace(const Trace& t);

inline constexpr std::size_t kMatrixSide = 32;
inline constexpr std::size_t kPreprocessedLength = kMatrixSide * kMatrixSide;

/// Standardized 32x32 matrix, row-major.
struct PreprocessedTrace {
    std::array<double, kPreprocessedLength> values{};

    double at(std::size_t row, std::size_t col) const { return values[row * kMatrixSide + col]; }
    std::span<const double> flat() const { return values; }
};

PreprocessedTrace preprocess(std::span<const double> timings);
inline PreprocessedTrace preprocess(const Trace& t) { return preprocess(t.timings); }

// Deterministic browser attributes collected alongside the traces, in
// canonical order.
inline constexpr std::array<std::string_view, 14> kAttributeKeys = {
    "cookies_enabled",
    "session_storage",
    "http_accept",
    "http_accept_encoding",
    "http_accept_language",
    "user_agent",
    "dnt",
    "platform",
    "plugins",
    "screen_width",
    "screen_height",
    "timezone",
    "webgl_vendor",
    "webgl_renderer",
};

using AttributeMap = std::map<std::string, std::string>;

inline constexpr std::size_t kTracesPerRecord = 7;

struct FingerprintRecord {
    std::string client_id;
    Timestamp collected_at{};
    AttributeMap attributes;
    std::vector<Trace> traces;
    std::optional<std::string> true_device;

    const std::string& attribute(std::string_view key) const;

    friend bool operator==(const FingerprintRecord&, const FingerprintRecord&) = default;
};

/// Throws Error(SchemaViolation) or a trace validation code.
void validate_record(const FingerprintRecord& r);

}  // namespace euprint
