#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>

namespace euprint {

/// UTC instant with millisecond resolution.
using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

// ISO-8601 UTC, e.g. "2021-02-07T00:00:00Z" or "2021-02-07T00:00:00.250Z".
// The fractional part is written only when non-zero so that whole-second
// stamps survive a parse/format round trip unchanged.
std::string format_timestamp(Timestamp t);
std::optional<Timestamp> parse_timestamp(std::string_view text);

inline double days_between(Timestamp a, Timestamp b) {
    using namespace std::chrono;
    return duration<double, std::ratio<86400>>(b - a).count();
}

inline Timestamp add_hours(Timestamp t, double hours) {
    using namespace std::chrono;
    return t + duration_cast<milliseconds>(duration<double, std::ratio<3600>>(hours));
}

}  // namespace euprint
