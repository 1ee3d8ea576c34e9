#include <doctest.h>

#include <cmath>
#include <limits>
#include <random>
#include <sstream>

#include <json.hpp>

#include "euprint/record_io.hpp"
#include "euprint/stats.hpp"
#include "euprint/trace.hpp"
#include "fixtures.hpp"

using namespace euprint;

namespace {

Trace wild_trace(std::size_t n, double fill = 1.0) {
    Trace t;
    t.config = wild_collector_config();
    t.timings.assign(n, fill);
    return t;
}

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an euprint::Error");
    return ErrorCode::Io;
}

}  // namespace

TEST_SUITE("trace-model") {

TEST_CASE("validate_trace accepts a full subset-mode trace") {
    CHECK(validate_trace(wild_trace(1024)).ok);
}

TEST_CASE("validate_trace reports the first failing invariant") {
    auto short_trace = wild_trace(1023);
    auto v = validate_trace(short_trace);
    CHECK_FALSE(v.ok);
    CHECK(v.reason == ErrorCode::LengthMismatch);

    auto nan_trace = wild_trace(1024);
    nan_trace.timings[17] = std::numeric_limits<double>::quiet_NaN();
    CHECK(validate_trace(nan_trace).reason == ErrorCode::NonFiniteTiming);

    auto inf_trace = wild_trace(1024);
    inf_trace.timings[0] = std::numeric_limits<double>::infinity();
    CHECK(validate_trace(inf_trace).reason == ErrorCode::NonFiniteTiming);

    auto neg = wild_trace(1024);
    neg.timings[5] = -0.001;
    CHECK(validate_trace(neg).reason == ErrorCode::NegativeTiming);
}

TEST_CASE("validate_trace acceptance set matches the invariants exactly") {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> len(1020, 1028);
    std::uniform_int_distribution<int> kind(0, 5);
    for (int i = 0; i < 500; ++i) {
        auto t = wild_trace(std::size_t(len(rng)), 2.0);
        const int k = kind(rng);
        if (k == 0 && !t.timings.empty()) t.timings.back() = -1.0;
        if (k == 1 && !t.timings.empty()) t.timings.front() = std::nan("");
        bool expected = t.timings.size() == 1024;
        for (double v : t.timings) expected = expected && std::isfinite(v) && v >= 0.0;
        CHECK(validate_trace(t).ok == expected);
    }
}

TEST_CASE("onscreen length is points times iterations") {
    CollectorConfig cfg;
    cfg.method = TimingMethod::Onscreen;
    cfg.subset_mode = false;
    cfg.point_count = 16;
    cfg.iterations_per_point = 11;
    CHECK(cfg.expected_length() == 176);
    cfg.subset_mode = true;
    CHECK(code_of([&] { cfg.validate(); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("preprocess lays out row-major") {
    std::vector<double> v(1024);
    for (int i = 0; i < 1024; ++i) v[std::size_t(i)] = i;
    const auto p = preprocess(v);
    const double m = stats::mean(v), sd = stats::stddev(v);
    for (std::size_t r = 0; r < 32; r += 7)
        for (std::size_t c = 0; c < 32; c += 5) CHECK(p.at(r, c) == doctest::Approx((double(32 * r + c) - m) / sd));
}

TEST_CASE("preprocess maps a constant trace to zeros") {
    std::vector<double> v(1024, 5.0);
    const auto p = preprocess(v);
    for (double x : p.values) CHECK(x == 0.0);
}

TEST_CASE("preprocess output is standardized and affine in the input") {
    std::mt19937_64 rng(11);
    std::lognormal_distribution<double> d(0.0, 0.7);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> v(1024);
        for (double& x : v) x = d(rng);
        const auto p = preprocess(v);
        // Independent recomputation in long double.
        long double s = 0, ss = 0;
        for (double x : p.values) s += x;
        const long double mean = s / 1024;
        for (double x : p.values) ss += (x - mean) * (x - mean);
        CHECK(std::fabs(double(mean)) < 1e-9);
        CHECK(std::fabs(std::sqrt(double(ss / 1024)) - 1.0) < 1e-9);
        CHECK(stats::pearson(v, p.flat()) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("preprocess rejects other lengths") {
    std::vector<double> v(1023, 1.0);
    CHECK(code_of([&] { preprocess(v); }) == ErrorCode::LengthMismatch);
}

TEST_CASE("timestamps round-trip bit-exactly") {
    const auto t = parse_timestamp("2021-02-07T00:00:00Z");
    REQUIRE(t);
    CHECK(format_timestamp(*t) == "2021-02-07T00:00:00Z");
    const auto frac = parse_timestamp("2021-02-07T13:45:10.250Z");
    REQUIRE(frac);
    CHECK(format_timestamp(*frac) == "2021-02-07T13:45:10.250Z");
    CHECK_FALSE(parse_timestamp("2021-02-07 00:00:00"));
    CHECK_FALSE(parse_timestamp("2021-13-07T00:00:00Z"));
    CHECK_FALSE(parse_timestamp("2021-02-07T00:00:00+02:00"));
}

TEST_CASE("record serialization round-trips") {
    std::mt19937_64 rng(3);
    for (int i = 0; i < 50; ++i) {
        const auto r = fixtures::random_record(rng, i);
        const auto line = serialize_record(r);
        CHECK(line.find('\n') == std::string::npos);
        CHECK(parse_record(line) == r);
    }
}

TEST_CASE("record with a whole-second timestamp keeps its text form") {
    std::mt19937_64 rng(4);
    auto r = fixtures::random_record(rng);
    r.collected_at = *parse_timestamp("2021-02-07T00:00:00Z");
    const auto j = nlohmann::json::parse(serialize_record(r));
    CHECK(j["collected_at"] == "2021-02-07T00:00:00Z");
    CHECK(parse_record(serialize_record(r)).collected_at == r.collected_at);
}

TEST_CASE("parse_record rejects schema violations") {
    std::mt19937_64 rng(5);
    const auto good = nlohmann::json::parse(serialize_record(fixtures::random_record(rng)));

    auto missing_timings = good;
    missing_timings["traces"][2].erase("timings");
    CHECK(code_of([&] { parse_record(missing_timings.dump()); }) == ErrorCode::SchemaViolation);

    auto unknown = good;
    unknown["extra"] = 1;
    CHECK(code_of([&] { parse_record(unknown.dump()); }) == ErrorCode::SchemaViolation);

    auto six = good;
    six["traces"].erase(6);
    CHECK(code_of([&] { parse_record(six.dump()); }) == ErrorCode::SchemaViolation);

    auto wrong_type = good;
    wrong_type["client_id"] = 5;
    CHECK(code_of([&] { parse_record(wrong_type.dump()); }) == ErrorCode::SchemaViolation);

    auto missing_attr = good;
    missing_attr["attributes"].erase("timezone");
    CHECK(code_of([&] { parse_record(missing_attr.dump()); }) == ErrorCode::SchemaViolation);

    auto short_trace = good;
    short_trace["traces"][0]["timings"].erase(0);
    // Trace-level failures surface as schema violations at the document boundary.
    CHECK(code_of([&] { parse_record(short_trace.dump()); }) == ErrorCode::SchemaViolation);

    CHECK(code_of([&] { parse_record("{\"client_id\": "); }) == ErrorCode::MalformedDocument);
    CHECK(code_of([&] { parse_record("[]"); }) == ErrorCode::MalformedDocument);
}

TEST_CASE("parse_record accepts a null true_device") {
    std::mt19937_64 rng(6);
    auto r = fixtures::random_record(rng);
    r.true_device.reset();
    const auto j = nlohmann::json::parse(serialize_record(r));
    CHECK(j["true_device"].is_null());
    CHECK_FALSE(parse_record(j.dump()).true_device.has_value());
}

TEST_CASE("read_corpus counts corrupt lines when asked to skip them") {
    std::mt19937_64 rng(8);
    std::stringstream ss;
    write_corpus(ss, {fixtures::random_record(rng), fixtures::random_record(rng)});
    ss << "{not json\n";
    const auto lenient = read_corpus(ss, true);
    CHECK(lenient.records.size() == 2);
    CHECK(lenient.corrupt_lines == 1);

    std::stringstream again(ss.str());
    CHECK(code_of([&] { read_corpus(again, false); }) == ErrorCode::MalformedDocument);
}

}  // TEST_SUITE
