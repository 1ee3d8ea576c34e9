#include <doctest.h>

#include <algorithm>
#include <bit>
#include <map>
#include <cmath>
#include <set>

#include "euprint/forest.hpp"
#include "euprint/stats.hpp"
#include "euprint/synth.hpp"

using namespace euprint;

namespace {

DeviceProfile flat_profile(int eu_count = 24) {
    DeviceProfile p;
    p.device_id = "flat";
    p.device_class = "flat";
    p.eu_count = eu_count;
    p.eu_speed.assign(std::size_t(eu_count), 1.0);
    for (int i = 0; i < eu_count; ++i) p.am_unit_map.push_back(i / 3);
    p.operator_cost = default_operator_costs();
    p.within_noise_sigma = 0.0;
    return p;
}

std::vector<DeviceProfile> spread_profiles(int devices, double spread, double noise, std::uint64_t seed) {
    DeviceClassSpec spec;
    spec.name = "lab";
    spec.device_count = devices;
    spec.device_spread = spread;
    spec.within_noise_sigma = noise;
    Rng rng = derive_rng(seed, 99);
    return make_class_profiles(spec, rng);
}

double lab_accuracy(const std::vector<DeviceProfile>& profiles, int traces, std::uint64_t seed,
                    int trees = 40) {
    const auto data = sample_lab_dataset(profiles, wild_collector_config(), TimerModel{}, {}, traces, seed);
    ForestConfig cfg;
    cfg.n_trees = trees;
    cfg.seed = seed;
    return kfold_accuracy(FeatureMatrix::from_rows(data.traces), data.labels, cfg).mean;
}

}  // namespace

TEST_SUITE("synthdevice") {

TEST_CASE("deterministic dispatch is round-robin") {
    Rng rng(1);
    CHECK(dispatch(5, 24, {false}, rng) == 5);
    CHECK(dispatch(30, 24, {false}, rng) == 6);
    CHECK(dispatch(0, 24, {false}, rng) == 0);
}

TEST_CASE("randomized dispatch is reproducible and uniform") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(dispatch(i, 24, {true}, a) == dispatch(i, 24, {true}, b));

    Rng rng(2024);
    const int draws = 100000, k = 24;
    std::vector<int> counts(k, 0);
    for (int i = 0; i < draws; ++i) ++counts[std::size_t(dispatch(i, k, {true}, rng))];
    const double expected = double(draws) / k;
    double chi2 = 0.0;
    for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
    // Upper 1% point of chi-square with 23 degrees of freedom.
    CHECK(chi2 < 41.638);
}

TEST_CASE("zero-variance profile gives a flat trace") {
    TimerModel timer;
    timer.kind = TimerModel::Kind::MicrosecondExact;
    Rng rng(3);
    CollectorConfig cfg;
    cfg.method = TimingMethod::Onscreen;
    cfg.subset_mode = false;
    cfg.point_count = 16;
    cfg.iterations_per_point = 11;
    const auto t = sample_trace(flat_profile(), cfg, timer, {}, rng);
    REQUIRE(t.timings.size() == 176);
    for (double v : t.timings) CHECK(std::fabs(v - t.timings.front()) <= 1e-3);
}

TEST_CASE("the empty stall set costs nothing in subset mode") {
    TimerModel timer;
    timer.kind = TimerModel::Kind::MicrosecondExact;
    Rng rng(3);
    const auto t = sample_trace(flat_profile(), wild_collector_config(), timer, {}, rng);
    CHECK(t.timings[0] == 0.0);
    CHECK(*std::min_element(t.timings.begin() + 1, t.timings.end()) > 0.0);
}

TEST_CASE("frame-quantized timings are multiples of the frame period") {
    TimerModel timer;
    timer.kind = TimerModel::Kind::FrameQuantized;
    auto profile = flat_profile();
    profile.within_noise_sigma = 0.01;
    // 20 ms raw stall: 10000 steps at 0.002 ms
    profile.operator_cost[StallOperator::Mul] = 0.002;
    CollectorConfig cfg;
    cfg.method = TimingMethod::Onscreen;
    cfg.subset_mode = false;
    cfg.op = StallOperator::Mul;
    cfg.point_count = 16;
    cfg.iterations_per_point = 11;
    cfg.stall_loop_length = 10000;
    Rng rng(4);
    const auto t = sample_trace(profile, cfg, timer, {}, rng);
    REQUIRE(t.timings.size() == 176);
    for (double v : t.timings) {
        const double frames = v / timer.frame_period_ms;
        CHECK(std::fabs(frames - std::round(frames)) < 1e-9);
        CHECK(v == doctest::Approx(33.332));
    }
}

TEST_CASE("millisecond-jitter timings stay non-negative") {
    TimerModel timer;
    timer.quantum_ms = 0.1;
    timer.jitter_ms = 0.1;
    Rng rng(5);
    const auto t = sample_trace(flat_profile(), wild_collector_config(), timer, {}, rng);
    for (double v : t.timings) CHECK(v >= 0.0);
    CHECK(validate_trace(t).ok);
}

TEST_CASE("the slowest stalled EU bounds an iteration") {
    auto p = flat_profile();
    p.eu_speed[3] = 2.0;
    TimerModel timer;
    timer.kind = TimerModel::Kind::MicrosecondExact;
    auto cfg = wild_collector_config();
    cfg.op = StallOperator::Mul;
    Rng rng(6);
    const auto t = sample_trace(p, cfg, timer, {}, rng);
    const double base = 2000 * default_operator_costs()[StallOperator::Mul];
    for (std::size_t it = 1; it < 1024; ++it) {
        const double expect = (it >> 3 & 1u) ? 2.0 * base : base;
        CHECK(t.timings[it] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("advanced-math contention surcharges co-resident points") {
    auto p = flat_profile();
    for (auto& u : p.am_unit_map) u = 0;  // everything shares one unit
    TimerModel timer;
    timer.kind = TimerModel::Kind::MicrosecondExact;
    Rng rng(7);
    const auto t = sample_trace(p, wild_collector_config(), timer, {}, rng);
    const double base = 2000 * default_operator_costs()[StallOperator::Sinh];
    CHECK(t.timings[1] == doctest::Approx(base));
    CHECK(t.timings[3] == doctest::Approx(base * 1.25));
    CHECK(t.timings[1023] == doctest::Approx(base * (1 + 0.25 * 9)));
}

TEST_CASE("restart leaves a zero-drift profile untouched") {
    auto p = flat_profile();
    p.eu_speed[2] = 1.3;
    Rng rng(8);
    const auto q = restart(p, rng);
    CHECK(q.eu_speed == p.eu_speed);
    CHECK(q.device_id == p.device_id);
}

TEST_CASE("restart drift matches its sigma") {
    auto p = flat_profile(1);
    p.restart_drift_sigma = 0.02;
    Rng rng(9);
    std::vector<double> rel;
    for (int i = 0; i < 10000; ++i) rel.push_back(restart(p, rng).eu_speed[0] - 1.0);
    CHECK(stats::stddev(rel) == doctest::Approx(0.02).epsilon(0.05));
    CHECK(std::fabs(stats::mean(rel)) < 0.001);
}

TEST_CASE("a classifier degrades but survives a restart") {
    auto profiles = spread_profiles(4, 0.03, 0.005, 10);
    const auto cfg = wild_collector_config();
    const auto before = sample_lab_dataset(profiles, cfg, TimerModel{}, {}, 60, 1);
    ForestConfig fc;
    fc.n_trees = 40;
    fc.seed = 3;
    const auto model = fit(FeatureMatrix::from_rows(before.traces), before.labels, fc);

    auto score = [&](const LabDataset& d) {
        std::size_t ok = 0;
        for (std::size_t i = 0; i < d.traces.size(); ++i) ok += model.predict(d.traces[i]) == d.labels[i];
        return double(ok) / double(d.traces.size());
    };
    const double same_session = score(sample_lab_dataset(profiles, cfg, TimerModel{}, {}, 60, 2));
    Rng rng(11);
    for (auto& p : profiles) {
        p.restart_drift_sigma = 0.02;
        p = restart(p, rng);
    }
    const double after_restart = score(sample_lab_dataset(profiles, cfg, TimerModel{}, {}, 60, 2));
    CHECK(after_restart > 0.25);
    CHECK(after_restart < same_session);
}

TEST_CASE("corpus shape, spacing and templates") {
    Scenario s;
    s.seed = 5;
    s.collections = 28;
    s.classes = {DeviceClassSpec{.name = "gen9", .device_count = 5, .attributes = {}},
                 DeviceClassSpec{.name = "mali", .device_count = 5, .eu_count = 18, .attributes = {}}};
    const auto corpus = s.generate();
    CHECK(corpus.size() == 280);
    std::set<AttributeMap> maps;
    std::map<std::string, std::vector<Timestamp>> by_device;
    for (const auto& r : corpus) {
        CHECK(r.traces.size() == 7);
        validate_record(r);
        maps.insert(r.attributes);
        by_device[*r.true_device].push_back(r.collected_at);
    }
    CHECK(maps.size() == 2);
    CHECK(by_device.size() == 10);
    for (const auto& [dev, times] : by_device) {
        REQUIRE(times.size() == 28);
        for (std::size_t i = 1; i < times.size(); ++i)
            CHECK(times[i] - times[i - 1] == std::chrono::hours(4));
    }
}

TEST_CASE("identical seeds produce identical corpora") {
    Scenario s;
    s.seed = 77;
    s.collections = 3;
    s.options.evolution = {0.3, 0.3, 0.3};
    s.classes = {DeviceClassSpec{.name = "a", .device_count = 3, .restart_drift_sigma = 0.02, .attributes = {}}};
    CHECK(s.generate() == s.generate());
    Scenario t = s;
    t.seed = 78;
    CHECK_FALSE(s.generate() == t.generate());
}

TEST_CASE("corpus generation requires seven traces per collection") {
    Rng rng(1);
    CHECK_THROWS_AS(generate_corpus({flat_profile()}, wild_collector_config(), {}, {}, 6, 1, 4.0, rng),
                    Error);
}

TEST_CASE("scenario files parse") {
    const auto s = parse_scenario(R"({
        "seed": 9, "collections": 4, "period_hours": 24,
        "collector": {"method": "offscreen", "operator": "sinh", "point_count": 10},
        "timer": {"kind": "frame_quantized", "frame_period_ms": 16.666},
        "dispatch": {"randomized": true},
        "start": "2021-03-01T00:00:00Z",
        "classes": [{"name": "uhd630", "device_count": 2, "attributes": {"platform": "Linux x86_64"}}]
    })");
    CHECK(s.seed == 9);
    CHECK(s.timer.kind == TimerModel::Kind::FrameQuantized);
    CHECK(s.dispatch.randomized);
    const auto corpus = s.generate();
    CHECK(corpus.size() == 8);
    CHECK(corpus.front().attribute("platform") == "Linux x86_64");
    CHECK(format_timestamp(corpus.front().collected_at) == "2021-03-01T00:00:00Z");
    CHECK_THROWS_AS(parse_scenario(R"({"classes": []})"), Error);
    CHECK_THROWS_AS(parse_scenario(R"({"timer": {"kind": "sundial"}, "classes": [{"name": "x"}]})"), Error);
}

TEST_CASE("two devices three percent apart are easy to tell apart") {
    const auto profiles = spread_profiles(2, 0.03, 0.005, 21);
    CHECK(lab_accuracy(profiles, 500, 4, 60) > 0.90);
}

TEST_CASE("more between-device spread never lowers accuracy") {
    std::vector<double> means;
    for (double spread : {0.0, 0.01, 0.03}) {
        double sum = 0.0;
        for (std::uint64_t seed : {1u, 2u, 3u}) sum += lab_accuracy(spread_profiles(4, spread, 0.005, seed), 40, seed, 25);
        means.push_back(sum / 3.0);
    }
    CHECK(means[0] <= means[1]);
    CHECK(means[1] <= means[2]);
}

TEST_CASE("permuted-speed classes share one EU speed multiset") {
    DeviceClassSpec spec;
    spec.name = "perm";
    spec.device_count = 4;
    spec.eu_count = 10;
    spec.permuted_speeds = true;
    Rng rng = derive_rng(5, 1);
    const auto ps = make_class_profiles(spec, rng);
    auto sorted = [](std::vector<double> v) {
        std::sort(v.begin(), v.end());
        return v;
    };
    std::set<std::vector<double>> arrangements;
    for (const auto& p : ps) {
        CHECK(sorted(p.eu_speed) == sorted(ps.front().eu_speed));
        arrangements.insert(p.eu_speed);
    }
    CHECK(arrangements.size() == ps.size());
}

TEST_CASE("randomized dispatch erases arrangement-only identity") {
    std::vector<DeviceProfile> profiles;
    for (int c = 0; c < 2; ++c) {
        DeviceClassSpec spec;
        spec.name = "perm" + std::to_string(c);
        spec.device_count = 3;
        spec.eu_count = 10;
        spec.permuted_speeds = true;
        Rng rng = derive_rng(8, std::uint64_t(c));
        auto ps = make_class_profiles(spec, rng);
        profiles.insert(profiles.end(), ps.begin(), ps.end());
    }
    CollectorConfig cfg = wild_collector_config();
    cfg.op = StallOperator::Mul;
    auto accuracy = [](const LabDataset& d) {
        ForestConfig fc;
        fc.n_trees = 30;
        fc.seed = 2;
        return kfold_accuracy(FeatureMatrix::from_rows(d.traces), d.labels, fc).mean;
    };
    auto det = sample_lab_dataset(profiles, cfg, TimerModel{}, {}, 150, 4);
    const double deterministic = accuracy(det);
    const double randomized = accuracy(sample_lab_dataset(profiles, cfg, TimerModel{}, DispatchPolicy{true}, 150, 4));
    // Sort within each group of equal-popcount masks.
    for (auto& t : det.traces) {
        std::map<int, std::vector<std::size_t>> groups;
        for (std::size_t i = 0; i < t.size(); ++i) groups[std::popcount(i)].push_back(i);
        for (const auto& [bits, idx] : groups) {
            std::vector<double> v;
            for (auto i : idx) v.push_back(t[i]);
            std::sort(v.begin(), v.end());
            for (std::size_t k = 0; k < idx.size(); ++k) t[idx[k]] = v[k];
        }
    }
    const double sorted = accuracy(det);
    CHECK(deterministic > 0.9);
    CHECK(randomized < deterministic);
    CHECK(std::fabs(randomized - sorted) <= 0.05);
}

}  // TEST_SUITE
