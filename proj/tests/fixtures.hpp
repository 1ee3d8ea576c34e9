#pragma once

#include <random>
#include <string>

#include "euprint/synth.hpp"
#include "euprint/trace.hpp"

namespace fixtures {

// Random but schema-valid record; timings are arbitrary non-negative values.
inline euprint::FingerprintRecord random_record(std::mt19937_64& rng, int index = 0) {
    using namespace euprint;
    FingerprintRecord r;
    r.client_id = "client-" + std::to_string(rng() % 1000);
    r.collected_at = Timestamp{std::chrono::milliseconds(1612656000000LL + std::int64_t(rng() % 100000000))};
    r.attributes = class_attribute_template("class-" + std::to_string(rng() % 7));
    r.attributes["screen_width"] = std::to_string(800 + index % 1000);
    std::uniform_real_distribution<double> u(0.0, 40.0);
    CollectorConfig cfg = wild_collector_config();
    for (int k = 0; k < 7; ++k) {
        Trace t;
        t.config = cfg;
        t.collected_at = r.collected_at;
        t.client_id = r.client_id;
        t.method_reported = r.attributes["webgl_renderer"];
        t.timings.resize(cfg.expected_length());
        for (double& v : t.timings) v = u(rng);
        r.traces.push_back(std::move(t));
    }
    if (rng() % 2) r.true_device = "dev-" + std::to_string(rng() % 50);
    return r;
}

}  // namespace fixtures

namespace fixtures {

// Small schema-valid record (onscreen, 16 points x 11 iterations) for store tests.
inline euprint::FingerprintRecord onscreen_record(std::mt19937_64& rng, const std::string& client,
                                                  euprint::Timestamp at) {
    using namespace euprint;
    FingerprintRecord r;
    r.client_id = client;
    r.collected_at = at;
    r.attributes = class_attribute_template("class-" + std::to_string(rng() % 5));
    CollectorConfig cfg{TimingMethod::Onscreen, StallOperator::Sin, 16, 11, false, 2000};
    std::uniform_real_distribution<double> u(0.0, 100.0);
    for (std::size_t k = 0; k < kTracesPerRecord; ++k) {
        Trace t;
        t.config = cfg;
        t.collected_at = at;
        t.client_id = client;
        t.method_reported = r.attributes["webgl_renderer"];
        t.timings.resize(cfg.expected_length());
        for (double& v : t.timings) v = u(rng);
        r.traces.push_back(std::move(t));
    }
    return r;
}

}  // namespace fixtures
