#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "euprint/trace.hpp"

namespace euprint {

using Rng = std::mt19937_64;

/// Rng seeded from a base seed and a stream index, so that independent
/// streams (per device, per tree, ...) never share state.
Rng derive_rng(std::uint64_t seed, std::uint64_t stream);

/// Synthetic ground truth for one GPU.
struct DeviceProfile {
    std::string device_id;
    std::string device_class;  // devices of one class share attributes and renderer
    int eu_count = 24;
    std::vector<double> eu_speed;   // per-EU time multipliers, mean ~1
    std::vector<int> am_unit_map;   // EU index -> advanced-math unit index
    std::map<StallOperator, double> operator_cost;  // ms per stall loop step
    double within_noise_sigma = 0.005;
    double restart_drift_sigma = 0.0;
    double am_contention = 0.25;
    std::uint64_t session_seed = 0;

    void validate() const;
};

std::map<StallOperator, double> default_operator_costs();

struct TimerModel {
    enum class Kind { FrameQuantized, MillisecondJitter, MicrosecondExact };
    Kind kind = Kind::MillisecondJitter;
    double frame_period_ms = 16.666;
    double quantum_ms = 0.005;
    double jitter_ms = 0.005;

    void validate() const;
    double measure(double raw_ms, Rng& rng) const;
};

struct DispatchPolicy {
    bool randomized = false;
};

/// EU receiving a point: round-robin when deterministic, uniform otherwise.
int dispatch(int point_index, int eu_count, DispatchPolicy policy, Rng& rng);

Trace sample_trace(const DeviceProfile& profile, const CollectorConfig& cfg,
                   const TimerModel& timer, DispatchPolicy policy, Rng& rng);

/// Re-draws per-EU speeds as after a browser/system restart.
DeviceProfile restart(const DeviceProfile& profile, Rng& rng);

/// Parameters shared by the devices of one hardware/software class.
struct DeviceClassSpec {
    std::string name;
    int device_count = 1;
    int eu_count = 24;
    int am_units = 8;
    double class_spread = 0.05;   // spread of the class-level EU pattern
    double device_spread = 0.03;  // between-device spread around the pattern
    double within_noise_sigma = 0.005;
    double restart_drift_sigma = 0.0;
    double am_contention = 0.25;
    // Devices share one EU speed multiset and differ only in its arrangement.
    bool permuted_speeds = false;
    AttributeMap attributes;  // overrides for the synthesized template
};

/// Draws the profiles of one class: a shared class pattern perturbed per
/// device. Device ids are "<class>-<index>".
std::vector<DeviceProfile> make_class_profiles(const DeviceClassSpec& spec, Rng& rng);

/// Deterministic browser attribute template for a device class.
AttributeMap class_attribute_template(const std::string& class_name,
                                      const AttributeMap& overrides = {});

/// Per-collection attribute evolution and browser restarts.
struct EvolutionModel {
    double browser_update_probability = 0.0;
    double attribute_change_probability = 0.0;
    double restart_probability = 0.0;
    // Unobserved evolution steps before the first collection, so devices
    // that start from one template may already have drifted apart.
    int burn_in_collections = 0;
};

struct CorpusOptions {
    Timestamp start = Timestamp{std::chrono::sys_days{std::chrono::year{2021} / 1 / 3}};
    std::map<std::string, AttributeMap> class_attributes;  // missing classes are synthesized
    EvolutionModel evolution;
};

/// `collections` records per device, period_hours apart, 7 traces each.
std::vector<FingerprintRecord> generate_corpus(const std::vector<DeviceProfile>& profiles,
                                               const CollectorConfig& cfg,
                                               const TimerModel& timer, DispatchPolicy policy,
                                               int traces_per_collection, int collections,
                                               double period_hours, Rng& rng,
                                               const CorpusOptions& options = {});

/// Scenario file: everything needed to regenerate a corpus from a seed.
struct Scenario {
    std::uint64_t seed = 1;
    CollectorConfig collector = wild_collector_config();
    TimerModel timer;
    DispatchPolicy dispatch;
    int collections = 28;
    double period_hours = 4.0;
    int traces_per_collection = 7;
    CorpusOptions options;
    std::vector<DeviceClassSpec> classes;

    std::vector<DeviceProfile> profiles() const;
    std::vector<FingerprintRecord> generate() const;
};

Scenario load_scenario(const std::filesystem::path& path);
Scenario parse_scenario(const std::string& json_text);

/// Lab-style traces: `traces_per_device` standalone traces per profile.
struct LabDataset {
    std::vector<std::vector<double>> traces;
    std::vector<std::string> labels;
};

LabDataset sample_lab_dataset(const std::vector<DeviceProfile>& profiles,
                              const CollectorConfig& cfg, const TimerModel& timer,
                              DispatchPolicy policy, int traces_per_device, std::uint64_t seed);

}  // namespace euprint
