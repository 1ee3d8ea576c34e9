#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "euprint/embedder.hpp"
#include "euprint/linker.hpp"
#include "euprint/trace.hpp"

namespace euprint {

/// Sum of the proportions of the n most frequent labels. Throws EmptyDataset.
double base_rate_classical(std::span<const std::string> labels, std::size_t n);

/// n / device_count: a random guess among enrolled devices.
double base_rate_kshot(std::size_t device_count, std::size_t n);

/// Fraction of queries whose truth is among the first k predicted labels.
/// Throws LengthMismatch when the two lists differ in size.
double topk_accuracy(const std::vector<std::vector<std::string>>& predictions,
                     std::span<const std::string> truths, std::size_t k);

struct TrackingRow {
    int period_days = 0;
    std::size_t devices = 0;
    double nude_mean = 0, nude_median = 0;
    double da_mean = 0, da_median = 0;
    std::optional<double> improvement_pct;  // median based; empty when the nude median is 0
};

struct EvalReport {
    std::string mode;
    std::uint64_t seed = 0;
    std::size_t devices = 0;
    std::size_t gallery_size = 0;
    std::size_t queries = 0;
    double top1 = 0, top5 = 0, top10 = 0;
    double base_classical_top1 = 0, base_classical_top5 = 0, base_classical_top10 = 0;
    double base_kshot_top1 = 0, base_kshot_top5 = 0, base_kshot_top10 = 0;
    std::vector<TrackingRow> tracking;
    std::map<std::string, std::string> metadata;

    std::string to_json() const;
    /// One "metric,value" row per number.
    std::string to_csv() const;
};

struct RandomSplitSpec {
    double train_fraction = 0.8;
    int min_collections = 0;        // devices with fewer records are dropped first
    std::uint64_t seed = 0;
    std::optional<std::string> browser;  // user-agent family filter, applied before embedding
    void validate() const;
};

/// Per-device split of collections; every trace of a gallery collection is
/// memorized, every trace of a query collection is a query.
EvalReport run_random_split(const std::vector<FingerprintRecord>& corpus, const Network& net,
                            const RandomSplitSpec& spec);

/// Gallery: the first k collections of each device. Throws
/// InsufficientCollections unless every device has more than k.
EvalReport run_kshot(const std::vector<FingerprintRecord>& corpus, const Network& net, int k,
                     const std::optional<std::string>& browser = std::nullopt);

/// Earliest record of every device in each period window, counted from the
/// corpus start.
std::vector<FingerprintRecord> subsample_by_period(const std::vector<FingerprintRecord>& corpus,
                                                   double period_days);

/// Per-device tracking duration in days for a replay (records in replay
/// order, with the id each one received).
std::map<std::string, double> tracking_durations(const std::vector<FingerprintRecord>& replay,
                                                 const std::vector<std::string>& assigned);

/// Replays the subsampled corpus through a fresh linker.
std::vector<std::string> replay_linker(const std::vector<FingerprintRecord>& ordered, const LinkerConfig& cfg,
                                       const ForestModel& forest, const EmbedFn& embed);

struct TrackingSpec {
    std::vector<int> periods{2, 3, 4, 5, 6, 7};
    LinkerConfig nude = [] {
        LinkerConfig c;
        c.epsilon = kEpsilonDisabled;
        return c;
    }();
    LinkerConfig drawnapart;
};

/// Throws SpanTooShort when the corpus covers less than 8x the largest period.
std::vector<TrackingRow> run_tracking(const std::vector<FingerprintRecord>& corpus, const ForestModel& forest,
                                      const EmbedFn& embed, const TrackingSpec& spec);

struct NamedSubset {
    std::string name;
    std::vector<FingerprintRecord> records;
};

struct DatasetSplits {
    std::vector<NamedSubset> periods;  // "1MP", "2MP", ...: cut at the boundaries
    NamedSubset train;                 // 65% of the first period's devices
    NamedSubset test;                  // remaining 35%
    NamedSubset excluded;              // train-side devices below min_collections
};

/// Boundaries must be non-decreasing (InvalidConfig otherwise).
DatasetSplits make_splits(const std::vector<FingerprintRecord>& corpus, const std::vector<Timestamp>& boundaries,
                          std::uint64_t seed = 0, int min_collections = 0);

/// Records whose user agent parses to `family`.
std::vector<FingerprintRecord> filter_browser(const std::vector<FingerprintRecord>& corpus,
                                              const std::string& family);

}  // namespace euprint
