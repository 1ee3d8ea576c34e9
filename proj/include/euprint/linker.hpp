#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "euprint/embedder.hpp"
#include "euprint/forest.hpp"
#include "euprint/trace.hpp"

namespace euprint {

// Ordered so that the combined verdict of a rule list is the minimum.
enum class RuleVerdict { Discard = 0, Candidate = 1, Exact = 2 };

std::string_view to_string(RuleVerdict v);

/// One deterministic attribute rule over a (known, unknown) pair.
struct Rule {
    std::string name;
    std::function<RuleVerdict(const FingerprintRecord& known, const FingerprintRecord& unknown)> apply;
};

struct RuleSet {
    std::string version;
    std::vector<Rule> rules;

    /// Equality rule plus the hard inconsistency rules: platform change,
    /// browser family change, browser downgrade, and a simultaneous change of
    /// timezone and language.
    static RuleSet defaults();
};

RuleVerdict rule_screen(const FingerprintRecord& known, const FingerprintRecord& unknown, const RuleSet& rules);

struct BrowserInfo {
    std::string family;  // "chrome", "firefox", "edge", "opera", "yandex", "safari" or "other"
    int major = 0;
};

BrowserInfo parse_user_agent(std::string_view ua);

std::size_t levenshtein(std::string_view a, std::string_view b);

inline constexpr std::size_t kLinkFeatureCount = kAttributeKeys.size() + 5;

/// Equality bit per attribute, normalized user-agent edit distance, number of
/// differing attributes, |time gap| in days capped at 30, |d screen width|,
/// |d screen height|.
std::vector<double> link_feature_vector(const FingerprintRecord& known, const FingerprintRecord& unknown);

inline constexpr double kEpsilonDisabled = std::numeric_limits<double>::infinity();

struct LinkerConfig {
    double lambda = 0.90;
    double epsilon = 0.15;  // kEpsilonDisabled turns the linker into plain FP-Stalker
    double rank_gap = 0.10;
    RuleSet rules = RuleSet::defaults();

    bool drawnapart() const { return epsilon != kEpsilonDisabled; }
    void validate() const;
};

/// Labels used by the binary same-device forest.
inline constexpr const char* kSameLabel = "same";
inline constexpr const char* kDifferentLabel = "different";

using EmbedFn = std::function<EmbeddingVector(const FingerprintRecord&)>;

struct ScoredCandidate {
    std::string id;
    double p = 0.0;
    Timestamp collected_at{};
};

/// Sorts by p (ties: most recent first); empty when the two best carry
/// different ids and are closer than rank_gap.
std::vector<ScoredCandidate> get_rank_and_filter(std::vector<ScoredCandidate> candidates, double rank_gap);

struct LinkerCounters {
    std::size_t forest_calls = 0;
    std::size_t embedding_calls = 0;  // embeddings computed (cached per record)
    std::size_t cosine_evaluations = 0;
    std::size_t short_circuits = 0;
};

/// Gallery of known fingerprints plus the hybrid matching procedure. The
/// gallery holds the most recent record of every assigned id.
class Linker {
public:
    /// Throws UntrainedModel when the forest is missing, or when the
    /// embedding step is enabled without an embedding function.
    Linker(LinkerConfig cfg, const ForestModel* forest, EmbedFn embed = {});

    /// Identifier for f_u; does not modify the gallery (fresh ids are
    /// reserved, though, so they are never reused).
    std::string match(const FingerprintRecord& f_u);

    /// match() followed by adding f_u to the gallery under the returned id.
    std::string link(const FingerprintRecord& f_u);

    void add(const FingerprintRecord& r, const std::string& id);

    std::size_t gallery_size() const { return gallery_.size(); }
    const LinkerCounters& counters() const { return counters_; }
    const LinkerConfig& config() const { return cfg_; }

private:
    struct Entry {
        std::string id;
        FingerprintRecord record;
        std::optional<EmbeddingVector> embedding;
    };

    std::string new_id();
    const EmbeddingVector& embedding_of(Entry& e);

    LinkerConfig cfg_;
    const ForestModel* forest_;
    EmbedFn embed_;
    std::vector<Entry> gallery_;
    std::size_t next_id_ = 0;
    LinkerCounters counters_;
};

struct LinkPairOptions {
    int max_gap_collections = 6;   // positives: same device up to this many records apart
    int negatives_per_record = 3;  // nearest-in-time candidates from other devices
    std::uint64_t seed = 0;
};

struct LinkPairs {
    FeatureMatrix X;
    std::vector<std::string> y;
};

/// Candidate-screened training pairs from a labeled corpus.
/// Throws InsufficientPairs when either class is missing.
LinkPairs build_link_pairs(const std::vector<FingerprintRecord>& corpus, const RuleSet& rules,
                           const LinkPairOptions& opt = {});

ForestModel train_link_forest(const std::vector<FingerprintRecord>& corpus, const RuleSet& rules,
                              const ForestConfig& cfg, const LinkPairOptions& opt = {});

struct EpsilonCalibration {
    double epsilon = 0.15;
    double same_device_p05 = 0.0;
    std::vector<double> same_device;
    std::vector<double> different_device;
};

/// Cosine similarities of averaged-embedding pairs; epsilon is the 5th
/// percentile of the same-device population plus 0.05.
EpsilonCalibration calibrate_epsilon(const std::vector<FingerprintRecord>& corpus, const EmbedFn& embed,
                                     std::uint64_t seed = 0);
double epsilon_from_same_device(const std::vector<double>& same_device_cosines);

std::vector<double> default_lambda_grid();

/// Pairwise F1 of "same assigned id" against "same true device".
double pairwise_link_f1(const std::vector<std::string>& assigned, const std::vector<std::string>& truth);

struct LambdaCalibration {
    double lambda = 0.90;
    std::vector<std::pair<double, double>> f1_by_lambda;
};

/// Replays the time-ordered slice through the plain linker for every grid
/// value and keeps the best F1, preferring the larger lambda on ties.
LambdaCalibration calibrate_lambda(const std::vector<FingerprintRecord>& slice, const ForestModel& forest,
                                   const std::vector<double>& grid = default_lambda_grid(),
                                   const LinkerConfig& base = {});

/// Records in replay order: by time, then client id.
std::vector<FingerprintRecord> time_ordered(std::vector<FingerprintRecord> records);

}  // namespace euprint
