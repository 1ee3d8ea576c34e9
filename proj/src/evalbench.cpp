#include "euprint/evalbench.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "euprint/error.hpp"
#include "euprint/stats.hpp"
#include "euprint/synth.hpp"

namespace euprint {

double base_rate_classical(std::span<const std::string> labels, std::size_t n) {
    if (labels.empty()) throw Error(ErrorCode::EmptyDataset, "no labels");
    std::map<std::string_view, std::size_t> counts;
    for (const auto& l : labels) ++counts[l];
    std::vector<std::size_t> c;
    for (const auto& [k, v] : counts) c.push_back(v);
    const std::size_t m = std::min(n, c.size());
    std::partial_sort(c.begin(), c.begin() + std::ptrdiff_t(m), c.end(), std::greater<>());
    std::size_t top = 0;
    for (std::size_t i = 0; i < m; ++i) top += c[i];
    return double(top) / double(labels.size());
}

double base_rate_kshot(std::size_t device_count, std::size_t n) {
    if (device_count == 0) throw Error(ErrorCode::EmptyDataset, "no devices");
    return double(std::min(n, device_count)) / double(device_count);
}

double topk_accuracy(const std::vector<std::vector<std::string>>& predictions,
                     std::span<const std::string> truths, std::size_t k) {
    if (predictions.size() != truths.size())
        throw Error(ErrorCode::LengthMismatch, "predictions and truths differ in length");
    if (truths.empty()) return 0.0;
    std::size_t hits = 0;
    for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto& p = predictions[i];
        const auto end = p.begin() + std::ptrdiff_t(std::min(k, p.size()));
        if (std::find(p.begin(), end, truths[i]) != end) ++hits;
    }
    return double(hits) / double(truths.size());
}

namespace {

const std::string& device_of(const FingerprintRecord& r) { return r.true_device ? *r.true_device : r.client_id; }

std::map<std::string, std::vector<const FingerprintRecord*>> group_by_device(
    const std::vector<FingerprintRecord>& corpus) {
    std::map<std::string, std::vector<const FingerprintRecord*>> out;
    for (const auto& r : corpus) out[device_of(r)].push_back(&r);
    for (auto& [d, recs] : out)
        std::stable_sort(recs.begin(), recs.end(),
                         [](const auto* a, const auto* b) { return a->collected_at < b->collected_at; });
    return out;
}

void add_traces(const Network& net, const FingerprintRecord& r, std::vector<LabeledEmbedding>& out) {
    for (const auto& t : r.traces) out.push_back({net.embed(preprocess(t)), device_of(r)});
}

// Fills the accuracy fields from a per-trace gallery and query set.
void score(EvalReport& rep, const std::vector<LabeledEmbedding>& gallery,
           const std::vector<LabeledEmbedding>& queries, std::size_t devices) {
    if (gallery.empty() || queries.empty()) throw Error(ErrorCode::InsufficientData, "empty gallery or query set");
    std::vector<std::vector<std::string>> preds;
    std::vector<std::string> truths;
    for (const auto& q : queries) {
        preds.push_back(knn_topk(gallery, q.embedding, 10));
        truths.push_back(q.label);
    }
    rep.devices = devices;
    rep.gallery_size = gallery.size();
    rep.queries = queries.size();
    rep.top1 = topk_accuracy(preds, truths, 1);
    rep.top5 = topk_accuracy(preds, truths, 5);
    rep.top10 = topk_accuracy(preds, truths, 10);

    std::vector<std::string> gallery_labels;
    for (const auto& g : gallery) gallery_labels.push_back(g.label);
    rep.base_classical_top1 = base_rate_classical(gallery_labels, 1);
    rep.base_classical_top5 = base_rate_classical(gallery_labels, 5);
    rep.base_classical_top10 = base_rate_classical(gallery_labels, 10);
    rep.base_kshot_top1 = base_rate_kshot(devices, 1);
    rep.base_kshot_top5 = base_rate_kshot(devices, 5);
    rep.base_kshot_top10 = base_rate_kshot(devices, 10);
}

}  // namespace

std::vector<FingerprintRecord> filter_browser(const std::vector<FingerprintRecord>& corpus,
                                              const std::string& family) {
    std::vector<FingerprintRecord> out;
    for (const auto& r : corpus)
        if (parse_user_agent(r.attribute("user_agent")).family == family) out.push_back(r);
    return out;
}

void RandomSplitSpec::validate() const {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw Error(ErrorCode::InvalidConfig, "train_fraction must lie in (0, 1)");
    if (min_collections < 0) throw Error(ErrorCode::InvalidConfig, "min_collections must be non-negative");
}

EvalReport run_random_split(const std::vector<FingerprintRecord>& corpus, const Network& net,
                            const RandomSplitSpec& spec) {
    spec.validate();
    const auto filtered = spec.browser ? filter_browser(corpus, *spec.browser) : corpus;
    const auto devices = group_by_device(filtered);

    Rng rng = derive_rng(spec.seed, 0x5e1);
    std::vector<LabeledEmbedding> gallery, queries;
    std::size_t used = 0;
    for (const auto& [d, recs] : devices) {
        if (recs.size() < 2 || recs.size() < std::size_t(spec.min_collections)) continue;
        ++used;
        std::vector<std::size_t> order(recs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::shuffle(order.begin(), order.end(), rng);
        const auto n_train = std::clamp<std::size_t>(
            std::size_t(std::llround(spec.train_fraction * double(recs.size()))), 1, recs.size() - 1);
        for (std::size_t i = 0; i < order.size(); ++i) add_traces(net, *recs[order[i]], i < n_train ? gallery : queries);
    }
    if (used < 2) throw Error(ErrorCode::InsufficientData, "random split needs at least two devices with two records");

    EvalReport rep;
    rep.mode = "random-split";
    rep.seed = spec.seed;
    rep.metadata["train_fraction"] = std::to_string(spec.train_fraction);
    if (spec.browser) rep.metadata["browser"] = *spec.browser;
    score(rep, gallery, queries, used);
    return rep;
}

EvalReport run_kshot(const std::vector<FingerprintRecord>& corpus, const Network& net, int k,
                     const std::optional<std::string>& browser) {
    if (k < 1) throw Error(ErrorCode::InvalidConfig, "k must be at least 1");
    const auto filtered = browser ? filter_browser(corpus, *browser) : corpus;
    const auto devices = group_by_device(filtered);
    if (devices.empty()) throw Error(ErrorCode::InsufficientCollections, "empty corpus");
    for (const auto& [d, recs] : devices)
        if (recs.size() <= std::size_t(k))
            throw Error(ErrorCode::InsufficientCollections,
                        "device " + d + " has " + std::to_string(recs.size()) + " collections, k = " + std::to_string(k));

    std::vector<LabeledEmbedding> gallery, queries;
    for (const auto& [d, recs] : devices)
        for (std::size_t i = 0; i < recs.size(); ++i) add_traces(net, *recs[i], i < std::size_t(k) ? gallery : queries);

    EvalReport rep;
    rep.mode = "kshot:" + std::to_string(k);
    rep.metadata["k"] = std::to_string(k);
    if (browser) rep.metadata["browser"] = *browser;
    score(rep, gallery, queries, devices.size());
    return rep;
}

std::vector<FingerprintRecord> subsample_by_period(const std::vector<FingerprintRecord>& corpus,
                                                   double period_days) {
    if (!(period_days > 0.0)) throw Error(ErrorCode::InvalidConfig, "period must be positive");
    if (corpus.empty()) return {};
    Timestamp t0 = corpus.front().collected_at;
    for (const auto& r : corpus) t0 = std::min(t0, r.collected_at);

    std::set<std::pair<std::string, long long>> seen;
    std::vector<FingerprintRecord> out;
    for (const auto& r : time_ordered(corpus)) {
        const auto window = static_cast<long long>(std::floor(days_between(t0, r.collected_at) / period_days));
        if (seen.insert({device_of(r), window}).second) out.push_back(r);
    }
    return out;
}

std::map<std::string, double> tracking_durations(const std::vector<FingerprintRecord>& replay,
                                                 const std::vector<std::string>& assigned) {
    if (replay.size() != assigned.size()) throw Error(ErrorCode::LengthMismatch, "one id per record expected");
    // prev_same_id[i]: replay index of the previous record that received the same id.
    std::vector<std::ptrdiff_t> prev_same_id(replay.size(), -1);
    std::map<std::string, std::size_t> last_of_id;
    for (std::size_t i = 0; i < replay.size(); ++i) {
        if (auto it = last_of_id.find(assigned[i]); it != last_of_id.end()) prev_same_id[i] = std::ptrdiff_t(it->second);
        last_of_id[assigned[i]] = i;
    }

    std::map<std::string, std::vector<std::size_t>> per_device;
    for (std::size_t i = 0; i < replay.size(); ++i) per_device[device_of(replay[i])].push_back(i);

    std::map<std::string, double> out;
    for (const auto& [d, idx] : per_device) {
        double best = 0.0;
        std::size_t chain_start = idx.front();
        for (std::size_t j = 1; j < idx.size(); ++j) {
            const bool continues = assigned[idx[j]] == assigned[idx[j - 1]] &&
                                   prev_same_id[idx[j]] == std::ptrdiff_t(idx[j - 1]);
            if (!continues) chain_start = idx[j];
            best = std::max(best, days_between(replay[chain_start].collected_at, replay[idx[j]].collected_at));
        }
        out[d] = best;
    }
    return out;
}

std::vector<std::string> replay_linker(const std::vector<FingerprintRecord>& ordered, const LinkerConfig& cfg,
                                       const ForestModel& forest, const EmbedFn& embed) {
    Linker linker(cfg, &forest, cfg.drawnapart() ? embed : EmbedFn{});
    std::vector<std::string> ids;
    ids.reserve(ordered.size());
    for (const auto& r : ordered) ids.push_back(linker.link(r));
    return ids;
}

std::vector<TrackingRow> run_tracking(const std::vector<FingerprintRecord>& corpus, const ForestModel& forest,
                                      const EmbedFn& embed, const TrackingSpec& spec) {
    if (spec.periods.empty()) throw Error(ErrorCode::InvalidConfig, "no collection periods");
    for (const auto& r : corpus)
        if (!r.true_device) throw Error(ErrorCode::InsufficientData, "tracking needs ground-truth device labels");
    const int largest = *std::max_element(spec.periods.begin(), spec.periods.end());
    if (corpus.empty()) throw Error(ErrorCode::SpanTooShort, "empty corpus");
    auto [lo, hi] = std::minmax_element(corpus.begin(), corpus.end(), [](const auto& a, const auto& b) {
        return a.collected_at < b.collected_at;
    });
    const double span = days_between(lo->collected_at, hi->collected_at);
    if (span < 8.0 * largest)
        throw Error(ErrorCode::SpanTooShort, "corpus spans " + std::to_string(span) + " days, need " +
                                                 std::to_string(8 * largest));

    // Embeddings depend on the record only; compute each at most once across periods.
    std::map<std::pair<std::string, Timestamp>, EmbeddingVector> cache;
    EmbedFn cached = [&](const FingerprintRecord& r) {
        auto key = std::make_pair(device_of(r), r.collected_at);
        auto it = cache.find(key);
        if (it == cache.end()) it = cache.emplace(key, embed(r)).first;
        return it->second;
    };

    std::vector<TrackingRow> rows;
    for (int period : spec.periods) {
        if (period < 1) throw Error(ErrorCode::InvalidConfig, "periods are whole days >= 1");
        const auto replay = subsample_by_period(corpus, period);
        auto summarize = [&](const LinkerConfig& cfg, double& mean, double& median) {
            const auto ids = replay_linker(replay, cfg, forest, cached);
            std::vector<double> d;
            for (const auto& [dev, days] : tracking_durations(replay, ids)) d.push_back(days);
            mean = stats::mean(d);
            median = stats::median(d);
            return d.size();
        };
        TrackingRow row;
        row.period_days = period;
        row.devices = summarize(spec.nude, row.nude_mean, row.nude_median);
        summarize(spec.drawnapart, row.da_mean, row.da_median);
        if (row.nude_median > 0.0) row.improvement_pct = 100.0 * (row.da_median - row.nude_median) / row.nude_median;
        rows.push_back(row);
    }
    return rows;
}

DatasetSplits make_splits(const std::vector<FingerprintRecord>& corpus, const std::vector<Timestamp>& boundaries,
                          std::uint64_t seed, int min_collections) {
    if (!std::is_sorted(boundaries.begin(), boundaries.end()))
        throw Error(ErrorCode::InvalidConfig, "split boundaries must be ordered");
    DatasetSplits out;
    out.periods.resize(boundaries.size() + 1);
    for (std::size_t i = 0; i < out.periods.size(); ++i) out.periods[i].name = std::to_string(i + 1) + "MP";
    for (const auto& r : corpus) {
        const auto slot = std::upper_bound(boundaries.begin(), boundaries.end(), r.collected_at) - boundaries.begin();
        out.periods[std::size_t(slot)].records.push_back(r);
    }

    const auto& first = out.periods.front();
    std::vector<std::string> devices;
    std::map<std::string, int> count;
    for (const auto& r : first.records)
        if (count[device_of(r)]++ == 0) devices.push_back(device_of(r));
    std::sort(devices.begin(), devices.end());
    Rng rng = derive_rng(seed, 0x65);
    std::shuffle(devices.begin(), devices.end(), rng);
    const std::size_t n_train = devices.size() * 65 / 100;
    const std::set<std::string> train_devices(devices.begin(), devices.begin() + std::ptrdiff_t(n_train));

    out.train.name = first.name + "-train";
    out.test.name = first.name + "-test";
    out.excluded.name = first.name + "-excluded";
    for (const auto& r : first.records) {
        const auto& d = device_of(r);
        if (!train_devices.contains(d)) out.test.records.push_back(r);
        else if (count[d] < min_collections) out.excluded.records.push_back(r);
        else out.train.records.push_back(r);
    }
    return out;
}

namespace {

nlohmann::ordered_json number_or_null(const std::optional<double>& v) {
    return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

}  // namespace

std::string EvalReport::to_json() const {
    nlohmann::ordered_json j;
    j["mode"] = mode;
    j["seed"] = seed;
    j["devices"] = devices;
    j["gallery_size"] = gallery_size;
    j["queries"] = queries;
    j["accuracy"] = {{"top1", top1}, {"top5", top5}, {"top10", top10}};
    j["base_rate_classical"] = {{"top1", base_classical_top1}, {"top5", base_classical_top5},
                                {"top10", base_classical_top10}};
    j["base_rate_kshot"] = {{"top1", base_kshot_top1}, {"top5", base_kshot_top5}, {"top10", base_kshot_top10}};
    auto rows = nlohmann::ordered_json::array();
    for (const auto& r : tracking)
        rows.push_back({{"period_days", r.period_days},
                        {"devices", r.devices},
                        {"nude_mean_days", r.nude_mean},
                        {"nude_median_days", r.nude_median},
                        {"da_mean_days", r.da_mean},
                        {"da_median_days", r.da_median},
                        {"improvement_pct", number_or_null(r.improvement_pct)}});
    j["tracking"] = rows;
    j["metadata"] = metadata;
    return j.dump(2);
}

std::string EvalReport::to_csv() const {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "metric,value\n";
    auto row = [&](const std::string& k, double v) { out << k << ',' << v << '\n'; };
    if (queries > 0) {
        row("top1", top1);
        row("top5", top5);
        row("top10", top10);
        row("base_rate_classical_top1", base_classical_top1);
        row("base_rate_classical_top5", base_classical_top5);
        row("base_rate_classical_top10", base_classical_top10);
        row("base_rate_kshot_top1", base_kshot_top1);
        row("base_rate_kshot_top5", base_kshot_top5);
        row("base_rate_kshot_top10", base_kshot_top10);
        row("devices", double(devices));
        row("gallery_size", double(gallery_size));
        row("queries", double(queries));
    }
    for (const auto& r : tracking) {
        const std::string p = "period_" + std::to_string(r.period_days) + "d_";
        row(p + "nude_mean_days", r.nude_mean);
        row(p + "nude_median_days", r.nude_median);
        row(p + "da_mean_days", r.da_mean);
        row(p + "da_median_days", r.da_median);
        if (r.improvement_pct) row(p + "improvement_pct", *r.improvement_pct);
    }
    return out.str();
}

}  // namespace euprint
