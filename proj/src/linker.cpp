#include "euprint/linker.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include "euprint/error.hpp"
#include "euprint/stats.hpp"
#include "euprint/synth.hpp"

namespace euprint {

std::string_view to_string(RuleVerdict v) {
    switch (v) {
        case RuleVerdict::Discard: return "discard";
        case RuleVerdict::Candidate: return "candidate";
        case RuleVerdict::Exact: return "exact";
    }
    return "?";
}

namespace {

std::string_view attr(const FingerprintRecord& r, std::string_view key) {
    auto it = r.attributes.find(std::string(key));
    return it == r.attributes.end() ? std::string_view{} : std::string_view(it->second);
}

// A hard rule is neutral (Exact) unless it fires.
RuleVerdict fires(bool condition) { return condition ? RuleVerdict::Discard : RuleVerdict::Exact; }

int parse_int(std::string_view s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    return ec == std::errc{} ? v : 0;
}

}  // namespace

BrowserInfo parse_user_agent(std::string_view ua) {
    // Order matters: Edge and Opera also advertise Chrome, Chrome advertises Safari.
    static const std::pair<std::string_view, std::string_view> tokens[] = {
        {"Edg/", "edge"},       {"OPR/", "opera"},     {"YaBrowser/", "yandex"},
        {"Firefox/", "firefox"}, {"Chrome/", "chrome"}, {"Version/", "safari"},
    };
    for (const auto& [token, family] : tokens) {
        const auto pos = ua.find(token);
        if (pos == std::string_view::npos) continue;
        if (family == "safari" && ua.find("Safari/") == std::string_view::npos) continue;
        return {std::string(family), parse_int(ua.substr(pos + token.size()))};
    }
    return {"other", 0};
}

RuleSet RuleSet::defaults() {
    RuleSet rs;
    rs.version = "1";
    rs.rules.push_back({"all_attributes_equal", [](const FingerprintRecord& k, const FingerprintRecord& u) {
                            for (auto key : kAttributeKeys)
                                if (attr(k, key) != attr(u, key)) return RuleVerdict::Candidate;
                            return RuleVerdict::Exact;
                        }});
    rs.rules.push_back({"platform_changed", [](const FingerprintRecord& k, const FingerprintRecord& u) {
                            return fires(attr(k, "platform") != attr(u, "platform"));
                        }});
    rs.rules.push_back({"browser_family_changed", [](const FingerprintRecord& k, const FingerprintRecord& u) {
                            return fires(parse_user_agent(attr(k, "user_agent")).family !=
                                         parse_user_agent(attr(u, "user_agent")).family);
                        }});
    rs.rules.push_back({"browser_downgraded", [](const FingerprintRecord& k, const FingerprintRecord& u) {
                            const auto a = parse_user_agent(attr(k, "user_agent"));
                            const auto b = parse_user_agent(attr(u, "user_agent"));
                            return fires(a.family == b.family && b.major < a.major);
                        }});
    rs.rules.push_back({"timezone_and_language_changed",
                        [](const FingerprintRecord& k, const FingerprintRecord& u) {
                            return fires(attr(k, "timezone") != attr(u, "timezone") &&
                                         attr(k, "http_accept_language") != attr(u, "http_accept_language"));
                        }});
    return rs;
}

RuleVerdict rule_screen(const FingerprintRecord& known, const FingerprintRecord& unknown, const RuleSet& rules) {
    if (rules.rules.empty()) throw Error(ErrorCode::InvalidConfig, "empty rule set");
    RuleVerdict out = RuleVerdict::Exact;
    for (const auto& r : rules.rules) {
        out = std::min(out, r.apply(known, unknown));
        if (out == RuleVerdict::Discard) break;
    }
    return out;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
    std::vector<std::size_t> row(b.size() + 1);
    for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::size_t diag = row[0];
        row[0] = i;
        for (std::size_t j = 1; j <= b.size(); ++j) {
            const std::size_t up = row[j];
            row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
            diag = up;
        }
    }
    return row[b.size()];
}

std::vector<double> link_feature_vector(const FingerprintRecord& known, const FingerprintRecord& unknown) {
    std::vector<double> x;
    x.reserve(kLinkFeatureCount);
    int differing = 0;
    for (auto key : kAttributeKeys) {
        const bool eq = attr(known, key) == attr(unknown, key);
        x.push_back(eq ? 1.0 : 0.0);
        differing += eq ? 0 : 1;
    }
    const auto ua_k = attr(known, "user_agent"), ua_u = attr(unknown, "user_agent");
    const std::size_t longest = std::max(ua_k.size(), ua_u.size());
    x.push_back(longest == 0 ? 0.0 : double(levenshtein(ua_k, ua_u)) / double(longest));
    x.push_back(differing);
    x.push_back(std::min(30.0, std::fabs(days_between(known.collected_at, unknown.collected_at))));
    x.push_back(std::abs(parse_int(attr(known, "screen_width")) - parse_int(attr(unknown, "screen_width"))));
    x.push_back(std::abs(parse_int(attr(known, "screen_height")) - parse_int(attr(unknown, "screen_height"))));
    return x;
}

void LinkerConfig::validate() const {
    if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorCode::InvalidConfig, "lambda must lie in [0, 1]");
    if (drawnapart() && !(epsilon > -1.0 && epsilon < 1.0))
        throw Error(ErrorCode::InvalidConfig, "epsilon must lie in (-1, 1) or be disabled");
    if (!(rank_gap >= 0.0)) throw Error(ErrorCode::InvalidConfig, "rank_gap must be non-negative");
    if (rules.rules.empty()) throw Error(ErrorCode::InvalidConfig, "empty rule set");
}

std::vector<ScoredCandidate> get_rank_and_filter(std::vector<ScoredCandidate> candidates, double rank_gap) {
    std::stable_sort(candidates.begin(), candidates.end(), [](const auto& a, const auto& b) {
        if (a.p != b.p) return a.p > b.p;
        return a.collected_at > b.collected_at;
    });
    if (candidates.size() >= 2 && candidates[0].id != candidates[1].id &&
        candidates[0].p - candidates[1].p < rank_gap)
        return {};
    return candidates;
}

Linker::Linker(LinkerConfig cfg, const ForestModel* forest, EmbedFn embed)
    : cfg_(std::move(cfg)), forest_(forest), embed_(std::move(embed)) {
    cfg_.validate();
    if (forest_ == nullptr || !forest_->trained())
        throw Error(ErrorCode::UntrainedModel, "linker needs a trained same-device forest");
    if (cfg_.drawnapart() && !embed_)
        throw Error(ErrorCode::UntrainedModel, "embedding step enabled without an embedder");
}

std::string Linker::new_id() {
    char buf[24];
    std::snprintf(buf, sizeof buf, "id-%06zu", ++next_id_);
    return buf;
}

const EmbeddingVector& Linker::embedding_of(Entry& e) {
    if (!e.embedding) {
        e.embedding = embed_(e.record);
        ++counters_.embedding_calls;
    }
    return *e.embedding;
}

std::string Linker::match(const FingerprintRecord& f_u) {
    std::vector<std::size_t> exact, candidates;
    for (std::size_t i = 0; i < gallery_.size(); ++i) {
        switch (rule_screen(gallery_[i].record, f_u, cfg_.rules)) {
            case RuleVerdict::Exact: exact.push_back(i); break;
            case RuleVerdict::Candidate: candidates.push_back(i); break;
            case RuleVerdict::Discard: break;
        }
    }

    if (!exact.empty()) {
        const auto& id = gallery_[exact.front()].id;
        for (auto i : exact)
            if (gallery_[i].id != id) return new_id();
        return id;
    }

    if (candidates.empty()) return new_id();

    if (cfg_.drawnapart()) {
        const EmbeddingVector e_u = embed_(f_u);
        ++counters_.embedding_calls;
        std::vector<std::pair<double, std::size_t>> by_cos;
        for (auto i : candidates) {
            by_cos.emplace_back(cosine_similarity(embedding_of(gallery_[i]), e_u), i);
            ++counters_.cosine_evaluations;
        }
        std::stable_sort(by_cos.begin(), by_cos.end(),
                         [](const auto& a, const auto& b) { return a.first > b.first; });
        if (by_cos.front().first > cfg_.epsilon) {
            ++counters_.short_circuits;
            return gallery_[by_cos.front().second].id;
        }
    }

    std::vector<ScoredCandidate> scored;
    for (auto i : candidates) {
        const auto x = link_feature_vector(gallery_[i].record, f_u);
        const double p = forest_->probability_of(x, kSameLabel);
        ++counters_.forest_calls;
        if (p >= cfg_.lambda) scored.push_back({gallery_[i].id, p, gallery_[i].record.collected_at});
    }
    const auto ranked = get_rank_and_filter(std::move(scored), cfg_.rank_gap);
    return ranked.empty() ? new_id() : ranked.front().id;
}

void Linker::add(const FingerprintRecord& r, const std::string& id) {
    for (auto& e : gallery_) {
        if (e.id == id) {
            e.record = r;
            e.embedding.reset();
            return;
        }
    }
    gallery_.push_back({id, r, std::nullopt});
}

std::string Linker::link(const FingerprintRecord& f_u) {
    std::string id = match(f_u);
    add(f_u, id);
    return id;
}

std::vector<FingerprintRecord> time_ordered(std::vector<FingerprintRecord> records) {
    std::stable_sort(records.begin(), records.end(), [](const auto& a, const auto& b) {
        if (a.collected_at != b.collected_at) return a.collected_at < b.collected_at;
        return a.client_id < b.client_id;
    });
    return records;
}

namespace {

std::map<std::string, std::vector<std::size_t>> by_device(const std::vector<FingerprintRecord>& corpus) {
    std::map<std::string, std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (!corpus[i].true_device)
            throw Error(ErrorCode::InsufficientPairs, "record without a true device label");
        out[*corpus[i].true_device].push_back(i);
    }
    for (auto& [d, idx] : out)
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
            return corpus[a].collected_at < corpus[b].collected_at;
        });
    return out;
}

}  // namespace

LinkPairs build_link_pairs(const std::vector<FingerprintRecord>& corpus, const RuleSet& rules,
                           const LinkPairOptions& opt) {
    if (opt.max_gap_collections < 1 || opt.negatives_per_record < 0)
        throw Error(ErrorCode::InvalidConfig, "bad link pair options");
    const auto devices = by_device(corpus);
    LinkPairs out;
    auto emit = [&](const FingerprintRecord& k, const FingerprintRecord& u, const char* label) {
        if (rule_screen(k, u, rules) != RuleVerdict::Candidate) return;
        out.X.push_row(link_feature_vector(k, u));
        out.y.emplace_back(label);
    };

    for (const auto& [d, idx] : devices)
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = i + 1; j < idx.size() && j <= i + std::size_t(opt.max_gap_collections); ++j)
                emit(corpus[idx[i]], corpus[idx[j]], kSameLabel);

    // Negatives: for each record, the other devices' records nearest in time
    // before it, in random device order.
    Rng rng = derive_rng(opt.seed, 0x9a1);
    std::vector<const std::vector<std::size_t>*> lists;
    for (const auto& [d, idx] : devices) lists.push_back(&idx);
    for (std::size_t a = 0; a < lists.size(); ++a) {
        for (auto u : *lists[a]) {
            std::vector<std::size_t> others;
            for (std::size_t b = 0; b < lists.size(); ++b)
                if (b != a) others.push_back(b);
            std::shuffle(others.begin(), others.end(), rng);
            int emitted = 0;
            for (auto b : others) {
                if (emitted >= opt.negatives_per_record) break;
                const FingerprintRecord* best = nullptr;
                for (auto k : *lists[b])
                    if (corpus[k].collected_at <= corpus[u].collected_at) best = &corpus[k];
                if (best == nullptr || rule_screen(*best, corpus[u], rules) != RuleVerdict::Candidate) continue;
                emit(*best, corpus[u], kDifferentLabel);
                ++emitted;
            }
        }
    }

    const auto same = std::count(out.y.begin(), out.y.end(), kSameLabel);
    if (same == 0 || same == std::ptrdiff_t(out.y.size()))
        throw Error(ErrorCode::InsufficientPairs, "link training needs both same-device and different-device pairs");
    return out;
}

ForestModel train_link_forest(const std::vector<FingerprintRecord>& corpus, const RuleSet& rules,
                              const ForestConfig& cfg, const LinkPairOptions& opt) {
    const auto pairs = build_link_pairs(corpus, rules, opt);
    return fit(pairs.X, pairs.y, cfg, ForestMode::Binary);
}

double epsilon_from_same_device(const std::vector<double>& same_device_cosines) {
    if (same_device_cosines.empty()) throw Error(ErrorCode::InsufficientPairs, "no same-device pairs");
    const double eps = stats::percentile(same_device_cosines, 5.0) + 0.05;
    return std::clamp(eps, std::nextafter(-1.0, 0.0), std::nextafter(1.0, 0.0));
}

EpsilonCalibration calibrate_epsilon(const std::vector<FingerprintRecord>& corpus, const EmbedFn& embed,
                                     std::uint64_t seed) {
    if (!embed) throw Error(ErrorCode::UntrainedModel, "no embedder");
    const auto devices = by_device(corpus);
    if (devices.size() < 2) throw Error(ErrorCode::InsufficientPairs, "need at least two devices");

    std::vector<EmbeddingVector> e(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) e[i] = embed(corpus[i]);

    EpsilonCalibration out;
    for (const auto& [d, idx] : devices)
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = i + 1; j < idx.size(); ++j)
                out.same_device.push_back(cosine_similarity(e[idx[i]], e[idx[j]]));
    if (out.same_device.empty()) throw Error(ErrorCode::InsufficientPairs, "no device has two records");

    // Balanced population of different-device pairs.
    std::vector<std::string> device_of(corpus.size());
    for (const auto& [d, idx] : devices)
        for (auto i : idx) device_of[i] = d;
    Rng rng = derive_rng(seed, 0xe95);
    std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
    const std::size_t want = out.same_device.size();
    for (std::size_t tries = 0; out.different_device.size() < want && tries < want * 50; ++tries) {
        const auto a = pick(rng), b = pick(rng);
        if (device_of[a] == device_of[b]) continue;
        out.different_device.push_back(cosine_similarity(e[a], e[b]));
    }
    out.same_device_p05 = stats::percentile(out.same_device, 5.0);
    out.epsilon = epsilon_from_same_device(out.same_device);
    return out;
}

std::vector<double> default_lambda_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 9; ++i) g.push_back(0.50 + 0.05 * i);
    g.push_back(0.995);
    return g;
}

double pairwise_link_f1(const std::vector<std::string>& assigned, const std::vector<std::string>& truth) {
    if (assigned.size() != truth.size()) throw Error(ErrorCode::DimensionMismatch, "label vectors differ in length");
    std::map<std::string, std::size_t> pred, real;
    std::map<std::pair<std::string, std::string>, std::size_t> both;
    for (std::size_t i = 0; i < assigned.size(); ++i) {
        ++pred[assigned[i]];
        ++real[truth[i]];
        ++both[{assigned[i], truth[i]}];
    }
    auto pairs = [](const auto& m) {
        double s = 0.0;
        for (const auto& [k, n] : m) s += double(n) * double(n - 1) / 2.0;
        return s;
    };
    const double tp = pairs(both), p = pairs(pred), t = pairs(real);
    if (p + t == 0.0) return 1.0;
    return 2.0 * tp / (p + t);
}

LambdaCalibration calibrate_lambda(const std::vector<FingerprintRecord>& slice, const ForestModel& forest,
                                   const std::vector<double>& grid, const LinkerConfig& base) {
    if (grid.empty()) throw Error(ErrorCode::InvalidConfig, "empty lambda grid");
    const auto ordered = time_ordered(slice);
    std::vector<std::string> truth;
    for (const auto& r : ordered) {
        if (!r.true_device) throw Error(ErrorCode::InsufficientPairs, "record without a true device label");
        truth.push_back(*r.true_device);
    }

    LambdaCalibration out;
    double best_f1 = -1.0;
    for (double lambda : grid) {
        LinkerConfig cfg = base;
        cfg.lambda = lambda;
        cfg.epsilon = kEpsilonDisabled;
        Linker linker(cfg, &forest);
        std::vector<std::string> assigned;
        assigned.reserve(ordered.size());
        for (const auto& r : ordered) assigned.push_back(linker.link(r));
        const double f1 = pairwise_link_f1(assigned, truth);
        out.f1_by_lambda.emplace_back(lambda, f1);
        if (f1 > best_f1 || (f1 == best_f1 && lambda > out.lambda)) {
            best_f1 = f1;
            out.lambda = lambda;
        }
    }
    return out;
}

}  // namespace euprint
