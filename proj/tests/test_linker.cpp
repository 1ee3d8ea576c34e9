#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <set>

#include "euprint/error.hpp"
#include "euprint/linker.hpp"
#include "euprint/stats.hpp"
#include "euprint/synth.hpp"

using namespace euprint;

namespace {

ErrorCode code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an euprint::Error");
    return ErrorCode::Io;
}

FingerprintRecord rec(const std::string& client, int day, AttributeMap attrs) {
    FingerprintRecord r;
    r.client_id = client;
    r.collected_at = add_hours(Timestamp{std::chrono::sys_days{std::chrono::year{2021} / 2 / 1}}, 24.0 * day);
    r.attributes = std::move(attrs);
    r.true_device = client;
    return r;
}

AttributeMap base_attrs() { return class_attribute_template("linker-test"); }

// One tree, one leaf: p(same) = same / (same + different).
ForestModel constant_forest(double same, double different) {
    ForestModel m;
    m.classes = {kDifferentLabel, kSameLabel};
    m.n_features = kLinkFeatureCount;
    TreeNode leaf;
    leaf.counts = {different, same};
    m.trees.push_back({{leaf}});
    return m;
}

// p(same) = 1 when at most one attribute differs, 0 otherwise.
ForestModel threshold_forest() {
    ForestModel m;
    m.classes = {kDifferentLabel, kSameLabel};
    m.n_features = kLinkFeatureCount;
    TreeNode root;
    root.feature = int(kAttributeKeys.size()) + 1;  // differing-attribute count
    root.threshold = 1.5;
    root.left = 1;
    root.right = 2;
    TreeNode same, diff;
    same.counts = {0, 10};
    diff.counts = {10, 0};
    m.trees.push_back({{root, same, diff}});
    return m;
}

EmbedFn table_embed(std::map<std::string, EmbeddingVector> table) {
    return [table = std::move(table)](const FingerprintRecord& r) { return table.at(r.client_id); };
}

// Embedding that depends only on the true device, plus small per-record noise.
EmbeddingVector device_embedding(const FingerprintRecord& r) {
    std::mt19937_64 dev(std::hash<std::string>{}(*r.true_device));
    std::mt19937_64 noise(std::hash<std::string>{}(*r.true_device) ^ std::uint64_t(r.collected_at.time_since_epoch().count()));
    std::normal_distribution<double> n(0.0, 1.0);
    std::vector<double> v(16);
    for (double& x : v) x = n(dev) + 0.05 * n(noise);
    return l2_normalize(v);
}

Scenario small_scenario(std::uint64_t seed, int collections = 12) {
    Scenario s;
    s.seed = seed;
    s.collections = collections;
    s.period_hours = 24.0;
    s.options.evolution = {0.1, 0.15, 0.0, 5};
    for (int i = 0; i < 6; ++i) {
        DeviceClassSpec c;
        c.name = "lk" + std::to_string(seed) + "-" + std::to_string(i);
        c.device_count = i < 2 ? 3 : 1;
        s.classes.push_back(c);
    }
    return s;
}

// Reference replay of the plain hybrid algorithm, written independently of
// Linker: latest record per id, exact path, forest threshold, ambiguity gap.
std::vector<std::string> reference_nude(const std::vector<FingerprintRecord>& ordered, const ForestModel& forest,
                                        double lambda, double gap) {
    struct Known {
        std::string id;
        FingerprintRecord r;
    };
    std::vector<Known> known;
    std::vector<std::string> out;
    int next = 0;
    auto fresh = [&] {
        char b[24];
        std::snprintf(b, sizeof b, "id-%06d", ++next);
        return std::string(b);
    };
    const auto rules = RuleSet::defaults();
    for (const auto& u : ordered) {
        std::set<std::string> exact_ids;
        bool any_exact = false;
        std::vector<std::tuple<double, Timestamp, std::string>> kept;
        for (const auto& k : known) {
            const auto v = rule_screen(k.r, u, rules);
            if (v == RuleVerdict::Exact) {
                any_exact = true;
                exact_ids.insert(k.id);
            } else if (v == RuleVerdict::Candidate) {
                const double p = forest.probability_of(link_feature_vector(k.r, u), kSameLabel);
                if (p >= lambda) kept.emplace_back(p, k.r.collected_at, k.id);
            }
        }
        std::string id;
        if (any_exact) {
            id = exact_ids.size() == 1 ? *exact_ids.begin() : fresh();
        } else if (kept.empty()) {
            id = fresh();
        } else {
            std::stable_sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
                if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
                return std::get<1>(a) > std::get<1>(b);
            });
            const bool ambiguous = kept.size() > 1 && std::get<2>(kept[0]) != std::get<2>(kept[1]) &&
                                   std::get<0>(kept[0]) - std::get<0>(kept[1]) < gap;
            id = ambiguous ? fresh() : std::get<2>(kept[0]);
        }
        out.push_back(id);
        auto it = std::find_if(known.begin(), known.end(), [&](const Known& k) { return k.id == id; });
        if (it == known.end()) known.push_back({id, u});
        else it->r = u;
    }
    return out;
}

// Textbook recursion with memoization.
std::size_t edit_distance_oracle(const std::string& a, const std::string& b) {
    std::map<std::pair<std::size_t, std::size_t>, std::size_t> memo;
    std::function<std::size_t(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> std::size_t {
        if (i == 0) return j;
        if (j == 0) return i;
        auto key = std::make_pair(i, j);
        if (auto it = memo.find(key); it != memo.end()) return it->second;
        const std::size_t r = std::min({d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1])});
        memo[key] = r;
        return r;
    };
    return d(a.size(), b.size());
}

double f1_oracle(const std::vector<std::string>& assigned, const std::vector<std::string>& truth) {
    double tp = 0, pp = 0, tt = 0;
    for (std::size_t i = 0; i < assigned.size(); ++i)
        for (std::size_t j = i + 1; j < assigned.size(); ++j) {
            const bool p = assigned[i] == assigned[j], t = truth[i] == truth[j];
            tp += p && t;
            pp += p;
            tt += t;
        }
    return pp + tt == 0 ? 1.0 : 2 * tp / (pp + tt);
}

}  // namespace

TEST_SUITE("linker") {

TEST_CASE("rule screen verdicts") {
    const auto rules = RuleSet::defaults();
    const auto a = base_attrs();
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, a), rules) == RuleVerdict::Exact);

    auto other_platform = a;
    other_platform["platform"] = a.at("platform") == "Win32" ? "Linux x86_64" : "Win32";
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, other_platform), rules) == RuleVerdict::Discard);

    auto updated = a;
    const auto pos = updated["user_agent"].find("Chrome/96");
    REQUIRE(pos != std::string::npos);
    updated["user_agent"].replace(pos, 9, "Chrome/97");
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, updated), rules) == RuleVerdict::Candidate);
    CHECK(rule_screen(rec("k", 0, updated), rec("u", 1, a), rules) == RuleVerdict::Discard);

    auto firefox = a;
    firefox["user_agent"] = "Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:95.0) Gecko/20100101 Firefox/95.0";
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, firefox), rules) == RuleVerdict::Discard);

    auto moved = a;
    moved["timezone"] = "Pacific/Auckland";
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, moved), rules) == RuleVerdict::Candidate);
    moved["http_accept_language"] = "ja-JP,ja;q=0.9";
    CHECK(rule_screen(rec("k", 0, a), rec("u", 1, moved), rules) == RuleVerdict::Discard);

    CHECK(code_of([&] { rule_screen(rec("k", 0, a), rec("u", 1, a), RuleSet{}); }) == ErrorCode::InvalidConfig);
}

TEST_CASE("user agent families") {
    CHECK(parse_user_agent("Mozilla/5.0 (Windows NT 10.0) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/96.0.4664.45 Safari/537.36").family == "chrome");
    CHECK(parse_user_agent("Mozilla/5.0 (Windows NT 10.0) AppleWebKit/537.36 (KHTML, like Gecko) Chrome/96.0.4664.45 Safari/537.36").major == 96);
    CHECK(parse_user_agent("Mozilla/5.0 (Windows NT 10.0) Chrome/96.0 Safari/537.36 Edg/96.0.1054.43").family == "edge");
    CHECK(parse_user_agent("Mozilla/5.0 (Windows NT 10.0) Chrome/96.0 Safari/537.36 OPR/82.0.4227.23").major == 82);
    CHECK(parse_user_agent("Mozilla/5.0 (Windows NT 10.0) Chrome/94.0 YaBrowser/21.11.3.927 Safari/537.36").family == "yandex");
    CHECK(parse_user_agent("Mozilla/5.0 (X11; Linux x86_64; rv:95.0) Gecko/20100101 Firefox/95.0").family == "firefox");
    CHECK(parse_user_agent("Mozilla/5.0 (Macintosh) AppleWebKit/605.1.15 (KHTML, like Gecko) Version/15.1 Safari/605.1.15").family == "safari");
    CHECK(parse_user_agent("curl/7.68.0").family == "other");
}

TEST_CASE("levenshtein agrees with the recursive definition") {
    CHECK(levenshtein("kitten", "sitting") == 3);
    CHECK(levenshtein("", "abc") == 3);
    CHECK(levenshtein("same", "same") == 0);
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> len(0, 9), ch(0, 3);
    for (int i = 0; i < 300; ++i) {
        std::string a, b;
        for (int k = len(rng); k > 0; --k) a += char('a' + ch(rng));
        for (int k = len(rng); k > 0; --k) b += char('a' + ch(rng));
        REQUIRE(levenshtein(a, b) == edit_distance_oracle(a, b));
        REQUIRE(levenshtein(a, b) == levenshtein(b, a));
    }
}

TEST_CASE("feature vector layout") {
    const auto a = base_attrs();
    const auto x = link_feature_vector(rec("k", 3, a), rec("u", 3, a));
    REQUIRE(x.size() == kLinkFeatureCount);
    for (std::size_t i = 0; i < kAttributeKeys.size(); ++i) CHECK(x[i] == 1.0);
    for (std::size_t i = kAttributeKeys.size(); i < x.size(); ++i) CHECK(x[i] == 0.0);

    auto changed = a;
    changed["screen_width"] = "1000";
    changed["screen_height"] = "700";
    const auto y = link_feature_vector(rec("k", 0, a), rec("u", 45, changed));
    CHECK(y[kAttributeKeys.size() + 1] == 2.0);  // two attributes differ
    CHECK(y[kAttributeKeys.size() + 2] == 30.0);  // gap capped
    CHECK(y[kAttributeKeys.size() + 3] == std::abs(std::stod(a.at("screen_width")) - 1000));
    CHECK(y[kAttributeKeys.size() + 4] == std::abs(std::stod(a.at("screen_height")) - 700));

    auto one = a;
    one["dnt"] = "1";
    CHECK(link_feature_vector(rec("k", 0, a), rec("u", 1, one))[kAttributeKeys.size() + 1] == 1.0);
}

TEST_CASE("feature vector length is constant across a corpus") {
    const auto corpus = small_scenario(3, 6).generate();
    for (std::size_t i = 0; i < corpus.size(); i += 3)
        for (std::size_t j = 0; j < corpus.size(); j += 5)
            REQUIRE(link_feature_vector(corpus[i], corpus[j]).size() == kLinkFeatureCount);
}

TEST_CASE("rank and filter") {
    const Timestamp t0{};
    const Timestamp t1 = t0 + std::chrono::hours(1);
    CHECK(get_rank_and_filter({{"a", 0.7, t0}}, 0.1).size() == 1);
    CHECK(get_rank_and_filter({{"a", 0.95, t0}, {"b", 0.94, t0}}, 0.10).empty());
    CHECK(get_rank_and_filter({{"a", 0.95, t0}, {"a", 0.94, t0}}, 0.10).size() == 2);
    const auto r = get_rank_and_filter({{"b", 0.80, t0}, {"a", 0.99, t0}}, 0.10);
    REQUIRE(r.size() == 2);
    CHECK(r[0].id == "a");
    const auto tie = get_rank_and_filter({{"old", 0.9, t0}, {"new", 0.9, t1}}, 0.0);
    REQUIRE(tie.size() == 2);
    CHECK(tie[0].id == "new");
}

TEST_CASE("linker configuration checks") {
    const auto f = constant_forest(1, 1);
    CHECK(code_of([&] { Linker(LinkerConfig{}, nullptr, device_embedding); }) == ErrorCode::UntrainedModel);
    ForestModel untrained;
    CHECK(code_of([&] { Linker(LinkerConfig{}, &untrained, device_embedding); }) == ErrorCode::UntrainedModel);
    CHECK(code_of([&] { Linker(LinkerConfig{}, &f); }) == ErrorCode::UntrainedModel);
    LinkerConfig bad;
    bad.lambda = 1.5;
    CHECK(code_of([&] { Linker(bad, &f, device_embedding); }) == ErrorCode::InvalidConfig);
    bad = {};
    bad.epsilon = 1.0;
    CHECK(code_of([&] { Linker(bad, &f, device_embedding); }) == ErrorCode::InvalidConfig);
    LinkerConfig nude;
    nude.epsilon = kEpsilonDisabled;
    CHECK_NOTHROW(Linker(nude, &f));
}

TEST_CASE("match paths") {
    const auto f = constant_forest(95, 5);  // p(same) = 0.95
    const auto a = base_attrs();
    auto b = a;
    b["plugins"] = "";

    SUBCASE("empty gallery yields a new id") {
        Linker l(LinkerConfig{}, &f, table_embed({{"u", {1, 0}}}));
        CHECK(l.match(rec("u", 0, a)) == "id-000001");
        CHECK(l.gallery_size() == 0);
    }

    SUBCASE("exact match short-cuts everything") {
        Linker l(LinkerConfig{}, &f, table_embed({{"k", {1, 0}}, {"u", {0, 1}}, {"c", {0, 1}}}));
        const auto id = l.link(rec("k", 0, a));
        l.add(rec("c", 0, b), "other");  // a candidate that would otherwise be scored
        const auto before = l.counters();
        CHECK(l.match(rec("u", 1, a)) == id);
        CHECK(l.counters().forest_calls == before.forest_calls);
        CHECK(l.counters().embedding_calls == before.embedding_calls);
        CHECK(l.counters().cosine_evaluations == before.cosine_evaluations);
    }

    SUBCASE("two exact matches with different ids give a new id") {
        Linker l(LinkerConfig{}, &f, table_embed({}));
        l.add(rec("k1", 0, a), "x");
        l.add(rec("k2", 0, a), "y");
        const auto id = l.match(rec("u", 1, a));
        CHECK(id != "x");
        CHECK(id != "y");
    }

    SUBCASE("similar embedding short-circuits the forest") {
        Linker l(LinkerConfig{}, &f, table_embed({{"k", {1, 0}}, {"u", {0.9, std::sqrt(1 - 0.81)}}}));
        const auto id = l.link(rec("k", 0, a));
        CHECK(l.match(rec("u", 1, b)) == id);
        CHECK(l.counters().forest_calls == 0);
        CHECK(l.counters().short_circuits == 1);
    }

    SUBCASE("dissimilar embedding falls through to the forest") {
        Linker l(LinkerConfig{}, &f, table_embed({{"k", {1, 0}}, {"u", {0.1, std::sqrt(0.99)}}}));
        const auto id = l.link(rec("k", 0, a));
        CHECK(l.match(rec("u", 1, b)) == id);  // 0.95 >= lambda 0.90
        CHECK(l.counters().forest_calls == 1);
        CHECK(l.counters().short_circuits == 0);
    }

    SUBCASE("forest below lambda gives a new id") {
        const auto weak = constant_forest(5, 5);
        LinkerConfig cfg;
        cfg.epsilon = kEpsilonDisabled;
        Linker l(cfg, &weak);
        const auto id = l.link(rec("k", 0, a));
        CHECK(l.match(rec("u", 1, b)) != id);
        CHECK(l.counters().embedding_calls == 0);
    }

    SUBCASE("best cosine wins among several candidates") {
        Linker l(LinkerConfig{}, &f,
                 table_embed({{"k1", {0.5, std::sqrt(0.75)}}, {"k2", {0.99, std::sqrt(1 - 0.9801)}}, {"u", {1, 0}}}));
        auto a2 = a;
        a2["dnt"] = "1";
        l.add(rec("k1", 0, a), "first");
        l.add(rec("k2", 0, a2), "second");
        CHECK(l.match(rec("u", 1, b)) == "second");
    }

    SUBCASE("discarded records are never candidates") {
        auto linux = a;
        linux["platform"] = "Linux x86_64";
        Linker l(LinkerConfig{}, &f, table_embed({{"k", {1, 0}}, {"u", {1, 0}}}));
        const auto id = l.link(rec("k", 0, a));
        CHECK(l.match(rec("u", 1, linux)) != id);
        CHECK(l.counters().cosine_evaluations == 0);
    }
}

TEST_CASE("gallery keeps the latest record per id") {
    const auto f = constant_forest(1, 0);
    LinkerConfig cfg;
    cfg.epsilon = kEpsilonDisabled;
    Linker l(cfg, &f);
    auto a = base_attrs();
    const auto id = l.link(rec("d", 0, a));
    a["dnt"] = "1";
    CHECK(l.link(rec("d", 1, a)) == id);
    CHECK(l.gallery_size() == 1);
    // The stored record is now the updated one, so the updated attributes match exactly.
    const auto before = l.counters().forest_calls;
    CHECK(l.link(rec("d", 2, a)) == id);
    CHECK(l.counters().forest_calls == before);
}

TEST_CASE("disabled epsilon reproduces the plain algorithm") {
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto corpus = time_ordered(small_scenario(seed).generate());
        ForestConfig fc;
        fc.n_trees = 20;
        fc.seed = seed;
        const auto forest = train_link_forest(small_scenario(seed + 100).generate(), RuleSet::defaults(), fc);
        for (double lambda : {0.5, 0.8, 0.95}) {
            LinkerConfig off;
            off.lambda = lambda;
            off.epsilon = kEpsilonDisabled;
            Linker with_embedder(off, &forest, device_embedding);
            Linker without(off, &forest);
            const auto expected = reference_nude(corpus, forest, lambda, off.rank_gap);
            for (std::size_t i = 0; i < corpus.size(); ++i) {
                const auto id = with_embedder.link(corpus[i]);
                REQUIRE(id == without.link(corpus[i]));
                REQUIRE(id == expected[i]);
            }
            CHECK(with_embedder.counters().embedding_calls == 0);
            CHECK(with_embedder.counters().forest_calls == without.counters().forest_calls);
        }
    }
}

TEST_CASE("link pairs") {
    const auto corpus = small_scenario(9).generate();
    const auto pairs = build_link_pairs(corpus, RuleSet::defaults());
    REQUIRE(pairs.X.rows() == pairs.y.size());
    CHECK(pairs.X.cols() == kLinkFeatureCount);
    CHECK(std::count(pairs.y.begin(), pairs.y.end(), kSameLabel) > 0);
    CHECK(std::count(pairs.y.begin(), pairs.y.end(), kDifferentLabel) > 0);

    std::vector<FingerprintRecord> one_device;
    for (const auto& r : corpus)
        if (r.true_device == corpus.front().true_device) one_device.push_back(r);
    CHECK(code_of([&] { build_link_pairs(one_device, RuleSet::defaults()); }) == ErrorCode::InsufficientPairs);
}

TEST_CASE("epsilon calibration") {
    std::vector<double> same;
    for (int i = 0; i <= 100; ++i) same.push_back(0.10 + 0.04 * (i - 5));  // 5th percentile: element 5
    CHECK(epsilon_from_same_device(same) == doctest::Approx(0.15).epsilon(1e-12));
    CHECK(epsilon_from_same_device({1.0, 1.0, 1.0}) < 1.0);
    CHECK(epsilon_from_same_device({1.0, 1.0, 1.0}) > 0.999);
    CHECK(code_of([] { epsilon_from_same_device({}); }) == ErrorCode::InsufficientPairs);

    const auto corpus = small_scenario(4, 5).generate();
    const auto cal = calibrate_epsilon(corpus, device_embedding, 1);
    CHECK(cal.same_device.size() == cal.different_device.size());
    auto sorted = cal.same_device;
    std::sort(sorted.begin(), sorted.end());
    const double pos = 0.05 * double(sorted.size() - 1);
    const auto lo = std::size_t(pos);
    const double p05 = sorted[lo] + (pos - double(lo)) * (sorted[std::min(lo + 1, sorted.size() - 1)] - sorted[lo]);
    CHECK(cal.epsilon == doctest::Approx(std::min(p05 + 0.05, std::nextafter(1.0, 0.0))));
    // Perfectly separated populations: same ~ 1.
    CHECK(cal.same_device_p05 > 0.99);

    std::vector<FingerprintRecord> single;
    for (const auto& r : corpus)
        if (r.true_device == corpus.front().true_device) single.push_back(r);
    CHECK(code_of([&] { calibrate_epsilon(single, device_embedding); }) == ErrorCode::InsufficientPairs);
}

TEST_CASE("pairwise F1 matches brute force") {
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> n(1, 40), lab(0, 5);
    for (int t = 0; t < 200; ++t) {
        std::vector<std::string> a, b;
        for (int i = n(rng); i > 0; --i) {
            a.push_back("i" + std::to_string(lab(rng)));
            b.push_back("d" + std::to_string(lab(rng)));
        }
        REQUIRE(pairwise_link_f1(a, b) == doctest::Approx(f1_oracle(a, b)).epsilon(1e-12));
    }
    CHECK(pairwise_link_f1({"x", "x", "y"}, {"a", "a", "b"}) == 1.0);
    CHECK(code_of([] { pairwise_link_f1({"x"}, {}); }) == ErrorCode::DimensionMismatch);
}

TEST_CASE("lambda calibration tie-breaks toward the largest grid value") {
    const auto grid = default_lambda_grid();
    REQUIRE(grid.size() == 11);
    CHECK(grid.front() == 0.5);
    CHECK(grid.back() == 0.995);

    SUBCASE("degenerate constant forest") {
        // One record per device: any link is a false link.
        std::vector<FingerprintRecord> slice;
        auto a = base_attrs();
        for (int i = 0; i < 6; ++i) {
            a["screen_width"] = std::to_string(1000 + i);
            slice.push_back(rec("dev" + std::to_string(i), i, a));
        }
        const auto cal = calibrate_lambda(slice, constant_forest(1, 1));
        CHECK(cal.lambda == 0.995);
        CHECK(cal.f1_by_lambda.size() == grid.size());
    }

    SUBCASE("separable forest") {
        std::vector<FingerprintRecord> slice;
        auto x = base_attrs();
        auto y = base_attrs();
        y["platform"] = "MacIntel";
        y["timezone"] = "Europe/Paris";
        y["screen_width"] = "1";
        for (int day = 0; day < 5; ++day) {
            x["dnt"] = day % 2 ? "1" : "0";
            y["dnt"] = day % 2 ? "1" : "0";
            slice.push_back(rec("x", day, x));
            slice.push_back(rec("y", day, y));
        }
        const auto cal = calibrate_lambda(slice, threshold_forest());
        for (const auto& [l, f1] : cal.f1_by_lambda) CHECK(f1 == 1.0);
        CHECK(cal.lambda == 0.995);
    }
}

TEST_CASE("lambda is stable across disjoint halves") {
    Scenario s;
    s.seed = 77;
    s.collections = 10;
    s.period_hours = 24.0;
    s.options.evolution = {0.1, 0.1, 0.0, 0};
    for (int i = 0; i < 16; ++i) {
        DeviceClassSpec c;
        c.name = "half-" + std::to_string(i);
        s.classes.push_back(c);
    }
    const auto corpus = s.generate();
    ForestConfig fc;
    fc.n_trees = 30;
    const auto forest = train_link_forest(corpus, RuleSet::defaults(), fc);
    std::set<std::string> all;
    for (const auto& r : corpus) all.insert(*r.true_device);
    const std::vector<std::string> devices(all.begin(), all.end());
    std::set<std::string> odd;
    for (std::size_t i = 1; i < devices.size(); i += 2) odd.insert(devices[i]);
    std::vector<FingerprintRecord> first, second;
    for (const auto& r : corpus) (odd.contains(*r.true_device) ? first : second).push_back(r);
    std::set<std::string> d1, d2;
    for (const auto& r : first) d1.insert(*r.true_device);
    for (const auto& r : second) d2.insert(*r.true_device);
    for (const auto& d : d1) REQUIRE_FALSE(d2.contains(d));
    const double l1 = calibrate_lambda(first, forest).lambda;
    const double l2 = calibrate_lambda(second, forest).lambda;
    CHECK(std::fabs(l1 - l2) <= 0.05 + 1e-12);
}

}  // TEST_SUITE
