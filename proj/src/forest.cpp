#include "euprint/forest.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include <json.hpp>

#include "euprint/error.hpp"
#include "euprint/synth.hpp"

namespace euprint {

FeatureMatrix FeatureMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
    FeatureMatrix m;
    for (const auto& r : rows) m.push_row(r);
    return m;
}

void FeatureMatrix::push_row(std::span<const double> values) {
    if (rows_ == 0 && cols_ == 0) cols_ = values.size();
    if (values.size() != cols_)
        throw Error(ErrorCode::DimensionMismatch, "row has " + std::to_string(values.size()) +
                                                      " features, expected " + std::to_string(cols_));
    data_.insert(data_.end(), values.begin(), values.end());
    ++rows_;
}

FeatureMatrix FeatureMatrix::select_rows(std::span<const std::size_t> idx) const {
    FeatureMatrix m(idx.size(), cols_);
    for (std::size_t i = 0; i < idx.size(); ++i)
        std::copy_n(data_.begin() + std::ptrdiff_t(idx[i] * cols_), cols_,
                    m.data_.begin() + std::ptrdiff_t(i * cols_));
    return m;
}

void ForestConfig::validate() const {
    if (n_trees < 1) throw Error(ErrorCode::InvalidConfig, "n_trees must be >= 1");
    if (min_samples_leaf < 1) throw Error(ErrorCode::InvalidConfig, "min_samples_leaf must be >= 1");
    if (max_depth && *max_depth < 1) throw Error(ErrorCode::InvalidConfig, "max_depth must be >= 1");
    if (features_per_split == SplitFeatures::Fixed && fixed_features < 1)
        throw Error(ErrorCode::InvalidConfig, "fixed feature count must be >= 1");
}

std::size_t ForestConfig::features_for(std::size_t n_features) const {
    switch (features_per_split) {
        case SplitFeatures::All: return n_features;
        case SplitFeatures::Fixed: return std::min(n_features, std::size_t(fixed_features));
        case SplitFeatures::Sqrt:
            return std::max<std::size_t>(1, std::size_t(std::floor(std::sqrt(double(n_features)))));
    }
    return n_features;
}

const TreeNode& DecisionTree::leaf_for(std::span<const double> x) const {
    const TreeNode* node = &nodes.front();
    while (node->feature >= 0)
        node = &nodes[std::size_t(x[std::size_t(node->feature)] <= node->threshold ? node->left : node->right)];
    return *node;
}

namespace {

class TreeBuilder {
public:
    // `columns` is the feature matrix transposed: columns[f * n + i].
    TreeBuilder(const std::vector<double>& columns, std::size_t n_rows, std::size_t n_features,
                const std::vector<int>& y, std::size_t n_classes, const ForestConfig& cfg, Rng rng)
        : columns_(columns), n_rows_(n_rows), n_features_(n_features), y_(y),
          n_classes_(n_classes), cfg_(cfg), rng_(std::move(rng)) {
        feature_pool_.resize(n_features);
        std::iota(feature_pool_.begin(), feature_pool_.end(), 0);
    }

    DecisionTree build() {
        std::uniform_int_distribution<std::size_t> pick(0, n_rows_ - 1);
        samples_.resize(n_rows_);
        for (auto& s : samples_) s = pick(rng_);
        tree_.nodes.clear();
        grow(0, samples_.size(), 0);
        return std::move(tree_);
    }

private:
    struct Split {
        bool found = false;
        std::size_t feature = 0;
        double threshold = 0.0;
        double score = 0.0;  // sum over children of (sum_k count_k^2) / n_child
    };

    int grow(std::size_t begin, std::size_t end, int depth) {
        const int node_id = int(tree_.nodes.size());
        tree_.nodes.emplace_back();

        std::vector<std::int64_t> counts(n_classes_, 0);
        for (std::size_t i = begin; i < end; ++i) ++counts[std::size_t(y_[samples_[i]])];
        const std::size_t n = end - begin;
        const bool pure = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; }) <= 1;
        const bool depth_cap = cfg_.max_depth && depth >= *cfg_.max_depth;

        Split best;
        if (!pure && !depth_cap && n >= 2 * std::size_t(cfg_.min_samples_leaf)) best = find_split(begin, end, counts);

        std::int64_t sq = 0;
        for (auto c : counts) sq += c * c;
        if (!best.found || !(best.score > double(sq) / double(n))) {
            auto& leaf = tree_.nodes[std::size_t(node_id)];
            leaf.counts.assign(counts.begin(), counts.end());
            return node_id;
        }

        const double* col = columns_.data() + best.feature * n_rows_;
        const auto mid = std::partition(samples_.begin() + std::ptrdiff_t(begin),
                                        samples_.begin() + std::ptrdiff_t(end),
                                        [&](std::size_t s) { return col[s] <= best.threshold; });
        const auto split_at = std::size_t(mid - samples_.begin());

        const int left = grow(begin, split_at, depth + 1);
        const int right = grow(split_at, end, depth + 1);
        auto& node = tree_.nodes[std::size_t(node_id)];
        node.feature = int(best.feature);
        node.threshold = best.threshold;
        node.left = left;
        node.right = right;
        return node_id;
    }

    Split find_split(std::size_t begin, std::size_t end, const std::vector<std::int64_t>& totals) {
        const std::size_t m = cfg_.features_for(n_features_);
        for (std::size_t i = 0; i < m; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, n_features_ - 1);
            std::swap(feature_pool_[i], feature_pool_[pick(rng_)]);
        }

        Split best;
        const std::size_t n = end - begin;
        const auto min_leaf = std::size_t(cfg_.min_samples_leaf);
        std::vector<std::int64_t> left(n_classes_), right(n_classes_);
        for (std::size_t fi = 0; fi < m; ++fi) {
            const std::size_t f = feature_pool_[fi];
            const double* col = columns_.data() + f * n_rows_;
            buf_.clear();
            for (std::size_t i = begin; i < end; ++i) buf_.emplace_back(col[samples_[i]], y_[samples_[i]]);
            std::sort(buf_.begin(), buf_.end());
            if (buf_.front().first == buf_.back().first) continue;

            std::fill(left.begin(), left.end(), 0);
            right = totals;
            std::int64_t sq_left = 0, sq_right = 0;
            for (auto c : right) sq_right += c * c;

            for (std::size_t i = 0; i + 1 < n; ++i) {
                const auto c = std::size_t(buf_[i].second);
                sq_left += 2 * left[c] + 1;
                ++left[c];
                sq_right -= 2 * right[c] - 1;
                --right[c];
                const std::size_t n_left = i + 1;
                if (buf_[i].first == buf_[i + 1].first) continue;
                if (n_left < min_leaf || n - n_left < min_leaf) continue;
                const double score = double(sq_left) / double(n_left) + double(sq_right) / double(n - n_left);
                const double threshold = buf_[i].first + (buf_[i + 1].first - buf_[i].first) / 2.0;
                // Ties: lowest feature index, then lowest threshold.
                const bool better =
                    !best.found || score > best.score ||
                    (score == best.score &&
                     (f < best.feature || (f == best.feature && threshold < best.threshold)));
                if (better) best = {true, f, threshold, score};
            }
        }
        return best;
    }

    const std::vector<double>& columns_;
    std::size_t n_rows_;
    std::size_t n_features_;
    const std::vector<int>& y_;
    std::size_t n_classes_;
    const ForestConfig& cfg_;
    Rng rng_;
    std::vector<std::size_t> feature_pool_;
    std::vector<std::size_t> samples_;
    std::vector<std::pair<double, int>> buf_;
    DecisionTree tree_;
};

}  // namespace

ForestModel fit(const FeatureMatrix& X, std::span<const std::string> y, const ForestConfig& cfg,
                ForestMode mode) {
    cfg.validate();
    if (X.rows() == 0 || y.empty()) throw Error(ErrorCode::EmptyDataset, "no training samples");
    if (X.rows() != y.size())
        throw Error(ErrorCode::DimensionMismatch, "feature rows and labels differ in count");

    ForestModel model;
    const std::set<std::string> label_set(y.begin(), y.end());
    model.classes.assign(label_set.begin(), label_set.end());
    model.n_features = X.cols();

    if (model.classes.size() < 2) {
        if (mode == ForestMode::Binary)
            throw Error(ErrorCode::SingleClassDataset, "binary forest needs both classes");
        std::cerr << "warning: training a forest on a single class (" << model.classes.front() << ")\n";
    }
    if (mode == ForestMode::Binary && model.classes.size() > 2)
        throw Error(ErrorCode::InvalidConfig, "binary forest got more than two labels");

    std::map<std::string, int> index;
    for (std::size_t i = 0; i < model.classes.size(); ++i) index[model.classes[i]] = int(i);
    std::vector<int> yi(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) yi[i] = index[y[i]];

    std::vector<double> columns(X.rows() * X.cols());
    for (std::size_t r = 0; r < X.rows(); ++r)
        for (std::size_t c = 0; c < X.cols(); ++c) columns[c * X.rows() + r] = X(r, c);

    model.trees.reserve(std::size_t(cfg.n_trees));
    for (int t = 0; t < cfg.n_trees; ++t) {
        TreeBuilder builder(columns, X.rows(), X.cols(), yi, model.classes.size(), cfg,
                            derive_rng(cfg.seed, std::uint64_t(t)));
        model.trees.push_back(builder.build());
    }
    return model;
}

std::vector<double> ForestModel::predict_proba(std::span<const double> x) const {
    if (!trained()) throw Error(ErrorCode::UntrainedModel, "forest has no trees");
    if (x.size() != n_features)
        throw Error(ErrorCode::DimensionMismatch, "query has " + std::to_string(x.size()) +
                                                      " features, model expects " + std::to_string(n_features));
    std::vector<double> p(classes.size(), 0.0);
    for (const auto& tree : trees) {
        const auto& leaf = tree.leaf_for(x);
        const double total = std::accumulate(leaf.counts.begin(), leaf.counts.end(), 0.0);
        for (std::size_t k = 0; k < p.size(); ++k) p[k] += leaf.counts[k] / total;
    }
    for (double& v : p) v /= double(trees.size());
    return p;
}

std::size_t ForestModel::predict_index(std::span<const double> x) const {
    const auto p = predict_proba(x);
    return std::size_t(std::max_element(p.begin(), p.end()) - p.begin());
}

double ForestModel::probability_of(std::span<const double> x, const std::string& label) const {
    const auto it = std::find(classes.begin(), classes.end(), label);
    if (it == classes.end()) return 0.0;
    return predict_proba(x)[std::size_t(it - classes.begin())];
}

std::string ForestModel::to_json() const {
    nlohmann::ordered_json j;
    j["format"] = "euprint-forest";
    j["version"] = 1;
    j["classes"] = classes;
    j["n_features"] = n_features;
    auto trees_json = nlohmann::ordered_json::array();
    for (const auto& tree : trees) {
        auto nodes = nlohmann::ordered_json::array();
        for (const auto& n : tree.nodes) {
            nlohmann::ordered_json node;
            if (n.feature < 0) {
                node["counts"] = n.counts;
            } else {
                node["feature"] = n.feature;
                node["threshold"] = n.threshold;
                node["left"] = n.left;
                node["right"] = n.right;
            }
            nodes.push_back(std::move(node));
        }
        trees_json.push_back({{"nodes", std::move(nodes)}});
    }
    j["trees"] = std::move(trees_json);
    return j.dump();
}

ForestModel ForestModel::from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::parse_error& e) {
        throw Error(ErrorCode::MalformedDocument, e.what());
    }
    if (j.value("format", "") != "euprint-forest" || j.value("version", 0) != 1)
        throw Error(ErrorCode::SchemaViolation, "not a version-1 forest dump");
    ForestModel m;
    m.classes = j.at("classes").get<std::vector<std::string>>();
    m.n_features = j.at("n_features").get<std::size_t>();
    for (const auto& t : j.at("trees")) {
        DecisionTree tree;
        for (const auto& n : t.at("nodes")) {
            TreeNode node;
            if (n.contains("counts")) {
                node.counts = n["counts"].get<std::vector<double>>();
            } else {
                node.feature = n.at("feature").get<int>();
                node.threshold = n.at("threshold").get<double>();
                node.left = n.at("left").get<int>();
                node.right = n.at("right").get<int>();
            }
            tree.nodes.push_back(std::move(node));
        }
        m.trees.push_back(std::move(tree));
    }
    return m;
}

void ForestModel::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << to_json() << '\n';
}

ForestModel ForestModel::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json(ss.str());
}

KFoldResult kfold_accuracy(const FeatureMatrix& X, std::span<const std::string> y,
                           const ForestConfig& cfg, int k) {
    if (k < 2) throw Error(ErrorCode::InvalidConfig, "k-fold needs k >= 2");
    if (X.rows() != y.size()) throw Error(ErrorCode::DimensionMismatch, "rows and labels differ");
    if (y.empty()) throw Error(ErrorCode::EmptyDataset, "no samples");

    std::map<std::string, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < y.size(); ++i) by_class[y[i]].push_back(i);

    Rng rng = derive_rng(cfg.seed, 0xf01d);
    std::vector<int> fold_of(y.size());
    std::size_t running = 0;
    for (auto& [label, idx] : by_class) {
        if (idx.size() < std::size_t(k))
            throw Error(ErrorCode::InsufficientSamplesPerClass,
                        "class " + label + " has fewer than " + std::to_string(k) + " samples");
        std::shuffle(idx.begin(), idx.end(), rng);
        for (std::size_t i : idx) fold_of[i] = int(running++ % std::size_t(k));
    }

    KFoldResult result;
    for (int fold = 0; fold < k; ++fold) {
        std::vector<std::size_t> train_idx, test_idx;
        for (std::size_t i = 0; i < y.size(); ++i) (fold_of[i] == fold ? test_idx : train_idx).push_back(i);
        std::vector<std::string> train_y;
        for (auto i : train_idx) train_y.push_back(y[i]);

        ForestConfig fold_cfg = cfg;
        fold_cfg.seed = cfg.seed + std::uint64_t(fold) * 7919u;
        const auto model = fit(X.select_rows(train_idx), train_y, fold_cfg);
        std::size_t correct = 0;
        for (auto i : test_idx) correct += model.predict(X.row(i)) == y[i];
        result.fold_accuracy.push_back(double(correct) / double(test_idx.size()));
    }
    const double n = double(k);
    result.mean = std::accumulate(result.fold_accuracy.begin(), result.fold_accuracy.end(), 0.0) / n;
    double ss = 0.0;
    for (double a : result.fold_accuracy) ss += (a - result.mean) * (a - result.mean);
    result.std = std::sqrt(ss / n);
    return result;
}

double accuracy_gain(double accuracy, double base_rate) {
    if (!(base_rate > 0.0)) throw Error(ErrorCode::ZeroBaseRate, "base rate must be positive");
    return accuracy / base_rate;
}

}  // namespace euprint
