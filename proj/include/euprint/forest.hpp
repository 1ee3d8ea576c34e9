#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace euprint {

/// Dense row-major feature matrix.
class FeatureMatrix {
public:
    FeatureMatrix() = default;
    FeatureMatrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols) {}

    static FeatureMatrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    void push_row(std::span<const double> values);

    FeatureMatrix select_rows(std::span<const std::size_t> idx) const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

enum class SplitFeatures { Sqrt, All, Fixed };

struct ForestConfig {
    int n_trees = 100;
    std::optional<int> max_depth;
    int min_samples_leaf = 1;
    SplitFeatures features_per_split = SplitFeatures::Sqrt;
    int fixed_features = 1;  // used with SplitFeatures::Fixed
    std::uint64_t seed = 0;

    void validate() const;
    std::size_t features_for(std::size_t n_features) const;
};

enum class ForestMode { Multinomial, Binary };

struct TreeNode {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<double> counts;  // leaf class histogram (bootstrap multiplicities)
};

struct DecisionTree {
    std::vector<TreeNode> nodes;

    const TreeNode& leaf_for(std::span<const double> x) const;
};

class ForestModel {
public:
    std::vector<std::string> classes;  // sorted label list
    std::size_t n_features = 0;
    std::vector<DecisionTree> trees;

    bool trained() const { return !trees.empty(); }

    /// Mean of per-tree leaf class frequencies, aligned with `classes`.
    std::vector<double> predict_proba(std::span<const double> x) const;
    /// Index into `classes` of the most probable class (lowest index on ties).
    std::size_t predict_index(std::span<const double> x) const;
    const std::string& predict(std::span<const double> x) const { return classes[predict_index(x)]; }

    /// Probability of `label`, 0 if the label was never seen.
    double probability_of(std::span<const double> x, const std::string& label) const;

    std::string to_json() const;
    static ForestModel from_json(const std::string& text);
    void save(const std::filesystem::path& path) const;
    static ForestModel load(const std::filesystem::path& path);
};

ForestModel fit(const FeatureMatrix& X, std::span<const std::string> y, const ForestConfig& cfg,
                ForestMode mode = ForestMode::Multinomial);

struct KFoldResult {
    double mean = 0.0;
    double std = 0.0;  // population std across folds
    std::vector<double> fold_accuracy;
};

/// Stratified k-fold: mean and spread of held-out accuracy.
KFoldResult kfold_accuracy(const FeatureMatrix& X, std::span<const std::string> y,
                           const ForestConfig& cfg, int k = 5);

/// Multiplicative gain over a featureless classifier.
double accuracy_gain(double accuracy, double base_rate);

}  // namespace euprint
