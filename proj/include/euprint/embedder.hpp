#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "euprint/synth.hpp"
#include "euprint/trace.hpp"

namespace euprint {

enum class Activation { Relu, Sigmoid };

struct NetworkSpec {
    int conv_blocks = 2;
    int conv_filters = 16;
    int kernel_size = 4;
    double dropout_rate = 0.119510;
    int dense_width = 64;
    int embedding_dim = 32;
    Activation activation = Activation::Relu;
    std::uint64_t seed = 0;

    static NetworkSpec desk();
    /// Hyperparameters of the published network (3 blocks, 128 filters, 256-d).
    static NetworkSpec paper();

    /// Throws InvalidConfig, or ShapeMismatch when the blocks shrink the
    /// 32x32 input to nothing.
    void validate() const;
    std::size_t flat_size() const;

    friend bool operator==(const NetworkSpec&, const NetworkSpec&) = default;
};

using EmbeddingVector = std::vector<double>;

/// Parameter block of one layer inside Network::params.
struct LayerInfo {
    std::string name;
    std::vector<std::size_t> shape;
    std::size_t offset = 0;
    std::size_t size = 0;

    friend bool operator==(const LayerInfo&, const LayerInfo&) = default;
};

class Network {
public:
    Network() = default;
    /// Fan-in scaled uniform init from spec.seed; biases start at zero.
    explicit Network(const NetworkSpec& spec, int head_classes = 0);

    const NetworkSpec& spec() const { return spec_; }
    int head_classes() const { return head_classes_; }
    bool has_head() const { return head_classes_ > 0; }
    const std::vector<LayerInfo>& layers() const { return layers_; }

    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }

    /// Adds (or replaces) a softmax classification head on the embedding.
    void attach_head(int classes, std::uint64_t seed);
    void drop_head();

    /// Inference-mode embedding: deterministic, dropout disabled.
    EmbeddingVector embed(const PreprocessedTrace& x) const;

    void save(const std::filesystem::path& path) const;
    static Network load(const std::filesystem::path& path);
    std::string to_bytes() const;
    static Network from_bytes(const std::string& bytes);

    friend bool operator==(const Network&, const Network&) = default;

private:
    friend class ForwardPass;
    void layout();

    NetworkSpec spec_;
    int head_classes_ = 0;
    std::vector<LayerInfo> layers_;
    std::vector<double> params_;
};

/// One forward pass with the activations kept for backpropagation.
class ForwardPass {
public:
    /// dropout_rng is required when train_mode is set and dropout is non-zero.
    ForwardPass(const Network& net, const PreprocessedTrace& x, bool train_mode, Rng* dropout_rng = nullptr);

    const EmbeddingVector& embedding() const { return embedding_; }
    /// Softmax probabilities of the head (empty without a head).
    const std::vector<double>& class_probabilities() const { return probs_; }

    /// Accumulates parameter gradients for d(loss)/d(embedding) = d_embedding
    /// plus, if given, d(loss)/d(logits) = d_logits into `grad`.
    void backward(std::span<const double> d_embedding, std::span<const double> d_logits,
                  std::vector<double>& grad) const;

private:
    const Network& net_;
    struct Block {
        std::size_t in_ch, in_side, out_side, pool_side;
        std::vector<double> input;      // block input
        std::vector<double> pre;        // conv output before activation
        std::vector<double> post;       // after activation and dropout
        std::vector<double> mask;       // dropout scale per unit (empty: none)
    };
    std::vector<Block> blocks_;
    std::vector<double> flat_;
    std::vector<double> hidden_pre_;
    std::vector<double> hidden_;
    std::vector<double> z_;
    double z_norm_ = 0.0;
    bool degenerate_ = false;
    EmbeddingVector embedding_;
    std::vector<double> probs_;
};

/// Mean softmax cross-entropy over a batch; fills grad when non-null.
double classification_loss(const Network& net, std::span<const PreprocessedTrace> xs,
                           std::span<const int> labels, std::vector<double>* grad,
                           bool train_mode = false, Rng* dropout_rng = nullptr);

struct Triplet {
    std::size_t anchor, positive, negative;
    friend auto operator<=>(const Triplet&, const Triplet&) = default;
};

/// max(0, |a-p|^2 - |a-n|^2 + margin)
double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n,
                    double margin);

/// Ordered triples with |a-p|^2 < |a-n|^2 < |a-p|^2 + margin.
/// Throws NoValidTriplets when the batch yields none.
std::vector<Triplet> mine_semi_hard(std::span<const EmbeddingVector> embeddings,
                                    std::span<const int> labels, double margin);

/// Mean triplet loss over the given triples; fills grad when non-null.
double batch_triplet_loss(const Network& net, std::span<const PreprocessedTrace> xs,
                          std::span<const Triplet> triplets, double margin, std::vector<double>* grad,
                          bool train_mode = false, Rng* dropout_rng = nullptr);

struct TripletConfig {
    double margin = 0.2;
    int batch_size = 128;
    int epochs = 30;
    double learning_rate = 0.05;

    void validate() const;
};

struct TrainConfig {
    int classification_epochs = 20;
    int classification_batch = 32;
    double classification_learning_rate = 0.05;
    TripletConfig triplet;
    double validation_fraction = 0.2;
    std::uint64_t seed = 0;
    /// Called after every epoch; useful for progress output.
    std::function<void(const std::string& phase, int epoch, double loss, double val_accuracy)> on_epoch;
};

struct EpochStats {
    std::string phase;  // "classification" or "triplet"
    int epoch = 0;
    double loss = 0.0;
    double validation_1nn = 0.0;
};

struct TrainResult {
    Network network;        // retained weights, head removed
    int best_epoch = 0;     // triplet epoch with the best validation 1-NN accuracy
    double best_validation_1nn = 0.0;
    double initial_triplet_loss = 0.0;  // over all semi-hard triplets before phase 2
    double final_triplet_loss = 0.0;    // same measure on the retained weights
    std::vector<EpochStats> history;
};

TrainResult train(std::span<const PreprocessedTrace> traces, std::span<const std::string> labels,
                  const NetworkSpec& spec, const TrainConfig& cfg);

/// Mean semi-hard triplet loss of the network over a fixed sample, computed
/// in chunks of `batch_size`; 0 when no chunk has a valid triplet.
double mean_semi_hard_loss(const Network& net, std::span<const PreprocessedTrace> traces,
                           std::span<const int> labels, double margin, int batch_size);

/// Mean of the seven per-trace embeddings, re-normalized.
EmbeddingVector embed_record(const Network& net, const FingerprintRecord& r);

/// Unit vector along v; vectors shorter than 1e-12 map to the uniform unit vector.
EmbeddingVector l2_normalize(std::span<const double> v);
double squared_distance(std::span<const double> a, std::span<const double> b);
double cosine_similarity(std::span<const double> a, std::span<const double> b);

struct LabeledEmbedding {
    EmbeddingVector embedding;
    std::string label;
};

/// First k distinct labels met while walking the gallery by ascending
/// Euclidean distance; equal distances keep gallery order.
std::vector<std::string> knn_topk(std::span<const LabeledEmbedding> gallery,
                                  std::span<const double> query, std::size_t k);

struct PopulationItem {
    EmbeddingVector embedding;
    std::string device;
    std::string renderer;
    std::string collection;  // pairs are formed across collections only
};

struct PopulationSummary {
    std::size_t count = 0;
    double q05 = 0, q25 = 0, median = 0, q75 = 0, q95 = 0;
};

struct DistancePopulations {
    std::vector<double> same_device;
    std::vector<double> same_renderer;       // different devices, same renderer string
    std::vector<double> different_renderer;
};

/// Pairwise Euclidean distances split into the three populations. Pairs from
/// the same collection are skipped. max_pairs > 0 caps each population by a
/// seeded uniform subsample.
DistancePopulations distance_populations(std::span<const PopulationItem> items,
                                         std::size_t max_pairs = 0, std::uint64_t seed = 0);

/// Throws EmptyPopulation for an empty sample.
PopulationSummary summarize_population(const std::vector<double>& samples);
double fraction_below(const std::vector<double>& samples, double threshold);

}  // namespace euprint
