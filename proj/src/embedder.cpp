#include "euprint/embedder.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "euprint/error.hpp"
#include "euprint/stats.hpp"

namespace euprint {

// ---------------------------------------------------------------------------
// Spec and parameter layout

NetworkSpec NetworkSpec::desk() { return NetworkSpec{}; }

NetworkSpec NetworkSpec::paper() {
    NetworkSpec s;
    s.conv_blocks = 3;
    s.conv_filters = 128;
    s.kernel_size = 4;
    s.dropout_rate = 0.119510;
    s.dense_width = 256;
    s.embedding_dim = 256;
    return s;
}

namespace {

struct Geometry {
    std::vector<std::size_t> conv_side;  // conv output side per block
    std::vector<std::size_t> pool_side;  // pooled side per block
};

Geometry geometry(const NetworkSpec& s) {
    Geometry g;
    std::size_t side = kMatrixSide;
    for (int b = 0; b < s.conv_blocks; ++b) {
        if (side < std::size_t(s.kernel_size))
            throw Error(ErrorCode::ShapeMismatch, "conv block " + std::to_string(b) + " has no valid output");
        const std::size_t conv = side - std::size_t(s.kernel_size) + 1;
        const std::size_t pool = conv / 2;
        if (pool == 0) throw Error(ErrorCode::ShapeMismatch, "pooling collapses block " + std::to_string(b));
        g.conv_side.push_back(conv);
        g.pool_side.push_back(pool);
        side = pool;
    }
    return g;
}

}  // namespace

void NetworkSpec::validate() const {
    if (conv_blocks < 1) throw Error(ErrorCode::InvalidConfig, "conv_blocks must be >= 1");
    if (conv_filters < 1 || kernel_size < 1 || dense_width < 1)
        throw Error(ErrorCode::InvalidConfig, "filters, kernel and dense width must be positive");
    if (embedding_dim < 2) throw Error(ErrorCode::InvalidConfig, "embedding_dim must be >= 2");
    if (!(dropout_rate >= 0.0 && dropout_rate <= 0.5))
        throw Error(ErrorCode::InvalidConfig, "dropout_rate must lie in [0, 0.5]");
    geometry(*this);
}

std::size_t NetworkSpec::flat_size() const {
    const auto g = geometry(*this);
    return g.pool_side.back() * g.pool_side.back() * std::size_t(conv_filters);
}

Network::Network(const NetworkSpec& spec, int head_classes) : spec_(spec) {
    spec_.validate();
    layout();
    Rng rng = derive_rng(spec_.seed, 0xe3b);
    // Fan-in scaled uniform init for every weight tensor; biases stay zero.
    for (const auto& l : layers_) {
        if (l.shape.size() < 2) continue;
        std::size_t fan_in = 1;
        for (std::size_t i = 1; i < l.shape.size(); ++i) fan_in *= l.shape[i];
        std::uniform_real_distribution<double> u(-std::sqrt(6.0 / double(fan_in)), std::sqrt(6.0 / double(fan_in)));
        for (std::size_t i = 0; i < l.size; ++i) params_[l.offset + i] = u(rng);
    }
    if (head_classes > 0) attach_head(head_classes, spec_.seed);
}

void Network::layout() {
    layers_.clear();
    std::size_t offset = 0;
    auto add = [&](std::string name, std::vector<std::size_t> shape) {
        std::size_t n = 1;
        for (auto d : shape) n *= d;
        layers_.push_back({std::move(name), std::move(shape), offset, n});
        offset += n;
    };
    const auto k = std::size_t(spec_.kernel_size);
    const auto f = std::size_t(spec_.conv_filters);
    for (int b = 0; b < spec_.conv_blocks; ++b) {
        const std::size_t in = b == 0 ? 1 : f;
        add("conv" + std::to_string(b) + ".weight", {f, in, k, k});
        add("conv" + std::to_string(b) + ".bias", {f});
    }
    add("dense.weight", {std::size_t(spec_.dense_width), spec_.flat_size()});
    add("dense.bias", {std::size_t(spec_.dense_width)});
    add("embedding.weight", {std::size_t(spec_.embedding_dim), std::size_t(spec_.dense_width)});
    add("embedding.bias", {std::size_t(spec_.embedding_dim)});
    if (head_classes_ > 0) {
        add("head.weight", {std::size_t(head_classes_), std::size_t(spec_.embedding_dim)});
        add("head.bias", {std::size_t(head_classes_)});
    }
    params_.resize(offset, 0.0);
}

void Network::attach_head(int classes, std::uint64_t seed) {
    drop_head();
    head_classes_ = classes;
    layout();
    const auto& w = layers_[layers_.size() - 2];
    Rng rng = derive_rng(seed, 0x4ead);
    const double limit = std::sqrt(6.0 / double(spec_.embedding_dim));
    std::uniform_real_distribution<double> u(-limit, limit);
    for (std::size_t i = 0; i < w.size; ++i) params_[w.offset + i] = u(rng);
}

void Network::drop_head() {
    if (head_classes_ == 0) return;
    head_classes_ = 0;
    const auto keep = layers_[layers_.size() - 2].offset;
    layers_.resize(layers_.size() - 2);
    params_.resize(keep);
}

EmbeddingVector Network::embed(const PreprocessedTrace& x) const {
    return ForwardPass(*this, x, false).embedding();
}

// ---------------------------------------------------------------------------
// Forward / backward

namespace {

inline double activate(Activation a, double v) {
    return a == Activation::Relu ? (v > 0.0 ? v : 0.0) : 1.0 / (1.0 + std::exp(-v));
}

inline double activate_grad(Activation a, double pre) {
    if (a == Activation::Relu) return pre > 0.0 ? 1.0 : 0.0;
    const double s = 1.0 / (1.0 + std::exp(-pre));
    return s * (1.0 - s);
}

// out[o][y][x] = b[o] + sum_i sum_ky sum_kx w[o][i][ky][kx] * in[i][y+ky][x+kx]
void conv_forward(const double* in, std::size_t in_ch, std::size_t side, const double* w, const double* b,
                  std::size_t out_ch, std::size_t k, double* out) {
    const std::size_t os = side - k + 1;
    for (std::size_t o = 0; o < out_ch; ++o) {
        double* dst = out + o * os * os;
        std::fill(dst, dst + os * os, b[o]);
        for (std::size_t i = 0; i < in_ch; ++i) {
            const double* src = in + i * side * side;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const double wv = w[((o * in_ch + i) * k + ky) * k + kx];
                    for (std::size_t y = 0; y < os; ++y) {
                        const double* row = src + (y + ky) * side + kx;
                        double* drow = dst + y * os;
                        for (std::size_t x = 0; x < os; ++x) drow[x] += wv * row[x];
                    }
                }
        }
    }
}

void conv_backward(const double* in, std::size_t in_ch, std::size_t side, const double* w, std::size_t out_ch,
                   std::size_t k, const double* d_out, double* d_w, double* d_b, double* d_in) {
    const std::size_t os = side - k + 1;
    for (std::size_t o = 0; o < out_ch; ++o) {
        const double* g = d_out + o * os * os;
        double sb = 0.0;
        for (std::size_t j = 0; j < os * os; ++j) sb += g[j];
        d_b[o] += sb;
        for (std::size_t i = 0; i < in_ch; ++i) {
            const double* src = in + i * side * side;
            double* dsrc = d_in ? d_in + i * side * side : nullptr;
            for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                    const std::size_t wi = ((o * in_ch + i) * k + ky) * k + kx;
                    const double wv = w[wi];
                    double acc = 0.0;
                    for (std::size_t y = 0; y < os; ++y) {
                        const double* row = src + (y + ky) * side + kx;
                        const double* grow = g + y * os;
                        for (std::size_t x = 0; x < os; ++x) acc += grow[x] * row[x];
                        if (dsrc) {
                            double* drow = dsrc + (y + ky) * side + kx;
                            for (std::size_t x = 0; x < os; ++x) drow[x] += wv * grow[x];
                        }
                    }
                    d_w[wi] += acc;
                }
        }
    }
}

}  // namespace

ForwardPass::ForwardPass(const Network& net, const PreprocessedTrace& x, bool train_mode, Rng* dropout_rng)
    : net_(net) {
    const auto& s = net.spec();
    const auto& L = net.layers();
    const double* P = net.params().data();
    const auto k = std::size_t(s.kernel_size);
    const auto f = std::size_t(s.conv_filters);
    const bool use_dropout = train_mode && s.dropout_rate > 0.0;
    if (use_dropout && !dropout_rng) throw Error(ErrorCode::InvalidConfig, "train mode needs a dropout rng");
    std::bernoulli_distribution keep(1.0 - s.dropout_rate);
    const double scale = use_dropout ? 1.0 / (1.0 - s.dropout_rate) : 1.0;

    std::vector<double> cur(x.values.begin(), x.values.end());
    std::size_t side = kMatrixSide, ch = 1;
    for (int b = 0; b < s.conv_blocks; ++b) {
        Block blk;
        blk.in_ch = ch;
        blk.in_side = side;
        blk.out_side = side - k + 1;
        blk.pool_side = blk.out_side / 2;
        blk.input = std::move(cur);
        blk.pre.resize(f * blk.out_side * blk.out_side);
        const auto& wl = L[std::size_t(2 * b)];
        const auto& bl = L[std::size_t(2 * b + 1)];
        conv_forward(blk.input.data(), ch, side, P + wl.offset, P + bl.offset, f, k, blk.pre.data());
        blk.post.resize(blk.pre.size());
        if (use_dropout) blk.mask.resize(blk.pre.size());
        for (std::size_t i = 0; i < blk.pre.size(); ++i) {
            double v = activate(s.activation, blk.pre[i]);
            if (use_dropout) {
                blk.mask[i] = keep(*dropout_rng) ? scale : 0.0;
                v *= blk.mask[i];
            }
            blk.post[i] = v;
        }
        const std::size_t os = blk.out_side, ps = blk.pool_side;
        cur.assign(f * ps * ps, 0.0);
        for (std::size_t c = 0; c < f; ++c)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t xx = 0; xx < ps; ++xx) {
                    const double* p = blk.post.data() + c * os * os + 2 * y * os + 2 * xx;
                    cur[(c * ps + y) * ps + xx] = 0.25 * (p[0] + p[1] + p[os] + p[os + 1]);
                }
        side = ps;
        ch = f;
        blocks_.push_back(std::move(blk));
    }
    flat_ = std::move(cur);

    const std::size_t base = std::size_t(2 * s.conv_blocks);
    const auto& w1 = L[base];
    const auto& b1 = L[base + 1];
    const auto& w2 = L[base + 2];
    const auto& b2 = L[base + 3];
    const std::size_t H = std::size_t(s.dense_width), E = std::size_t(s.embedding_dim), F = flat_.size();

    hidden_pre_.resize(H);
    hidden_.resize(H);
    for (std::size_t h = 0; h < H; ++h) {
        const double* row = P + w1.offset + h * F;
        double acc = P[b1.offset + h];
        for (std::size_t i = 0; i < F; ++i) acc += row[i] * flat_[i];
        hidden_pre_[h] = acc;
        hidden_[h] = activate(s.activation, acc);
    }
    z_.resize(E);
    for (std::size_t e = 0; e < E; ++e) {
        const double* row = P + w2.offset + e * H;
        double acc = P[b2.offset + e];
        for (std::size_t h = 0; h < H; ++h) acc += row[h] * hidden_[h];
        z_[e] = acc;
    }
    double ss = 0.0;
    for (double v : z_) ss += v * v;
    z_norm_ = std::sqrt(ss);
    degenerate_ = z_norm_ < 1e-12;
    embedding_ = l2_normalize(z_);

    if (net.has_head()) {
        const auto& wh = L[base + 4];
        const auto& bh = L[base + 5];
        const std::size_t C = std::size_t(net.head_classes());
        probs_.resize(C);
        for (std::size_t c = 0; c < C; ++c) {
            const double* row = P + wh.offset + c * E;
            double acc = P[bh.offset + c];
            for (std::size_t e = 0; e < E; ++e) acc += row[e] * embedding_[e];
            probs_[c] = acc;
        }
        const double mx = *std::max_element(probs_.begin(), probs_.end());
        double sum = 0.0;
        for (double& v : probs_) sum += (v = std::exp(v - mx));
        for (double& v : probs_) v /= sum;
    }
}

void ForwardPass::backward(std::span<const double> d_embedding, std::span<const double> d_logits,
                           std::vector<double>& grad) const {
    const auto& s = net_.spec();
    const auto& L = net_.layers();
    const double* P = net_.params().data();
    if (grad.size() != net_.params().size()) grad.assign(net_.params().size(), 0.0);
    double* G = grad.data();
    const std::size_t base = std::size_t(2 * s.conv_blocks);
    const std::size_t H = std::size_t(s.dense_width), E = std::size_t(s.embedding_dim), F = flat_.size();

    std::vector<double> de(E, 0.0);
    if (!d_embedding.empty()) std::copy(d_embedding.begin(), d_embedding.end(), de.begin());
    if (!d_logits.empty()) {
        const auto& wh = L[base + 4];
        const auto& bh = L[base + 5];
        for (std::size_t c = 0; c < d_logits.size(); ++c) {
            const double g = d_logits[c];
            G[bh.offset + c] += g;
            for (std::size_t e = 0; e < E; ++e) {
                G[wh.offset + c * E + e] += g * embedding_[e];
                de[e] += g * P[wh.offset + c * E + e];
            }
        }
    }
    if (degenerate_) return;  // the guarded normalization is locally constant

    // d(z/|z|)/dz applied to de
    double dot = 0.0;
    for (std::size_t e = 0; e < E; ++e) dot += embedding_[e] * de[e];
    std::vector<double> dz(E);
    for (std::size_t e = 0; e < E; ++e) dz[e] = (de[e] - embedding_[e] * dot) / z_norm_;

    const auto& w1 = L[base];
    const auto& b1 = L[base + 1];
    const auto& w2 = L[base + 2];
    const auto& b2 = L[base + 3];
    std::vector<double> dh(H, 0.0);
    for (std::size_t e = 0; e < E; ++e) {
        G[b2.offset + e] += dz[e];
        const double* row = P + w2.offset + e * H;
        double* grow = G + w2.offset + e * H;
        for (std::size_t h = 0; h < H; ++h) {
            grow[h] += dz[e] * hidden_[h];
            dh[h] += dz[e] * row[h];
        }
    }
    std::vector<double> dflat(F, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
        const double g = dh[h] * activate_grad(s.activation, hidden_pre_[h]);
        if (g == 0.0) continue;
        G[b1.offset + h] += g;
        const double* row = P + w1.offset + h * F;
        double* grow = G + w1.offset + h * F;
        for (std::size_t i = 0; i < F; ++i) {
            grow[i] += g * flat_[i];
            dflat[i] += g * row[i];
        }
    }

    const auto k = std::size_t(s.kernel_size);
    const auto f = std::size_t(s.conv_filters);
    for (int b = s.conv_blocks - 1; b >= 0; --b) {
        const auto& blk = blocks_[std::size_t(b)];
        const std::size_t os = blk.out_side, ps = blk.pool_side;
        std::vector<double> dpre(blk.pre.size(), 0.0);
        for (std::size_t c = 0; c < f; ++c)
            for (std::size_t y = 0; y < ps; ++y)
                for (std::size_t x = 0; x < ps; ++x) {
                    const double g = 0.25 * dflat[(c * ps + y) * ps + x];
                    double* p = dpre.data() + c * os * os + 2 * y * os + 2 * x;
                    p[0] += g;
                    p[1] += g;
                    p[os] += g;
                    p[os + 1] += g;
                }
        for (std::size_t i = 0; i < dpre.size(); ++i) {
            if (dpre[i] == 0.0) continue;
            double g = dpre[i] * activate_grad(s.activation, blk.pre[i]);
            if (!blk.mask.empty()) g *= blk.mask[i];
            dpre[i] = g;
        }
        const auto& wl = L[std::size_t(2 * b)];
        const auto& bl = L[std::size_t(2 * b + 1)];
        std::vector<double> din;
        if (b > 0) din.assign(blk.input.size(), 0.0);
        conv_backward(blk.input.data(), blk.in_ch, blk.in_side, P + wl.offset, f, k, dpre.data(),
                      G + wl.offset, G + bl.offset, b > 0 ? din.data() : nullptr);
        dflat = std::move(din);
    }
}

// ---------------------------------------------------------------------------
// Losses and mining

double classification_loss(const Network& net, std::span<const PreprocessedTrace> xs, std::span<const int> labels,
                           std::vector<double>* grad, bool train_mode, Rng* dropout_rng) {
    if (!net.has_head()) throw Error(ErrorCode::InvalidConfig, "classification loss needs a head");
    if (xs.size() != labels.size() || xs.empty())
        throw Error(ErrorCode::DimensionMismatch, "inputs and labels differ in count");
    if (grad) grad->assign(net.params().size(), 0.0);
    const double n = double(xs.size());
    double loss = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        ForwardPass fp(net, xs[i], train_mode, dropout_rng);
        const auto& p = fp.class_probabilities();
        const auto y = std::size_t(labels[i]);
        loss -= std::log(std::max(p[y], 1e-300));
        if (grad) {
            std::vector<double> dl(p.begin(), p.end());
            dl[y] -= 1.0;
            for (double& v : dl) v /= n;
            fp.backward({}, dl, *grad);
        }
    }
    return loss / n;
}

double triplet_loss(std::span<const double> a, std::span<const double> p, std::span<const double> n, double margin) {
    if (a.size() != p.size() || a.size() != n.size())
        throw Error(ErrorCode::DimensionMismatch, "triplet members differ in dimension");
    return std::max(0.0, squared_distance(a, p) - squared_distance(a, n) + margin);
}

namespace {

std::vector<double> pairwise_sq(std::span<const EmbeddingVector> e) {
    const std::size_t n = e.size();
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d[i * n + j] = d[j * n + i] = squared_distance(e[i], e[j]);
    return d;
}

// One triplet per ordered anchor-positive pair: the closest semi-hard
// negative, or, when there is none, the negative that is easiest among those
// inside the positive distance (loss 0 when an easy negative exists).
std::vector<Triplet> select_triplets(std::span<const EmbeddingVector> e, std::span<const int> labels, double margin) {
    const std::size_t n = e.size();
    const auto d = pairwise_sq(e);
    std::vector<Triplet> out;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            const double dap = d[a * n + p];
            std::optional<std::size_t> semi, inside;
            bool easy = false;
            for (std::size_t neg = 0; neg < n; ++neg) {
                if (labels[neg] == labels[a]) continue;
                const double dan = d[a * n + neg];
                if (dan > dap && dan < dap + margin) {
                    if (!semi || dan < d[a * n + *semi]) semi = neg;
                } else if (dan >= dap + margin) {
                    easy = true;
                } else if (!inside || dan > d[a * n + *inside]) {
                    inside = neg;
                }
            }
            if (semi) out.push_back({a, p, *semi});
            else if (!easy && inside) out.push_back({a, p, *inside});
            else if (easy) out.push_back({a, p, n});  // zero-loss placeholder
        }
    return out;
}

double triplet_objective(std::span<const ForwardPass> passes, std::span<const Triplet> triplets, double margin,
                         std::vector<double>* grad) {
    if (triplets.empty()) return 0.0;
    const std::size_t dim = passes.front().embedding().size();
    std::vector<std::vector<double>> de(passes.size());
    const double count = double(triplets.size());
    double loss = 0.0;
    for (const auto& t : triplets) {
        if (t.negative >= passes.size()) continue;  // placeholder for an easy pair
        const auto& a = passes[t.anchor].embedding();
        const auto& p = passes[t.positive].embedding();
        const auto& n = passes[t.negative].embedding();
        const double l = triplet_loss(a, p, n, margin);
        if (l <= 0.0) continue;
        loss += l;
        if (!grad) continue;
        for (auto idx : {t.anchor, t.positive, t.negative})
            if (de[idx].empty()) de[idx].assign(dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) {
            de[t.anchor][i] += 2.0 * (n[i] - p[i]) / count;
            de[t.positive][i] += -2.0 * (a[i] - p[i]) / count;
            de[t.negative][i] += 2.0 * (a[i] - n[i]) / count;
        }
    }
    if (grad)
        for (std::size_t i = 0; i < passes.size(); ++i)
            if (!de[i].empty()) passes[i].backward(de[i], {}, *grad);
    return loss / count;
}

}  // namespace

std::vector<Triplet> mine_semi_hard(std::span<const EmbeddingVector> embeddings, std::span<const int> labels,
                                    double margin) {
    if (embeddings.size() != labels.size())
        throw Error(ErrorCode::DimensionMismatch, "embeddings and labels differ in count");
    const std::size_t n = embeddings.size();
    const auto d = pairwise_sq(embeddings);
    std::vector<Triplet> out;
    for (std::size_t a = 0; a < n; ++a)
        for (std::size_t p = 0; p < n; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            const double dap = d[a * n + p];
            for (std::size_t neg = 0; neg < n; ++neg) {
                if (labels[neg] == labels[a]) continue;
                const double dan = d[a * n + neg];
                if (dap < dan && dan < dap + margin) out.push_back({a, p, neg});
            }
        }
    if (out.empty()) throw Error(ErrorCode::NoValidTriplets, "batch has no semi-hard triplet");
    return out;
}

double batch_triplet_loss(const Network& net, std::span<const PreprocessedTrace> xs, std::span<const Triplet> triplets,
                          double margin, std::vector<double>* grad, bool train_mode, Rng* dropout_rng) {
    std::vector<ForwardPass> passes;
    passes.reserve(xs.size());
    for (const auto& x : xs) passes.emplace_back(net, x, train_mode, dropout_rng);
    if (grad) grad->assign(net.params().size(), 0.0);
    return triplet_objective(passes, triplets, margin, grad);
}

double mean_semi_hard_loss(const Network& net, std::span<const PreprocessedTrace> traces, std::span<const int> labels,
                           double margin, int batch_size) {
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t start = 0; start < traces.size(); start += std::size_t(batch_size)) {
        const std::size_t end = std::min(traces.size(), start + std::size_t(batch_size));
        std::vector<EmbeddingVector> e;
        for (std::size_t i = start; i < end; ++i) e.push_back(net.embed(traces[i]));
        const auto lab = labels.subspan(start, end - start);
        const auto trips = select_triplets(e, lab, margin);
        for (const auto& t : trips) {
            ++count;
            if (t.negative < e.size()) total += triplet_loss(e[t.anchor], e[t.positive], e[t.negative], margin);
        }
    }
    return count ? total / double(count) : 0.0;
}

void TripletConfig::validate() const {
    if (!(margin > 0.0)) throw Error(ErrorCode::InvalidConfig, "triplet margin must be positive");
    if (batch_size < 2 || epochs < 0 || !(learning_rate > 0.0))
        throw Error(ErrorCode::InvalidConfig, "bad triplet training parameters");
}

// ---------------------------------------------------------------------------
// Training

namespace {

double one_nn_accuracy(const Network& net, std::span<const PreprocessedTrace> traces, std::span<const int> labels,
                       const std::vector<std::size_t>& gallery, const std::vector<std::size_t>& queries) {
    if (queries.empty() || gallery.empty()) return 0.0;
    std::vector<EmbeddingVector> g;
    g.reserve(gallery.size());
    for (auto i : gallery) g.push_back(net.embed(traces[i]));
    std::size_t hits = 0;
    for (auto q : queries) {
        const auto e = net.embed(traces[q]);
        std::size_t best = 0;
        double best_d = squared_distance(e, g[0]);
        for (std::size_t j = 1; j < g.size(); ++j) {
            const double d = squared_distance(e, g[j]);
            if (d < best_d) {
                best_d = d;
                best = j;
            }
        }
        hits += labels[gallery[best]] == labels[q];
    }
    return double(hits) / double(queries.size());
}

void sgd_step(std::vector<double>& params, const std::vector<double>& grad, double lr) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

}  // namespace

TrainResult train(std::span<const PreprocessedTrace> traces, std::span<const std::string> labels,
                  const NetworkSpec& spec, const TrainConfig& cfg) {
    spec.validate();
    cfg.triplet.validate();
    if (traces.size() != labels.size()) throw Error(ErrorCode::DimensionMismatch, "traces and labels differ");
    std::map<std::string, std::vector<std::size_t>> by_label;
    for (std::size_t i = 0; i < labels.size(); ++i) by_label[labels[i]].push_back(i);
    if (by_label.size() < 2) throw Error(ErrorCode::InsufficientData, "training needs at least two devices");
    for (const auto& [l, idx] : by_label)
        if (idx.size() < 2) throw Error(ErrorCode::InsufficientData, "device " + l + " has fewer than two traces");

    std::vector<int> y(labels.size());
    {
        int next = 0;
        for (const auto& [l, idx] : by_label) {
            for (auto i : idx) y[i] = next;
            ++next;
        }
    }

    // Stratified validation hold-out for epoch selection.
    Rng split_rng = derive_rng(cfg.seed, 0x5917);
    std::vector<std::size_t> train_idx, val_idx;
    for (auto& [l, idx] : by_label) {
        auto shuffled = idx;
        std::shuffle(shuffled.begin(), shuffled.end(), split_rng);
        std::size_t n_val = std::size_t(std::floor(cfg.validation_fraction * double(shuffled.size())));
        if (cfg.validation_fraction > 0.0) n_val = std::clamp<std::size_t>(n_val, 1, shuffled.size() - 1);
        val_idx.insert(val_idx.end(), shuffled.begin(), shuffled.begin() + std::ptrdiff_t(n_val));
        train_idx.insert(train_idx.end(), shuffled.begin() + std::ptrdiff_t(n_val), shuffled.end());
    }
    std::sort(train_idx.begin(), train_idx.end());
    std::sort(val_idx.begin(), val_idx.end());

    TrainResult result;
    NetworkSpec s = spec;
    Network net(s, int(by_label.size()));

    auto gather = [&](const std::vector<std::size_t>& idx, std::size_t from, std::size_t to) {
        std::vector<PreprocessedTrace> xs;
        std::vector<int> ys;
        for (std::size_t i = from; i < to; ++i) {
            xs.push_back(traces[idx[i]]);
            ys.push_back(y[idx[i]]);
        }
        return std::pair{std::move(xs), std::move(ys)};
    };

    // Phase 1: softmax classification.
    std::vector<double> grad;
    for (int epoch = 1; epoch <= cfg.classification_epochs; ++epoch) {
        Rng rng = derive_rng(cfg.seed, 0x10000 + std::uint64_t(epoch));
        auto order = train_idx;
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(cfg.classification_batch)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(cfg.classification_batch));
            auto [xs, ys] = gather(order, start, end);
            loss_sum += classification_loss(net, xs, ys, &grad, true, &rng);
            sgd_step(net.params(), grad, cfg.classification_learning_rate);
            ++batches;
        }
        const double val = one_nn_accuracy(net, traces, y, train_idx, val_idx);
        result.history.push_back({"classification", epoch, loss_sum / double(batches), val});
        if (cfg.on_epoch) cfg.on_epoch("classification", epoch, loss_sum / double(batches), val);
    }

    // Phase 2: drop the head and refine with semi-hard triplets.
    net.drop_head();
    std::vector<PreprocessedTrace> monitor_x;
    std::vector<int> monitor_y;
    {
        // Fixed, shuffled monitoring sample for the loss trajectory.
        auto order = train_idx;
        Rng rng = derive_rng(cfg.seed, 0x30000);
        std::shuffle(order.begin(), order.end(), rng);
        auto [xs, ys] = gather(order, 0, order.size());
        monitor_x = std::move(xs);
        monitor_y = std::move(ys);
    }
    const auto& tc = cfg.triplet;
    result.initial_triplet_loss = mean_semi_hard_loss(net, monitor_x, monitor_y, tc.margin, tc.batch_size);

    Network best = net;
    double best_val = -1.0;
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        Rng rng = derive_rng(cfg.seed, 0x20000 + std::uint64_t(epoch));
        auto order = train_idx;
        std::shuffle(order.begin(), order.end(), rng);
        double loss_sum = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(tc.batch_size)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(tc.batch_size));
            auto [xs, ys] = gather(order, start, end);
            std::vector<ForwardPass> passes;
            passes.reserve(xs.size());
            std::vector<EmbeddingVector> emb;
            for (const auto& x : xs) {
                passes.emplace_back(net, x, true, &rng);
                emb.push_back(passes.back().embedding());
            }
            try {
                mine_semi_hard(emb, ys, tc.margin);
            } catch (const Error& e) {
                if (e.code() != ErrorCode::NoValidTriplets) throw;
                continue;  // nothing to learn from this batch
            }
            const auto trips = select_triplets(emb, ys, tc.margin);
            grad.assign(net.params().size(), 0.0);
            loss_sum += triplet_objective(passes, trips, tc.margin, &grad);
            sgd_step(net.params(), grad, tc.learning_rate);
            ++batches;
        }
        const double val = one_nn_accuracy(net, traces, y, train_idx, val_idx);
        const double loss = batches ? loss_sum / double(batches) : 0.0;
        result.history.push_back({"triplet", epoch, loss, val});
        if (cfg.on_epoch) cfg.on_epoch("triplet", epoch, loss, val);
        if (val > best_val) {
            best_val = val;
            best = net;
            result.best_epoch = epoch;
        }
    }
    if (tc.epochs == 0) best = net;
    result.best_validation_1nn = std::max(best_val, 0.0);
    result.final_triplet_loss = mean_semi_hard_loss(best, monitor_x, monitor_y, tc.margin, tc.batch_size);
    result.network = std::move(best);
    return result;
}

// ---------------------------------------------------------------------------
// Embedding utilities

EmbeddingVector l2_normalize(std::span<const double> v) {
    double ss = 0.0;
    for (double x : v) ss += x * x;
    const double norm = std::sqrt(ss);
    EmbeddingVector out(v.size());
    if (norm < 1e-12) {
        std::fill(out.begin(), out.end(), 1.0 / std::sqrt(double(v.size())));
        return out;
    }
    for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / norm;
    return out;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(ErrorCode::DimensionMismatch, "cosine of unequal vectors");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    if (aa == 0.0 || bb == 0.0) return 0.0;
    return ab / std::sqrt(aa * bb);
}

EmbeddingVector embed_record(const Network& net, const FingerprintRecord& r) {
    validate_record(r);
    EmbeddingVector sum(std::size_t(net.spec().embedding_dim), 0.0);
    for (const auto& t : r.traces) {
        const auto e = net.embed(preprocess(t));
        for (std::size_t i = 0; i < sum.size(); ++i) sum[i] += e[i];
    }
    for (double& v : sum) v /= double(r.traces.size());
    return l2_normalize(sum);
}

std::vector<std::string> knn_topk(std::span<const LabeledEmbedding> gallery, std::span<const double> query,
                                  std::size_t k) {
    if (gallery.empty()) throw Error(ErrorCode::EmptyGallery, "k-NN over an empty gallery");
    std::vector<std::pair<double, std::size_t>> d(gallery.size());
    for (std::size_t i = 0; i < gallery.size(); ++i) {
        if (gallery[i].embedding.size() != query.size())
            throw Error(ErrorCode::DimensionMismatch, "gallery and query dimensions differ");
        d[i] = {squared_distance(gallery[i].embedding, query), i};
    }
    std::sort(d.begin(), d.end());  // index breaks distance ties: insertion order
    std::vector<std::string> out;
    std::set<std::string_view> seen;
    for (const auto& [dist, i] : d) {
        if (out.size() >= k) break;
        if (seen.insert(gallery[i].label).second) out.push_back(gallery[i].label);
    }
    return out;
}

DistancePopulations distance_populations(std::span<const PopulationItem> items, std::size_t max_pairs,
                                         std::uint64_t seed) {
    DistancePopulations pop;
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t j = i + 1; j < items.size(); ++j) {
            const auto& a = items[i];
            const auto& b = items[j];
            if (a.collection == b.collection) continue;
            const double d = std::sqrt(squared_distance(a.embedding, b.embedding));
            if (a.device == b.device) pop.same_device.push_back(d);
            else if (a.renderer == b.renderer) pop.same_renderer.push_back(d);
            else pop.different_renderer.push_back(d);
        }
    if (max_pairs > 0) {
        Rng rng = derive_rng(seed, 0xd157);
        for (auto* v : {&pop.same_device, &pop.same_renderer, &pop.different_renderer}) {
            if (v->size() <= max_pairs) continue;
            std::shuffle(v->begin(), v->end(), rng);
            v->resize(max_pairs);
        }
    }
    return pop;
}

PopulationSummary summarize_population(const std::vector<double>& samples) {
    if (samples.empty()) throw Error(ErrorCode::EmptyPopulation, "distance population is empty");
    PopulationSummary s;
    s.count = samples.size();
    s.q05 = stats::percentile(samples, 5);
    s.q25 = stats::percentile(samples, 25);
    s.median = stats::percentile(samples, 50);
    s.q75 = stats::percentile(samples, 75);
    s.q95 = stats::percentile(samples, 95);
    return s;
}

double fraction_below(const std::vector<double>& samples, double threshold) {
    if (samples.empty()) return 0.0;
    const auto n = std::count_if(samples.begin(), samples.end(), [&](double d) { return d < threshold; });
    return double(n) / double(samples.size());
}

// ---------------------------------------------------------------------------
// Binary weights: "EUPW", version, spec, layer table, then f64 payload, all
// little-endian.

namespace {

constexpr std::uint32_t kWeightsVersion = 1;

class ByteWriter {
public:
    void u32(std::uint32_t v) { put(v, 4); }
    void u64(std::uint64_t v) { put(v, 8); }
    void f64(double v) { put(std::bit_cast<std::uint64_t>(v), 8); }
    void raw(std::string_view s) { out_.append(s); }
    std::string take() { return std::move(out_); }

private:
    void put(std::uint64_t v, int bytes) {
        for (int i = 0; i < bytes; ++i) out_.push_back(char((v >> (8 * i)) & 0xff));
    }
    std::string out_;
};

class ByteReader {
public:
    explicit ByteReader(std::string_view in) : in_(in) {}
    std::uint32_t u32() { return std::uint32_t(get(4)); }
    std::uint64_t u64() { return get(8); }
    double f64() { return std::bit_cast<double>(get(8)); }
    std::string raw(std::size_t n) {
        need(n);
        std::string s(in_.substr(pos_, n));
        pos_ += n;
        return s;
    }
    bool done() const { return pos_ == in_.size(); }

private:
    void need(std::size_t n) const {
        if (pos_ + n > in_.size()) throw Error(ErrorCode::MalformedDocument, "weights file is truncated");
    }
    std::uint64_t get(int bytes) {
        need(std::size_t(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= std::uint64_t(std::uint8_t(in_[pos_ + std::size_t(i)])) << (8 * i);
        pos_ += std::size_t(bytes);
        return v;
    }
    std::string_view in_;
    std::size_t pos_ = 0;
};

}  // namespace

std::string Network::to_bytes() const {
    ByteWriter w;
    w.raw("EUPW");
    w.u32(kWeightsVersion);
    w.u32(std::uint32_t(spec_.conv_blocks));
    w.u32(std::uint32_t(spec_.conv_filters));
    w.u32(std::uint32_t(spec_.kernel_size));
    w.u32(std::uint32_t(spec_.dense_width));
    w.u32(std::uint32_t(spec_.embedding_dim));
    w.u32(spec_.activation == Activation::Relu ? 0u : 1u);
    w.u64(spec_.seed);
    w.f64(spec_.dropout_rate);
    w.u32(std::uint32_t(head_classes_));
    w.u32(std::uint32_t(layers_.size()));
    for (const auto& l : layers_) {
        w.u32(std::uint32_t(l.name.size()));
        w.raw(l.name);
        w.u32(std::uint32_t(l.shape.size()));
        for (auto d : l.shape) w.u64(d);
        w.u64(l.size);
    }
    for (double v : params_) w.f64(v);
    return w.take();
}

Network Network::from_bytes(const std::string& bytes) {
    ByteReader r(bytes);
    if (r.raw(4) != "EUPW") throw Error(ErrorCode::SchemaViolation, "not an embedder weights file");
    if (const auto v = r.u32(); v != kWeightsVersion)
        throw Error(ErrorCode::SchemaViolation, "unsupported weights version " + std::to_string(v));
    NetworkSpec s;
    s.conv_blocks = int(r.u32());
    s.conv_filters = int(r.u32());
    s.kernel_size = int(r.u32());
    s.dense_width = int(r.u32());
    s.embedding_dim = int(r.u32());
    s.activation = r.u32() == 0 ? Activation::Relu : Activation::Sigmoid;
    s.seed = r.u64();
    s.dropout_rate = r.f64();
    const int head = int(r.u32());

    Network net;
    net.spec_ = s;
    net.spec_.validate();
    net.head_classes_ = head;
    net.layout();

    const std::uint32_t count = r.u32();
    if (count != net.layers_.size()) throw Error(ErrorCode::SchemaViolation, "layer table does not match spec");
    for (const auto& l : net.layers_) {
        const std::string name = r.raw(r.u32());
        std::vector<std::size_t> shape(r.u32());
        for (auto& d : shape) d = r.u64();
        const std::uint64_t size = r.u64();
        if (name != l.name || shape != l.shape || size != l.size)
            throw Error(ErrorCode::SchemaViolation, "layer " + name + " does not match spec");
    }
    for (double& v : net.params_) v = r.f64();
    if (!r.done()) throw Error(ErrorCode::SchemaViolation, "trailing bytes in weights file");
    return net;
}

void Network::save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    const auto bytes = to_bytes();
    out.write(bytes.data(), std::streamsize(bytes.size()));
}

Network Network::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return from_bytes(ss.str());
}

}  // namespace euprint
