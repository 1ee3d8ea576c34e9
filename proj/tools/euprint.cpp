#include <pthread.h>
#include <unistd.h>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "euprint/embedder.hpp"
#include "euprint/evalbench.hpp"
#include "euprint/forest.hpp"
#include "euprint/ingest.hpp"
#include "euprint/linker.hpp"
#include "euprint/record_io.hpp"
#include "euprint/synth.hpp"

using namespace euprint;
namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

std::string device_label(const FingerprintRecord& r) { return r.true_device.value_or(r.client_id); }

std::vector<FingerprintRecord> load_corpus(const fs::path& p) {
    auto res = read_corpus(p, true);
    if (res.corrupt_lines) std::cerr << "warning: skipped " << res.corrupt_lines << " corrupt lines in " << p << "\n";
    return res.records;
}

Timestamp parse_ts_arg(const std::string& text) {
    auto t = parse_timestamp(text);
    if (!t) throw Error(ErrorCode::InvalidConfig, "bad timestamp '" + text + "'");
    return *t;
}

// "2..7" or "2,3,5".
std::vector<int> parse_periods(const std::string& text) {
    std::vector<int> out;
    if (auto dots = text.find(".."); dots != std::string::npos) {
        int lo = std::stoi(text.substr(0, dots)), hi = std::stoi(text.substr(dots + 2));
        if (lo <= 0 || hi < lo) throw Error(ErrorCode::InvalidConfig, "bad period range " + text);
        for (int p = lo; p <= hi; ++p) out.push_back(p);
        return out;
    }
    std::stringstream ss(text);
    for (std::string tok; std::getline(ss, tok, ',');) {
        int p = std::stoi(tok);
        if (p <= 0) throw Error(ErrorCode::InvalidConfig, "bad period " + tok);
        out.push_back(p);
    }
    if (out.empty()) throw Error(ErrorCode::InvalidConfig, "no periods given");
    return out;
}

void emit_report(const EvalReport& report, const std::string& json_out, const std::string& csv_out) {
    if (!json_out.empty()) {
        std::ofstream(json_out) << report.to_json() << "\n";
    } else {
        std::cout << report.to_json() << "\n";
    }
    if (!csv_out.empty()) std::ofstream(csv_out) << report.to_csv();
}

EmbedFn embedder_for(const Network& net) {
    return [&net](const FingerprintRecord& r) { return embed_record(net, r); };
}

int run_simulate(const std::string& scenario, const std::string& out) {
    auto s = load_scenario(scenario);
    auto corpus = s.generate();
    write_corpus(fs::path(out), corpus);
    std::cerr << "wrote " << corpus.size() << " records to " << out << "\n";
    return 0;
}

int run_eval_lab(const std::string& corpus_path, int folds, int trees, std::uint64_t seed) {
    auto corpus = load_corpus(corpus_path);
    std::vector<std::vector<double>> rows;
    std::vector<std::string> labels;
    for (const auto& r : corpus)
        for (const auto& t : r.traces) {
            rows.push_back(t.timings);
            labels.push_back(device_label(r));
        }
    auto X = FeatureMatrix::from_rows(rows);
    ForestConfig cfg;
    cfg.n_trees = trees;
    cfg.seed = seed;
    auto res = kfold_accuracy(X, labels, cfg, folds);
    double base = base_rate_classical(labels, 1);
    json j;
    j["traces"] = labels.size();
    j["folds"] = folds;
    j["mean_accuracy"] = res.mean;
    j["std_accuracy"] = res.std;
    j["fold_accuracy"] = res.fold_accuracy;
    j["base_rate"] = base;
    j["gain"] = accuracy_gain(res.mean, base);
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_train_embedder(const std::string& corpus_path, const std::string& preset, std::uint64_t seed,
                       const std::string& out, int cls_epochs, int triplet_epochs) {
    auto corpus = load_corpus(corpus_path);
    std::vector<PreprocessedTrace> xs;
    std::vector<std::string> labels;
    for (const auto& r : corpus)
        for (const auto& t : r.traces) {
            xs.push_back(preprocess(t));
            labels.push_back(device_label(r));
        }
    NetworkSpec spec = preset == "paper" ? NetworkSpec::paper() : NetworkSpec::desk();
    spec.seed = seed;
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.classification_epochs = cls_epochs;
    cfg.triplet.epochs = triplet_epochs;
    cfg.on_epoch = [](const std::string& phase, int epoch, double loss, double val) {
        std::cerr << phase << " epoch " << epoch << " loss " << loss << " val " << val << "\n";
    };
    auto res = train(xs, labels, spec, cfg);
    res.network.save(out);
    json j;
    j["weights"] = out;
    j["best_epoch"] = res.best_epoch;
    j["best_validation_1nn"] = res.best_validation_1nn;
    j["initial_triplet_loss"] = res.initial_triplet_loss;
    j["final_triplet_loss"] = res.final_triplet_loss;
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_eval_wild(const std::string& corpus_path, const std::string& weights, const std::string& mode,
                  std::uint64_t seed, int min_collections, const std::string& browser, const std::string& json_out,
                  const std::string& csv_out) {
    auto corpus = load_corpus(corpus_path);
    auto net = Network::load(weights);
    std::optional<std::string> family;
    if (!browser.empty()) family = browser;
    EvalReport report;
    if (mode == "random-split") {
        RandomSplitSpec spec;
        spec.seed = seed;
        spec.min_collections = min_collections;
        spec.browser = family;
        report = run_random_split(corpus, net, spec);
    } else if (mode.starts_with("kshot:")) {
        report = run_kshot(corpus, net, std::stoi(mode.substr(6)), family);
    } else {
        throw Error(ErrorCode::InvalidConfig, "unknown mode " + mode);
    }
    report.metadata["corpus"] = corpus_path;
    report.metadata["weights"] = weights;
    emit_report(report, json_out, csv_out);
    return 0;
}

int run_train_linker(const std::string& corpus_path, const std::string& out, const std::string& weights,
                     std::uint64_t seed) {
    auto corpus = load_corpus(corpus_path);
    ForestConfig fc;
    fc.seed = seed;
    LinkPairOptions opt;
    opt.seed = seed;
    auto forest = train_link_forest(corpus, RuleSet::defaults(), fc, opt);
    forest.save(out);
    auto lam = calibrate_lambda(corpus, forest);
    json j;
    j["forest"] = out;
    j["lambda"] = lam.lambda;
    json grid = json::array();
    for (const auto& [l, f] : lam.f1_by_lambda) grid.push_back({{"lambda", l}, {"f1", f}});
    j["f1_by_lambda"] = grid;
    if (!weights.empty()) {
        auto net = Network::load(weights);
        auto cal = calibrate_epsilon(corpus, embedder_for(net), seed);
        j["epsilon"] = cal.epsilon;
        j["same_device_p05"] = cal.same_device_p05;
    }
    std::cout << j.dump(2) << "\n";
    return 0;
}

int run_link(const std::string& gallery_path, const std::string& in_path, const std::string& forest_path,
             const std::string& weights, double epsilon, double lambda, bool nude, const std::string& out) {
    auto forest = ForestModel::load(forest_path);
    LinkerConfig cfg;
    cfg.lambda = lambda;
    cfg.epsilon = nude ? kEpsilonDisabled : epsilon;
    std::optional<Network> net;
    EmbedFn embed;
    if (!nude) {
        if (weights.empty()) throw Error(ErrorCode::InvalidConfig, "--weights is required unless --no-drawnapart");
        net = Network::load(weights);
        embed = embedder_for(*net);
    }
    Linker linker(cfg, &forest, embed);
    if (!gallery_path.empty())
        for (const auto& r : time_ordered(load_corpus(gallery_path))) linker.link(r);
    auto input = load_corpus(in_path);
    std::vector<std::size_t> order(input.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return input[a].collected_at < input[b].collected_at; });
    std::vector<std::string> assigned(input.size());
    for (auto i : order) assigned[i] = linker.link(input[i]);

    std::ofstream file;
    std::ostream* os = &std::cout;
    if (!out.empty()) {
        file.open(out);
        os = &file;
    }
    for (std::size_t i = 0; i < input.size(); ++i)
        *os << json{{"record_index", i}, {"assigned_id", assigned[i]}}.dump() << "\n";
    const auto& c = linker.counters();
    std::cerr << "forest calls " << c.forest_calls << ", embeddings " << c.embedding_calls << ", short-circuits "
              << c.short_circuits << "\n";
    return 0;
}

int run_track(const std::string& corpus_path, const std::string& periods, const std::string& forest_path,
              const std::string& weights, double epsilon, double lambda, const std::string& json_out,
              const std::string& csv_out) {
    auto corpus = load_corpus(corpus_path);
    auto forest = ForestModel::load(forest_path);
    auto net = Network::load(weights);
    TrackingSpec spec;
    spec.periods = parse_periods(periods);
    spec.nude.lambda = lambda;
    spec.drawnapart.lambda = lambda;
    spec.drawnapart.epsilon = epsilon;
    EvalReport report;
    report.mode = "track";
    report.devices = [&] {
        std::set<std::string> d;
        for (const auto& r : corpus) d.insert(device_label(r));
        return d.size();
    }();
    report.tracking = run_tracking(corpus, forest, embedder_for(net), spec);
    report.metadata["corpus"] = corpus_path;
    report.metadata["epsilon"] = std::to_string(epsilon);
    report.metadata["lambda"] = std::to_string(lambda);
    emit_report(report, json_out, csv_out);
    return 0;
}

int run_serve(const std::string& host, int port, const std::optional<fs::path>& store_dir) {
    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    Store store(resolve_store_dir(store_dir));
    IngestServer server(store);
    int bound = server.bind(host, port);
    std::cerr << "serving on " << host << ":" << bound << ", store " << store.dir() << " (" << store.size()
              << " records)\n";
    std::atomic<bool> signalled{false};
    std::thread waiter([&] {
        int sig = 0;
        sigwait(&set, &sig);
        signalled = true;
        server.stop();
    });
    server.run();
    // Release the waiter if the server ended on its own.
    if (!signalled) kill(getpid(), SIGTERM);
    waiter.join();
    return 0;
}

int run_export(const std::optional<fs::path>& store_dir, const std::string& from, const std::string& to,
               const std::vector<std::string>& clients, const std::string& out) {
    Store store(resolve_store_dir(store_dir));
    ExportFilter f;
    if (!from.empty()) f.from = parse_ts_arg(from);
    if (!to.empty()) f.to = parse_ts_arg(to);
    f.clients.insert(clients.begin(), clients.end());
    auto res = export_corpus(store, f);
    if (out.empty()) {
        write_corpus(std::cout, res.records);
    } else {
        write_corpus(fs::path(out), res.records);
    }
    std::cerr << "exported " << res.records.size() << " records";
    if (res.corrupt_lines) std::cerr << ", skipped " << res.corrupt_lines << " corrupt lines";
    std::cerr << "\n";
    return 0;
}

int run_purge(const std::optional<fs::path>& store_dir, const std::string& client) {
    Store store(resolve_store_dir(store_dir));
    auto n = store.purge_client(client);
    std::cerr << "removed " << n << " records of " << client << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"GPU timing fingerprint toolkit"};
    app.require_subcommand(1);

    std::string corpus, out, weights, forest, json_out, csv_out, browser;
    std::uint64_t seed = 0;

    auto* sim = app.add_subcommand("simulate", "Generate a synthetic corpus from a scenario file");
    std::string scenario;
    sim->add_option("--scenario", scenario)->required()->check(CLI::ExistingFile);
    sim->add_option("--out", out)->required();

    auto* lab = app.add_subcommand("eval-lab", "Random Forest k-fold accuracy on raw traces");
    int folds = 5, trees = 100;
    lab->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
    lab->add_option("--folds", folds)->check(CLI::Range(2, 1000));
    lab->add_option("--trees", trees)->check(CLI::PositiveNumber);
    lab->add_option("--seed", seed);

    auto* te = app.add_subcommand("train-embedder", "Train the trace embedding network");
    std::string preset = "desk", embedder_out = "embedder.bin";
    int cls_epochs = TrainConfig{}.classification_epochs, trip_epochs = TripletConfig{}.epochs;
    te->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
    te->add_option("--preset", preset)->check(CLI::IsMember({"desk", "paper"}));
    te->add_option("--seed", seed);
    te->add_option("--out", embedder_out, "weights file")->capture_default_str();
    te->add_option("--classification-epochs", cls_epochs)->check(CLI::NonNegativeNumber);
    te->add_option("--triplet-epochs", trip_epochs)->check(CLI::NonNegativeNumber);

    auto* ew = app.add_subcommand("eval-wild", "Standalone embedding evaluation");
    std::string mode = "random-split";
    int min_collections = 0;
    ew->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
    ew->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
    ew->add_option("--mode", mode, "random-split or kshot:K");
    ew->add_option("--seed", seed);
    ew->add_option("--min-collections", min_collections);
    ew->add_option("--browser", browser, "user-agent family filter");
    ew->add_option("--json", json_out);
    ew->add_option("--csv", csv_out);

    auto* tl = app.add_subcommand("train-linker", "Train the linking forest and calibrate lambda/epsilon");
    std::string forest_out = "linker-forest.json";
    tl->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
    tl->add_option("--out", forest_out, "forest file")->capture_default_str();
    tl->add_option("--weights", weights, "embedder weights for epsilon calibration")->check(CLI::ExistingFile);
    tl->add_option("--seed", seed);

    auto* ln = app.add_subcommand("link", "Assign chain ids to records");
    std::string gallery, in;
    double epsilon = 0.15, lambda = LinkerConfig{}.lambda;
    bool nude = false;
    ln->add_option("--gallery", gallery)->check(CLI::ExistingFile);
    ln->add_option("--in", in)->required()->check(CLI::ExistingFile);
    ln->add_option("--forest", forest)->required()->check(CLI::ExistingFile);
    ln->add_option("--weights", weights)->check(CLI::ExistingFile);
    ln->add_option("--epsilon", epsilon);
    ln->add_option("--lambda", lambda)->check(CLI::Range(0.0, 1.0));
    ln->add_flag("--no-drawnapart", nude);
    ln->add_option("--out", out);

    auto* tr = app.add_subcommand("track", "Tracking duration with and without embeddings");
    std::string periods = "2..7";
    tr->add_option("--corpus", corpus)->required()->check(CLI::ExistingFile);
    tr->add_option("--periods", periods, "range like 2..7 or a comma list")->capture_default_str();
    tr->add_option("--forest", forest)->required()->check(CLI::ExistingFile);
    tr->add_option("--weights", weights)->required()->check(CLI::ExistingFile);
    tr->add_option("--epsilon", epsilon);
    tr->add_option("--lambda", lambda)->check(CLI::Range(0.0, 1.0));
    tr->add_option("--json", json_out);
    tr->add_option("--csv", csv_out);

    std::optional<fs::path> store_dir;
    auto* sv = app.add_subcommand("serve", "Run the ingestion service");
    std::string host = "0.0.0.0";
    int port = 8080;
    sv->add_option("--port", port)->check(CLI::Range(0, 65535));
    sv->add_option("--host", host);
    sv->add_option("--store", store_dir);

    auto* ex = app.add_subcommand("export", "Export stored records as an NDJSON corpus");
    std::string from, to;
    std::vector<std::string> clients;
    ex->add_option("--store", store_dir);
    ex->add_option("--from", from, "ISO-8601 UTC, inclusive");
    ex->add_option("--to", to, "ISO-8601 UTC, inclusive");
    ex->add_option("--client", clients);
    ex->add_option("--out", out);

    auto* pg = app.add_subcommand("purge", "Delete every stored record of one client");
    std::string client;
    pg->add_option("--store", store_dir);
    pg->add_option("--client", client)->required();

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) return run_simulate(scenario, out);
        if (lab->parsed()) return run_eval_lab(corpus, folds, trees, seed);
        if (te->parsed()) return run_train_embedder(corpus, preset, seed, embedder_out, cls_epochs, trip_epochs);
        if (ew->parsed())
            return run_eval_wild(corpus, weights, mode, seed, min_collections, browser, json_out, csv_out);
        if (tl->parsed()) return run_train_linker(corpus, forest_out, weights, seed);
        if (ln->parsed()) return run_link(gallery, in, forest, weights, epsilon, lambda, nude, out);
        if (tr->parsed()) return run_track(corpus, periods, forest, weights, epsilon, lambda, json_out, csv_out);
        if (sv->parsed()) return run_serve(host, port, store_dir);
        if (ex->parsed()) return run_export(store_dir, from, to, clients, out);
        if (pg->parsed()) return run_purge(store_dir, client);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
