#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "euprint/timestamp.hpp"
#include "euprint/trace.hpp"

namespace euprint {

inline constexpr std::size_t kMaxBodyBytes = 1 << 20;

struct StoreRecord {
    std::uint64_t index = 0;
    Timestamp server_received_at{};
    std::string source_hash;
    std::optional<std::string> submission_id;
    FingerprintRecord record;
};

struct StoreScan {
    std::vector<StoreRecord> records;  // file order
    std::size_t corrupt_lines = 0;
};

/// Append-only NDJSON store, one file per UTC day of server receipt
/// (store-YYYY-MM-DD.ndjson). Appends are serialized and written as whole
/// lines; a torn final line left by a crash is fenced off on open.
class Store {
public:
    explicit Store(std::filesystem::path dir);
    ~Store();
    Store(const Store&) = delete;
    Store& operator=(const Store&) = delete;

    struct Appended {
        std::uint64_t index = 0;
        bool duplicate = false;
    };

    /// Throws StoreWriteFailure. A known submission id returns its original
    /// index without writing.
    Appended append(const FingerprintRecord& r, std::string_view source_address,
                    const std::optional<std::string>& submission_id = std::nullopt);
    Appended append_at(const FingerprintRecord& r, std::string_view source_address,
                       const std::optional<std::string>& submission_id, Timestamp now);

    /// Hex SHA-256 of the per-store salt followed by the address.
    std::string hash_source(std::string_view address) const;

    StoreScan scan() const;
    std::size_t size() const;
    const std::filesystem::path& dir() const { return dir_; }

    /// Rewrites every file without the client's records; returns how many were removed.
    std::size_t purge_client(const std::string& client_id);

    std::vector<std::filesystem::path> files() const;

private:
    std::filesystem::path file_for(Timestamp t) const;

    std::filesystem::path dir_;
    std::string salt_;
    mutable std::mutex mu_;
    std::uint64_t next_index_ = 0;
    std::size_t count_ = 0;
    std::map<std::string, std::uint64_t> submissions_;
    std::map<std::filesystem::path, Timestamp> last_received_;
    std::filesystem::path open_path_;
    std::ofstream out_;
};

struct IngestResponse {
    int status = 200;
    std::string body;  // JSON
};

/// Parses, validates and stores one submission (a single JSON record).
/// 200 accepted, 400 schema violation, 413 oversized, 500 store failure.
IngestResponse ingest_submission(Store& store, std::string_view body, std::string_view source_address,
                                 const std::optional<std::string>& submission_id = std::nullopt);

struct ExportFilter {
    std::optional<Timestamp> from;  // inclusive, on collected_at
    std::optional<Timestamp> to;    // inclusive
    std::set<std::string> clients;  // empty: all
};

struct ExportResult {
    std::vector<FingerprintRecord> records;  // time-sorted
    std::size_t corrupt_lines = 0;
};

ExportResult export_corpus(const Store& store, const ExportFilter& filter = {});

/// Explicit path if given, else $EUPRINT_STORE_DIR, else "./store".
std::filesystem::path resolve_store_dir(const std::optional<std::filesystem::path>& explicit_dir);

/// POST /api/v1/traces and GET /api/v1/health over HTTP.
class IngestServer {
public:
    explicit IngestServer(Store& store);
    ~IngestServer();

    /// Binds without serving; port 0 picks a free port. Returns the port.
    /// Throws Io when binding fails.
    int bind(const std::string& host, int port);
    /// Serves until stop(); call after bind().
    void run();
    void stop();
    bool running() const;

private:
    struct Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace euprint
