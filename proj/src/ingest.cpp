#include "euprint/ingest.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <sstream>

#include <httplib.h>
#include <json.hpp>
#include <openssl/evp.h>
#include <openssl/rand.h>

#include "euprint/record_io.hpp"

namespace euprint {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr std::size_t kMaxSubmissionIdLength = 128;

// httplib caps form-encoded bodies separately; clients that omit a JSON
// content type would otherwise be cut off far below kMaxBodyBytes.
static_assert(CPPHTTPLIB_FORM_URL_ENCODED_PAYLOAD_MAX_LENGTH > kMaxBodyBytes);

std::string to_hex(const unsigned char* p, std::size_t n) {
    static const char* digits = "0123456789abcdef";
    std::string out(2 * n, '0');
    for (std::size_t i = 0; i < n; ++i) {
        out[2 * i] = digits[p[i] >> 4];
        out[2 * i + 1] = digits[p[i] & 0xf];
    }
    return out;
}

std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw Error(ErrorCode::Io, "sha256 failed");
    return to_hex(md, len);
}

std::string load_or_create_salt(const fs::path& dir) {
    fs::path p = dir / "salt";
    if (fs::exists(p)) {
        std::ifstream in(p);
        std::string s;
        std::getline(in, s);
        if (!s.empty()) return s;
    }
    unsigned char buf[32];
    if (RAND_bytes(buf, sizeof buf) != 1) throw Error(ErrorCode::Io, "no randomness for salt");
    std::string s = to_hex(buf, sizeof buf);
    std::ofstream out(p, std::ios::trunc);
    out << s << '\n';
    if (!out) throw Error(ErrorCode::StoreWriteFailure, "cannot write " + p.string());
    return s;
}

bool is_store_file(const fs::path& p) {
    std::string name = p.filename().string();
    return name.starts_with("store-") && p.extension() == ".ndjson";
}

// Makes sure the next append starts on a fresh line.
void fence_torn_tail(const fs::path& p) {
    std::ifstream in(p, std::ios::binary | std::ios::ate);
    auto size = in.tellg();
    if (size <= 0) return;
    in.seekg(-1, std::ios::end);
    char last = 0;
    in.get(last);
    in.close();
    if (last == '\n') return;
    std::ofstream out(p, std::ios::binary | std::ios::app);
    out << '\n';
    if (!out) throw Error(ErrorCode::StoreWriteFailure, "cannot repair " + p.string());
}

std::optional<StoreRecord> parse_store_line(const std::string& line) {
    try {
        json j = json::parse(line);
        if (!j.is_object() || !j.contains("record") || !j.contains("index")) return std::nullopt;
        StoreRecord s;
        s.index = j.at("index").get<std::uint64_t>();
        auto ts = parse_timestamp(j.at("server_received_at").get<std::string>());
        if (!ts) return std::nullopt;
        s.server_received_at = *ts;
        s.source_hash = j.at("source_hash").get<std::string>();
        if (j.contains("submission_id") && !j["submission_id"].is_null())
            s.submission_id = j["submission_id"].get<std::string>();
        s.record = parse_record(j["record"].dump());
        return s;
    } catch (const std::exception&) {
        return std::nullopt;
    }
}

template <class F>
std::size_t for_each_line(const fs::path& p, F&& f) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw Error(ErrorCode::Io, "cannot read " + p.string());
    std::string line;
    std::size_t corrupt = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto rec = parse_store_line(line);
        if (!rec) ++corrupt;
        f(line, rec);
    }
    return corrupt;
}

std::string rejection(std::string_view error, const std::string& detail = {}) {
    json j = {{"status", "rejected"}, {"error", error}};
    if (!detail.empty()) j["detail"] = detail;
    return j.dump();
}

}  // namespace

Store::Store(fs::path dir) : dir_(std::move(dir)) {
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec || !fs::is_directory(dir_)) throw Error(ErrorCode::Io, "cannot create store directory " + dir_.string());
    salt_ = load_or_create_salt(dir_);
    for (const auto& p : files()) {
        fence_torn_tail(p);
        for_each_line(p, [&](const std::string&, const std::optional<StoreRecord>& r) {
            if (!r) return;
            ++count_;
            next_index_ = std::max(next_index_, r->index + 1);
            if (r->submission_id) submissions_[*r->submission_id] = r->index;
            auto& last = last_received_[p];
            last = std::max(last, r->server_received_at);
        });
    }
}

Store::~Store() = default;

std::vector<fs::path> Store::files() const {
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir_))
        if (e.is_regular_file() && is_store_file(e.path())) out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

fs::path Store::file_for(Timestamp t) const {
    using namespace std::chrono;
    year_month_day ymd{floor<days>(t)};
    char name[40];
    std::snprintf(name, sizeof name, "store-%04d-%02u-%02u.ndjson", int(ymd.year()), unsigned(ymd.month()),
                  unsigned(ymd.day()));
    return dir_ / name;
}

std::string Store::hash_source(std::string_view address) const {
    return sha256_hex(salt_ + std::string(address));
}

Store::Appended Store::append(const FingerprintRecord& r, std::string_view source_address,
                              const std::optional<std::string>& submission_id) {
    auto now = std::chrono::time_point_cast<std::chrono::milliseconds>(std::chrono::system_clock::now());
    return append_at(r, source_address, submission_id, now);
}

Store::Appended Store::append_at(const FingerprintRecord& r, std::string_view source_address,
                                 const std::optional<std::string>& submission_id, Timestamp now) {
    std::string body = serialize_record(r);
    std::string hash = hash_source(source_address);

    std::lock_guard lock(mu_);
    if (submission_id) {
        if (auto it = submissions_.find(*submission_id); it != submissions_.end()) return {it->second, true};
    }
    fs::path path = file_for(now);
    auto& last = last_received_[path];
    Timestamp stamp = std::max(now, last);

    if (path != open_path_ || !out_.is_open()) {
        out_.close();
        out_.clear();
        out_.open(path, std::ios::binary | std::ios::app);
        open_path_ = path;
        if (!out_) throw Error(ErrorCode::StoreWriteFailure, "cannot open " + path.string());
    }
    std::uint64_t index = next_index_;
    std::string line;
    line.reserve(body.size() + 200);
    line += "{\"index\":" + std::to_string(index);
    line += ",\"server_received_at\":\"" + format_timestamp(stamp) + "\"";
    line += ",\"source_hash\":\"" + hash + "\"";
    line += ",\"submission_id\":" + (submission_id ? json(*submission_id).dump() : std::string("null"));
    line += ",\"record\":" + body + "}\n";
    out_.write(line.data(), std::streamsize(line.size()));
    out_.flush();
    if (!out_) {
        out_.close();
        throw Error(ErrorCode::StoreWriteFailure, "write to " + path.string() + " failed");
    }
    ++next_index_;
    ++count_;
    last = stamp;
    if (submission_id) submissions_[*submission_id] = index;
    return {index, false};
}

StoreScan Store::scan() const {
    std::lock_guard lock(mu_);
    StoreScan out;
    for (const auto& p : files()) {
        out.corrupt_lines += for_each_line(p, [&](const std::string&, const std::optional<StoreRecord>& r) {
            if (r) out.records.push_back(*r);
        });
    }
    return out;
}

std::size_t Store::size() const {
    std::lock_guard lock(mu_);
    return count_;
}

std::size_t Store::purge_client(const std::string& client_id) {
    std::lock_guard lock(mu_);
    out_.close();
    open_path_.clear();
    std::size_t removed = 0;
    count_ = 0;
    submissions_.clear();
    for (const auto& p : files()) {
        fs::path tmp = p;
        tmp += ".tmp";
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        for_each_line(p, [&](const std::string& line, const std::optional<StoreRecord>& r) {
            if (r && r->record.client_id == client_id) {
                ++removed;
                return;
            }
            out << line << '\n';
            if (!r) return;
            ++count_;
            if (r->submission_id) submissions_[*r->submission_id] = r->index;
        });
        out.close();
        if (!out) throw Error(ErrorCode::StoreWriteFailure, "cannot rewrite " + p.string());
        std::error_code ec;
        fs::rename(tmp, p, ec);
        if (ec) throw Error(ErrorCode::StoreWriteFailure, "cannot replace " + p.string() + ": " + ec.message());
    }
    return removed;
}

IngestResponse ingest_submission(Store& store, std::string_view body, std::string_view source_address,
                                 const std::optional<std::string>& submission_id) {
    if (body.size() > kMaxBodyBytes) return {413, rejection("BodyTooLarge")};
    if (submission_id && (submission_id->empty() || submission_id->size() > kMaxSubmissionIdLength))
        return {400, rejection("SchemaViolation", "bad X-Submission-Id")};
    FingerprintRecord r;
    try {
        r = parse_record(body);
    } catch (const Error& e) {
        return {400, rejection(to_string(e.code()), e.what())};
    }
    try {
        auto a = store.append(r, source_address, submission_id);
        json j = {{"status", "accepted"}, {"index", a.index}};
        if (a.duplicate) j["duplicate"] = true;
        return {200, j.dump()};
    } catch (const std::exception& e) {
        return {500, json{{"status", "error"}, {"error", "StoreWriteFailure"}, {"detail", e.what()}}.dump()};
    }
}

ExportResult export_corpus(const Store& store, const ExportFilter& filter) {
    StoreScan scan = store.scan();
    std::vector<const StoreRecord*> keep;
    for (const auto& s : scan.records) {
        const auto& r = s.record;
        if (filter.from && r.collected_at < *filter.from) continue;
        if (filter.to && r.collected_at > *filter.to) continue;
        if (!filter.clients.empty() && !filter.clients.contains(r.client_id)) continue;
        keep.push_back(&s);
    }
    std::sort(keep.begin(), keep.end(), [](const StoreRecord* a, const StoreRecord* b) {
        if (a->record.collected_at != b->record.collected_at) return a->record.collected_at < b->record.collected_at;
        return a->index < b->index;
    });
    ExportResult out;
    out.corrupt_lines = scan.corrupt_lines;
    out.records.reserve(keep.size());
    for (const auto* s : keep) out.records.push_back(s->record);
    return out;
}

fs::path resolve_store_dir(const std::optional<fs::path>& explicit_dir) {
    if (explicit_dir) return *explicit_dir;
    if (const char* env = std::getenv("EUPRINT_STORE_DIR"); env && *env) return env;
    return "store";
}

struct IngestServer::Impl {
    explicit Impl(Store& s) : store(s) {}
    Store& store;
    httplib::Server server;
};

IngestServer::IngestServer(Store& store) : impl_(std::make_unique<Impl>(store)) {
    auto& svr = impl_->server;
    svr.set_payload_max_length(kMaxBodyBytes + 1);
    svr.Get("/api/v1/health", [](const httplib::Request&, httplib::Response& res) {
        res.set_content(R"({"status":"ok"})", "application/json");
    });
    Store* s = &store;
    svr.Post("/api/v1/traces", [s](const httplib::Request& req, httplib::Response& res) {
        std::optional<std::string> sid;
        if (req.has_header("X-Submission-Id")) sid = req.get_header_value("X-Submission-Id");
        auto r = ingest_submission(*s, req.body, req.remote_addr, sid);
        res.status = r.status;
        res.set_content(r.body, "application/json");
    });
}

IngestServer::~IngestServer() {
    if (impl_) impl_->server.stop();
}

int IngestServer::bind(const std::string& host, int port) {
    auto& svr = impl_->server;
    int bound = port == 0 ? svr.bind_to_any_port(host) : (svr.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error(ErrorCode::Io, "cannot bind " + host + ":" + std::to_string(port));
    return bound;
}

void IngestServer::run() { impl_->server.listen_after_bind(); }

void IngestServer::stop() { impl_->server.stop(); }

bool IngestServer::running() const { return impl_->server.is_running(); }

}  // namespace euprint
