#include "euprint/record_io.hpp"

#include <fstream>
#include <istream>
#include <ostream>

#include <json.hpp>

namespace euprint {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

[[noreturn]] void schema_error(const std::string& what) {
    throw Error(ErrorCode::SchemaViolation, what);
}

const json& require(const json& obj, const char* key, json::value_t type) {
    const auto it = obj.find(key);
    if (it == obj.end()) schema_error(std::string("missing field \"") + key + "\"");
    const bool numeric_ok = type == json::value_t::number_float && it->is_number();
    const bool int_ok = type == json::value_t::number_integer && it->is_number_integer();
    if (it->type() != type && !numeric_ok && !int_ok)
        schema_error(std::string("field \"") + key + "\" has the wrong type");
    return *it;
}

void reject_unknown(const json& obj, std::initializer_list<const char*> allowed, const char* what) {
    for (const auto& [k, v] : obj.items()) {
        bool known = false;
        for (const char* a : allowed) known = known || k == a;
        if (!known) schema_error(std::string("unknown ") + what + " field \"" + k + "\"");
    }
}

ordered_json trace_to_json(const Trace& t) {
    ordered_json j;
    j["method"] = to_string(t.config.method);
    j["operator"] = to_string(t.config.op);
    j["point_count"] = t.config.point_count;
    j["iterations_per_point"] = t.config.iterations_per_point;
    j["subset_mode"] = t.config.subset_mode;
    j["stall_loop_length"] = t.config.stall_loop_length;
    j["timings"] = t.timings;
    return j;
}

Trace trace_from_json(const json& j) {
    if (!j.is_object()) schema_error("trace must be an object");
    reject_unknown(j,
                   {"method", "operator", "point_count", "iterations_per_point", "subset_mode",
                    "stall_loop_length", "timings"},
                   "trace");
    Trace t;
    const auto method = parse_timing_method(require(j, "method", json::value_t::string).get<std::string>());
    if (!method) schema_error("unknown timing method");
    const auto op = parse_stall_operator(require(j, "operator", json::value_t::string).get<std::string>());
    if (!op) schema_error("unknown stall operator");
    t.config.method = *method;
    t.config.op = *op;
    t.config.point_count = require(j, "point_count", json::value_t::number_integer).get<int>();
    t.config.iterations_per_point =
        require(j, "iterations_per_point", json::value_t::number_integer).get<int>();
    t.config.subset_mode = require(j, "subset_mode", json::value_t::boolean).get<bool>();
    t.config.stall_loop_length =
        require(j, "stall_loop_length", json::value_t::number_integer).get<int>();
    try {
        t.config.validate();
    } catch (const Error& e) {
        schema_error(e.what());
    }
    const auto& timings = require(j, "timings", json::value_t::array);
    t.timings.reserve(timings.size());
    for (const auto& v : timings) {
        if (!v.is_number()) schema_error("timings must be numbers");
        t.timings.push_back(v.get<double>());
    }
    return t;
}

}  // namespace

std::string serialize_record(const FingerprintRecord& r) {
    ordered_json j;
    j["client_id"] = r.client_id;
    j["collected_at"] = format_timestamp(r.collected_at);
    ordered_json attrs = ordered_json::object();
    for (auto key : kAttributeKeys) attrs[std::string(key)] = r.attribute(key);
    j["attributes"] = std::move(attrs);
    ordered_json traces = ordered_json::array();
    for (const auto& t : r.traces) traces.push_back(trace_to_json(t));
    j["traces"] = std::move(traces);
    j["true_device"] = r.true_device ? ordered_json(*r.true_device) : ordered_json(nullptr);
    return j.dump();
}

FingerprintRecord parse_record(std::string_view line) {
    json j;
    try {
        j = json::parse(line.begin(), line.end());
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::MalformedDocument, e.what());
    }
    if (!j.is_object()) throw Error(ErrorCode::MalformedDocument, "record must be a JSON object");
    reject_unknown(j, {"client_id", "collected_at", "attributes", "traces", "true_device"}, "top-level");

    FingerprintRecord r;
    r.client_id = require(j, "client_id", json::value_t::string).get<std::string>();
    const auto ts = parse_timestamp(require(j, "collected_at", json::value_t::string).get<std::string>());
    if (!ts) schema_error("collected_at is not an ISO-8601 UTC timestamp");
    r.collected_at = *ts;

    const auto& attrs = require(j, "attributes", json::value_t::object);
    for (const auto& [k, v] : attrs.items()) {
        if (v.is_string()) {
            r.attributes[k] = v.get<std::string>();
        } else if (v.is_boolean()) {
            r.attributes[k] = v.get<bool>() ? "true" : "false";
        } else if (v.is_number_integer()) {
            r.attributes[k] = std::to_string(v.get<long long>());
        } else {
            schema_error("attribute \"" + k + "\" must be a string, integer or boolean");
        }
    }

    const auto& traces = require(j, "traces", json::value_t::array);
    if (traces.size() != kTracesPerRecord)
        schema_error("record needs exactly 7 traces, got " + std::to_string(traces.size()));
    for (const auto& tj : traces) {
        Trace t = trace_from_json(tj);
        t.collected_at = r.collected_at;
        t.client_id = r.client_id;
        r.traces.push_back(std::move(t));
    }

    if (const auto it = j.find("true_device"); it != j.end() && !it->is_null()) {
        if (!it->is_string()) schema_error("true_device must be a string or null");
        r.true_device = it->get<std::string>();
    }

    for (auto& t : r.traces) t.method_reported = r.attribute("webgl_renderer");

    try {
        validate_record(r);
    } catch (const Error& e) {
        if (e.code() == ErrorCode::SchemaViolation) throw;
        schema_error(e.what());
    }
    return r;
}

CorpusReadResult read_corpus(std::istream& in, bool skip_corrupt) {
    CorpusReadResult result;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        try {
            result.records.push_back(parse_record(line));
        } catch (const Error&) {
            if (!skip_corrupt) throw;
            ++result.corrupt_lines;
        }
    }
    return result;
}

CorpusReadResult read_corpus(const std::filesystem::path& path, bool skip_corrupt) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    return read_corpus(in, skip_corrupt);
}

void write_corpus(std::ostream& out, const std::vector<FingerprintRecord>& records) {
    for (const auto& r : records) out << serialize_record(r) << '\n';
}

void write_corpus(const std::filesystem::path& path, const std::vector<FingerprintRecord>& records) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    write_corpus(out, records);
}

}  // namespace euprint
