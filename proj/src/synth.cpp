#include "euprint/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace euprint {

Rng derive_rng(std::uint64_t seed, std::uint64_t stream) {
    std::seed_seq seq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(stream),
                      std::uint32_t(stream >> 32), 0x5eedu};
    return Rng(seq);
}

void DeviceProfile::validate() const {
    if (eu_count <= 0) throw Error(ErrorCode::InvalidConfig, "eu_count must be positive");
    if (eu_speed.size() != std::size_t(eu_count))
        throw Error(ErrorCode::InvalidConfig, "eu_speed length must equal eu_count");
    for (double s : eu_speed)
        if (!(s > 0.0)) throw Error(ErrorCode::InvalidConfig, "eu_speed entries must be positive");
    if (am_unit_map.size() != std::size_t(eu_count))
        throw Error(ErrorCode::InvalidConfig, "am_unit_map must cover every EU");
    if (within_noise_sigma < 0.0 || restart_drift_sigma < 0.0)
        throw Error(ErrorCode::InvalidConfig, "noise parameters must be non-negative");
}

std::map<StallOperator, double> default_operator_costs() {
    // Per stall-loop step; with the default loop length of 2000, sinh costs
    // about 1.5 ms per stalled point.
    return {
        {StallOperator::Sin, 0.00060},   {StallOperator::Mul, 0.00020},
        {StallOperator::Sinh, 0.00075},  {StallOperator::Exp2, 0.00050},
        {StallOperator::Pow, 0.00090},   {StallOperator::Atanh, 0.00080},
        {StallOperator::Acosh, 0.00080}, {StallOperator::Sqrt, 0.00030},
        {StallOperator::Fract, 0.00015}, {StallOperator::Log2, 0.00050},
        {StallOperator::Tanh, 0.00070},
    };
}

void TimerModel::validate() const {
    if (kind == Kind::FrameQuantized && !(frame_period_ms > 0.0))
        throw Error(ErrorCode::InvalidConfig, "frame_period_ms must be positive");
    if (kind == Kind::MillisecondJitter && !(quantum_ms > 0.0))
        throw Error(ErrorCode::InvalidConfig, "quantum_ms must be positive");
    if (jitter_ms < 0.0) throw Error(ErrorCode::InvalidConfig, "jitter_ms must be non-negative");
}

double TimerModel::measure(double raw_ms, Rng& rng) const {
    switch (kind) {
        case Kind::FrameQuantized: {
            // A frame callback never fires sooner than one refresh period.
            const double frames = std::max(1.0, std::ceil(raw_ms / frame_period_ms));
            return frames * frame_period_ms;
        }
        case Kind::MillisecondJitter: {
            const double q = std::round(raw_ms / quantum_ms) * quantum_ms;
            double j = 0.0;
            if (jitter_ms > 0.0) j = std::uniform_real_distribution<double>(-jitter_ms, jitter_ms)(rng);
            return std::max(0.0, q + j);
        }
        case Kind::MicrosecondExact:
            return std::round(raw_ms * 1000.0) / 1000.0;
    }
    return raw_ms;
}

int dispatch(int point_index, int eu_count, DispatchPolicy policy, Rng& rng) {
    if (policy.randomized) return std::uniform_int_distribution<int>(0, eu_count - 1)(rng);
    return point_index % eu_count;
}

Trace sample_trace(const DeviceProfile& profile, const CollectorConfig& cfg,
                   const TimerModel& timer, DispatchPolicy policy, Rng& rng) {
    cfg.validate();
    profile.validate();
    timer.validate();

    const auto cost_it = profile.operator_cost.find(cfg.op);
    if (cost_it == profile.operator_cost.end())
        throw Error(ErrorCode::InvalidConfig, "profile has no cost for operator");
    const double base = cost_it->second * double(cfg.stall_loop_length);
    const bool contended = uses_advanced_math(cfg.op);

    std::normal_distribution<double> noise(0.0, profile.within_noise_sigma);
    const std::size_t n = cfg.expected_length();

    Trace t;
    t.config = cfg;
    t.timings.resize(n);

    std::vector<int> stalled;
    std::vector<int> eus;
    std::vector<int> am_load(std::size_t(*std::max_element(profile.am_unit_map.begin(),
                                                           profile.am_unit_map.end()) + 1));
    for (std::size_t it = 0; it < n; ++it) {
        stalled.clear();
        if (cfg.subset_mode) {
            for (int p = 0; p < cfg.point_count; ++p)
                if (it >> p & 1u) stalled.push_back(p);
        } else {
            stalled.push_back(int(it / std::size_t(cfg.iterations_per_point)));
        }

        eus.clear();
        std::fill(am_load.begin(), am_load.end(), 0);
        for (int p : stalled) {
            const int eu = dispatch(p, profile.eu_count, policy, rng);
            eus.push_back(eu);
            ++am_load[std::size_t(profile.am_unit_map[std::size_t(eu)])];
        }

        // The slowest stalled EU bounds the iteration; idle points are free.
        double raw = 0.0;
        for (int eu : eus) {
            const double contention =
                contended ? profile.am_contention *
                                double(am_load[std::size_t(profile.am_unit_map[std::size_t(eu)])] - 1)
                          : 0.0;
            const double jitter =
                profile.within_noise_sigma > 0.0 ? std::max(0.01, 1.0 + noise(rng)) : 1.0;
            raw = std::max(raw, base * profile.eu_speed[std::size_t(eu)] * (1.0 + contention) * jitter);
        }
        t.timings[it] = timer.measure(raw, rng);
    }
    return t;
}

DeviceProfile restart(const DeviceProfile& profile, Rng& rng) {
    DeviceProfile out = profile;
    if (profile.restart_drift_sigma <= 0.0) return out;
    std::normal_distribution<double> drift(0.0, profile.restart_drift_sigma);
    for (double& s : out.eu_speed) s *= std::max(0.01, 1.0 + drift(rng));
    return out;
}

std::vector<DeviceProfile> make_class_profiles(const DeviceClassSpec& spec, Rng& rng) {
    if (spec.eu_count <= 0 || spec.am_units <= 0 || spec.device_count < 0)
        throw Error(ErrorCode::InvalidConfig, "bad device class " + spec.name);

    std::normal_distribution<double> unit(0.0, 1.0);
    std::vector<double> pattern(std::size_t(spec.eu_count));
    for (double& p : pattern) p = std::max(0.2, 1.0 + spec.class_spread * unit(rng));

    std::vector<int> am_map(std::size_t(spec.eu_count));
    for (int eu = 0; eu < spec.eu_count; ++eu)
        am_map[std::size_t(eu)] = eu * spec.am_units / spec.eu_count;

    std::vector<double> shared;
    if (spec.permuted_speeds) {
        for (double p : pattern) shared.push_back(std::max(0.2, p * (1.0 + spec.device_spread * unit(rng))));
    }

    std::vector<DeviceProfile> out;
    for (int d = 0; d < spec.device_count; ++d) {
        DeviceProfile p;
        p.device_id = spec.name + "-" + std::to_string(d);
        p.device_class = spec.name;
        p.eu_count = spec.eu_count;
        if (spec.permuted_speeds) {
            p.eu_speed = shared;
            std::shuffle(p.eu_speed.begin(), p.eu_speed.end(), rng);
        } else {
            p.eu_speed.resize(pattern.size());
            for (std::size_t i = 0; i < pattern.size(); ++i)
                p.eu_speed[i] = std::max(0.2, pattern[i] * (1.0 + spec.device_spread * unit(rng)));
        }
        p.am_unit_map = am_map;
        p.operator_cost = default_operator_costs();
        p.within_noise_sigma = spec.within_noise_sigma;
        p.restart_drift_sigma = spec.restart_drift_sigma;
        p.am_contention = spec.am_contention;
        p.session_seed = rng();
        out.push_back(std::move(p));
    }
    return out;
}

namespace {

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

template <typename T, std::size_t N>
const T& pick(const std::array<T, N>& options, Rng& rng) {
    return options[std::uniform_int_distribution<std::size_t>(0, N - 1)(rng)];
}

constexpr std::array<std::string_view, 6> kLanguages = {
    "en-US,en;q=0.9", "fr-FR,fr;q=0.9,en;q=0.8", "de-DE,de;q=0.9", "he-IL,he;q=0.9,en;q=0.8",
    "en-GB,en;q=0.9", "es-ES,es;q=0.9"};
constexpr std::array<std::string_view, 6> kTimezones = {
    "America/New_York", "Europe/Paris", "Europe/Berlin", "Asia/Jerusalem",
    "Europe/London", "Australia/Adelaide"};
constexpr std::array<std::pair<int, int>, 6> kScreens = {
    {{1920, 1080}, {2560, 1440}, {1366, 768}, {1536, 864}, {1440, 900}, {3840, 2160}}};
constexpr std::array<std::string_view, 4> kPlugins = {
    "PDF Viewer;Chrome PDF Viewer;Chromium PDF Viewer;Microsoft Edge PDF Viewer;WebKit built-in PDF",
    "Chrome PDF Plugin;Chrome PDF Viewer;Native Client", "", "Chrome PDF Viewer"};
constexpr std::array<std::string_view, 6> kGpus = {
    "Intel(R) UHD Graphics 630",   "Intel(R) HD Graphics 4600", "Intel(R) HD Graphics 2500",
    "NVIDIA GeForce GTX 1650",     "AMD Radeon RX 580",         "Intel(R) Iris(R) Xe Graphics"};

std::string user_agent(std::string_view platform, int major) {
    std::string os = "Windows NT 10.0; Win64; x64";
    if (platform == "MacIntel") os = "Macintosh; Intel Mac OS X 10_15_7";
    if (platform == "Linux x86_64") os = "X11; Linux x86_64";
    return "Mozilla/5.0 (" + os + ") AppleWebKit/537.36 (KHTML, like Gecko) Chrome/" +
           std::to_string(major) + ".0.4664.45 Safari/537.36";
}

std::string bump_chrome_major(const std::string& ua) {
    const auto pos = ua.find("Chrome/");
    if (pos == std::string::npos) return ua;
    const auto start = pos + 7;
    const auto dot = ua.find('.', start);
    const int major = std::stoi(ua.substr(start, dot - start));
    return ua.substr(0, start) + std::to_string(major + 1) + ua.substr(dot);
}

void apply_attribute_change(AttributeMap& attrs, Rng& rng) {
    switch (std::uniform_int_distribution<int>(0, 4)(rng)) {
        case 0: {
            const auto [w, h] = pick(kScreens, rng);
            attrs["screen_width"] = std::to_string(w);
            attrs["screen_height"] = std::to_string(h);
            break;
        }
        case 1:
            attrs["http_accept_language"] = std::string(pick(kLanguages, rng));
            break;
        case 2:
            attrs["timezone"] = std::string(pick(kTimezones, rng));
            break;
        case 3:
            attrs["dnt"] = attrs["dnt"] == "1" ? "unspecified" : "1";
            break;
        default:
            attrs["plugins"] = std::string(pick(kPlugins, rng));
            break;
    }
}

std::string hex_id(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

}  // namespace

AttributeMap class_attribute_template(const std::string& class_name, const AttributeMap& overrides) {
    Rng rng(fnv1a(class_name));
    const double platform_draw = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    const std::string platform =
        platform_draw < 0.75 ? "Win32" : (platform_draw < 0.9 ? "MacIntel" : "Linux x86_64");
    const auto [w, h] = pick(kScreens, rng);
    const std::string gpu(pick(kGpus, rng));
    const int driver_build = std::uniform_int_distribution<int>(1000, 9999)(rng);

    AttributeMap a;
    a["cookies_enabled"] = "true";
    a["session_storage"] = "true";
    a["http_accept"] = "text/html,application/xhtml+xml,application/xml;q=0.9,image/avif,image/webp,*/*;q=0.8";
    a["http_accept_encoding"] = "gzip, deflate, br";
    a["http_accept_language"] = std::string(pick(kLanguages, rng));
    a["user_agent"] = user_agent(platform, 96);
    a["dnt"] = "unspecified";
    a["platform"] = platform;
    a["plugins"] = std::string(kPlugins[0]);
    a["screen_width"] = std::to_string(w);
    a["screen_height"] = std::to_string(h);
    a["timezone"] = std::string(pick(kTimezones, rng));
    a["webgl_vendor"] = "Google Inc.";
    a["webgl_renderer"] = "ANGLE (" + gpu + " Direct3D11 vs_5_0 ps_5_0, D3D11-27.20.100." +
                          std::to_string(driver_build) + ")";
    for (const auto& [k, v] : overrides) a[k] = v;
    return a;
}

std::vector<FingerprintRecord> generate_corpus(const std::vector<DeviceProfile>& profiles,
                                               const CollectorConfig& cfg,
                                               const TimerModel& timer, DispatchPolicy policy,
                                               int traces_per_collection, int collections,
                                               double period_hours, Rng& rng,
                                               const CorpusOptions& options) {
    if (traces_per_collection < int(kTracesPerRecord))
        throw Error(ErrorCode::InvalidConfig, "at least 7 traces per collection are required");
    cfg.validate();
    const std::uint64_t base_seed = rng();

    std::vector<std::vector<FingerprintRecord>> per_device(profiles.size());
    for (std::size_t d = 0; d < profiles.size(); ++d) {
        Rng dev_rng = derive_rng(base_seed ^ profiles[d].session_seed, d);
        DeviceProfile profile = profiles[d];
        const std::string client_id = hex_id(dev_rng());

        const auto tmpl = options.class_attributes.find(profile.device_class);
        AttributeMap attrs = tmpl != options.class_attributes.end()
                                 ? tmpl->second
                                 : class_attribute_template(profile.device_class);

        std::uniform_real_distribution<double> coin(0.0, 1.0);
        const auto& evo = options.evolution;
        for (int b = 0; b < evo.burn_in_collections; ++b) {
            if (coin(dev_rng) < evo.browser_update_probability)
                attrs["user_agent"] = bump_chrome_major(attrs["user_agent"]);
            if (coin(dev_rng) < evo.attribute_change_probability) apply_attribute_change(attrs, dev_rng);
        }
        for (int c = 0; c < collections; ++c) {
            if (c > 0) {
                if (evo.browser_update_probability > 0.0 && coin(dev_rng) < evo.browser_update_probability)
                    attrs["user_agent"] = bump_chrome_major(attrs["user_agent"]);
                if (evo.attribute_change_probability > 0.0 &&
                    coin(dev_rng) < evo.attribute_change_probability)
                    apply_attribute_change(attrs, dev_rng);
                if (evo.restart_probability > 0.0 && coin(dev_rng) < evo.restart_probability)
                    profile = restart(profile, dev_rng);
            }

            FingerprintRecord r;
            r.client_id = client_id;
            r.collected_at = add_hours(options.start, period_hours * c);
            r.attributes = attrs;
            r.true_device = profile.device_id;
            for (int k = 0; k < traces_per_collection; ++k) {
                Trace t = sample_trace(profile, cfg, timer, policy, dev_rng);
                if (std::size_t(k) >= kTracesPerRecord) continue;
                t.collected_at = r.collected_at;
                t.client_id = client_id;
                t.method_reported = attrs["webgl_renderer"];
                r.traces.push_back(std::move(t));
            }
            per_device[d].push_back(std::move(r));
        }
    }

    std::vector<FingerprintRecord> out;
    out.reserve(profiles.size() * std::size_t(std::max(collections, 0)));
    for (int c = 0; c < collections; ++c)
        for (auto& dev : per_device) out.push_back(std::move(dev[std::size_t(c)]));
    return out;
}

std::vector<DeviceProfile> Scenario::profiles() const {
    std::vector<DeviceProfile> out;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        Rng rng = derive_rng(seed, 1000 + i);
        auto ps = make_class_profiles(classes[i], rng);
        out.insert(out.end(), std::make_move_iterator(ps.begin()), std::make_move_iterator(ps.end()));
    }
    return out;
}

std::vector<FingerprintRecord> Scenario::generate() const {
    CorpusOptions opts = options;
    for (const auto& c : classes) {
        if (!opts.class_attributes.contains(c.name))
            opts.class_attributes[c.name] = class_attribute_template(c.name, c.attributes);
    }
    Rng rng = derive_rng(seed, 1);
    return generate_corpus(profiles(), collector, timer, dispatch, traces_per_collection,
                           collections, period_hours, rng, opts);
}

Scenario parse_scenario(const std::string& json_text) {
    using nlohmann::json;
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::parse_error& e) {
        throw Error(ErrorCode::MalformedDocument, e.what());
    }
    Scenario s;
    s.seed = j.value("seed", std::uint64_t{1});
    if (j.contains("collector")) {
        const auto& c = j["collector"];
        if (auto m = parse_timing_method(c.value("method", "offscreen"))) s.collector.method = *m;
        else throw Error(ErrorCode::SchemaViolation, "unknown timing method");
        if (auto op = parse_stall_operator(c.value("operator", "sinh"))) s.collector.op = *op;
        else throw Error(ErrorCode::SchemaViolation, "unknown stall operator");
        s.collector.point_count = c.value("point_count", s.collector.point_count);
        s.collector.iterations_per_point = c.value("iterations_per_point", s.collector.iterations_per_point);
        s.collector.subset_mode = c.value("subset_mode", s.collector.subset_mode);
        s.collector.stall_loop_length = c.value("stall_loop_length", s.collector.stall_loop_length);
    }
    s.collector.validate();
    if (j.contains("timer")) {
        const auto& t = j["timer"];
        const std::string kind = t.value("kind", "millisecond_jitter");
        if (kind == "frame_quantized") s.timer.kind = TimerModel::Kind::FrameQuantized;
        else if (kind == "millisecond_jitter") s.timer.kind = TimerModel::Kind::MillisecondJitter;
        else if (kind == "microsecond_exact") s.timer.kind = TimerModel::Kind::MicrosecondExact;
        else throw Error(ErrorCode::SchemaViolation, "unknown timer kind " + kind);
        s.timer.frame_period_ms = t.value("frame_period_ms", s.timer.frame_period_ms);
        s.timer.quantum_ms = t.value("quantum_ms", s.timer.quantum_ms);
        s.timer.jitter_ms = t.value("jitter_ms", s.timer.jitter_ms);
    }
    s.timer.validate();
    if (j.contains("dispatch")) s.dispatch.randomized = j["dispatch"].value("randomized", false);
    s.collections = j.value("collections", s.collections);
    s.period_hours = j.value("period_hours", s.period_hours);
    s.traces_per_collection = j.value("traces_per_collection", s.traces_per_collection);
    if (j.contains("start")) {
        auto ts = parse_timestamp(j["start"].get<std::string>());
        if (!ts) throw Error(ErrorCode::SchemaViolation, "bad start timestamp");
        s.options.start = *ts;
    }
    if (j.contains("evolution")) {
        const auto& e = j["evolution"];
        s.options.evolution.browser_update_probability = e.value("browser_update_probability", 0.0);
        s.options.evolution.attribute_change_probability = e.value("attribute_change_probability", 0.0);
        s.options.evolution.restart_probability = e.value("restart_probability", 0.0);
        s.options.evolution.burn_in_collections = e.value("burn_in_collections", 0);
        if (s.options.evolution.burn_in_collections < 0)
            throw Error(ErrorCode::SchemaViolation, "burn_in_collections must be non-negative");
    }
    if (!j.contains("classes") || !j["classes"].is_array() || j["classes"].empty())
        throw Error(ErrorCode::SchemaViolation, "scenario needs a non-empty \"classes\" array");
    for (const auto& c : j["classes"]) {
        DeviceClassSpec spec;
        spec.name = c.at("name").get<std::string>();
        spec.device_count = c.value("device_count", spec.device_count);
        spec.eu_count = c.value("eu_count", spec.eu_count);
        spec.am_units = c.value("am_units", spec.am_units);
        spec.class_spread = c.value("class_spread", spec.class_spread);
        spec.device_spread = c.value("device_spread", spec.device_spread);
        spec.permuted_speeds = c.value("permuted_speeds", spec.permuted_speeds);
        spec.within_noise_sigma = c.value("within_noise_sigma", spec.within_noise_sigma);
        spec.restart_drift_sigma = c.value("restart_drift_sigma", spec.restart_drift_sigma);
        spec.am_contention = c.value("am_contention", spec.am_contention);
        if (c.contains("attributes"))
            for (const auto& [k, v] : c["attributes"].items()) spec.attributes[k] = v.get<std::string>();
        s.classes.push_back(std::move(spec));
    }
    return s;
}

Scenario load_scenario(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open scenario " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_scenario(ss.str());
}

LabDataset sample_lab_dataset(const std::vector<DeviceProfile>& profiles,
                              const CollectorConfig& cfg, const TimerModel& timer,
                              DispatchPolicy policy, int traces_per_device, std::uint64_t seed) {
    LabDataset data;
    for (std::size_t d = 0; d < profiles.size(); ++d) {
        Rng rng = derive_rng(seed, d);
        for (int i = 0; i < traces_per_device; ++i) {
            data.traces.push_back(sample_trace(profiles[d], cfg, timer, policy, rng).timings);
            data.labels.push_back(profiles[d].device_id);
        }
    }
    return data;
}

}  // namespace euprint
