#pragma once

// Harmonization layer: canonical metric naming, per-regime anomaly trimming, the
// pod-normalised feature space, the log-latency target and train/test assembly.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/digest.hpp"
#include "ndt/error.hpp"
#include "ndt/io.hpp"
#include "ndt/record.hpp"
#include "ndt/stats.hpp"
#include "ndt/telemetry.hpp"

namespace ndt::hdl {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Canonical schema

struct MetricTarget {
    std::string canonical;
    std::string unit;
    double scale = 1.0;
};

struct MetricMapping {
    std::map<std::string, MetricTarget> entries;

    void validate() const {
        std::set<std::string> seen;
        for (const auto& [raw, target] : entries) {
            require(target.scale > 0.0, "scale factor for " + raw + " must be > 0");
            require(seen.insert(target.canonical).second, "duplicate canonical name " + target.canonical);
        }
    }

    /// Same names, unit scale.
    static MetricMapping identity() {
        MetricMapping m;
        for (const char* f : kRecordFields) m.entries[f] = MetricTarget{f, "", 1.0};
        return m;
    }

    /// The workbench's canonical naming with backlog expressed in milliseconds.
    static MetricMapping standard() {
        MetricMapping m;
        m.entries["timestamp_ms"] = {"observedAt", "ms", 1.0};
        m.entries["current_users"] = {"concurrentUsers", "count", 1.0};
        m.entries["pods"] = {"replicaCount", "count", 1.0};
        m.entries["avg_depth_on_enqueue"] = {"queueDepth", "requests", 1.0};
        m.entries["avg_backlog_sec_est"] = {"backlogEstimate", "ms", 1000.0};
        m.entries["avg_cpu_process_pct"] = {"processCpuUtilization", "percent", 1.0};
        m.entries["avg_cpu_system_pct"] = {"systemCpuUtilization", "percent", 1.0};
        m.entries["avg_mem_system_pct"] = {"systemMemoryUtilization", "percent", 1.0};
        m.entries["avg_total_infer_ms"] = {"inferenceLatency", "ms", 1.0};
        return m;
    }
};

/// Name to value view of a record; absent values stay absent.
using RawRecord = std::map<std::string, std::optional<double>>;

struct CanonicalValue {
    std::optional<double> value;
    std::string unit;

    bool operator==(const CanonicalValue&) const = default;
};

using CanonicalRecord = std::map<std::string, CanonicalValue>;

inline RawRecord raw_fields(const TelemetryRecord& r) {
    return RawRecord{
        {"timestamp_ms", r.timestamp_ms},
        {"current_users", static_cast<double>(r.current_users)},
        {"pods", static_cast<double>(r.pods)},
        {"avg_depth_on_enqueue", r.avg_depth_on_enqueue},
        {"avg_backlog_sec_est", r.avg_backlog_sec_est},
        {"avg_cpu_process_pct", r.avg_cpu_process_pct},
        {"avg_cpu_system_pct", r.avg_cpu_system_pct},
        {"avg_mem_system_pct", r.avg_mem_system_pct},
        {"avg_total_infer_ms", r.avg_total_infer_ms},
    };
}

inline CanonicalRecord map_to_canonical(const RawRecord& record, const MetricMapping& mapping) {
    mapping.validate();
    std::vector<std::string> unmapped;
    for (const auto& [name, _] : record) {
        if (!mapping.entries.contains(name)) unmapped.push_back(name);
    }
    if (!unmapped.empty()) {
        std::string names;
        for (const auto& n : unmapped) names += (names.empty() ? "" : ", ") + n;
        throw Error(Errc::unmapped_metric, "no mapping for: " + names);
    }
    CanonicalRecord out;
    for (const auto& [name, value] : record) {
        const auto& target = mapping.entries.at(name);
        CanonicalValue v;
        v.unit = target.unit;
        if (value) v.value = *value * target.scale;
        out[target.canonical] = v;
    }
    return out;
}

inline CanonicalRecord map_to_canonical(const TelemetryRecord& record, const MetricMapping& mapping) {
    return map_to_canonical(raw_fields(record), mapping);
}

/// Compute element in the canonical model: a container or VM described by its
/// resource allocation with timestamped canonical measurements bound to it.
struct ComputeElementModel {
    struct Measurement {
        double timestamp_ms = 0.0;
        CanonicalRecord values;
    };

    std::string id;
    std::string type = "CE";
    double cpu_cores = 0.0;
    double memory_gb = 0.0;
    double storage_gb = 0.0;
    std::vector<Measurement> measurements;

    void validate() const {
        require(!id.empty(), "compute element id must be non-empty");
        require(type == "CE", "compute element type must be CE");
        require(cpu_cores >= 0.0 && memory_gb >= 0.0 && storage_gb >= 0.0, "compute element attributes must be >= 0");
    }

    void bind(const std::vector<TelemetryRecord>& records, const MetricMapping& mapping) {
        for (const auto& r : records) measurements.push_back({r.timestamp_ms, map_to_canonical(r, mapping)});
    }

    ordered_json to_json() const {
        ordered_json j;
        j["id"] = id;
        j["type"] = type;
        j["attributes"] = {{"cpu_cores", cpu_cores}, {"memory_gb", memory_gb}, {"storage_gb", storage_gb}};
        j["measurements"] = ordered_json::array();
        for (const auto& m : measurements) {
            ordered_json values;
            for (const auto& [name, v] : m.values) {
                values[name] = {{"value", v.value ? ordered_json(*v.value) : ordered_json(nullptr)}, {"unit", v.unit}};
            }
            j["measurements"].push_back({{"observedAt", m.timestamp_ms}, {"values", values}});
        }
        return j;
    }
};

inline void validate_elements(const std::vector<ComputeElementModel>& elements) {
    std::set<std::string> ids;
    for (const auto& e : elements) {
        e.validate();
        require(ids.insert(e.id).second, "duplicate compute element id " + e.id);
    }
}

// ---------------------------------------------------------------------------
// Trimming

struct PercentileTrim {
    double low = 1.0;
    double high = 99.0;
};

struct IqrTrim {
    double k = 1.5;
};

using TrimMethod = std::variant<PercentileTrim, IqrTrim>;

inline TrimMethod default_trim() { return PercentileTrim{1.0, 99.0}; }

/// Parses "percentile:LOW,HIGH" or "iqr:K".
inline TrimMethod parse_trim(const std::string& text) {
    const auto colon = text.find(':');
    const std::string kind = text.substr(0, colon);
    const std::string args = colon == std::string::npos ? "" : text.substr(colon + 1);
    if (kind == "percentile") {
        if (args.empty()) return PercentileTrim{};
        const auto parts = io::split(args, ',');
        if (parts.size() != 2) throw Error(Errc::invalid_argument, "percentile trim needs LOW,HIGH");
        PercentileTrim t{io::parse_double(parts[0]), io::parse_double(parts[1])};
        require(t.low >= 0.0 && t.low <= t.high && t.high <= 100.0, "percentile trim needs 0 <= LOW <= HIGH <= 100");
        return t;
    }
    if (kind == "iqr") {
        IqrTrim t{args.empty() ? 1.5 : io::parse_double(args)};
        require(t.k >= 0.0, "iqr multiplier must be >= 0");
        return t;
    }
    throw Error(Errc::invalid_argument, "unknown trim method " + text);
}

inline std::string describe(const TrimMethod& method) {
    return std::visit(
        [](const auto& m) -> std::string {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, PercentileTrim>) {
                return "percentile:" + io::format_double(m.low) + "," + io::format_double(m.high);
            } else {
                return "iqr:" + io::format_double(m.k);
            }
        },
        method);
}

struct TrimBounds {
    double low = 0.0;
    double high = 0.0;
};

/// Latency interval retained by `method` for the given latency sample.
inline TrimBounds trim_bounds(std::vector<double> latencies, const TrimMethod& method) {
    std::sort(latencies.begin(), latencies.end());
    return std::visit(
        [&](const auto& m) -> TrimBounds {
            using T = std::decay_t<decltype(m)>;
            if constexpr (std::is_same_v<T, PercentileTrim>) {
                return {stats::percentile_sorted(latencies, m.low), stats::percentile_sorted(latencies, m.high)};
            } else {
                const double q1 = stats::percentile_sorted(latencies, 25.0);
                const double q3 = stats::percentile_sorted(latencies, 75.0);
                return {q1 - m.k * (q3 - q1), q3 + m.k * (q3 - q1)};
            }
        },
        method);
}

struct TrimResult {
    std::vector<TelemetryRecord> kept;
    std::size_t removed = 0;
    std::size_t no_latency = 0;
    TrimBounds bounds;
};

/// Trims one regime's records on the latency target. Records without a latency value
/// are dropped first and counted separately.
inline TrimResult trim_regime(const std::vector<TelemetryRecord>& records, const TrimMethod& method) {
    TrimResult result;
    std::vector<double> latencies;
    for (const auto& r : records) {
        require(r.regime() == records.front().regime(), "trim_regime expects a single regime");
        if (r.avg_total_infer_ms) {
            latencies.push_back(*r.avg_total_infer_ms);
        } else {
            ++result.no_latency;
        }
    }
    if (latencies.empty()) throw Error(Errc::empty_regime, "no latency-bearing records to trim");
    result.bounds = trim_bounds(std::move(latencies), method);
    for (const auto& r : records) {
        if (!r.avg_total_infer_ms) continue;
        const double y = *r.avg_total_infer_ms;
        if (y >= result.bounds.low && y <= result.bounds.high) {
            result.kept.push_back(r);
        } else {
            ++result.removed;
        }
    }
    return result;
}

// ---------------------------------------------------------------------------
// Features and target

inline constexpr std::size_t kFeatureCount = 7;

inline constexpr std::array<const char*, kFeatureCount> kFeatureNames = {
    "workload_intensity", "congestion_index",   "backlog_flow", "cpu_process_pct",
    "cpu_system_pct",     "mem_system_pct",     "pods",
};

struct FeatureVector {
    double workload_intensity = 0.0;
    double congestion_index = 0.0;
    double backlog_flow = 0.0;
    double cpu_process_pct = 0.0;
    double cpu_system_pct = 0.0;
    double mem_system_pct = 0.0;
    double pods = 1.0;

    bool operator==(const FeatureVector&) const = default;

    std::array<double, kFeatureCount> values() const {
        return {workload_intensity, congestion_index, backlog_flow, cpu_process_pct,
                cpu_system_pct,     mem_system_pct,   pods};
    }

    static FeatureVector from_values(const std::array<double, kFeatureCount>& v) {
        return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
    }

    bool finite() const {
        for (double v : values()) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

/// Digest of the ordered feature names; models refuse inputs built under another schema.
inline std::string feature_schema_hash() {
    std::string joined;
    for (const char* n : kFeatureNames) {
        joined += n;
        joined += ';';
    }
    return sha256_hex(joined);
}

inline FeatureVector build_features(const TelemetryRecord& r) {
    if (r.pods < 1) throw Error(Errc::invalid_argument, "pods must be >= 1 to build features");
    const double pods = static_cast<double>(r.pods);
    FeatureVector f;
    f.workload_intensity = static_cast<double>(r.current_users) / pods;
    f.congestion_index = r.avg_depth_on_enqueue / pods;
    f.backlog_flow = r.avg_backlog_sec_est / pods;
    f.cpu_process_pct = r.avg_cpu_process_pct;
    f.cpu_system_pct = r.avg_cpu_system_pct;
    f.mem_system_pct = r.avg_mem_system_pct;
    f.pods = pods;
    return f;
}

inline double transform_target(double y_ms) {
    if (!(y_ms >= 0.0)) throw Error(Errc::domain_error, "latency must be >= 0");
    return std::log1p(y_ms);
}

inline double invert_target(double yp) {
    if (!(yp >= 0.0)) throw Error(Errc::domain_error, "log target must be >= 0");
    return std::expm1(yp);
}

// ---------------------------------------------------------------------------
// Datasets

struct DatasetRow {
    FeatureVector features;
    double log_target = 0.0;
    RegimeKey regime;
    std::optional<TelemetryRecord> raw;

    double latency_ms() const { return std::expm1(log_target); }
};

inline DatasetRow make_row(const TelemetryRecord& r) {
    if (!r.avg_total_infer_ms) throw Error(Errc::invalid_argument, "record has no latency target");
    return DatasetRow{build_features(r), transform_target(*r.avg_total_infer_ms), r.regime(), r};
}

struct RefinedDataset {
    std::vector<DatasetRow> rows;
    ordered_json provenance = ordered_json::object();

    bool empty() const noexcept { return rows.empty(); }
    std::size_t size() const noexcept { return rows.size(); }

    std::set<RegimeKey> regimes() const {
        std::set<RegimeKey> out;
        for (const auto& r : rows) out.insert(r.regime);
        return out;
    }
};

class SplitSpec {
public:
    SplitSpec(std::set<RegimeKey> train, std::set<RegimeKey> test) : train_(std::move(train)), test_(std::move(test)) {
        for (const auto& k : train_) {
            require(k.valid(), "invalid regime " + k.label());
            require(!test_.contains(k), "regime " + k.label() + " appears in both train and test");
        }
        for (const auto& k : test_) require(k.valid(), "invalid regime " + k.label());
    }

    /// Cross product of user levels and pod levels for each side.
    static SplitSpec grid(const std::vector<int>& train_users, const std::vector<int>& test_users,
                          const std::vector<int>& train_pods, const std::vector<int>& test_pods) {
        std::set<RegimeKey> train, test;
        for (int u : train_users) {
            for (int p : train_pods) train.insert({u, p});
        }
        for (int u : test_users) {
            for (int p : test_pods) test.insert({u, p});
        }
        return SplitSpec(std::move(train), std::move(test));
    }

    const std::set<RegimeKey>& train() const noexcept { return train_; }
    const std::set<RegimeKey>& test() const noexcept { return test_; }

private:
    std::set<RegimeKey> train_;
    std::set<RegimeKey> test_;
};

/// Trims one regime from the store and turns the survivors into dataset rows.
inline std::pair<std::vector<DatasetRow>, ordered_json> refine_regime(const telemetry::Store& store,
                                                                       const RegimeKey& key,
                                                                       const TrimMethod& method) {
    const auto records = store.query(key);
    if (records.empty()) throw Error(Errc::missing_regime, "regime " + key.label() + " not in store");
    auto trimmed = trim_regime(records, method);
    std::vector<DatasetRow> rows;
    rows.reserve(trimmed.kept.size());
    for (const auto& r : trimmed.kept) {
        auto row = make_row(r);
        if (!row.features.finite()) throw Error(Errc::non_finite_feature, "non-finite feature in " + key.label());
        rows.push_back(std::move(row));
    }
    ordered_json info{{"users", key.users},
                      {"pods", key.pods},
                      {"input", records.size()},
                      {"kept", trimmed.kept.size()},
                      {"removed", trimmed.removed},
                      {"no_latency", trimmed.no_latency},
                      {"bound_low_ms", trimmed.bounds.low},
                      {"bound_high_ms", trimmed.bounds.high},
                      {"t_min", records.front().timestamp_ms},
                      {"t_max", records.back().timestamp_ms}};
    return {std::move(rows), std::move(info)};
}

inline std::pair<RefinedDataset, RefinedDataset> assemble(const telemetry::Store& store, const SplitSpec& split,
                                                          const TrimMethod& method = default_trim()) {
    std::vector<std::string> missing;
    for (const auto* side : {&split.train(), &split.test()}) {
        for (const auto& k : *side) {
            if (!store.has_regime(k)) missing.push_back(k.label());
        }
    }
    if (!missing.empty()) {
        std::string names;
        for (const auto& n : missing) names += (names.empty() ? "" : ", ") + n;
        throw Error(Errc::missing_regime, "regimes absent from store: " + names);
    }

    auto build = [&](const std::set<RegimeKey>& keys, const char* role) {
        RefinedDataset ds;
        ordered_json regimes = ordered_json::array();
        for (const auto& k : keys) {
            auto [rows, info] = refine_regime(store, k, method);
            ds.rows.insert(ds.rows.end(), std::make_move_iterator(rows.begin()), std::make_move_iterator(rows.end()));
            regimes.push_back(std::move(info));
        }
        ds.provenance = ordered_json{{"role", role},
                                     {"store", store.root().string()},
                                     {"trim", describe(method)},
                                     {"feature_schema", feature_schema_hash()},
                                     {"rows", ds.rows.size()},
                                     {"regimes", std::move(regimes)}};
        return ds;
    };
    return {build(split.train(), "train"), build(split.test(), "test")};
}

inline std::string dataset_csv_header() {
    std::string h;
    for (const char* n : kFeatureNames) h += std::string(n) + ",";
    return h + "log_target,users,pods";
}

inline std::string to_csv(const RefinedDataset& ds) {
    std::string out = dataset_csv_header() + "\n";
    for (const auto& row : ds.rows) {
        for (double v : row.features.values()) out += io::format_double(v) + ",";
        out += io::format_double(row.log_target) + "," + std::to_string(row.regime.users) + "," +
               std::to_string(row.regime.pods) + "\n";
    }
    return out;
}

inline RefinedDataset dataset_from_csv(std::string_view text) {
    const auto rows = io::lines(text);
    if (rows.empty() || rows.front() != dataset_csv_header()) {
        throw Error(Errc::parse_error, "unexpected dataset CSV header");
    }
    RefinedDataset ds;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = io::split(rows[i], ',');
        if (cells.size() != kFeatureCount + 3) throw Error(Errc::parse_error, "dataset row has wrong arity");
        std::array<double, kFeatureCount> v{};
        for (std::size_t c = 0; c < kFeatureCount; ++c) v[c] = io::parse_double(cells[c]);
        DatasetRow row;
        row.features = FeatureVector::from_values(v);
        row.log_target = io::parse_double(cells[kFeatureCount]);
        row.regime = {static_cast<int>(io::parse_int(cells[kFeatureCount + 1])),
                      static_cast<int>(io::parse_int(cells[kFeatureCount + 2]))};
        ds.rows.push_back(std::move(row));
    }
    return ds;
}

/// Writes train.csv, test.csv and provenance.json into `dir`.
inline void write_dataset(const fs::path& dir, const RefinedDataset& train, const RefinedDataset& test) {
    io::write_file_atomic(dir / "train.csv", to_csv(train));
    io::write_file_atomic(dir / "test.csv", to_csv(test));
    ordered_json prov{{"train", train.provenance}, {"test", test.provenance}};
    io::write_file_atomic(dir / "provenance.json", prov.dump(2) + "\n");
}

/// Loads one side ("train" or "test") of a dataset directory.
inline RefinedDataset read_dataset(const fs::path& dir, const std::string& side) {
    const fs::path csv = dir / (side + ".csv");
    if (!fs::exists(csv)) throw Error(Errc::not_found, "dataset file " + csv.string() + " not found");
    auto ds = dataset_from_csv(io::read_file(csv));
    const fs::path prov = dir / "provenance.json";
    if (fs::exists(prov)) {
        try {
            ds.provenance = ordered_json::parse(io::read_file(prov)).value(side, ordered_json::object());
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::parse_error, std::string("provenance: ") + e.what());
        }
    }
    return ds;
}

}  // namespace ndt::hdl
