#pragma once

// File-backed telemetry store. Each regime owns an append-only NDJSON file; index.json
// records the committed record count and byte length per regime plus the content hashes
// of every ingested batch. The index rename is the commit point: readers only consume
// the committed prefix of each regime file.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/digest.hpp"
#include "ndt/error.hpp"
#include "ndt/io.hpp"
#include "ndt/record.hpp"

namespace ndt::telemetry {

namespace fs = std::filesystem;

struct TimeWindow {
    double t0 = 0.0;
    double t1 = 0.0;
};

struct Rejection {
    std::size_t index = 0;
    Errc code = Errc::schema_violation;
    std::string reason;
};

struct IngestSummary {
    std::size_t accepted = 0;
    std::size_t rejected = 0;
    std::map<RegimeKey, std::size_t> per_regime;
    std::vector<Rejection> rejections;
    bool duplicate_batch = false;
    std::string batch_hash;
};

struct RegimeIndexEntry {
    RegimeKey key;
    std::size_t count = 0;
    std::uintmax_t bytes = 0;
    double t_min = 0.0;
    double t_max = 0.0;
};

/// Empty when the record satisfies the telemetry schema, otherwise the violated rule.
inline std::optional<std::string> validate_record(const TelemetryRecord& r) {
    auto finite = [](double v) { return std::isfinite(v); };
    auto pct = [&](double v) { return finite(v) && v >= 0.0 && v <= 100.0; };
    if (r.pods < 1) return "pods < 1";
    if (r.current_users < 0) return "current_users < 0";
    if (!finite(r.timestamp_ms) || r.timestamp_ms < 0.0) return "timestamp_ms negative or non-finite";
    if (!finite(r.avg_depth_on_enqueue) || r.avg_depth_on_enqueue < 0.0) return "avg_depth_on_enqueue negative";
    if (!finite(r.avg_backlog_sec_est) || r.avg_backlog_sec_est < 0.0) return "avg_backlog_sec_est negative";
    if (!pct(r.avg_cpu_process_pct)) return "avg_cpu_process_pct outside [0,100]";
    if (!pct(r.avg_cpu_system_pct)) return "avg_cpu_system_pct outside [0,100]";
    if (!pct(r.avg_mem_system_pct)) return "avg_mem_system_pct outside [0,100]";
    if (r.avg_total_infer_ms && (!finite(*r.avg_total_infer_ms) || *r.avg_total_infer_ms < 0.0)) {
        return "avg_total_infer_ms negative or non-finite";
    }
    return std::nullopt;
}

inline constexpr const char* kCsvRegimeColumns[] = {"regime_users", "regime_pods"};

inline std::string csv_header() {
    std::string h = std::string(kCsvRegimeColumns[0]) + "," + kCsvRegimeColumns[1];
    for (const char* f : kRecordFields) {
        h += ',';
        h += f;
    }
    return h;
}

inline std::string csv_row(const TelemetryRecord& r) {
    using io::format_double;
    std::string row = std::to_string(r.current_users) + "," + std::to_string(r.pods);
    row += "," + format_double(r.timestamp_ms);
    row += "," + std::to_string(r.current_users);
    row += "," + std::to_string(r.pods);
    row += "," + format_double(r.avg_depth_on_enqueue);
    row += "," + format_double(r.avg_backlog_sec_est);
    row += "," + format_double(r.avg_cpu_process_pct);
    row += "," + format_double(r.avg_cpu_system_pct);
    row += "," + format_double(r.avg_mem_system_pct);
    row += ",";
    if (r.avg_total_infer_ms) row += format_double(*r.avg_total_infer_ms);
    return row;
}

inline std::vector<TelemetryRecord> parse_csv(std::string_view text) {
    const auto rows = io::lines(text);
    if (rows.empty() || rows.front() != csv_header()) throw Error(Errc::parse_error, "unexpected CSV header");
    std::vector<TelemetryRecord> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        const auto cells = io::split(rows[i], ',');
        if (cells.size() != 11) throw Error(Errc::parse_error, "CSV row " + std::to_string(i) + " has wrong arity");
        TelemetryRecord r;
        r.timestamp_ms = io::parse_double(cells[2]);
        r.current_users = static_cast<int>(io::parse_int(cells[3]));
        r.pods = static_cast<int>(io::parse_int(cells[4]));
        r.avg_depth_on_enqueue = io::parse_double(cells[5]);
        r.avg_backlog_sec_est = io::parse_double(cells[6]);
        r.avg_cpu_process_pct = io::parse_double(cells[7]);
        r.avg_cpu_system_pct = io::parse_double(cells[8]);
        r.avg_mem_system_pct = io::parse_double(cells[9]);
        if (!cells[10].empty()) r.avg_total_infer_ms = io::parse_double(cells[10]);
        out.push_back(r);
    }
    return out;
}

class Store {
public:
    /// Opens the store at `root`, creating an empty one if absent.
    static Store open(const fs::path& root) {
        Store s(root);
        std::error_code ec;
        fs::create_directories(root, ec);
        if (ec) throw Error(Errc::storage_failure, "cannot create store at " + root.string());
        if (fs::exists(s.index_path())) s.load_index();
        return s;
    }

    const fs::path& root() const noexcept { return root_; }

    IngestSummary ingest(const std::vector<TelemetryRecord>& records) {
        IngestSummary summary;
        summary.batch_hash = sha256_hex(to_ndjson(records));
        if (batches_.contains(summary.batch_hash)) {
            summary.duplicate_batch = true;
            summary.rejected = records.size();
            return summary;
        }

        std::map<RegimeKey, std::vector<std::pair<std::size_t, const TelemetryRecord*>>> grouped;
        for (std::size_t i = 0; i < records.size(); ++i) {
            if (auto why = validate_record(records[i])) {
                summary.rejections.push_back({i, Errc::schema_violation, *why});
                continue;
            }
            grouped[records[i].regime()].emplace_back(i, &records[i]);
        }

        auto staged = index_;
        std::map<RegimeKey, std::string> appends;
        for (auto& [key, rows] : grouped) {
            std::stable_sort(rows.begin(), rows.end(),
                             [](const auto& a, const auto& b) { return a.second->timestamp_ms < b.second->timestamp_ms; });
            auto [it, inserted] = staged.try_emplace(key, RegimeIndexEntry{key});
            RegimeIndexEntry& entry = it->second;
            std::string& text = appends[key];
            for (const auto& [i, rec] : rows) {
                if (entry.count > 0 && rec->timestamp_ms < entry.t_max) {
                    summary.rejections.push_back({i, Errc::schema_violation, "timestamp precedes committed records"});
                    continue;
                }
                if (entry.count == 0) entry.t_min = rec->timestamp_ms;
                entry.t_max = rec->timestamp_ms;
                ++entry.count;
                ++summary.per_regime[key];
                ++summary.accepted;
                text += to_json(*rec).dump();
                text += '\n';
            }
            entry.bytes += text.size();
            if (entry.count == 0) staged.erase(key);
        }
        summary.rejected = summary.rejections.size();
        std::sort(summary.rejections.begin(), summary.rejections.end(),
                  [](const Rejection& a, const Rejection& b) { return a.index < b.index; });

        for (const auto& [key, text] : appends) {
            if (text.empty()) continue;
            const fs::path file = regime_path(key);
            const auto committed = index_.contains(key) ? index_.at(key).bytes : 0;
            std::error_code ec;
            if (fs::exists(file) && fs::file_size(file) != committed) {
                fs::resize_file(file, committed, ec);
                if (ec) throw Error(Errc::storage_failure, "cannot truncate " + file.string());
            }
            io::append_file(file, text);
        }
        index_ = std::move(staged);
        batches_.insert(summary.batch_hash);
        save_index();
        return summary;
    }

    /// Records matching both filters, ordered by timestamp (ties by regime).
    std::vector<TelemetryRecord> query(std::optional<RegimeKey> regime = std::nullopt,
                                       std::optional<TimeWindow> window = std::nullopt) const {
        if (window) require(window->t0 <= window->t1, "query window t0 > t1");
        Store snapshot(root_);
        if (fs::exists(index_path())) snapshot.load_index();
        std::vector<TelemetryRecord> out;
        for (const auto& [key, entry] : snapshot.index_) {
            if (regime && *regime != key) continue;
            if (window && (entry.t_max < window->t0 || entry.t_min > window->t1)) continue;
            for (auto& r : snapshot.read_regime(entry)) {
                if (window && (r.timestamp_ms < window->t0 || r.timestamp_ms > window->t1)) continue;
                out.push_back(std::move(r));
            }
        }
        std::stable_sort(out.begin(), out.end(),
                         [](const TelemetryRecord& a, const TelemetryRecord& b) { return a.timestamp_ms < b.timestamp_ms; });
        return out;
    }

    /// Writes every record as CSV; returns the number of data rows.
    std::size_t export_csv(const fs::path& destination) const {
        const auto records = query();
        std::string text = csv_header() + "\n";
        for (const auto& r : records) text += csv_row(r) + "\n";
        try {
            io::write_file_atomic(destination, text);
        } catch (const Error& e) {
            throw Error(Errc::io_failure, e.what());
        }
        return records.size();
    }

    std::vector<RegimeIndexEntry> regimes() const {
        std::vector<RegimeIndexEntry> out;
        for (const auto& [_, e] : index_) out.push_back(e);
        return out;
    }

    bool has_regime(const RegimeKey& key) const { return index_.contains(key); }

    std::size_t total() const {
        std::size_t n = 0;
        for (const auto& [_, e] : index_) n += e.count;
        return n;
    }

    /// Re-reads the committed index from disk.
    void refresh() {
        index_.clear();
        batches_.clear();
        if (fs::exists(index_path())) load_index();
    }

private:
    explicit Store(fs::path root) : root_(std::move(root)) {}

    fs::path index_path() const { return root_ / "index.json"; }

    fs::path regime_path(const RegimeKey& key) const {
        return root_ / ("regime_u" + std::to_string(key.users) + "_p" + std::to_string(key.pods) + ".ndjson");
    }

    std::vector<TelemetryRecord> read_regime(const RegimeIndexEntry& entry) const {
        const std::string text = io::read_file(regime_path(entry.key));
        if (text.size() < entry.bytes) {
            throw Error(Errc::storage_failure, "regime file shorter than index for " + entry.key.label());
        }
        auto records = parse_ndjson(std::string_view(text).substr(0, entry.bytes));
        if (records.size() != entry.count) {
            throw Error(Errc::storage_failure, "record count mismatch for " + entry.key.label());
        }
        return records;
    }

    void load_index() {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(index_path()));
            for (const auto& e : j.at("regimes")) {
                RegimeIndexEntry entry;
                entry.key = RegimeKey{e.at("users").get<int>(), e.at("pods").get<int>()};
                entry.count = e.at("count").get<std::size_t>();
                entry.bytes = e.at("bytes").get<std::uintmax_t>();
                entry.t_min = e.at("t_min").get<double>();
                entry.t_max = e.at("t_max").get<double>();
                index_[entry.key] = entry;
            }
            for (const auto& h : j.at("batches")) batches_.insert(h.get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::storage_failure, std::string("corrupt store index: ") + e.what());
        }
    }

    void save_index() const {
        ordered_json j;
        j["version"] = 1;
        j["regimes"] = ordered_json::array();
        for (const auto& [key, e] : index_) {
            j["regimes"].push_back(ordered_json{{"users", key.users},
                                                {"pods", key.pods},
                                                {"count", e.count},
                                                {"bytes", e.bytes},
                                                {"t_min", e.t_min},
                                                {"t_max", e.t_max}});
        }
        j["batches"] = batches_;
        try {
            io::write_file_atomic(index_path(), j.dump(1) + "\n");
        } catch (const Error& e) {
            throw Error(Errc::storage_failure, e.what());
        }
    }

    fs::path root_;
    std::map<RegimeKey, RegimeIndexEntry> index_;
    std::set<std::string> batches_;
};

}  // namespace ndt::telemetry
