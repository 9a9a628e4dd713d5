#pragma once

#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/error.hpp"
#include "ndt/io.hpp"

namespace ndt {

using ordered_json = nlohmann::ordered_json;

/// An operating regime: concurrent users crossed with the pod allocation.
struct RegimeKey {
    int users = 0;
    int pods = 1;

    auto operator<=>(const RegimeKey&) const = default;

    bool valid() const noexcept { return users >= 0 && pods >= 1; }

    std::string label() const { return std::to_string(users) + ":" + std::to_string(pods); }
};

inline RegimeKey parse_regime(const std::string& text) {
    const auto parts = io::split(text, ':');
    if (parts.size() != 2) throw Error(Errc::parse_error, "regime must be users:pods, got " + text);
    return RegimeKey{static_cast<int>(io::parse_int(parts[0])), static_cast<int>(io::parse_int(parts[1]))};
}

/// One tick of raw service telemetry.
struct TelemetryRecord {
    double timestamp_ms = 0.0;
    int current_users = 0;
    int pods = 1;
    double avg_depth_on_enqueue = 0.0;
    double avg_backlog_sec_est = 0.0;
    double avg_cpu_process_pct = 0.0;
    double avg_cpu_system_pct = 0.0;
    double avg_mem_system_pct = 0.0;
    std::optional<double> avg_total_infer_ms;

    bool operator==(const TelemetryRecord&) const = default;

    RegimeKey regime() const noexcept { return RegimeKey{current_users, pods}; }
};

inline constexpr const char* kRecordFields[] = {
    "timestamp_ms",        "current_users",       "pods",
    "avg_depth_on_enqueue", "avg_backlog_sec_est", "avg_cpu_process_pct",
    "avg_cpu_system_pct",  "avg_mem_system_pct",  "avg_total_infer_ms",
};

inline ordered_json to_json(const TelemetryRecord& r) {
    ordered_json j;
    j["timestamp_ms"] = r.timestamp_ms;
    j["current_users"] = r.current_users;
    j["pods"] = r.pods;
    j["avg_depth_on_enqueue"] = r.avg_depth_on_enqueue;
    j["avg_backlog_sec_est"] = r.avg_backlog_sec_est;
    j["avg_cpu_process_pct"] = r.avg_cpu_process_pct;
    j["avg_cpu_system_pct"] = r.avg_cpu_system_pct;
    j["avg_mem_system_pct"] = r.avg_mem_system_pct;
    if (r.avg_total_infer_ms) {
        j["avg_total_infer_ms"] = *r.avg_total_infer_ms;
    } else {
        j["avg_total_infer_ms"] = nullptr;
    }
    return j;
}

inline TelemetryRecord record_from_json(const nlohmann::json& j) {
    try {
        for (const auto& [key, _] : j.items()) {
            bool known = false;
            for (const char* f : kRecordFields) known = known || key == f;
            if (!known) throw Error(Errc::parse_error, "unknown record field '" + key + "'");
        }
        TelemetryRecord r;
        r.timestamp_ms = j.at("timestamp_ms").get<double>();
        r.current_users = j.at("current_users").get<int>();
        r.pods = j.at("pods").get<int>();
        r.avg_depth_on_enqueue = j.at("avg_depth_on_enqueue").get<double>();
        r.avg_backlog_sec_est = j.at("avg_backlog_sec_est").get<double>();
        r.avg_cpu_process_pct = j.at("avg_cpu_process_pct").get<double>();
        r.avg_cpu_system_pct = j.at("avg_cpu_system_pct").get<double>();
        r.avg_mem_system_pct = j.at("avg_mem_system_pct").get<double>();
        const auto& lat = j.at("avg_total_infer_ms");
        if (!lat.is_null()) r.avg_total_infer_ms = lat.get<double>();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::parse_error, std::string("telemetry record: ") + e.what());
    }
}

/// One JSON object per line, trailing newline included.
inline std::string to_ndjson(const std::vector<TelemetryRecord>& records) {
    std::string out;
    for (const auto& r : records) {
        out += to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<TelemetryRecord> parse_ndjson(std::string_view text) {
    std::vector<TelemetryRecord> out;
    for (auto line : io::lines(text)) {
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::parse_error, std::string("ndjson line: ") + e.what());
        }
        out.push_back(record_from_json(j));
    }
    return out;
}

}  // namespace ndt
