#pragma once

// Workbench operations shared by the CLI and the HTTP service. Every operation takes a
// JSON request and returns the JSON artifact it produced, so both front ends write
// byte-identical files for identical inputs.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/digest.hpp"
#include "ndt/error.hpp"
#include "ndt/harmonize.hpp"
#include "ndt/io.hpp"
#include "ndt/models/evaluate.hpp"
#include "ndt/models/registry.hpp"
#include "ndt/simcluster.hpp"
#include "ndt/telemetry.hpp"
#include "ndt/whatif.hpp"

namespace ndt::ops {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// "1-6", "1,2,3" or a mix ("1-3,5").
inline std::vector<int> parse_levels(const std::string& text) {
    std::vector<int> out;
    for (auto part : io::split(text, ',')) {
        if (part.empty()) continue;
        const auto dash = part.find('-');
        if (dash == std::string_view::npos) {
            out.push_back(static_cast<int>(io::parse_int(part)));
        } else {
            const auto lo = io::parse_int(part.substr(0, dash));
            const auto hi = io::parse_int(part.substr(dash + 1));
            require(lo <= hi, "bad range " + std::string(part));
            for (auto v = lo; v <= hi; ++v) out.push_back(static_cast<int>(v));
        }
    }
    require(!out.empty(), "empty level list '" + text + "'");
    return out;
}

template <class T>
T field(const json& j, const char* name, T fallback) {
    if (!j.contains(name) || j.at(name).is_null()) return fallback;
    try {
        return j.at(name).get<T>();
    } catch (const json::exception&) {
        throw Error(Errc::invalid_argument, std::string("field '") + name + "' has the wrong type");
    }
}

template <class T>
T required_field(const json& j, const char* name) {
    if (!j.contains(name)) throw Error(Errc::invalid_argument, std::string("missing field '") + name + "'");
    return field<T>(j, name, T{});
}

// ---------------------------------------------------------------------------
// Campaign

struct CampaignSpec {
    std::vector<int> user_levels{200, 400, 600};
    std::vector<int> pod_levels{1, 2, 3, 4, 5, 6};
    int ticks_per_regime = 2000;
    double tick_ms = 20.0;
    std::uint64_t seed = 42;
    double anomaly_rate = 0.005;

    void validate() const {
        require(!user_levels.empty(), "user_levels must be non-empty");
        require(!pod_levels.empty(), "pod_levels must be non-empty");
        for (int u : user_levels) require(u >= 1, "user levels must be >= 1");
        for (int p : pod_levels) require(p >= 1, "pod levels must be >= 1");
        require(ticks_per_regime >= 1, "ticks_per_regime must be >= 1");
        require(tick_ms > 0.0, "tick_ms must be > 0");
        require(anomaly_rate >= 0.0 && anomaly_rate < 1.0, "anomaly_rate outside [0,1)");
    }

    sim::ScenarioSpec scenario() const {
        validate();
        sim::ScenarioSpec s;
        s.ticks_per_regime = ticks_per_regime;
        s.tick_ms = tick_ms;
        s.seed = seed;
        s.anomaly_rate = anomaly_rate;
        for (int u : user_levels) {
            for (int p : pod_levels) {
                sim::RegimeSetting r;
                r.workload.users = u;
                r.cluster.pods = p;
                s.regimes.push_back(r);
            }
        }
        return s;
    }
};

inline CampaignSpec campaign_from_json(const json& j) {
    CampaignSpec c;
    c.user_levels = field(j, "user_levels", c.user_levels);
    c.pod_levels = field(j, "pod_levels", c.pod_levels);
    c.ticks_per_regime = field(j, "ticks_per_regime", c.ticks_per_regime);
    c.tick_ms = field(j, "tick_ms", c.tick_ms);
    c.seed = field(j, "seed", c.seed);
    c.anomaly_rate = field(j, "anomaly_rate", c.anomaly_rate);
    c.validate();
    return c;
}

inline ordered_json to_json(const CampaignSpec& c) {
    return ordered_json{{"user_levels", c.user_levels}, {"pod_levels", c.pod_levels},
                        {"ticks_per_regime", c.ticks_per_regime}, {"tick_ms", c.tick_ms},
                        {"seed", c.seed}, {"anomaly_rate", c.anomaly_rate}};
}

inline ordered_json to_json(const telemetry::IngestSummary& s) {
    ordered_json per = ordered_json::object();
    for (const auto& [k, n] : s.per_regime) per[k.label()] = n;
    ordered_json rej = ordered_json::array();
    for (const auto& r : s.rejections) rej.push_back({{"index", r.index}, {"code", to_string(r.code)}, {"reason", r.reason}});
    return ordered_json{{"accepted", s.accepted},     {"rejected", s.rejected},
                        {"duplicate_batch", s.duplicate_batch}, {"batch_hash", s.batch_hash},
                        {"per_regime", per},          {"rejections", rej}};
}

inline ordered_json run_campaign(const CampaignSpec& spec, telemetry::Store& store) {
    const auto summary = store.ingest(sim::run_scenario(spec.scenario()));
    return ordered_json{{"campaign", to_json(spec)}, {"ingest", to_json(summary)}};
}

// ---------------------------------------------------------------------------
// Dataset assembly

struct DatasetRequest {
    std::vector<int> train_users{200, 400};
    std::vector<int> test_users{600};
    std::vector<int> pods{1, 2, 3, 4, 5, 6};
    std::vector<int> test_pods{4, 5, 6};
    std::string trim = "percentile:1,99";
};

inline DatasetRequest dataset_request_from_json(const json& j) {
    DatasetRequest r;
    r.train_users = field(j, "train_users", r.train_users);
    r.test_users = field(j, "test_users", r.test_users);
    r.pods = field(j, "pods", r.pods);
    r.test_pods = field(j, "test_pods", r.test_pods);
    r.trim = field(j, "trim", r.trim);
    return r;
}

inline ordered_json to_json(const DatasetRequest& r) {
    return ordered_json{{"train_users", r.train_users}, {"test_users", r.test_users}, {"pods", r.pods},
                        {"test_pods", r.test_pods},     {"trim", r.trim}};
}

/// Assembles train/test from the store and writes them under `out`.
inline ordered_json build_dataset(const telemetry::Store& store, const DatasetRequest& req, const fs::path& out) {
    const auto trim = hdl::parse_trim(req.trim);
    const auto split = hdl::SplitSpec::grid(req.train_users, req.test_users, req.pods, req.test_pods);
    const auto [train, test] = hdl::assemble(store, split, trim);
    hdl::write_dataset(out, train, test);
    return ordered_json{{"dataset", out.string()},
                        {"request", to_json(req)},
                        {"train_rows", train.size()},
                        {"test_rows", test.size()},
                        {"train_sha256", sha256_hex(io::read_file(out / "train.csv"))},
                        {"test_sha256", sha256_hex(io::read_file(out / "test.csv"))}};
}

// ---------------------------------------------------------------------------
// Training and evaluation

inline ordered_json train_model(models::Registry& registry, models::ModelKind kind, const fs::path& dataset,
                                const json& config, std::optional<std::string> model_id = std::nullopt) {
    if (model_id && registry.contains(*model_id)) {
        throw Error(Errc::duplicate_id, "model " + *model_id + " already registered");
    }
    const auto train = hdl::read_dataset(dataset, "train");
    models::TrainedModel model;
    ordered_json trace;
    if (kind == models::ModelKind::gbt) {
        models::GbtTrace t;
        model = models::train_gbt(train, models::gbt_config_from_json(config), &t);
        trace["final_train_mse"] = t.train_mse.empty() ? 0.0 : t.train_mse.back();
    } else {
        models::MlpTrace t;
        model = models::train_mlp(train, models::mlp_config_from_json(config), &t);
        trace["final_epoch_loss"] = t.epoch_loss.empty() ? 0.0 : t.epoch_loss.back();
    }
    ordered_json training{{"dataset", dataset.string()},
                          {"train_rows", train.size()},
                          {"train_sha256", sha256_hex(io::read_file(dataset / "train.csv"))},
                          {"trace", trace}};
    return to_json(registry.save(model, model_id, std::move(training)));
}

inline ordered_json evaluate_model(const models::Registry& registry, const std::string& model_id,
                                   const fs::path& dataset) {
    const auto model = registry.load(model_id);
    const auto test = hdl::read_dataset(dataset, "test");
    auto j = to_json(models::evaluate(model, test));
    ordered_json out{{"model_id", model_id}, {"kind", to_string(model.kind)}, {"dataset", dataset.string()}};
    for (auto& [k, v] : j.items()) out[k] = v;
    return out;
}

// ---------------------------------------------------------------------------
// What-if

struct WhatIfRequest {
    std::string model_id;
    RegimeKey from;
    std::string action;
    whatif::PairingConfig pairing;
    whatif::DeploymentBounds bounds;
    std::string trim = "percentile:1,99";
};

inline WhatIfRequest whatif_request_from_json(const json& j) {
    WhatIfRequest r;
    r.model_id = required_field<std::string>(j, "model_id");
    r.from = {required_field<int>(j, "from_users"), required_field<int>(j, "from_pods")};
    r.action = required_field<std::string>(j, "action");
    if (j.contains("pairing")) r.pairing = whatif::pairing_config_from_json(j.at("pairing"));
    if (j.contains("bounds")) r.bounds = whatif::deployment_bounds_from_json(j.at("bounds"));
    r.trim = field(j, "trim", r.trim);
    return r;
}

inline ordered_json to_json(const WhatIfRequest& r) {
    return ordered_json{{"model_id", r.model_id},  {"from_users", r.from.users},
                        {"from_pods", r.from.pods}, {"action", r.action},
                        {"pairing", whatif::to_json(r.pairing)}, {"bounds", whatif::to_json(r.bounds)},
                        {"trim", r.trim}};
}

/// Computes, persists and returns the report (with its report_id).
inline ordered_json run_whatif(const models::Registry& registry, const telemetry::Store& store,
                               const whatif::ReportStore& reports, const WhatIfRequest& req) {
    const auto transition = whatif::parse_action(req.from, req.action);
    if (!store.has_regime(transition.from)) {
        throw Error(Errc::missing_regime, "regime " + transition.from.label() + " not in store");
    }
    if (!store.has_regime(transition.to)) {
        throw Error(Errc::missing_regime, "regime " + transition.to.label() + " not in store");
    }
    const auto model = registry.load(req.model_id);
    const auto report = whatif::run_whatif(model, req.model_id, store, transition, req.pairing, req.bounds,
                                           hdl::parse_trim(req.trim));
    const auto id = reports.save(report);
    return reports.load(id);
}

inline std::string render(const ordered_json& j) { return j.dump(2) + "\n"; }

}  // namespace ndt::ops
