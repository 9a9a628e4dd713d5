#pragma once

// Counterfactual engine: matched pairs across a regime transition, predicted vs observed
// latency deltas, Sign Agreement, sensitivity class and deployment grade.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/digest.hpp"
#include "ndt/error.hpp"
#include "ndt/harmonize.hpp"
#include "ndt/io.hpp"
#include "ndt/models/model.hpp"
#include "ndt/record.hpp"
#include "ndt/stats.hpp"
#include "ndt/telemetry.hpp"

namespace ndt::whatif {

namespace fs = std::filesystem;

enum class TransitionKind { pod_delta, user_shift };

/// A change of exactly one control variable between two regimes.
struct Transition {
    RegimeKey from;
    RegimeKey to;
    TransitionKind kind = TransitionKind::pod_delta;

    static Transition pods(const RegimeKey& from, int step) {
        require(step == 1 || step == -1, "pod step must be +1 or -1");
        if (from.pods + step < 1) {
            throw Error(Errc::invalid_transition, "pods-1 from " + from.label() + " leaves no pods");
        }
        return Transition{from, {from.users, from.pods + step}, TransitionKind::pod_delta};
    }

    static Transition users(const RegimeKey& from, int target_users) {
        if (target_users < 1) throw Error(Errc::invalid_transition, "target users must be >= 1");
        return Transition{from, {target_users, from.pods}, TransitionKind::user_shift};
    }

    int pod_step() const { return to.pods - from.pods; }
    bool degenerate() const { return from == to; }

    std::string action() const {
        if (kind == TransitionKind::user_shift) return "users:" + std::to_string(to.users);
        return pod_step() >= 0 ? "pods+1" : "pods-1";
    }

    void validate() const {
        if (!from.valid() || !to.valid()) {
            throw Error(Errc::invalid_transition, "regimes need users >= 1 and pods >= 1");
        }
        const bool ok = kind == TransitionKind::pod_delta
                            ? to.users == from.users && std::abs(to.pods - from.pods) == 1
                            : to.pods == from.pods;
        if (!ok) throw Error(Errc::invalid_transition, from.label() + " -> " + to.label() + " is not " + action());
    }
};

/// "pods+1", "pods-1" or "users:N".
inline Transition parse_action(const RegimeKey& from, const std::string& action) {
    if (action == "pods+1") return Transition::pods(from, 1);
    if (action == "pods-1") return Transition::pods(from, -1);
    if (action.starts_with("users:")) {
        long long n = 0;
        try {
            n = io::parse_int(std::string_view(action).substr(6));
        } catch (const Error&) {
            throw Error(Errc::invalid_transition, "bad user target in '" + action + "'");
        }
        return Transition::users(from, static_cast<int>(n));
    }
    throw Error(Errc::invalid_transition, "unknown action '" + action + "' (pods+1, pods-1, users:N)");
}

inline ordered_json to_json(const Transition& t) {
    return ordered_json{{"from", {{"users", t.from.users}, {"pods", t.from.pods}}},
                        {"to", {{"users", t.to.users}, {"pods", t.to.pods}}},
                        {"kind", t.kind == TransitionKind::pod_delta ? "PodDelta" : "UserShift"},
                        {"action", t.action()}};
}

// ---------------------------------------------------------------------------
// Pairing

inline constexpr const char* kNuisanceCandidates[] = {"cpu_process_pct", "cpu_system_pct", "mem_system_pct"};

struct PairingConfig {
    std::vector<std::string> nuisance_features{"cpu_system_pct", "mem_system_pct"};
    double caliper = 0.5;
    double epsilon_tie_ms = 0.5;
    std::size_t min_pairs = 30;

    void validate() const {
        require(!nuisance_features.empty(), "at least one nuisance feature is required");
        for (const auto& f : nuisance_features) {
            bool known = false;
            for (const char* c : kNuisanceCandidates) known = known || f == c;
            require(known, "nuisance feature must be cpu_process_pct, cpu_system_pct or mem_system_pct, got " + f);
        }
        for (std::size_t i = 0; i < nuisance_features.size(); ++i) {
            for (std::size_t j = i + 1; j < nuisance_features.size(); ++j) {
                require(nuisance_features[i] != nuisance_features[j], "duplicate nuisance feature " + nuisance_features[i]);
            }
        }
        require(caliper >= 0.0 && std::isfinite(caliper), "caliper must be >= 0");
        require(epsilon_tie_ms >= 0.0, "epsilon_tie_ms must be >= 0");
        require(min_pairs >= 1, "min_pairs must be >= 1");
    }
};

inline ordered_json to_json(const PairingConfig& c) {
    return ordered_json{{"nuisance_features", c.nuisance_features},
                        {"caliper", c.caliper},
                        {"epsilon_tie_ms", c.epsilon_tie_ms},
                        {"min_pairs", c.min_pairs}};
}

inline PairingConfig pairing_config_from_json(const nlohmann::json& j) {
    PairingConfig c;
    c.nuisance_features = j.value("nuisance_features", c.nuisance_features);
    c.caliper = j.value("caliper", c.caliper);
    c.epsilon_tie_ms = j.value("epsilon_tie_ms", c.epsilon_tie_ms);
    c.min_pairs = j.value("min_pairs", c.min_pairs);
    c.validate();
    return c;
}

inline double nuisance_value(const hdl::FeatureVector& f, const std::string& name) {
    if (name == "cpu_process_pct") return f.cpu_process_pct;
    if (name == "cpu_system_pct") return f.cpu_system_pct;
    if (name == "mem_system_pct") return f.mem_system_pct;
    throw Error(Errc::invalid_argument, "unknown nuisance feature " + name);
}

/// Indices into the `from` and `to` row sets.
struct MatchedPair {
    std::size_t sample_a = 0;
    std::size_t sample_b = 0;
    double nuisance_distance = 0.0;
    double delta_true_ms = 0.0;
};

/// Each `from` row takes its nearest `to` row (first on ties) over nuisance features
/// standardised with pooled mean/sd; `to` rows may be reused. Pairs beyond the caliper
/// are dropped.
inline std::vector<MatchedPair> build_matched_pairs(const std::vector<hdl::DatasetRow>& rows_from,
                                                    const std::vector<hdl::DatasetRow>& rows_to,
                                                    const PairingConfig& cfg) {
    cfg.validate();
    require(!rows_from.empty() && !rows_to.empty(), "pairing needs rows on both sides");
    const std::size_t d = cfg.nuisance_features.size();

    std::vector<double> centre(d), scale(d);
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> pooled;
        pooled.reserve(rows_from.size() + rows_to.size());
        for (const auto* side : {&rows_from, &rows_to}) {
            for (const auto& r : *side) pooled.push_back(nuisance_value(r.features, cfg.nuisance_features[k]));
        }
        centre[k] = stats::mean(pooled);
        const double sd = std::sqrt(stats::variance(pooled));
        scale[k] = sd > 0.0 ? sd : 1.0;
    }
    auto standardise = [&](const std::vector<hdl::DatasetRow>& rows) {
        std::vector<double> z(rows.size() * d);
        for (std::size_t i = 0; i < rows.size(); ++i) {
            for (std::size_t k = 0; k < d; ++k) {
                z[i * d + k] = (nuisance_value(rows[i].features, cfg.nuisance_features[k]) - centre[k]) / scale[k];
            }
        }
        return z;
    };
    const auto za = standardise(rows_from);
    const auto zb = standardise(rows_to);

    std::vector<MatchedPair> pairs;
    for (std::size_t i = 0; i < rows_from.size(); ++i) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < rows_to.size(); ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = za[i * d + k] - zb[j * d + k];
                s += diff * diff;
            }
            if (s < best) {
                best = s;
                best_j = j;
            }
        }
        const double dist = std::sqrt(best);
        if (dist <= cfg.caliper) {
            pairs.push_back({i, best_j, dist, rows_to[best_j].latency_ms() - rows_from[i].latency_ms()});
        }
    }
    if (pairs.size() < cfg.min_pairs) {
        throw Error(Errc::insufficient_pairs, "matched " + std::to_string(pairs.size()) + " pairs, need " +
                                                  std::to_string(cfg.min_pairs));
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Counterfactual prediction

/// Re-derives the pod-normalised features for the transition's target configuration;
/// CPU and memory features stay as observed.
inline hdl::FeatureVector counterfactual_features(const hdl::DatasetRow& row, const Transition& t) {
    const double pods = row.features.pods;
    // Demand-side raw metrics, from the record when present.
    const double users = row.raw ? static_cast<double>(row.raw->current_users) : row.features.workload_intensity * pods;
    const double depth = row.raw ? row.raw->avg_depth_on_enqueue : row.features.congestion_index * pods;
    const double backlog = row.raw ? row.raw->avg_backlog_sec_est : row.features.backlog_flow * pods;

    hdl::FeatureVector f = row.features;
    if (t.kind == TransitionKind::pod_delta) {
        const double next = pods + t.pod_step();
        if (next < 1.0) throw Error(Errc::invalid_transition, "pods would drop below 1");
        f.pods = next;
        f.workload_intensity = users / next;
        f.congestion_index = depth / next;
        f.backlog_flow = backlog / next;
    } else {
        f.workload_intensity = static_cast<double>(t.to.users) / pods;
    }
    return f;
}

inline double predict_delta(const models::TrainedModel& model, const hdl::DatasetRow& sample_a, const Transition& t) {
    return models::predict(model, counterfactual_features(sample_a, t)) - models::predict(model, sample_a.features);
}

/// Fraction of non-tied pairs whose predicted direction matches the observed one.
inline double sign_agreement(std::span<const double> delta_true, std::span<const double> delta_pred,
                             double epsilon_tie_ms) {
    require(delta_true.size() == delta_pred.size(), "delta sizes differ");
    std::size_t untied = 0, agree = 0;
    for (std::size_t i = 0; i < delta_true.size(); ++i) {
        const int s_true = stats::signum(delta_true[i], epsilon_tie_ms);
        if (s_true == 0) continue;
        ++untied;
        if (stats::signum(delta_pred[i], epsilon_tie_ms) == s_true) ++agree;
    }
    if (untied == 0) throw Error(Errc::all_pairs_tied, "every pair has |delta_true| below the tie threshold");
    return static_cast<double>(agree) / static_cast<double>(untied);
}

struct DeltaStats {
    double mean_ms = 0.0;
    double median_ms = 0.0;
    double p95_abs_ms = 0.0;
    double mae_ms = 0.0;
};

inline DeltaStats delta_metrics(std::span<const double> delta_true, std::span<const double> delta_pred) {
    require(delta_true.size() == delta_pred.size(), "delta sizes differ");
    require(!delta_pred.empty(), "delta metrics need at least one pair");
    DeltaStats s;
    s.mean_ms = stats::mean(delta_pred);
    s.median_ms = stats::median({delta_pred.begin(), delta_pred.end()});
    std::vector<double> abs_pred, abs_err;
    for (std::size_t i = 0; i < delta_pred.size(); ++i) {
        abs_pred.push_back(std::abs(delta_pred[i]));
        abs_err.push_back(std::abs(delta_pred[i] - delta_true[i]));
    }
    s.p95_abs_ms = stats::percentile(std::move(abs_pred), 95.0);
    s.mae_ms = stats::mean(abs_err);
    return s;
}

enum class Sensitivity { high, low, negligible };

inline std::string to_string(Sensitivity s) {
    switch (s) {
        case Sensitivity::high: return "High";
        case Sensitivity::low: return "Low";
        case Sensitivity::negligible: return "Negligible";
    }
    return "Negligible";
}

inline Sensitivity classify_sensitivity(double sa) {
    require(sa >= 0.0 && sa <= 1.0, "sign agreement outside [0,1]");
    if (sa >= 0.85) return Sensitivity::high;
    if (sa >= 0.55) return Sensitivity::low;
    return Sensitivity::negligible;
}

enum class DeploymentGrade { excellent, reliable, unreliable };

inline std::string to_string(DeploymentGrade g) {
    switch (g) {
        case DeploymentGrade::excellent: return "Excellent";
        case DeploymentGrade::reliable: return "Reliable";
        case DeploymentGrade::unreliable: return "Unreliable";
    }
    return "Unreliable";
}

struct DeploymentBounds {
    double excellent_sa = 0.90;
    double excellent_mae_ms = 5.0;
    double reliable_sa = 0.75;
    double reliable_mae_ms = 10.0;
};

inline ordered_json to_json(const DeploymentBounds& b) {
    return ordered_json{{"excellent_sa", b.excellent_sa}, {"excellent_mae_ms", b.excellent_mae_ms},
                        {"reliable_sa", b.reliable_sa},   {"reliable_mae_ms", b.reliable_mae_ms}};
}

inline DeploymentBounds deployment_bounds_from_json(const nlohmann::json& j) {
    DeploymentBounds b;
    b.excellent_sa = j.value("excellent_sa", b.excellent_sa);
    b.excellent_mae_ms = j.value("excellent_mae_ms", b.excellent_mae_ms);
    b.reliable_sa = j.value("reliable_sa", b.reliable_sa);
    b.reliable_mae_ms = j.value("reliable_mae_ms", b.reliable_mae_ms);
    return b;
}

/// Bounds are inclusive.
inline DeploymentGrade deployment_grade(double sa, double mae_delta_ms, const DeploymentBounds& b = {}) {
    require(std::isfinite(sa) && std::isfinite(mae_delta_ms), "grade inputs must be finite");
    if (sa >= b.excellent_sa && mae_delta_ms <= b.excellent_mae_ms) return DeploymentGrade::excellent;
    if (sa >= b.reliable_sa && mae_delta_ms <= b.reliable_mae_ms) return DeploymentGrade::reliable;
    return DeploymentGrade::unreliable;
}

// ---------------------------------------------------------------------------
// Reports

struct CounterfactualReport {
    Transition transition;
    std::size_t n_pairs = 0;
    std::size_t n_untied = 0;
    double mean_delta_pred_ms = 0.0;
    double median_delta_pred_ms = 0.0;
    double p95_abs_delta_ms = 0.0;
    double mean_delta_true_ms = 0.0;
    std::optional<double> sign_agreement;  // empty for degenerate transitions
    double mae_delta_ms = 0.0;
    std::optional<Sensitivity> sensitivity;
    DeploymentGrade deployment_grade = DeploymentGrade::unreliable;
    bool degenerate = false;
    std::string note;
    PairingConfig pairing;
    DeploymentBounds bounds;
    ordered_json provenance = ordered_json::object();
};

inline ordered_json to_json(const CounterfactualReport& r) {
    ordered_json j;
    j["transition"] = to_json(r.transition);
    j["n_pairs"] = r.n_pairs;
    j["n_untied"] = r.n_untied;
    j["mean_delta_pred_ms"] = r.mean_delta_pred_ms;
    j["median_delta_pred_ms"] = r.median_delta_pred_ms;
    j["p95_abs_delta_ms"] = r.p95_abs_delta_ms;
    j["mean_delta_true_ms"] = r.mean_delta_true_ms;
    j["sign_agreement"] = r.sign_agreement ? ordered_json(*r.sign_agreement) : ordered_json(nullptr);
    j["mae_delta_ms"] = r.mae_delta_ms;
    j["sensitivity"] = r.sensitivity ? ordered_json(to_string(*r.sensitivity)) : ordered_json(nullptr);
    j["deployment_grade"] = to_string(r.deployment_grade);
    j["degenerate"] = r.degenerate;
    if (!r.note.empty()) j["note"] = r.note;
    j["config"] = {{"pairing", to_json(r.pairing)}, {"grade_bounds", to_json(r.bounds)}};
    j["provenance"] = r.provenance;
    return j;
}

/// Scores model-predicted deltas against matched ground truth.
inline CounterfactualReport score_transition(const models::TrainedModel& model, const Transition& t,
                                             const std::vector<hdl::DatasetRow>& rows_from,
                                             const std::vector<hdl::DatasetRow>& rows_to, const PairingConfig& cfg,
                                             const DeploymentBounds& bounds = {}) {
    t.validate();
    CounterfactualReport report;
    report.transition = t;
    report.pairing = cfg;
    report.bounds = bounds;
    report.degenerate = t.degenerate();

    const auto pairs = build_matched_pairs(rows_from, rows_to, cfg);
    std::vector<double> truth, pred;
    truth.reserve(pairs.size());
    pred.reserve(pairs.size());
    for (const auto& p : pairs) {
        truth.push_back(p.delta_true_ms);
        pred.push_back(report.degenerate ? 0.0 : predict_delta(model, rows_from[p.sample_a], t));
    }
    const auto ds = delta_metrics(truth, pred);
    report.n_pairs = pairs.size();
    report.mean_delta_pred_ms = ds.mean_ms;
    report.median_delta_pred_ms = ds.median_ms;
    report.p95_abs_delta_ms = ds.p95_abs_ms;
    report.mae_delta_ms = ds.mae_ms;
    report.mean_delta_true_ms = stats::mean(truth);
    for (double d : truth) report.n_untied += stats::signum(d, cfg.epsilon_tie_ms) != 0 ? 1 : 0;

    try {
        const double sa = sign_agreement(truth, pred, cfg.epsilon_tie_ms);
        report.sign_agreement = sa;
        report.sensitivity = classify_sensitivity(sa);
        report.deployment_grade = deployment_grade(sa, ds.mae_ms, bounds);
    } catch (const Error& e) {
        if (e.code() != Errc::all_pairs_tied) throw;
        report.degenerate = true;
        report.note = std::string(to_string(e.code())) + ": " + e.what();
    }
    return report;
}

/// Trim, featurise, pair, predict and grade one transition from the store.
inline CounterfactualReport run_whatif(const models::TrainedModel& model, const std::string& model_id,
                                       const telemetry::Store& store, const Transition& t,
                                       const PairingConfig& cfg = {}, const DeploymentBounds& bounds = {},
                                       const hdl::TrimMethod& trim = hdl::default_trim()) {
    t.validate();
    auto [rows_from, info_from] = hdl::refine_regime(store, t.from, trim);
    auto to_side = t.degenerate() ? std::pair{rows_from, info_from} : hdl::refine_regime(store, t.to, trim);
    auto report = score_transition(model, t, rows_from, to_side.first, cfg, bounds);
    report.provenance = ordered_json{{"model_id", model_id},
                                     {"trim", hdl::describe(trim)},
                                     {"from_window", {info_from["t_min"], info_from["t_max"]}},
                                     {"to_window", {to_side.second["t_min"], to_side.second["t_max"]}}};
    return report;
}

/// Content-derived report identifier.
inline std::string report_id(const CounterfactualReport& r) {
    return "wr-" + sha256_hex(to_json(r).dump()).substr(0, 16);
}

/// Immutable JSON reports under one directory, one file per id.
class ReportStore {
public:
    explicit ReportStore(fs::path root) : root_(std::move(root)) {
        std::error_code ec;
        fs::create_directories(root_, ec);
        if (ec) throw Error(Errc::storage_failure, "cannot create report directory " + root_.string());
    }

    const fs::path& root() const noexcept { return root_; }

    /// Persists the report (no-op if identical content exists) and returns its id.
    std::string save(const CounterfactualReport& r) const {
        const auto id = report_id(r);
        auto j = to_json(r);
        j["report_id"] = id;
        const auto path = root_ / (id + ".json");
        if (!fs::exists(path)) io::write_file_atomic(path, j.dump(2) + "\n");
        return id;
    }

    ordered_json load(const std::string& id) const {
        const auto path = root_ / (id + ".json");
        if (id.find('/') != std::string::npos || !fs::exists(path)) {
            throw Error(Errc::not_found, "no report " + id);
        }
        try {
            return ordered_json::parse(io::read_file(path));
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::corrupt_artifact, "report " + id + ": " + e.what());
        }
    }

    std::vector<std::string> list() const {
        std::vector<std::string> ids;
        for (const auto& entry : fs::directory_iterator(root_)) {
            if (entry.path().extension() == ".json") ids.push_back(entry.path().stem().string());
        }
        std::sort(ids.begin(), ids.end());
        return ids;
    }

private:
    fs::path root_;
};

}  // namespace ndt::whatif
