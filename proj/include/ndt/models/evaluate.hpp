#pragma once

// Accuracy evaluation in millisecond space, tail analysis and quality grading.

#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/error.hpp"
#include "ndt/harmonize.hpp"
#include "ndt/models/model.hpp"
#include "ndt/stats.hpp"

namespace ndt::models {

struct RegressionMetrics {
    std::size_t count = 0;
    double mae_ms = 0.0;
    double rmse_ms = 0.0;
    std::optional<double> r2;  // empty when targets have zero variance and SSE > 0
    double p95_abs_err_ms = 0.0;
};

inline RegressionMetrics regression_metrics(std::span<const double> truth, std::span<const double> pred) {
    require(truth.size() == pred.size(), "truth and prediction sizes differ");
    require(!truth.empty(), "metrics need at least one row");
    const auto n = static_cast<double>(truth.size());
    const double mean_true = stats::mean(truth);
    double abs_sum = 0.0, sse = 0.0, sst = 0.0;
    std::vector<double> abs_err(truth.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const double e = pred[i] - truth[i];
        abs_err[i] = std::abs(e);
        abs_sum += abs_err[i];
        sse += e * e;
        sst += (truth[i] - mean_true) * (truth[i] - mean_true);
    }
    RegressionMetrics m;
    m.count = truth.size();
    m.mae_ms = abs_sum / n;
    m.rmse_ms = std::sqrt(sse / n);
    if (sst > 0.0) {
        m.r2 = 1.0 - sse / sst;
    } else if (sse == 0.0) {
        m.r2 = 1.0;
    }
    m.p95_abs_err_ms = stats::percentile(std::move(abs_err), 95.0);
    return m;
}

enum class TailThreshold { p90, p95 };

inline std::string to_string(TailThreshold t) { return t == TailThreshold::p90 ? "P90" : "P95"; }

struct TailMetrics {
    TailThreshold threshold = TailThreshold::p90;
    double threshold_ms = 0.0;
    std::size_t total = 0;
    RegressionMetrics metrics;
};

enum class QualityGrade { excellent, good, weak };

inline std::string to_string(QualityGrade g) {
    switch (g) {
        case QualityGrade::excellent: return "Excellent";
        case QualityGrade::good: return "Good";
        case QualityGrade::weak: return "Weak";
    }
    return "Weak";
}

/// Per-grade limits: a metric passes when it is within the absolute bound OR within the
/// relative bound (fraction of the mean true latency); a grade needs both metrics.
struct GradeTier {
    double mae_abs_ms;
    double mae_rel;
    double p95_abs_ms;
    double p95_rel;
};

struct GradeBounds {
    GradeTier excellent{50.0, 0.10, 150.0, 0.25};
    GradeTier good{100.0, 0.15, 300.0, 0.40};
};

inline QualityGrade grade_quality(double mae_ms, double p95_ms, double mean_true_latency_ms,
                                  const GradeBounds& bounds = {}) {
    require(mean_true_latency_ms > 0.0, "mean true latency must be > 0");
    auto meets = [&](const GradeTier& t) {
        const bool mae_ok = mae_ms <= t.mae_abs_ms || mae_ms / mean_true_latency_ms <= t.mae_rel;
        const bool p95_ok = p95_ms <= t.p95_abs_ms || p95_ms / mean_true_latency_ms <= t.p95_rel;
        return mae_ok && p95_ok;
    };
    if (meets(bounds.excellent)) return QualityGrade::excellent;
    if (meets(bounds.good)) return QualityGrade::good;
    return QualityGrade::weak;
}

struct EvalReport {
    RegressionMetrics overall;
    std::map<RegimeKey, RegressionMetrics> per_regime;
    std::map<TailThreshold, TailMetrics> tail;
    std::map<TailThreshold, std::string> tail_unavailable;
    double mean_true_latency_ms = 0.0;
    QualityGrade grade = QualityGrade::weak;
    GradeBounds bounds;
};

inline QualityGrade grade_quality(const EvalReport& report, double mean_true_latency_ms, const GradeBounds& bounds = {}) {
    return grade_quality(report.overall.mae_ms, report.overall.p95_abs_err_ms, mean_true_latency_ms, bounds);
}

struct Predictions {
    std::vector<double> truth_ms;
    std::vector<double> pred_ms;
};

inline Predictions predict_dataset(const TrainedModel& model, const hdl::RefinedDataset& data) {
    Predictions p;
    p.truth_ms.reserve(data.size());
    p.pred_ms.reserve(data.size());
    for (const auto& row : data.rows) {
        p.truth_ms.push_back(hdl::invert_target(row.log_target));
        p.pred_ms.push_back(predict(model, row.features));
    }
    return p;
}

inline constexpr std::size_t kMinTailSamples = 20;

/// Metrics on rows whose true latency strictly exceeds the P90/P95 of true latency.
inline TailMetrics tail_metrics(const Predictions& p, TailThreshold threshold) {
    require(!p.truth_ms.empty(), "tail evaluation needs rows");
    TailMetrics t;
    t.threshold = threshold;
    t.total = p.truth_ms.size();
    t.threshold_ms = stats::percentile(p.truth_ms, threshold == TailThreshold::p90 ? 90.0 : 95.0);
    std::vector<double> truth, pred;
    for (std::size_t i = 0; i < p.truth_ms.size(); ++i) {
        if (p.truth_ms[i] > t.threshold_ms) {
            truth.push_back(p.truth_ms[i]);
            pred.push_back(p.pred_ms[i]);
        }
    }
    if (truth.size() < kMinTailSamples) {
        throw Error(Errc::insufficient_tail_samples,
                    std::to_string(truth.size()) + " rows above " + to_string(threshold) + ", need " +
                        std::to_string(kMinTailSamples));
    }
    t.metrics = regression_metrics(truth, pred);
    return t;
}

inline TailMetrics tail_eval(const TrainedModel& model, const hdl::RefinedDataset& test, TailThreshold threshold) {
    if (test.empty()) throw Error(Errc::empty_dataset, "test set is empty");
    return tail_metrics(predict_dataset(model, test), threshold);
}

inline EvalReport evaluate_predictions(const Predictions& p, std::span<const RegimeKey> regimes,
                                       const GradeBounds& bounds = {}) {
    if (p.truth_ms.empty()) throw Error(Errc::empty_dataset, "test set is empty");
    EvalReport report;
    report.bounds = bounds;
    report.overall = regression_metrics(p.truth_ms, p.pred_ms);
    report.mean_true_latency_ms = stats::mean(p.truth_ms);

    std::map<RegimeKey, Predictions> by_regime;
    for (std::size_t i = 0; i < p.truth_ms.size(); ++i) {
        auto& bucket = by_regime[regimes[i]];
        bucket.truth_ms.push_back(p.truth_ms[i]);
        bucket.pred_ms.push_back(p.pred_ms[i]);
    }
    for (const auto& [key, bucket] : by_regime) {
        report.per_regime[key] = regression_metrics(bucket.truth_ms, bucket.pred_ms);
    }
    for (auto threshold : {TailThreshold::p90, TailThreshold::p95}) {
        try {
            report.tail[threshold] = tail_metrics(p, threshold);
        } catch (const Error& e) {
            report.tail_unavailable[threshold] = e.what();
        }
    }
    report.grade = report.mean_true_latency_ms > 0.0
                       ? grade_quality(report.overall.mae_ms, report.overall.p95_abs_err_ms,
                                       report.mean_true_latency_ms, bounds)
                       : QualityGrade::weak;
    return report;
}

inline EvalReport evaluate(const TrainedModel& model, const hdl::RefinedDataset& test, const GradeBounds& bounds = {}) {
    if (test.empty()) throw Error(Errc::empty_dataset, "test set is empty");
    std::vector<RegimeKey> regimes;
    regimes.reserve(test.size());
    for (const auto& row : test.rows) regimes.push_back(row.regime);
    return evaluate_predictions(predict_dataset(model, test), regimes, bounds);
}

inline ordered_json to_json(const RegressionMetrics& m) {
    return ordered_json{{"count", m.count},
                        {"mae_ms", m.mae_ms},
                        {"rmse_ms", m.rmse_ms},
                        {"r2", m.r2 ? ordered_json(*m.r2) : ordered_json(nullptr)},
                        {"p95_abs_err_ms", m.p95_abs_err_ms}};
}

inline ordered_json to_json(const GradeTier& t) {
    return ordered_json{{"mae_abs_ms", t.mae_abs_ms}, {"mae_rel", t.mae_rel},
                        {"p95_abs_ms", t.p95_abs_ms}, {"p95_rel", t.p95_rel}};
}

inline ordered_json to_json(const EvalReport& r) {
    ordered_json j;
    j["count"] = r.overall.count;
    j["mae_ms"] = r.overall.mae_ms;
    j["rmse_ms"] = r.overall.rmse_ms;
    j["r2"] = r.overall.r2 ? ordered_json(*r.overall.r2) : ordered_json(nullptr);
    j["p95_abs_err_ms"] = r.overall.p95_abs_err_ms;
    j["mean_true_latency_ms"] = r.mean_true_latency_ms;
    j["grade"] = to_string(r.grade);
    j["grade_bounds"] = {{"Excellent", to_json(r.bounds.excellent)}, {"Good", to_json(r.bounds.good)}};
    j["per_regime"] = ordered_json::array();
    for (const auto& [key, m] : r.per_regime) {
        auto e = to_json(m);
        e["users"] = key.users;
        e["pods"] = key.pods;
        j["per_regime"].push_back(std::move(e));
    }
    j["tail"] = ordered_json::object();
    for (const auto& [threshold, t] : r.tail) {
        auto e = to_json(t.metrics);
        e["threshold_ms"] = t.threshold_ms;
        e["fraction"] = static_cast<double>(t.metrics.count) / static_cast<double>(t.total);
        j["tail"][to_string(threshold)] = std::move(e);
    }
    for (const auto& [threshold, why] : r.tail_unavailable) j["tail"][to_string(threshold)] = {{"error", why}};
    return j;
}

}  // namespace ndt::models
