#pragma once

#include <span>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/error.hpp"
#include "ndt/harmonize.hpp"
#include "ndt/models/gbt.hpp"
#include "ndt/models/mlp.hpp"

namespace ndt::models {

enum class ModelKind { gbt, mlp };

inline std::string to_string(ModelKind k) { return k == ModelKind::gbt ? "GBT" : "MLP"; }

inline ModelKind parse_kind(std::string text) {
    for (auto& c : text) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    if (text == "gbt") return ModelKind::gbt;
    if (text == "mlp") return ModelKind::mlp;
    throw Error(Errc::invalid_argument, "model kind must be gbt or mlp, got " + text);
}

/// A trained functional model mapping a feature vector to latency.
struct TrainedModel {
    ModelKind kind = ModelKind::gbt;
    std::variant<GbtModel, MlpModel> parameters;
    std::string feature_schema_hash;
    ordered_json config;

    /// Raw model output in log-target space.
    double predict_log(const hdl::FeatureVector& x) const {
        if (feature_schema_hash != hdl::feature_schema_hash()) {
            throw Error(Errc::schema_mismatch, "model was trained on a different feature schema");
        }
        const auto v = x.values();
        return std::visit([&](const auto& m) { return m.predict_log(v); }, parameters);
    }
};

inline TrainedModel train_gbt(const hdl::RefinedDataset& train, const GbtConfig& config, GbtTrace* trace = nullptr) {
    return TrainedModel{ModelKind::gbt, fit_gbt(train, config, trace), hdl::feature_schema_hash(), to_json(config)};
}

inline TrainedModel train_mlp(const hdl::RefinedDataset& train, const MlpConfig& config, MlpTrace* trace = nullptr) {
    return TrainedModel{ModelKind::mlp, fit_mlp(train, config, trace), hdl::feature_schema_hash(), to_json(config)};
}

/// Latency in milliseconds; log-space outputs below zero map to 0 ms.
inline double predict(const TrainedModel& model, const hdl::FeatureVector& x) {
    const double yp = model.predict_log(x);
    return hdl::invert_target(yp > 0.0 ? yp : 0.0);
}

inline std::vector<double> predict_batch(const TrainedModel& model, std::span<const hdl::FeatureVector> xs) {
    std::vector<double> out;
    out.reserve(xs.size());
    for (const auto& x : xs) out.push_back(predict(model, x));
    return out;
}

inline ordered_json parameters_to_json(const TrainedModel& model) {
    ordered_json j;
    j["kind"] = to_string(model.kind);
    j["feature_schema_hash"] = model.feature_schema_hash;
    j["config"] = model.config;
    j["parameters"] = std::visit([](const auto& m) { return to_json(m); }, model.parameters);
    return j;
}

inline TrainedModel model_from_json(const nlohmann::json& j) {
    try {
        TrainedModel m;
        m.kind = parse_kind(j.at("kind").get<std::string>());
        m.feature_schema_hash = j.at("feature_schema_hash").get<std::string>();
        m.config = j.at("config");
        if (m.kind == ModelKind::gbt) {
            m.parameters = gbt_model_from_json(j.at("parameters"));
        } else {
            m.parameters = mlp_model_from_json(j.at("parameters"), mlp_config_from_json(j.at("config")));
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::corrupt_artifact, std::string("model parameters: ") + e.what());
    }
}

}  // namespace ndt::models
