#pragma once

// Directory-backed model registry. Each entry is <root>/<model_id>/ holding
// parameters.json and metadata.json; the metadata carries the SHA-256 of the
// parameters file, which is checked on every load.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ndt/digest.hpp"
#include "ndt/error.hpp"
#include "ndt/io.hpp"
#include "ndt/models/model.hpp"

namespace ndt::models {

namespace fs = std::filesystem;

struct ModelMetadata {
    std::string model_id;
    ModelKind kind = ModelKind::gbt;
    std::string feature_schema_hash;
    ordered_json config;
    std::string parameters_sha256;
    ordered_json training = ordered_json::object();
};

inline ordered_json to_json(const ModelMetadata& m) {
    return ordered_json{{"model_id", m.model_id},
                        {"kind", to_string(m.kind)},
                        {"feature_schema_hash", m.feature_schema_hash},
                        {"config", m.config},
                        {"parameters_file", "parameters.json"},
                        {"parameters_sha256", m.parameters_sha256},
                        {"training", m.training}};
}

inline ModelMetadata metadata_from_json(const nlohmann::json& j) {
    try {
        ModelMetadata m;
        m.model_id = j.at("model_id").get<std::string>();
        m.kind = parse_kind(j.at("kind").get<std::string>());
        m.feature_schema_hash = j.at("feature_schema_hash").get<std::string>();
        m.config = j.at("config");
        m.parameters_sha256 = j.at("parameters_sha256").get<std::string>();
        m.training = j.value("training", ordered_json::object());
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::corrupt_artifact, std::string("model metadata: ") + e.what());
    }
}

inline bool valid_model_id(const std::string& id) {
    if (id.empty() || id.size() > 128 || id.front() == '.') return false;
    for (char c : id) {
        const bool ok = std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
        if (!ok) return false;
    }
    return true;
}

class Registry {
public:
    explicit Registry(fs::path root) : root_(std::move(root)) {
        std::error_code ec;
        fs::create_directories(root_, ec);
        if (ec) throw Error(Errc::storage_failure, "cannot create registry at " + root_.string());
    }

    Registry(const Registry&) = delete;
    Registry& operator=(const Registry&) = delete;

    const fs::path& root() const noexcept { return root_; }

    /// Serialised parameters exactly as written to parameters.json.
    static std::string serialize(const TrainedModel& model) { return parameters_to_json(model).dump() + "\n"; }

    /// "<kind>-<first 12 hex of the parameters digest>".
    static std::string default_id(const TrainedModel& model) {
        auto kind = to_string(model.kind);
        for (auto& c : kind) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        return kind + "-" + sha256_hex(serialize(model)).substr(0, 12);
    }

    ModelMetadata save(const TrainedModel& model, std::optional<std::string> model_id = std::nullopt,
                       ordered_json training = ordered_json::object()) {
        std::lock_guard lock(write_mutex_);
        const std::string id = model_id ? *model_id : default_id(model);
        if (!valid_model_id(id)) throw Error(Errc::invalid_argument, "invalid model id '" + id + "'");
        const auto dest = root_ / id;
        if (fs::exists(dest)) throw Error(Errc::duplicate_id, "model " + id + " already registered");

        const std::string params = serialize(model);
        ModelMetadata meta;
        meta.model_id = id;
        meta.kind = model.kind;
        meta.feature_schema_hash = model.feature_schema_hash;
        meta.config = model.config;
        meta.parameters_sha256 = sha256_hex(params);
        meta.training = std::move(training);

        // Build the entry beside its final location, then publish it with one rename.
        const auto staging = root_ / (".staging-" + id);
        std::error_code ec;
        fs::remove_all(staging, ec);
        fs::create_directories(staging, ec);
        if (ec) throw Error(Errc::storage_failure, "cannot stage model " + id);
        io::write_file_atomic(staging / "parameters.json", params);
        io::write_file_atomic(staging / "metadata.json", to_json(meta).dump(2) + "\n");
        fs::rename(staging, dest, ec);
        if (ec) {
            fs::remove_all(staging);
            if (fs::exists(dest)) throw Error(Errc::duplicate_id, "model " + id + " already registered");
            throw Error(Errc::storage_failure, "cannot publish model " + id + ": " + ec.message());
        }
        return meta;
    }

    bool contains(const std::string& id) const {
        return valid_model_id(id) && fs::exists(root_ / id / "metadata.json");
    }

    ModelMetadata metadata(const std::string& id) const {
        if (!contains(id)) throw Error(Errc::not_found, "no model " + id);
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(io::read_file(root_ / id / "metadata.json"));
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::corrupt_artifact, "model " + id + " metadata: " + e.what());
        }
        auto meta = metadata_from_json(j);
        if (meta.model_id != id) throw Error(Errc::corrupt_artifact, "metadata id does not match directory " + id);
        return meta;
    }

    TrainedModel load(const std::string& id) const {
        const auto meta = metadata(id);
        std::string params;
        try {
            params = io::read_file(root_ / id / "parameters.json");
        } catch (const Error&) {
            throw Error(Errc::corrupt_artifact, "model " + id + " has no parameters file");
        }
        if (sha256_hex(params) != meta.parameters_sha256) {
            throw Error(Errc::corrupt_artifact, "model " + id + " parameters do not match the stored digest");
        }
        TrainedModel model;
        try {
            model = model_from_json(nlohmann::json::parse(params));
        } catch (const nlohmann::json::exception& e) {
            throw Error(Errc::corrupt_artifact, "model " + id + ": " + e.what());
        }
        if (model.kind != meta.kind || model.feature_schema_hash != meta.feature_schema_hash) {
            throw Error(Errc::corrupt_artifact, "model " + id + " metadata disagrees with its parameters");
        }
        return model;
    }

    /// Metadata of every entry ordered by id; parameters are not read.
    std::vector<ModelMetadata> list() const {
        std::vector<ModelMetadata> out;
        for (const auto& entry : fs::directory_iterator(root_)) {
            const auto name = entry.path().filename().string();
            if (!entry.is_directory() || !contains(name)) continue;
            out.push_back(metadata(name));
        }
        std::sort(out.begin(), out.end(),
                  [](const ModelMetadata& a, const ModelMetadata& b) { return a.model_id < b.model_id; });
        return out;
    }

private:
    fs::path root_;
    std::mutex write_mutex_;
};

}  // namespace ndt::models
