#pragma once

// HTTP front end of the workbench. Long operations (campaigns, dataset assembly,
// training) run as polled jobs; evaluation and what-if answer synchronously. Every
// mutating request is appended to a job log so the state directories can be rebuilt
// by replaying it.

#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "ndt/error.hpp"
#include "ndt/io.hpp"
#include "ndt/ops.hpp"

namespace ndt::service {

namespace fs = std::filesystem;
using json = nlohmann::json;

struct ServiceConfig {
    fs::path store = "state/store";
    fs::path registry = "state/registry";
    fs::path reports = "state/reports";
    fs::path datasets = "state/datasets";
    fs::path evaluations = "state/evaluations";
    fs::path job_log = "state/jobs.ndjson";
    fs::path console = "console/dist";
    std::string bind = "127.0.0.1";
    int port = 8080;

    /// Every state path below one directory.
    static ServiceConfig under(const fs::path& state) {
        ServiceConfig c;
        c.store = state / "store";
        c.registry = state / "registry";
        c.reports = state / "reports";
        c.datasets = state / "datasets";
        c.evaluations = state / "evaluations";
        c.job_log = state / "jobs.ndjson";
        return c;
    }
};

/// Reads an optional JSON config file, then applies NDT_* environment overrides.
inline ServiceConfig load_config(const std::optional<fs::path>& file) {
    ServiceConfig c;
    if (file) {
        json j;
        try {
            j = json::parse(io::read_file(*file));
        } catch (const json::exception& e) {
            throw Error(Errc::parse_error, "config " + file->string() + ": " + e.what());
        }
        if (j.contains("state")) c = ServiceConfig::under(j.at("state").get<std::string>());
        c.store = j.value("store", c.store.string());
        c.registry = j.value("registry", c.registry.string());
        c.reports = j.value("reports", c.reports.string());
        c.datasets = j.value("datasets", c.datasets.string());
        c.evaluations = j.value("evaluations", c.evaluations.string());
        c.job_log = j.value("job_log", c.job_log.string());
        c.console = j.value("console", c.console.string());
        c.bind = j.value("bind", c.bind);
        c.port = j.value("port", c.port);
    }
    auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (v == nullptr || *v == '\0') return std::nullopt;
        return std::string(v);
    };
    if (auto v = env("NDT_STATE")) {
        const auto keep = c;
        c = ServiceConfig::under(*v);
        c.console = keep.console;
        c.bind = keep.bind;
        c.port = keep.port;
    }
    if (auto v = env("NDT_STORE")) c.store = *v;
    if (auto v = env("NDT_REGISTRY")) c.registry = *v;
    if (auto v = env("NDT_REPORTS")) c.reports = *v;
    if (auto v = env("NDT_DATASETS")) c.datasets = *v;
    if (auto v = env("NDT_CONSOLE")) c.console = *v;
    if (auto v = env("NDT_BIND")) c.bind = *v;
    if (auto v = env("NDT_PORT")) c.port = static_cast<int>(io::parse_int(*v));
    return c;
}

inline ordered_json to_json(const ServiceConfig& c) {
    return ordered_json{{"store", c.store.string()},       {"registry", c.registry.string()},
                        {"reports", c.reports.string()},   {"datasets", c.datasets.string()},
                        {"evaluations", c.evaluations.string()}, {"job_log", c.job_log.string()},
                        {"console", c.console.string()},   {"bind", c.bind},
                        {"port", c.port}};
}

inline bool valid_name(const std::string& name) { return models::valid_model_id(name); }

/// State directories plus the operations that act on them. Used by the HTTP handlers
/// and by job-log replay, so both paths run the same code.
class Workbench {
public:
    explicit Workbench(ServiceConfig cfg)
        : cfg_(std::move(cfg)),
          store_(telemetry::Store::open(cfg_.store)),
          registry_(cfg_.registry),
          reports_(cfg_.reports) {
        if (fs::exists(cfg_.job_log)) {
            const auto text = io::read_file(cfg_.job_log);
            for (auto line : io::lines(text)) log_seq_ += line.empty() ? 0 : 1;
        }
    }

    const ServiceConfig& config() const noexcept { return cfg_; }
    const models::Registry& registry() const noexcept { return registry_; }
    const whatif::ReportStore& reports() const noexcept { return reports_; }

    fs::path dataset_dir(const std::string& name) const {
        if (!valid_name(name)) throw Error(Errc::invalid_argument, "invalid dataset name '" + name + "'");
        return cfg_.datasets / name;
    }

    fs::path existing_dataset(const std::string& name) const {
        const auto dir = dataset_dir(name);
        if (!fs::exists(dir / "train.csv")) throw Error(Errc::not_found, "no dataset " + name);
        return dir;
    }

    /// Checks a request without side effects; throws on invalid input.
    void validate(const std::string& kind, const json& req) const {
        if (kind == "simulate") {
            ops::campaign_from_json(req);
        } else if (kind == "build-dataset") {
            dataset_dir(ops::required_field<std::string>(req, "name"));
            auto r = ops::dataset_request_from_json(req);
            hdl::parse_trim(r.trim);
            hdl::SplitSpec::grid(r.train_users, r.test_users, r.pods, r.test_pods);
        } else if (kind == "train") {
            const auto k = models::parse_kind(ops::required_field<std::string>(req, "kind"));
            existing_dataset(ops::required_field<std::string>(req, "dataset"));
            const json cfg = req.value("config", json::object());
            if (k == models::ModelKind::gbt) {
                models::gbt_config_from_json(cfg);
            } else {
                models::mlp_config_from_json(cfg);
            }
            if (req.contains("model_id")) {
                const auto id = req.at("model_id").get<std::string>();
                if (!models::valid_model_id(id)) throw Error(Errc::invalid_argument, "invalid model id '" + id + "'");
                if (registry_.contains(id)) throw Error(Errc::duplicate_id, "model " + id + " already registered");
            }
        } else if (kind == "evaluate") {
            const auto id = ops::required_field<std::string>(req, "model_id");
            if (!registry_.contains(id)) throw Error(Errc::not_found, "no model " + id);
            existing_dataset(ops::required_field<std::string>(req, "dataset"));
        } else if (kind == "whatif") {
            const auto r = ops::whatif_request_from_json(req);
            if (!registry_.contains(r.model_id)) throw Error(Errc::not_found, "no model " + r.model_id);
            whatif::parse_action(r.from, r.action);
        } else {
            throw Error(Errc::invalid_argument, "unknown job kind " + kind);
        }
    }

    /// Runs one operation and returns (result_ref, result).
    std::pair<std::string, ordered_json> execute(const std::string& kind, const json& req) {
        if (kind == "simulate") {
            const auto spec = ops::campaign_from_json(req);
            std::unique_lock lock(store_mutex_);
            auto result = ops::run_campaign(spec, store_);
            return {cfg_.store.string(), std::move(result)};
        }
        if (kind == "build-dataset") {
            const auto name = ops::required_field<std::string>(req, "name");
            const auto r = ops::dataset_request_from_json(req);
            std::shared_lock lock(store_mutex_);
            auto result = ops::build_dataset(store_, r, dataset_dir(name));
            return {name, std::move(result)};
        }
        if (kind == "train") {
            const auto k = models::parse_kind(ops::required_field<std::string>(req, "kind"));
            const auto dir = existing_dataset(ops::required_field<std::string>(req, "dataset"));
            std::optional<std::string> id;
            if (req.contains("model_id")) id = req.at("model_id").get<std::string>();
            auto meta = ops::train_model(registry_, k, dir, req.value("config", json::object()), id);
            return {meta["model_id"].get<std::string>(), std::move(meta)};
        }
        if (kind == "evaluate") {
            const auto id = ops::required_field<std::string>(req, "model_id");
            const auto name = ops::required_field<std::string>(req, "dataset");
            auto result = ops::evaluate_model(registry_, id, existing_dataset(name));
            const auto ref = id + "--" + name;
            io::write_file_atomic(cfg_.evaluations / (ref + ".json"), ops::render(result));
            return {ref, std::move(result)};
        }
        if (kind == "whatif") {
            const auto r = ops::whatif_request_from_json(req);
            std::shared_lock lock(store_mutex_);
            auto result = ops::run_whatif(registry_, store_, reports_, r);
            return {result["report_id"].get<std::string>(), std::move(result)};
        }
        throw Error(Errc::invalid_argument, "unknown job kind " + kind);
    }

    /// Appends an accepted request to the job log.
    void log(const std::string& kind, const json& req) {
        std::lock_guard lock(log_mutex_);
        ordered_json line{{"seq", ++log_seq_}, {"kind", kind}, {"request", ordered_json::parse(req.dump())}};
        io::append_file(cfg_.job_log, line.dump() + "\n");
    }

    /// Re-executes every logged request in order. Requests that failed originally fail
    /// again the same way; they are counted, not fatal.
    struct ReplaySummary {
        std::size_t executed = 0;
        std::size_t failed = 0;
    };

    ReplaySummary replay(const fs::path& log_file) {
        ReplaySummary summary;
        std::size_t n = 0;
        const auto text = io::read_file(log_file);
        for (auto line : io::lines(text)) {
            if (line.empty()) continue;
            json entry;
            try {
                entry = json::parse(line);
            } catch (const json::exception& e) {
                throw Error(Errc::parse_error, "job log line " + std::to_string(n + 1) + ": " + e.what());
            }
            ++n;
            try {
                execute(entry.at("kind").get<std::string>(), entry.at("request"));
                ++summary.executed;
            } catch (const Error&) {
                ++summary.failed;
            }
        }
        return summary;
    }

    ordered_json regimes() const {
        std::shared_lock lock(store_mutex_);
        ordered_json out = ordered_json::array();
        for (const auto& e : store_.regimes()) {
            out.push_back({{"users", e.key.users}, {"pods", e.key.pods}, {"count", e.count},
                           {"t_min", e.t_min},     {"t_max", e.t_max}});
        }
        return out;
    }

private:
    ServiceConfig cfg_;
    telemetry::Store store_;
    models::Registry registry_;
    whatif::ReportStore reports_;
    mutable std::shared_mutex store_mutex_;
    std::mutex log_mutex_;
    std::uint64_t log_seq_ = 0;
};

enum class JobStatus { pending, running, done, failed };

inline std::string to_string(JobStatus s) {
    switch (s) {
        case JobStatus::pending: return "pending";
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        case JobStatus::failed: return "failed";
    }
    return "failed";
}

struct JobDescriptor {
    std::string job_id;
    std::string kind;
    JobStatus status = JobStatus::pending;
    std::optional<std::string> result_ref;
    std::optional<std::string> error_code;
    std::optional<std::string> error;
    ordered_json result;
};

inline ordered_json to_json(const JobDescriptor& j) {
    ordered_json out{{"job_id", j.job_id}, {"kind", j.kind}, {"status", to_string(j.status)}};
    out["result_ref"] = j.result_ref ? ordered_json(*j.result_ref) : ordered_json(nullptr);
    if (j.error) out["error"] = {{"code", *j.error_code}, {"message", *j.error}};
    if (j.status == JobStatus::done) out["result"] = j.result;
    return out;
}

inline int http_status(Errc code) {
    switch (code) {
        case Errc::not_found:
        case Errc::missing_regime: return 404;
        case Errc::duplicate_id: return 409;
        case Errc::insufficient_pairs:
        case Errc::invalid_transition: return 422;
        case Errc::invalid_argument:
        case Errc::parse_error:
        case Errc::schema_violation:
        case Errc::domain_error: return 400;
        default: return 500;
    }
}

class Service {
public:
    explicit Service(ServiceConfig cfg) : bench_(std::move(cfg)) { routes(); }

    ~Service() {
        stop();
        std::vector<std::thread> workers;
        {
            std::lock_guard lock(jobs_mutex_);
            workers.swap(workers_);
        }
        for (auto& t : workers) t.join();
    }

    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;

    Workbench& workbench() noexcept { return bench_; }

    /// Binds (port 0 picks a free one) and serves on a background thread.
    int start() {
        const auto& cfg = bench_.config();
        port_ = cfg.port == 0 ? server_.bind_to_any_port(cfg.bind) : (server_.bind_to_port(cfg.bind, cfg.port) ? cfg.port : -1);
        if (port_ < 0) throw Error(Errc::io_failure, "cannot bind " + cfg.bind + ":" + std::to_string(cfg.port));
        listener_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
        return port_;
    }

    /// Serves on the calling thread until stopped.
    void run() {
        const auto& cfg = bench_.config();
        if (!server_.listen(cfg.bind, cfg.port)) {
            throw Error(Errc::io_failure, "cannot listen on " + cfg.bind + ":" + std::to_string(cfg.port));
        }
    }

    void stop() {
        server_.stop();
        if (listener_.joinable()) listener_.join();
    }

    int port() const noexcept { return port_; }

    /// Blocks until the job leaves pending/running.
    JobDescriptor wait(const std::string& job_id) {
        std::unique_lock lock(jobs_mutex_);
        jobs_cv_.wait(lock, [&] {
            const auto& j = jobs_.at(job_id);
            return j.status == JobStatus::done || j.status == JobStatus::failed;
        });
        return jobs_.at(job_id);
    }

private:
    static void reply(httplib::Response& res, int status, const ordered_json& body) {
        res.status = status;
        res.set_content(body.dump(2) + "\n", "application/json");
    }

    static void reply_error(httplib::Response& res, const Error& e) {
        reply(res, http_status(e.code()),
              ordered_json{{"error", {{"code", std::string(to_string(e.code()))}, {"message", e.what()}}}});
    }

    static json body_of(const httplib::Request& req) {
        if (req.body.empty()) return json::object();
        try {
            auto j = json::parse(req.body);
            if (!j.is_object()) throw Error(Errc::invalid_argument, "request body must be a JSON object");
            return j;
        } catch (const json::exception& e) {
            throw Error(Errc::parse_error, std::string("request body: ") + e.what());
        }
    }

    template <class F>
    static httplib::Server::Handler guarded(F f) {
        return [f](const httplib::Request& req, httplib::Response& res) {
            try {
                f(req, res);
            } catch (const Error& e) {
                reply_error(res, e);
            } catch (const json::exception& e) {
                reply_error(res, Error(Errc::invalid_argument, e.what()));
            } catch (const std::exception& e) {
                reply(res, 500, ordered_json{{"error", {{"code", "internal"}, {"message", e.what()}}}});
            }
        };
    }

    std::string submit(const std::string& kind, const json& request) {
        bench_.validate(kind, request);
        std::lock_guard lock(jobs_mutex_);
        const std::string id = "job-" + std::to_string(++job_seq_);
        auto& job = jobs_[id];
        job.job_id = id;
        job.kind = kind;
        bench_.log(kind, request);
        workers_.emplace_back([this, id, kind, request] { run_job(id, kind, request); });
        return id;
    }

    void run_job(const std::string& id, const std::string& kind, const json& request) {
        set_status(id, JobStatus::running);
        try {
            auto [ref, result] = bench_.execute(kind, request);
            std::lock_guard lock(jobs_mutex_);
            auto& j = jobs_.at(id);
            j.result_ref = ref;
            j.result = std::move(result);
            j.status = JobStatus::done;
        } catch (const std::exception& e) {
            std::lock_guard lock(jobs_mutex_);
            auto& j = jobs_.at(id);
            const auto* err = dynamic_cast<const Error*>(&e);
            j.error_code = err ? std::string(to_string(err->code())) : "internal";
            j.error = e.what();
            j.status = JobStatus::failed;
        }
        jobs_cv_.notify_all();
    }

    void set_status(const std::string& id, JobStatus s) {
        std::lock_guard lock(jobs_mutex_);
        jobs_.at(id).status = s;
    }

    ordered_json job_json(const std::string& id) {
        std::lock_guard lock(jobs_mutex_);
        const auto it = jobs_.find(id);
        if (it == jobs_.end()) throw Error(Errc::not_found, "no job " + id);
        return to_json(it->second);
    }

    void accept(httplib::Response& res, const std::string& job_id) { reply(res, 202, job_json(job_id)); }

    void routes() {
        server_.Get("/healthz", guarded([](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, ordered_json{{"status", "ok"}});
        }));
        server_.Post("/campaigns", guarded([this](const httplib::Request& req, httplib::Response& res) {
            accept(res, submit("simulate", body_of(req)));
        }));
        server_.Get("/jobs", guarded([this](const httplib::Request&, httplib::Response& res) {
            ordered_json out = ordered_json::array();
            std::lock_guard lock(jobs_mutex_);
            for (const auto& [_, j] : jobs_) {
                auto e = to_json(j);
                e.erase("result");
                out.push_back(std::move(e));
            }
            reply(res, 200, out);
        }));
        server_.Get(R"(/jobs/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            reply(res, 200, job_json(req.matches[1]));
        }));
        server_.Get("/regimes", guarded([this](const httplib::Request&, httplib::Response& res) {
            reply(res, 200, bench_.regimes());
        }));
        server_.Post("/datasets", guarded([this](const httplib::Request& req, httplib::Response& res) {
            accept(res, submit("build-dataset", body_of(req)));
        }));
        server_.Post("/models/train", guarded([this](const httplib::Request& req, httplib::Response& res) {
            accept(res, submit("train", body_of(req)));
        }));
        server_.Get("/models", guarded([this](const httplib::Request&, httplib::Response& res) {
            ordered_json out = ordered_json::array();
            for (const auto& m : bench_.registry().list()) out.push_back(models::to_json(m));
            reply(res, 200, out);
        }));
        server_.Get(R"(/models/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            reply(res, 200, models::to_json(bench_.registry().metadata(req.matches[1])));
        }));
        server_.Post(R"(/models/([^/]+)/evaluate)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            auto body = body_of(req);
            body["model_id"] = std::string(req.matches[1]);
            bench_.validate("evaluate", body);
            auto result = bench_.execute("evaluate", body).second;
            bench_.log("evaluate", body);
            reply(res, 200, result);
        }));
        server_.Post("/whatif", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const auto body = body_of(req);
            bench_.validate("whatif", body);
            auto result = bench_.execute("whatif", body).second;
            bench_.log("whatif", body);
            reply(res, 200, result);
        }));
        server_.Get("/reports", guarded([this](const httplib::Request&, httplib::Response& res) {
            ordered_json out = ordered_json::array();
            for (const auto& id : bench_.reports().list()) {
                const auto r = bench_.reports().load(id);
                out.push_back({{"report_id", id},
                               {"model_id", r["provenance"]["model_id"]},
                               {"transition", r["transition"]},
                               {"sign_agreement", r["sign_agreement"]},
                               {"deployment_grade", r["deployment_grade"]}});
            }
            reply(res, 200, out);
        }));
        server_.Get(R"(/reports/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            reply(res, 200, bench_.reports().load(req.matches[1]));
        }));
        if (fs::is_directory(bench_.config().console)) {
            server_.set_mount_point("/", bench_.config().console.string());
        }
    }

    Workbench bench_;
    httplib::Server server_;
    std::thread listener_;
    int port_ = -1;

    std::mutex jobs_mutex_;
    std::condition_variable jobs_cv_;
    std::map<std::string, JobDescriptor> jobs_;
    std::vector<std::thread> workers_;
    std::uint64_t job_seq_ = 0;
};

}  // namespace ndt::service
