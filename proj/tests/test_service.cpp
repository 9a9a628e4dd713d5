#include <catch_amalgamated.hpp>

#include <chrono>
#include <filesystem>
#include <thread>

#include <httplib.h>

#include "ndt/service.hpp"

using namespace ndt;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Harness {
    std::unique_ptr<service::Service> svc;
    std::unique_ptr<httplib::Client> http;

    explicit Harness(const fs::path& state) {
        auto cfg = service::ServiceConfig::under(state);
        cfg.port = 0;
        cfg.console = state / "no-console";
        svc = std::make_unique<service::Service>(cfg);
        const int port = svc->start();
        http = std::make_unique<httplib::Client>("127.0.0.1", port);
        http->set_read_timeout(120, 0);
    }

    std::pair<int, json> post(const std::string& path, const json& body) {
        auto res = http->Post(path, body.dump(), "application/json");
        REQUIRE(res);
        return {res->status, json::parse(res->body)};
    }

    std::pair<int, json> get(const std::string& path) {
        auto res = http->Get(path);
        REQUIRE(res);
        return {res->status, json::parse(res->body)};
    }

    json finish(const json& accepted) {
        const auto id = accepted.at("job_id").get<std::string>();
        svc->wait(id);
        auto [status, job] = get("/jobs/" + id);
        REQUIRE(status == 200);
        return job;
    }
};

const json kCampaign = {{"ticks_per_regime", 400}, {"seed", 42}};
const json kDataset = {{"name", "base"}};
const json kWhatIf = {{"model_id", "gbt-a"}, {"from_users", 600}, {"from_pods", 4}, {"action", "pods+1"}};

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::current_path() / "scratch" / name;
    fs::remove_all(dir);
    return dir;
}

}  // namespace

TEST_CASE("service workflow") {
    const auto state = fresh_dir("service");
    Harness h(state);

    CHECK(h.get("/healthz").second["status"] == "ok");
    CHECK(h.get("/models").second == json::array());

    auto [s1, bad] = h.post("/campaigns", {{"pod_levels", json::array()}});
    CHECK(s1 == 400);
    CHECK(bad["error"]["code"] == "invalid-argument");

    auto [s2, accepted] = h.post("/campaigns", kCampaign);
    REQUIRE(s2 == 202);
    CHECK(accepted["kind"] == "simulate");
    auto job = h.finish(accepted);
    REQUIRE(job["status"] == "done");
    CHECK(job["result"]["ingest"]["accepted"] == 18 * 400);
    CHECK(h.get("/regimes").second.size() == 18);

    REQUIRE(h.finish(h.post("/datasets", kDataset).second)["status"] == "done");

    // Two trainings in flight at once.
    const auto g = h.post("/models/train", {{"kind", "gbt"}, {"dataset", "base"}, {"model_id", "gbt-a"},
                                            {"config", {{"n_estimators", 80}}}});
    const auto m = h.post("/models/train", {{"kind", "mlp"}, {"dataset", "base"}, {"model_id", "mlp-a"},
                                            {"config", {{"epochs", 5}}}});
    REQUIRE(g.first == 202);
    REQUIRE(m.first == 202);
    CHECK(h.finish(g.second)["status"] == "done");
    CHECK(h.finish(m.second)["status"] == "done");

    const auto models = h.get("/models").second;
    REQUIRE(models.size() == 2);
    CHECK(models[0]["model_id"] == "gbt-a");
    CHECK(models[0]["kind"] == "GBT");
    CHECK(models[1]["kind"] == "MLP");
    CHECK(h.get("/models/gbt-a").second["parameters_sha256"].is_string());
    CHECK(h.get("/models/nope").first == 404);
    CHECK(h.post("/models/train", {{"kind", "gbt"}, {"dataset", "base"}, {"model_id", "gbt-a"}}).first == 409);

    auto [s3, eval] = h.post("/models/gbt-a/evaluate", {{"dataset", "base"}});
    CHECK(s3 == 200);
    CHECK(eval["r2"].is_number());
    CHECK(h.post("/models/nope/evaluate", {{"dataset", "base"}}).first == 404);

    auto [s4, report] = h.post("/whatif", kWhatIf);
    REQUIRE(s4 == 200);
    CHECK(report.contains("sign_agreement"));
    CHECK(report["transition"]["to"]["pods"] == 5);
    const auto rid = report["report_id"].get<std::string>();
    CHECK(h.get("/reports/" + rid).second == report);
    CHECK(h.get("/reports").second.size() == 1);
    CHECK(h.get("/reports/wr-none").first == 404);

    auto blocked = kWhatIf;
    blocked["from_pods"] = 1;
    blocked["action"] = "pods-1";
    auto [s5, err] = h.post("/whatif", blocked);
    CHECK(s5 == 422);
    CHECK(err["error"]["code"] == "invalid-transition");

    CHECK(h.get("/jobs/job-999").first == 404);
    CHECK(h.get("/jobs").second.size() == 4);

    h.svc->stop();

    SECTION("replaying the job log rebuilds identical artifacts") {
        const auto copy = fresh_dir("service-replay");
        auto cfg = service::ServiceConfig::under(copy);
        service::Workbench bench(cfg);
        const auto summary = bench.replay(state / "jobs.ndjson");
        CHECK(summary.failed == 0);
        CHECK(summary.executed == 6);
        CHECK(io::read_file(copy / "reports" / (rid + ".json")) == io::read_file(state / "reports" / (rid + ".json")));
        CHECK(io::read_file(copy / "registry" / "mlp-a" / "parameters.json") ==
              io::read_file(state / "registry" / "mlp-a" / "parameters.json"));
    }
}

TEST_CASE("config loading") {
    const auto dir = fresh_dir("config");
    fs::create_directories(dir);
    io::write_file_atomic(dir / "ndt.json", R"({"state": "/tmp/x", "port": 9001})");
    const auto cfg = service::load_config(dir / "ndt.json");
    CHECK(cfg.port == 9001);
    CHECK(cfg.store == fs::path("/tmp/x/store"));
}
