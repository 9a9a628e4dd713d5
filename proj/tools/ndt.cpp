// ndt: command-line front end of the workbench.

#include <csignal>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "ndt/error.hpp"
#include "ndt/io.hpp"
#include "ndt/ops.hpp"
#include "ndt/service.hpp"

namespace {

using namespace ndt;
namespace fs = std::filesystem;

void emit(const std::string& text, const std::string& out) {
    if (out.empty() || out == "-") {
        std::cout << text;
    } else {
        io::write_file_atomic(out, text);
    }
}

nlohmann::json read_json_file(const std::string& path) {
    try {
        return nlohmann::json::parse(io::read_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::parse_error, path + ": " + e.what());
    }
}

std::vector<TelemetryRecord> read_records(const std::string& path) {
    const auto text = io::read_file(path);
    if (fs::path(path).extension() == ".csv") return telemetry::parse_csv(text);
    return parse_ndjson(text);
}

service::Service* g_service = nullptr;

void on_signal(int) {
    if (g_service != nullptr) g_service->stop();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Network digital twin workbench: simulate, refine, train, evaluate, what-if"};
    app.require_subcommand(1);

    // simulate
    auto* sim_cmd = app.add_subcommand("simulate", "Simulate one regime and write NDJSON telemetry");
    int sim_users = 0, sim_pods = 0, sim_ticks = 2000;
    double sim_tick_ms = 20.0, sim_anomaly = 0.0;
    std::uint64_t sim_seed = 42;
    std::string sim_out = "-";
    sim_cmd->add_option("--users", sim_users, "Connected users")->required();
    sim_cmd->add_option("--pods", sim_pods, "Pod count")->required();
    sim_cmd->add_option("--ticks", sim_ticks, "Records to emit")->capture_default_str();
    sim_cmd->add_option("--tick-ms", sim_tick_ms, "Tick length in ms")->capture_default_str();
    sim_cmd->add_option("--seed", sim_seed, "Seed")->capture_default_str();
    sim_cmd->add_option("--anomaly-rate", sim_anomaly, "Latency spike probability per record")->capture_default_str();
    sim_cmd->add_option("--out", sim_out, "Output path, - for stdout")->capture_default_str();

    // ingest / query / export
    auto* ingest_cmd = app.add_subcommand("ingest", "Append NDJSON or CSV telemetry to a store");
    std::string ingest_in, store_dir;
    ingest_cmd->add_option("--in", ingest_in, "NDJSON (or .csv) file")->required();
    ingest_cmd->add_option("--store", store_dir, "Store directory")->required();

    auto* query_cmd = app.add_subcommand("query", "Print stored records as NDJSON");
    std::optional<int> q_users, q_pods;
    std::optional<double> q_from, q_to;
    std::string q_out = "-";
    query_cmd->add_option("--store", store_dir, "Store directory")->required();
    query_cmd->add_option("--users", q_users, "Regime users");
    query_cmd->add_option("--pods", q_pods, "Regime pods");
    query_cmd->add_option("--from", q_from, "Window start (ms)");
    query_cmd->add_option("--to", q_to, "Window end (ms)");
    query_cmd->add_option("--out", q_out, "Output path, - for stdout");

    auto* export_cmd = app.add_subcommand("export", "Export the whole store as CSV");
    std::string export_out;
    export_cmd->add_option("--store", store_dir, "Store directory")->required();
    export_cmd->add_option("--out", export_out, "CSV path")->required();

    // campaign
    auto* camp_cmd = app.add_subcommand("campaign", "Simulate the regime grid and ingest it");
    ops::CampaignSpec camp;
    std::string camp_users = "200,400,600", camp_pods = "1-6";
    camp_cmd->add_option("--store", store_dir, "Store directory")->required();
    camp_cmd->add_option("--users", camp_users, "User levels")->capture_default_str();
    camp_cmd->add_option("--pods", camp_pods, "Pod levels")->capture_default_str();
    camp_cmd->add_option("--ticks", camp.ticks_per_regime, "Ticks per regime")->capture_default_str();
    camp_cmd->add_option("--tick-ms", camp.tick_ms, "Tick length in ms")->capture_default_str();
    camp_cmd->add_option("--seed", camp.seed, "Seed")->capture_default_str();
    camp_cmd->add_option("--anomaly-rate", camp.anomaly_rate, "Latency spike probability")->capture_default_str();

    // build-dataset
    auto* ds_cmd = app.add_subcommand("build-dataset", "Trim, featurise and split into train/test");
    std::string ds_train = "200,400", ds_test = "600", ds_pods = "1-6", ds_test_pods = "4-6";
    std::string ds_trim = "percentile:1,99", ds_out;
    ds_cmd->add_option("--store", store_dir, "Store directory")->required();
    ds_cmd->add_option("--train-users", ds_train, "Training user levels")->capture_default_str();
    ds_cmd->add_option("--test-users", ds_test, "Test user levels")->capture_default_str();
    ds_cmd->add_option("--pods", ds_pods, "Training pod levels")->capture_default_str();
    ds_cmd->add_option("--test-pods", ds_test_pods, "Test pod levels")->capture_default_str();
    ds_cmd->add_option("--trim", ds_trim, "percentile:LO,HI or iqr:K")->capture_default_str();
    ds_cmd->add_option("--out", ds_out, "Dataset directory")->required();

    // train / evaluate
    auto* train_cmd = app.add_subcommand("train", "Train a model and register it");
    std::string tr_kind, tr_dataset, tr_config, registry_dir;
    std::optional<std::string> tr_id;
    train_cmd->add_option("--kind", tr_kind, "gbt or mlp")->required();
    train_cmd->add_option("--dataset", tr_dataset, "Dataset directory")->required();
    train_cmd->add_option("--config", tr_config, "JSON config file (defaults otherwise)");
    train_cmd->add_option("--registry", registry_dir, "Registry directory")->required();
    train_cmd->add_option("--model-id", tr_id, "Explicit model id");

    auto* eval_cmd = app.add_subcommand("evaluate", "Evaluate a registered model on a dataset's test split");
    std::string ev_id, ev_dataset, ev_report;
    eval_cmd->add_option("--model-id", ev_id, "Model id")->required();
    eval_cmd->add_option("--registry", registry_dir, "Registry directory")->required();
    eval_cmd->add_option("--dataset", ev_dataset, "Dataset directory")->required();
    eval_cmd->add_option("--report", ev_report, "Report path, - for stdout")->required();

    // whatif
    auto* wi_cmd = app.add_subcommand("whatif", "Counterfactual report for one transition");
    std::string wi_id, wi_action, wi_out = "-", wi_reports = "state/reports", wi_pairing, wi_trim = "percentile:1,99";
    int wi_users = 0, wi_pods = 0;
    wi_cmd->add_option("--model-id", wi_id, "Model id")->required();
    wi_cmd->add_option("--registry", registry_dir, "Registry directory")->required();
    wi_cmd->add_option("--store", store_dir, "Store directory")->required();
    wi_cmd->add_option("--from-users", wi_users, "Source regime users")->required();
    wi_cmd->add_option("--from-pods", wi_pods, "Source regime pods")->required();
    wi_cmd->add_option("--action", wi_action, "pods+1, pods-1 or users:N")->required();
    wi_cmd->add_option("--pairing", wi_pairing, "JSON pairing config file");
    wi_cmd->add_option("--trim", wi_trim, "Trim method")->capture_default_str();
    wi_cmd->add_option("--reports", wi_reports, "Report directory")->capture_default_str();
    wi_cmd->add_option("--out", wi_out, "Output path, - for stdout")->capture_default_str();

    // serve / replay
    auto* serve_cmd = app.add_subcommand("serve", "Run the HTTP service");
    std::optional<std::string> cfg_file;
    std::optional<int> serve_port;
    serve_cmd->add_option("--config", cfg_file, "JSON config file");
    serve_cmd->add_option("--port", serve_port, "Port override");

    auto* replay_cmd = app.add_subcommand("replay", "Re-execute a service job log");
    std::string replay_log;
    replay_cmd->add_option("--log", replay_log, "Job log (NDJSON)")->required();
    replay_cmd->add_option("--config", cfg_file, "JSON config file");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*sim_cmd) {
            sim::WorkloadSpec w;
            w.users = sim_users;
            sim::ClusterConfig c;
            c.pods = sim_pods;
            auto records = sim::inject_anomalies(sim::run_regime(w, c, sim_ticks, sim_tick_ms, sim_seed), sim_anomaly,
                                                 stream_key(sim_seed, "regime", 0));
            emit(to_ndjson(records), sim_out);
        } else if (*ingest_cmd) {
            auto store = telemetry::Store::open(store_dir);
            std::cout << ops::render(ops::to_json(store.ingest(read_records(ingest_in))));
        } else if (*query_cmd) {
            auto store = telemetry::Store::open(store_dir);
            std::optional<RegimeKey> key;
            if (q_users || q_pods) {
                require(q_users && q_pods, "--users and --pods go together");
                key = RegimeKey{*q_users, *q_pods};
            }
            std::optional<telemetry::TimeWindow> window;
            if (q_from || q_to) {
                window = telemetry::TimeWindow{q_from.value_or(-1e300), q_to.value_or(1e300)};
            }
            emit(to_ndjson(store.query(key, window)), q_out);
        } else if (*export_cmd) {
            auto store = telemetry::Store::open(store_dir);
            const auto n = store.export_csv(export_out);
            std::cout << n << " rows\n";
        } else if (*camp_cmd) {
            camp.user_levels = ops::parse_levels(camp_users);
            camp.pod_levels = ops::parse_levels(camp_pods);
            auto store = telemetry::Store::open(store_dir);
            std::cout << ops::render(ops::run_campaign(camp, store));
        } else if (*ds_cmd) {
            ops::DatasetRequest req;
            req.train_users = ops::parse_levels(ds_train);
            req.test_users = ops::parse_levels(ds_test);
            req.pods = ops::parse_levels(ds_pods);
            req.test_pods = ops::parse_levels(ds_test_pods);
            req.trim = ds_trim;
            const auto store = telemetry::Store::open(store_dir);
            std::cout << ops::render(ops::build_dataset(store, req, ds_out));
        } else if (*train_cmd) {
            models::Registry registry(registry_dir);
            const nlohmann::json cfg = tr_config.empty() ? nlohmann::json::object() : read_json_file(tr_config);
            std::cout << ops::render(ops::train_model(registry, models::parse_kind(tr_kind), tr_dataset, cfg, tr_id));
        } else if (*eval_cmd) {
            const models::Registry registry(registry_dir);
            emit(ops::render(ops::evaluate_model(registry, ev_id, ev_dataset)), ev_report);
        } else if (*wi_cmd) {
            const models::Registry registry(registry_dir);
            const auto store = telemetry::Store::open(store_dir);
            const whatif::ReportStore reports(wi_reports);
            ops::WhatIfRequest req;
            req.model_id = wi_id;
            req.from = {wi_users, wi_pods};
            req.action = wi_action;
            req.trim = wi_trim;
            if (!wi_pairing.empty()) req.pairing = whatif::pairing_config_from_json(read_json_file(wi_pairing));
            emit(ops::render(ops::run_whatif(registry, store, reports, req)), wi_out);
        } else if (*serve_cmd) {
            auto cfg = service::load_config(cfg_file ? std::optional<fs::path>(*cfg_file) : std::nullopt);
            if (serve_port) cfg.port = *serve_port;
            service::Service svc(cfg);
            g_service = &svc;
            std::signal(SIGINT, on_signal);
            std::signal(SIGTERM, on_signal);
            std::cerr << "listening on " << cfg.bind << ":" << cfg.port << "\n";
            svc.run();
            g_service = nullptr;
        } else if (*replay_cmd) {
            auto cfg = service::load_config(cfg_file ? std::optional<fs::path>(*cfg_file) : std::nullopt);
            // Replaying must not append to the log being replayed.
            service::Workbench bench(cfg);
            const auto summary = bench.replay(replay_log);
            std::cout << "replayed " << summary.executed << " jobs, " << summary.failed << " failed\n";
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
