// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <random>
#include <sstream>
#include <string>

#include "ndt/ops.hpp"
#include "oracles.hpp"

using namespace ndt;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << std::fixed << v;
    return os.str();
}

const fs::path kRoot = fs::current_path() / "acceptance_state";

const std::vector<int> kAllPods{1, 2, 3, 4, 5, 6};

ops::DatasetRequest default_split() { return ops::DatasetRequest{}; }

// -- 1 ----------------------------------------------------------------------

Outcome determinism() {
    const auto t0 = Clock::now();
    auto pipeline = [](const fs::path& dir) {
        fs::remove_all(dir);
        auto store = telemetry::Store::open(dir / "store");
        ops::run_campaign(ops::CampaignSpec{}, store);
        ops::build_dataset(store, default_split(), dir / "dataset");
        models::Registry registry(dir / "registry");
        ops::train_model(registry, models::ModelKind::gbt, dir / "dataset", nlohmann::json::object(), "gbt");
        whatif::ReportStore reports(dir / "reports");
        ops::WhatIfRequest req;
        req.model_id = "gbt";
        req.from = {600, 4};
        req.action = "pods+1";
        const auto report = ops::run_whatif(registry, store, reports, req);
        return io::read_file(dir / "reports" / (report["report_id"].get<std::string>() + ".json"));
    };
    const auto a = pipeline(kRoot / "det-a");
    const auto b = pipeline(kRoot / "det-b");
    const double secs = seconds_since(t0);
    const bool same = a == b;
    return {same && secs < 300.0, std::string(same ? "report JSON bit-identical" : "report JSON differs") +
                                      " across two runs, " + fmt(secs, 1) + " s for both"};
}

// -- 2 ----------------------------------------------------------------------

Outcome scale_invariance() {
    auto record = [](int users, int pods, double depth, double backlog) {
        TelemetryRecord r;
        r.current_users = users;
        r.pods = pods;
        r.avg_depth_on_enqueue = depth;
        r.avg_backlog_sec_est = backlog;
        r.avg_cpu_process_pct = 40.0;
        r.avg_cpu_system_pct = 55.0;
        r.avg_mem_system_pct = 61.0;
        return r;
    };
    auto normalised_equal = [](const hdl::FeatureVector& a, const hdl::FeatureVector& b) {
        return a.workload_intensity == b.workload_intensity && a.congestion_index == b.congestion_index &&
               a.backlog_flow == b.backlog_flow && a.cpu_process_pct == b.cpu_process_pct &&
               a.cpu_system_pct == b.cpu_system_pct && a.mem_system_pct == b.mem_system_pct;
    };
    const auto a = hdl::build_features(record(400, 4, 36.8, 0.92));
    const auto b = hdl::build_features(record(200, 2, 18.4, 0.46));
    bool ok = normalised_equal(a, b) && a.workload_intensity == 100.0;

    // Random proportional pairs with power-of-two factors, where scaling is exact.
    std::mt19937_64 gen(2);
    std::uniform_int_distribution<int> users(1, 300), pods(1, 3), factor(1, 2);
    std::uniform_real_distribution<double> depth(0.0, 80.0), backlog(0.0, 2.0);
    int probes = 0;
    for (; probes < 1000; ++probes) {
        const int k = 1 << factor(gen);
        const int u = users(gen), p = pods(gen);
        const double d = depth(gen), q = backlog(gen);
        ok = ok && normalised_equal(hdl::build_features(record(u, p, d, q)),
                                    hdl::build_features(record(u * k, p * k, d * k, q * k)));
    }
    return {ok, "(400,4) vs (200,2) workload_intensity " + fmt(a.workload_intensity, 1) + " / " +
                    fmt(b.workload_intensity, 1) + ", plus " + std::to_string(probes) +
                    " random proportional pairs, exact equality"};
}

// -- 3 ----------------------------------------------------------------------

Outcome trim_oracle(const telemetry::Store& store) {
    std::mt19937_64 gen(3);
    std::uniform_int_distribution<int> size(50, 2000);
    std::lognormal_distribution<double> lat(4.0, 0.7);
    std::uniform_int_distribution<int> coarse(1, 60);
    int mismatches = 0;
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = size(gen);
        std::vector<TelemetryRecord> records(static_cast<std::size_t>(n));
        std::vector<double> ys;
        for (int i = 0; i < n; ++i) {
            auto& r = records[static_cast<std::size_t>(i)];
            r.timestamp_ms = i;
            r.current_users = 200;
            r.pods = 1;
            r.avg_total_infer_ms = trial % 4 == 0 ? static_cast<double>(coarse(gen)) : lat(gen);
            ys.push_back(*r.avg_total_infer_ms);
        }
        const auto got = hdl::trim_regime(records, hdl::PercentileTrim{1.0, 99.0}).kept.size();
        mismatches += got != oracle::trim_kept(ys, 1.0, 99.0);
    }

    std::size_t input = 0, kept = 0;
    for (const auto& e : store.regimes()) {
        const auto records = store.query(e.key);
        input += records.size();
        kept += hdl::trim_regime(records, hdl::default_trim()).kept.size();
    }
    const double retention = static_cast<double>(kept) / static_cast<double>(input);
    const bool ok = mismatches == 0 && retention >= 0.96 && retention <= 0.99;
    return {ok, "1000 random regimes, " + std::to_string(mismatches) + " oracle mismatches; retention " +
                    std::to_string(kept) + "/" + std::to_string(input) + " = " + fmt(100.0 * retention, 2) +
                    "% on 18 anomaly-injected regimes"};
}

// -- 4 ----------------------------------------------------------------------

struct Trained {
    models::TrainedModel gbt;
    models::TrainedModel mlp;
};

Outcome ood_accuracy(const telemetry::Store& store, Trained& out) {
    const auto dir = kRoot / "shared" / "dataset";
    ops::build_dataset(store, default_split(), dir);
    const auto train = hdl::read_dataset(dir, "train");
    const auto test = hdl::read_dataset(dir, "test");

    const auto t0 = Clock::now();
    out.gbt = models::train_gbt(train, models::GbtConfig{});
    const double gbt_secs = seconds_since(t0);
    const auto t1 = Clock::now();
    out.mlp = models::train_mlp(train, models::MlpConfig{});
    const double mlp_secs = seconds_since(t1);

    const auto eg = models::evaluate(out.gbt, test);
    const auto em = models::evaluate(out.mlp, test);
    const double rg = eg.overall.r2.value_or(-1.0);
    const double rm = em.overall.r2.value_or(-1.0);
    const auto& tg = eg.tail.at(models::TailThreshold::p95);
    const auto& tm = em.tail.at(models::TailThreshold::p95);
    const double trg = tg.metrics.r2.value_or(-1.0);
    const double trm = tm.metrics.r2.value_or(-1.0);
    const bool ok = rg >= 0.95 && rm >= 0.90 && gbt_secs + mlp_secs < 180.0;
    return {ok, "test R2 GBT " + fmt(rg) + " (>= 0.95), MLP " + fmt(rm) + " (>= 0.90); P95 tail (" +
                    std::to_string(tg.metrics.count) + " of " + std::to_string(test.size()) + " rows) R2 GBT " +
                    fmt(trg) + ", MLP " + fmt(trm) + ", gap GBT-MLP " + fmt(trg - trm) + "; training " +
                    fmt(gbt_secs + mlp_secs, 1) + " s"};
}

// -- 5 ----------------------------------------------------------------------

Outcome sign_agreement_oracle() {
    std::mt19937_64 gen(5);
    std::uniform_int_distribution<int> size(1, 120), kind(0, 5);
    std::normal_distribution<double> wide(0.0, 20.0), narrow(0.0, 0.6);
    const double eps = 0.5;
    auto draw = [&] {
        switch (kind(gen)) {
            case 0: return 0.0;
            case 1: return eps;
            case 2: return -eps;
            case 3: return narrow(gen);
            default: return wide(gen);
        }
    };
    int mismatches = 0, tied_sets = 0;
    for (int set = 0; set < 10000; ++set) {
        const int n = size(gen);
        std::vector<double> t(static_cast<std::size_t>(n)), p(static_cast<std::size_t>(n));
        for (auto& v : t) v = draw();
        for (auto& v : p) v = draw();
        const double expected = oracle::sign_agreement(t, p, eps);
        if (std::isnan(expected)) {
            ++tied_sets;
            try {
                whatif::sign_agreement(t, p, eps);
                ++mismatches;
            } catch (const Error& e) {
                mismatches += e.code() != Errc::all_pairs_tied;
            }
            continue;
        }
        mismatches += whatif::sign_agreement(t, p, eps) != expected;
    }
    return {mismatches == 0, "10000 random pair sets (" + std::to_string(tied_sets) + " all-tied), " +
                                 std::to_string(mismatches) + " disagreements with the recount"};
}

// -- 6 ----------------------------------------------------------------------

Outcome whatif_directions(const telemetry::Store& store, const Trained& m) {
    const RegimeKey from{600, 4};
    const auto up = whatif::run_whatif(m.gbt, "gbt", store, whatif::Transition::pods(from, 1));
    const auto down = whatif::run_whatif(m.gbt, "gbt", store, whatif::Transition::pods(from, -1));
    const auto users = whatif::run_whatif(m.gbt, "gbt", store, whatif::Transition::users(from, 200));
    const double sa = up.sign_agreement.value_or(0.0);
    const bool ok = sa >= 0.85 && up.mean_delta_pred_ms < 0.0 && down.mean_delta_pred_ms > 0.0 &&
                    users.mean_delta_pred_ms < 0.0;
    auto row = [](const char* name, const whatif::CounterfactualReport& r) {
        return std::string(name) + " mean dpred " + fmt(r.mean_delta_pred_ms, 2) + " ms (true " +
               fmt(r.mean_delta_true_ms, 2) + ", S_a " + fmt(r.sign_agreement.value_or(NAN), 3) + ")";
    };
    return {ok, "GBT from 600:4: " + row("pods+1", up) + "; " + row("pods-1", down) + "; " + row("users:200", users)};
}

// -- 7 ----------------------------------------------------------------------

Outcome grading_tables() {
    using models::QualityGrade;
    bool ok = models::grade_quality(8.97, 29.32, 180.0) == QualityGrade::excellent;
    ok = ok && models::grade_quality(120.0, 400.0, 500.0) == QualityGrade::weak;
    ok = ok && models::grade_quality(50.0, 150.0, 100.0) == QualityGrade::excellent;
    ok = ok && models::grade_quality(std::nextafter(50.0, 51.0), 150.0, 100.0) != QualityGrade::excellent;
    ok = ok && models::grade_quality(50.0, std::nextafter(150.0, 151.0), 100.0) != QualityGrade::excellent;

    struct Row {
        double sa;
        whatif::Sensitivity label;
    };
    using whatif::Sensitivity;
    const Row table[] = {{0.52, Sensitivity::negligible}, {0.94, Sensitivity::high}, {0.48, Sensitivity::negligible},
                         {0.91, Sensitivity::high},       {0.55, Sensitivity::low},  {0.98, Sensitivity::high}};
    int matched = 0;
    for (const auto& r : table) matched += whatif::classify_sensitivity(r.sa) == r.label;
    ok = ok && matched == 6;
    return {ok, "quality grades Excellent/Weak/boundary as expected; " + std::to_string(matched) +
                    "/6 sensitivity labels reproduced from S_a"};
}

// -- 8 ----------------------------------------------------------------------

Outcome gradient_check() {
    models::MlpNetwork plain(7, {16, 8, 4}, false);
    plain.initialize(8, 0.5);
    models::MlpNetwork bn(7, {16, 8, 4}, true);
    bn.initialize(9, 0.5);
    const auto a = oracle::mlp_gradient_check(plain, 100, 81);
    const auto b = oracle::mlp_gradient_check(bn, 100, 82);
    const double worst = std::max(a.max_relative_error, b.max_relative_error);
    return {worst <= 1e-4, "100 probes each, max relative error " + fmt(a.max_relative_error * 1e6, 3) +
                               "e-6 (no BN), " + fmt(b.max_relative_error * 1e6, 3) + "e-6 (BN); bound 1e-4"};
}

// -- 9 ----------------------------------------------------------------------

Outcome persistence(const Trained& m) {
    const auto root = kRoot / "registry";
    fs::remove_all(root);
    models::Registry registry(root);
    registry.save(m.gbt, "gbt");
    registry.save(m.mlp, "mlp");
    const auto g = registry.load("gbt");
    const auto n = registry.load("mlp");

    std::mt19937_64 gen(9);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    int differing = 0;
    for (int i = 0; i < 100; ++i) {
        hdl::FeatureVector f;
        f.pods = 1 + static_cast<int>(u(gen) * 6);
        f.workload_intensity = 600.0 * u(gen) / f.pods;
        f.congestion_index = 50.0 * u(gen);
        f.backlog_flow = u(gen);
        f.cpu_process_pct = 100.0 * u(gen);
        f.cpu_system_pct = 100.0 * u(gen);
        f.mem_system_pct = 100.0 * u(gen);
        differing += g.predict_log(f) != m.gbt.predict_log(f);
        differing += n.predict_log(f) != m.mlp.predict_log(f);
    }

    auto rejected = [&](const std::string& id, const std::string& file, const std::function<void(std::string&)>& edit) {
        auto text = io::read_file(root / id / file);
        const auto original = text;
        edit(text);
        io::write_file_atomic(root / id / file, text);
        bool caught = false;
        try {
            registry.load(id);
        } catch (const Error& e) {
            caught = e.code() == Errc::corrupt_artifact;
        }
        io::write_file_atomic(root / id / file, original);
        return caught;
    };
    int tamper_caught = 0;
    tamper_caught += rejected("gbt", "parameters.json", [](std::string& t) { t[t.size() / 2] ^= 1; });
    tamper_caught += rejected("mlp", "parameters.json", [](std::string& t) { t.insert(t.size() - 2, " "); });
    tamper_caught += rejected("mlp", "metadata.json", [](std::string& t) {
        const auto pos = t.find("\"parameters_sha256\": \"") + 22;
        t[pos] = t[pos] == 'a' ? 'b' : 'a';
    });
    bool unknown = false;
    try {
        registry.load("absent");
    } catch (const Error& e) {
        unknown = e.code() == Errc::not_found;
    }
    const bool ok = differing == 0 && tamper_caught == 3 && unknown;
    return {ok, "100 probes x 2 models, " + std::to_string(differing) + " differing predictions; " +
                    std::to_string(tamper_caught) + "/3 tampered artifacts rejected"};
}

}  // namespace

int main() {
    fs::remove_all(kRoot);
    fs::create_directories(kRoot);

    int failures = 0;
    auto report = [&](int n, const char* name, const std::function<Outcome()>& run) {
        Outcome o;
        try {
            o = run();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += o.pass ? 0 : 1;
        std::printf("[%s] %d %s: %s\n", o.pass ? "PASS" : "FAIL", n, name, o.detail.c_str());
        std::fflush(stdout);
    };

    auto store = telemetry::Store::open(kRoot / "shared" / "store");
    ops::run_campaign(ops::CampaignSpec{}, store);
    Trained trained;
    bool have_models = false;

    report(1, "end-to-end determinism", determinism);
    report(2, "feature scale invariance", scale_invariance);
    report(3, "trim oracle and retention", [&] { return trim_oracle(store); });
    report(4, "out-of-distribution accuracy", [&] {
        auto o = ood_accuracy(store, trained);
        have_models = true;
        return o;
    });
    report(5, "sign agreement oracle", sign_agreement_oracle);
    report(6, "what-if directional validity", [&] {
        if (!have_models) return Outcome{false, "models unavailable"};
        return whatif_directions(store, trained);
    });
    report(7, "grading tables", grading_tables);
    report(8, "MLP gradient check", gradient_check);
    report(9, "persistence integrity", [&] {
        if (!have_models) return Outcome{false, "models unavailable"};
        return persistence(trained);
    });

    std::printf("%d of 9 criteria passed\n", 9 - failures);
    return failures == 0 ? 0 : 1;
}
