#include <catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <random>

#include "ndt/ops.hpp"
#include "ndt/whatif.hpp"
#include "oracles.hpp"

using namespace ndt;
namespace fs = std::filesystem;

namespace {

hdl::DatasetRow row(double users, double pods, double cpu, double mem, double latency_ms) {
    TelemetryRecord r;
    r.current_users = static_cast<int>(users);
    r.pods = static_cast<int>(pods);
    r.avg_depth_on_enqueue = users / 10.0;
    r.avg_backlog_sec_est = users / 1000.0;
    r.avg_cpu_system_pct = cpu;
    r.avg_mem_system_pct = mem;
    r.avg_total_infer_ms = latency_ms;
    return hdl::make_row(r);
}

std::vector<hdl::DatasetRow> random_rows(std::mt19937_64& gen, std::size_t n, int users, int pods) {
    std::normal_distribution<double> cpu(60.0, 15.0), mem(50.0, 8.0);
    std::uniform_real_distribution<double> lat(20.0, 300.0);
    std::vector<hdl::DatasetRow> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(row(users, pods, cpu(gen), mem(gen), lat(gen)));
    return out;
}

// Constant-output model: a single-row GBT.
models::TrainedModel constant_model(double log_value) {
    hdl::RefinedDataset ds;
    ds.rows.push_back(row(100, 1, 50, 50, std::expm1(log_value)));
    models::GbtConfig c;
    c.n_estimators = 1;
    return models::train_gbt(ds, c);
}

}  // namespace

TEST_CASE("transitions") {
    SECTION("pod step re-derives intensity") {
        const auto r = row(600, 4, 50, 50, 100);
        const auto f = whatif::counterfactual_features(r, whatif::Transition::pods({600, 4}, 1));
        CHECK(r.features.workload_intensity == 150.0);
        CHECK(f.workload_intensity == 120.0);
        CHECK(f.pods == 5.0);
        CHECK(f.cpu_system_pct == r.features.cpu_system_pct);
    }
    SECTION("user shift re-derives intensity") {
        const auto r = row(600, 4, 50, 50, 100);
        CHECK(whatif::counterfactual_features(r, whatif::Transition::users({600, 4}, 200)).workload_intensity == 50.0);
    }
    SECTION("no pods left") {
        try {
            whatif::parse_action({600, 1}, "pods-1");
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::invalid_transition);
        }
    }
    SECTION("pod steps are involutions on features") {
        const auto r = row(600, 4, 50, 50, 100);
        auto up = r;
        up.features = whatif::counterfactual_features(r, whatif::Transition::pods({600, 4}, 1));
        up.raw.reset();
        const auto back = whatif::counterfactual_features(up, whatif::Transition::pods({600, 5}, -1));
        CHECK(back.pods == r.features.pods);
        CHECK(back.workload_intensity == Catch::Approx(r.features.workload_intensity));
        CHECK(back.congestion_index == Catch::Approx(r.features.congestion_index));
    }
    SECTION("actions parse") {
        CHECK(whatif::parse_action({600, 4}, "users:200").to == RegimeKey{200, 4});
        CHECK(whatif::parse_action({600, 4}, "pods+1").action() == "pods+1");
        CHECK_THROWS_AS(whatif::parse_action({600, 4}, "pods+2"), Error);
        CHECK_THROWS_AS(whatif::parse_action({600, 4}, "users:x"), Error);
    }
}

TEST_CASE("predicted deltas") {
    const auto r = row(600, 4, 50, 50, 100);
    SECTION("constant model predicts no change") {
        const auto m = constant_model(4.0);
        CHECK(whatif::predict_delta(m, r, whatif::Transition::pods({600, 4}, 1)) == 0.0);
        CHECK(whatif::predict_delta(m, r, whatif::Transition::users({600, 4}, 200)) == 0.0);
    }
    SECTION("identity transition predicts no change") {
        hdl::RefinedDataset ds;
        std::mt19937_64 gen(1);
        for (int p = 1; p <= 6; ++p) {
            auto rows = random_rows(gen, 50, 600, p);
            ds.rows.insert(ds.rows.end(), rows.begin(), rows.end());
        }
        models::GbtConfig c;
        c.n_estimators = 20;
        const auto m = models::train_gbt(ds, c);
        CHECK(whatif::predict_delta(m, r, whatif::Transition::users({600, 4}, 600)) == 0.0);
    }
}

TEST_CASE("pairing") {
    whatif::PairingConfig cfg;
    cfg.min_pairs = 1;

    SECTION("identical nuisance vectors pair at distance zero") {
        std::vector<hdl::DatasetRow> a{row(600, 4, 40, 50, 100), row(600, 4, 70, 55, 120)};
        std::vector<hdl::DatasetRow> b{row(600, 5, 70, 55, 90), row(600, 5, 40, 50, 80)};
        const auto pairs = whatif::build_matched_pairs(a, b, cfg);
        REQUIRE(pairs.size() == 2);
        CHECK(pairs[0].sample_b == 1);
        CHECK(pairs[0].nuisance_distance == 0.0);
        CHECK(pairs[0].delta_true_ms == Catch::Approx(-20.0));
        CHECK(pairs[1].sample_b == 0);
        CHECK(pairs[1].nuisance_distance == 0.0);
    }
    SECTION("caliper zero without exact matches") {
        std::mt19937_64 gen(2);
        cfg.caliper = 0.0;
        try {
            whatif::build_matched_pairs(random_rows(gen, 20, 600, 4), random_rows(gen, 20, 600, 5), cfg);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::insufficient_pairs);
        }
    }
    SECTION("matches all-pairs enumeration") {
        std::mt19937_64 gen(3);
        for (int trial = 0; trial < 50; ++trial) {
            const auto a = random_rows(gen, 20, 600, 4);
            const auto b = random_rows(gen, 20, 600, 5);
            cfg.caliper = trial % 2 ? 0.5 : 10.0;
            cfg.nuisance_features = trial % 3 ? std::vector<std::string>{"cpu_system_pct", "mem_system_pct"}
                                              : std::vector<std::string>{"mem_system_pct"};
            const auto expected = oracle::nearest_neighbours(a, b, cfg.nuisance_features, cfg.caliper);
            std::vector<whatif::MatchedPair> got;
            try {
                got = whatif::build_matched_pairs(a, b, cfg);
            } catch (const Error&) {
            }
            std::size_t k = 0;
            for (std::size_t i = 0; i < a.size(); ++i) {
                if (!expected[i]) continue;
                REQUIRE(k < got.size());
                CHECK(got[k].sample_a == i);
                CHECK(got[k].sample_b == expected[i]->to);
                CHECK(got[k].nuisance_distance == Catch::Approx(expected[i]->distance).margin(1e-12));
                ++k;
            }
            CHECK(k == got.size());
        }
    }
}

TEST_CASE("sign agreement") {
    SECTION("all signs match") {
        std::vector<double> t, p;
        for (int i = 0; i < 10; ++i) {
            t.push_back(i % 2 ? 5.0 : -5.0);
            p.push_back(i % 2 ? 1.0 : -3.0);
        }
        CHECK(whatif::sign_agreement(t, p, 0.5) == 1.0);
    }
    SECTION("hand count") {
        const std::vector<double> t{3, 4, -2}, p{1, -1, -5};
        CHECK(whatif::sign_agreement(t, p, 0.5) == Catch::Approx(2.0 / 3.0));
    }
    SECTION("tiny predictions never match a moving truth") {
        const std::vector<double> t{3, -4}, p{0.1, -0.2};
        CHECK(whatif::sign_agreement(t, p, 0.5) == 0.0);
    }
    SECTION("all tied") {
        const std::vector<double> t{0.1, -0.2}, p{1, 1};
        try {
            whatif::sign_agreement(t, p, 0.5);
            FAIL("expected an error");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::all_pairs_tied);
        }
    }
    SECTION("agrees with a recount on random sets") {
        std::mt19937_64 gen(4);
        std::normal_distribution<double> d(0.0, 2.0);
        for (int trial = 0; trial < 500; ++trial) {
            std::vector<double> t(40), p(40);
            for (auto& v : t) v = d(gen);
            for (auto& v : p) v = d(gen);
            const double expected = oracle::sign_agreement(t, p, 0.5);
            if (std::isnan(expected)) continue;
            CHECK(whatif::sign_agreement(t, p, 0.5) == expected);
        }
    }
}

TEST_CASE("delta metrics") {
    SECTION("perfect deltas") {
        const std::vector<double> t{-3, 4, 8};
        CHECK(whatif::delta_metrics(t, t).mae_ms == 0.0);
    }
    SECTION("single pair") {
        const std::vector<double> t{-10}, p{-12};
        const auto s = whatif::delta_metrics(t, p);
        CHECK(s.mean_ms == -12.0);
        CHECK(s.mae_ms == 2.0);
    }
}

TEST_CASE("sensitivity and deployment grades") {
    using whatif::DeploymentGrade;
    using whatif::Sensitivity;
    CHECK(whatif::classify_sensitivity(0.94) == Sensitivity::high);
    CHECK(whatif::classify_sensitivity(0.55) == Sensitivity::low);
    CHECK(whatif::classify_sensitivity(0.52) == Sensitivity::negligible);
    CHECK(whatif::deployment_grade(0.94, 2.15) == DeploymentGrade::excellent);
    CHECK(whatif::deployment_grade(0.52, 4.12) == DeploymentGrade::unreliable);
    CHECK(whatif::deployment_grade(0.90, 5.0) == DeploymentGrade::excellent);
    CHECK(whatif::deployment_grade(0.80, 9.0) == DeploymentGrade::reliable);
}

TEST_CASE("reports on a simulated campaign") {
    const auto root = fs::current_path() / "scratch" / "whatif";
    fs::remove_all(root);
    auto store = telemetry::Store::open(root / "store");
    ops::CampaignSpec spec;
    spec.ticks_per_regime = 600;
    ops::run_campaign(spec, store);
    const auto [train, test] = hdl::assemble(store, hdl::SplitSpec::grid({200, 400}, {600}, {1, 2, 3, 4, 5, 6}, {4, 5, 6}));
    models::GbtConfig c;
    c.n_estimators = 120;
    const auto model = models::train_gbt(train, c);

    SECTION("adding a pod at saturation predicts lower latency") {
        const auto r = whatif::run_whatif(model, "m", store, whatif::Transition::pods({600, 4}, 1));
        CHECK(r.mean_delta_pred_ms < 0.0);
        CHECK(r.mean_delta_true_ms < 0.0);
        REQUIRE(r.sign_agreement);
        CHECK(*r.sign_agreement >= 0.75);
    }
    SECTION("identity transition is reported as degenerate") {
        const auto r = whatif::run_whatif(model, "m", store, whatif::Transition::users({600, 4}, 600));
        CHECK(r.degenerate);
        CHECK(r.mean_delta_pred_ms == 0.0);
        CHECK_FALSE(r.sign_agreement);
        CHECK(r.note.find("all-pairs-tied") != std::string::npos);
        CHECK(whatif::to_json(r)["sign_agreement"].is_null());
    }
    SECTION("reports persist under a content id") {
        whatif::ReportStore reports(root / "reports");
        const auto r = whatif::run_whatif(model, "m", store, whatif::Transition::pods({600, 4}, -1));
        const auto id = reports.save(r);
        CHECK(reports.save(r) == id);
        const auto j = reports.load(id);
        CHECK(j["report_id"] == id);
        CHECK(j["mean_delta_pred_ms"].get<double>() == r.mean_delta_pred_ms);
        CHECK(reports.list() == std::vector<std::string>{id});
        CHECK_THROWS_AS(reports.load("wr-missing"), Error);
    }
}
