#include <catch_amalgamated.hpp>

#include <filesystem>

#include "ndt/io.hpp"
#include "ndt/simcluster.hpp"
#include "ndt/telemetry.hpp"

using namespace ndt;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
    const auto dir = fs::current_path() / "scratch" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<TelemetryRecord> regime(int users, int pods, int n, double t0) {
    sim::WorkloadSpec w;
    w.users = users;
    sim::ClusterConfig c;
    c.pods = pods;
    return sim::simulate_regime(w, c, n, 20.0, 17, t0).records;
}

}  // namespace

TEST_CASE("valid batch is accepted in full") {
    auto store = telemetry::Store::open(fresh_dir("accept"));
    const auto records = regime(200, 2, 1000, 0.0);
    const auto s = store.ingest(records);
    CHECK(s.accepted == 1000);
    CHECK(s.rejected == 0);
    CHECK(s.per_regime.at(RegimeKey{200, 2}) == 1000);
    CHECK(store.total() == 1000);
}

TEST_CASE("invalid records are rejected with a schema reason") {
    auto store = telemetry::Store::open(fresh_dir("reject"));
    auto records = regime(200, 2, 10, 0.0);
    records[3].avg_total_infer_ms = -5.0;
    const auto s = store.ingest(records);
    CHECK(s.accepted == 9);
    REQUIRE(s.rejected == 1);
    CHECK(s.rejections[0].index == 3);
    CHECK(s.rejections[0].code == Errc::schema_violation);
}

TEST_CASE("re-ingesting a batch changes nothing") {
    auto store = telemetry::Store::open(fresh_dir("idem"));
    const auto records = regime(400, 3, 200, 0.0);
    store.ingest(records);
    const auto again = store.ingest(records);
    CHECK(again.accepted == 0);
    CHECK(again.duplicate_batch);
    CHECK(store.total() == 200);

    // Also across a reopen.
    auto reopened = telemetry::Store::open(store.root());
    CHECK(reopened.ingest(records).accepted == 0);
    CHECK(reopened.total() == 200);
}

TEST_CASE("query filters") {
    auto store = telemetry::Store::open(fresh_dir("query"));
    store.ingest(regime(200, 4, 100, 0.0));
    store.ingest(regime(400, 4, 100, 2000.0));
    store.ingest(regime(600, 4, 100, 4000.0));

    const auto only = store.query(RegimeKey{600, 4});
    REQUIRE(only.size() == 100);
    for (const auto& r : only) CHECK(r.regime() == RegimeKey{600, 4});

    CHECK(store.query(std::nullopt, telemetry::TimeWindow{1e9, 2e9}).empty());

    const auto all = store.query();
    CHECK(all.size() == store.total());
    for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].timestamp_ms <= all[i].timestamp_ms);

    const auto window = store.query(std::nullopt, telemetry::TimeWindow{1000.0, 2500.0});
    for (const auto& r : window) {
        CHECK(r.timestamp_ms >= 1000.0);
        CHECK(r.timestamp_ms <= 2500.0);
    }
    CHECK(window.size() == 50 + 26);
}

TEST_CASE("records arriving out of order within a regime are rejected") {
    auto store = telemetry::Store::open(fresh_dir("order"));
    store.ingest(regime(200, 1, 10, 1000.0));
    const auto s = store.ingest(regime(200, 1, 5, 0.0));
    CHECK(s.accepted == 0);
    CHECK(s.rejected == 5);
    CHECK(store.total() == 10);
}

TEST_CASE("csv export") {
    const auto dir = fresh_dir("export");
    SECTION("ten records give eleven lines and round-trip") {
        auto store = telemetry::Store::open(dir / "store");
        store.ingest(regime(200, 2, 10, 0.0));
        CHECK(store.export_csv(dir / "out.csv") == 10);
        const auto text = io::read_file(dir / "out.csv");
        std::size_t lines = 0;
        for (auto l : io::lines(text)) lines += !l.empty();
        CHECK(lines == 11);
        CHECK(telemetry::parse_csv(text) == store.query());
    }
    SECTION("empty store gives a header-only file") {
        auto store = telemetry::Store::open(dir / "empty");
        CHECK(store.export_csv(dir / "empty.csv") == 0);
        CHECK(io::read_file(dir / "empty.csv") == telemetry::csv_header() + "\n");
    }
}

TEST_CASE("a torn append is discarded on the next ingest") {
    auto store = telemetry::Store::open(fresh_dir("torn"));
    store.ingest(regime(200, 1, 10, 0.0));
    // Simulate a crash that left a partial line after the committed bytes.
    for (const auto& entry : fs::directory_iterator(store.root())) {
        if (entry.path().extension() == ".ndjson") io::append_file(entry.path(), "{\"timestamp_ms\": 9");
    }
    auto reopened = telemetry::Store::open(store.root());
    CHECK(reopened.query().size() == 10);
    reopened.ingest(regime(200, 1, 5, 1000.0));
    CHECK(reopened.query().size() == 15);
}
