#include <doctest.h>

#include "tlc/metrics.hpp"
#include "tlc/scenario.hpp"

#include <sstream>

using namespace tlc;

namespace {

const char* kMinimal = R"(schema = 1
[geometry]
lanes = 2
control_zone_length = 60
stop_line = 58
downstream_length = 40
conflict_00 = 0 1 64 62
[params]
horizon = 6
[demand]
volume = 800
penetration = 0.5
mode = light_only
)";

ScenarioConfig parse(const std::string& text) {
    std::istringstream in(text);
    return parse_scenario(in, "test.scn");
}

std::string replace(std::string text, const std::string& from, const std::string& to) {
    text.replace(text.find(from), from.size(), to);
    return text;
}

}  // namespace

TEST_CASE("default scenario loads with the published parameters") {
    const auto cfg = load_scenario(std::string(TLC_SCENARIO_DIR) + "/default.scn");
    CHECK(cfg.geo.lane_count() == 8);
    CHECK(cfg.geo.nodes().size() == 16);
    CHECK(cfg.horizon.H == 20);
    CHECK(cfg.horizon.dt == 0.5);
    CHECK(cfg.params.v_max == 15.0);
    CHECK(cfg.params.u_min == -4.0);
    CHECK(cfg.params.u_max == 3.0);
    CHECK(cfg.params.d_min == 6.0);
    CHECK(cfg.params.delta_min == 20);
    CHECK(cfg.params.delta_max == 100);
    CHECK(cfg.params.rho == 1e6);
    CHECK(cfg.demand.through_share == 0.55);
    CHECK(cfg.mode == ControlMode::Coordinated);
    // Every lane crosses four others, each pair through one node.
    for (int l = 0; l < 8; ++l) CHECK(cfg.geo.lane(l).conflicts.size() == 4);
    for (const auto& n : cfg.geo.nodes()) {
        CHECK(cfg.geo.conflicting(n.lane_a, n.lane_b));
        CHECK(cfg.geo.conflicting(n.lane_b, n.lane_a));
    }
}

TEST_CASE("minimal scenario") {
    const auto cfg = parse(kMinimal);
    CHECK(cfg.geo.lane_count() == 2);
    CHECK(cfg.geo.lane(1).node_pos(0).value() == 62.0);
    CHECK(cfg.horizon.H == 6);
    CHECK(cfg.demand.volume == 800.0);
    CHECK(cfg.mode == ControlMode::LightOnly);
    CHECK(cfg.params.w_u == 0.1);  // defaults fill the rest
}

TEST_CASE("scenario errors name the problem") {
    auto fails_with = [](const std::string& text, const std::string& needle) {
        try {
            (void)parse(text);
        } catch (const ConfigError& e) {
            return std::string(e.what()).find(needle) != std::string::npos;
        }
        return false;
    };
    CHECK(fails_with(replace(kMinimal, "schema = 1\n", ""), "schema"));
    CHECK(fails_with(replace(kMinimal, "schema = 1", "schema = 2"), "schema 2"));
    CHECK(fails_with(replace(kMinimal, "horizon = 6", "horizon = six"), "horizon"));
    CHECK(fails_with(replace(kMinimal, "penetration = 0.5", "penetration = 1.5"), "penetration"));
    CHECK(fails_with(replace(kMinimal, "mode = light_only", "mode = fast"), "fast"));
    CHECK(fails_with(replace(kMinimal, "0 1 64 62", "0 1 64"), "conflict_00"));
    CHECK(fails_with(replace(kMinimal, "0 1 64 62", "0 1 50 62"), "stop line"));
    CHECK(fails_with(replace(kMinimal, "lanes = 2", "lanes = 0"), "lanes"));
    CHECK(fails_with(replace(kMinimal, "horizon = 6", "horizon = 6\nrho = 10"), "rho"));
    CHECK(fails_with("schema = 1\n[geometry\n", "test.scn"));
}

TEST_CASE("missing scenario file names the path") {
    try {
        (void)load_scenario("/nonexistent/where.scn");
        FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("/nonexistent/where.scn") != std::string::npos);
    }
}

TEST_CASE("metrics rows: schema and fixed formatting") {
    CHECK(std::string(kMetricsHeader) ==
          "volume,penetration,mode,seed,avg_travel_time,avg_abs_accel,vehicle_count,fault");
    MetricsRow r{1600.0, 0.6, ControlMode::LightOnly, 3, 21.123456789, 0.5, 42, false};
    CHECK(format_metrics_row(r) == "1600,0.60,light_only,3,21.123457,0.500000,42,0");
    std::ostringstream os;
    write_metrics_csv(os, {});
    CHECK(os.str() == std::string(kMetricsHeader) + "\n");
}

TEST_CASE("metrics: averages over completed vehicles") {
    EpisodeResult ep;
    CHECK(ep.avg_travel_time() == 0.0);
    ep.completed.push_back({1, 0, VehicleKind::Cav, 0.0, 20.0, 1.0});
    ep.completed.push_back({2, 1, VehicleKind::Hdv, 5.0, 35.0, 0.5});
    CHECK(ep.avg_travel_time() == doctest::Approx(25.0));
    CHECK(ep.avg_abs_accel() == doctest::Approx(0.75));
    ScenarioConfig cfg;
    cfg.demand.volume = 1200.0;
    cfg.seed = 9;
    const auto row = make_metrics_row(cfg, ep);
    CHECK(row.vehicle_count == 2);
    CHECK(row.seed == 9);
    CHECK_FALSE(row.fault);
}
