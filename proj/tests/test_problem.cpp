#include <doctest.h>

#include "tlc/problem.hpp"
#include "worlds.hpp"

#include <algorithm>
#include <cmath>
#include <random>

using namespace tlc;
using namespace tlc::testing;

namespace {

HorizonParams horizon(int H) {
    HorizonParams h;
    h.H = H;
    return h;
}

long count_family(const Instance& inst, RowFamily f) {
    return std::count_if(inst.coupling.begin(), inst.coupling.end(), [&](const CouplingRow& r) { return r.family == f; });
}

long count_local(const AgentProblem& ag, RowFamily f) {
    return std::count_if(ag.local.begin(), ag.local.end(), [&](const LocalRow& r) { return r.family == f; });
}

}  // namespace

TEST_CASE("stopping_ratio: braking rollout from v_max") {
    // 15 -> 1 m/s in 7 full steps of -4 (7+6+...+1 = 28 m), then a half-strength step covering 0.25 m.
    const ModelParams p;
    CHECK(stopping_ratio(p, 0.5) == doctest::Approx(28.25 / 15.0));
}

TEST_CASE("stopping_ratio bounds the braking distance at every speed") {
    const ModelParams p;
    const double alpha = stopping_ratio(p, 0.5);
    for (double v0 = 0.0; v0 <= p.v_max; v0 += 0.37) {
        double x = 0.0, v = v0;
        while (v > 0.0) {
            const auto n = step_dynamics(x, v, std::max(p.u_min, -v / 0.5), 0.5);
            x = n.p;
            v = std::max(0.0, n.v);
        }
        CHECK(x <= alpha * v0 + 1e-9);
    }
}

TEST_CASE("ready_to_stop examples") {
    // 10 m/s at -4 needs 12.5 m.
    CHECK(ready_to_stop(cav(1, 0, 40.0, 10.0), 58.0, -4.0, 3.0));
    CHECK_FALSE(ready_to_stop(cav(1, 0, 43.0, 10.0), 58.0, -4.0, 3.0));
    CHECK_FALSE(ready_to_stop(cav(1, 0, 58.0, 0.0), 58.0, -4.0, 0.0));
}

TEST_CASE("predict_hdv: constant deceleration stops and stays put") {
    auto h = hdv(1, 0, 10.0, 2.0);
    const std::vector<double> hist{4.0, 3.5, 3.0, 2.5, 2.0};  // -1 m/s^2 at dt = 0.5
    const auto pred = predict_hdv(hist, h, 6, 0.5, 15.0, 4);
    CHECK(pred.accel == doctest::Approx(-1.0));
    // Stops after 2 s having covered v^2 / 2 = 2 m.
    CHECK(pred.p[3] == doctest::Approx(12.0));
    CHECK(pred.p[5] == doctest::Approx(12.0));
    CHECK(pred.v[5] == 0.0);
}

TEST_CASE("priority_gamma and count_eta") {
    const auto geo = cross2();
    auto w = empty_world(2);
    CHECK(priority_gamma(w, geo, 0) == 0.0);
    w.lanes[0].push_back(cav(1, 0, 29.0, 5.0));
    CHECK(priority_gamma(w, geo, 0) == doctest::Approx(0.5));
    w.lanes[1].push_back(cav(2, 1, 30.0, 5.0));
    CHECK(count_eta(w, geo, 0, 1) == 0);  // CAV-CAV pairs are not counted
    w.lanes[1].insert(w.lanes[1].begin(), hdv(3, 1, 50.0, 5.0));
    CHECK(count_eta(w, geo, 0, 1) == 1);
    w.lanes[0][0].p = 70.0;  // crossed the node
    CHECK(count_eta(w, geo, 0, 1) == 0);
}

TEST_CASE("build_problem: empty intersection has lights only and no coupling") {
    const auto inst = build_problem(empty_world(2), cross2(), ModelParams{}, horizon(5));
    REQUIRE(inst.agents.size() == 2);
    CHECK(inst.coupling.empty());
    for (const auto& ag : inst.agents) {
        CHECK(ag.kind == AgentKind::Light);
        CHECK(ag.n == 6);
        CHECK(ag.local.empty());
        CHECK(ag.q.isZero());
    }
}

TEST_CASE("build_problem: agent layout and rear-end rows") {
    auto w = empty_world(1);
    w.lanes[0] = {cav(1, 0, 40.0, 10.0), cav(2, 0, 20.0, 10.0), hdv(3, 0, 10.0, 8.0), cav(4, 0, 0.0, 8.0)};
    const int H = 4;
    const auto inst = build_problem(w, single_lane(), ModelParams{}, horizon(H));
    REQUIRE(inst.agents.size() == 4);
    CHECK(inst.agents[1].cav.vid == 1);
    CHECK(inst.agents[3].cav.vid == 4);
    CHECK(count_family(inst, RowFamily::RearEnd) == H);                // CAV 2 behind CAV 1
    CHECK(count_local(inst.agents[3], RowFamily::RearEnd) == H);       // CAV 4 behind the HDV
    CHECK(count_local(inst.agents[1], RowFamily::RearEnd) == 0);
    CHECK(count_local(inst.agents[1], RowFamily::SpeedLimit) == 2 * H);
    // H red-stop rows plus the terminal one per CAV that can still stop.
    CHECK(count_family(inst, RowFamily::RedStop) == 3 * (H + 1));
    // The HDV makes the light's switch-gap rows active.
    CHECK(inst.agents[0].light.bounds_active);
    CHECK(count_local(inst.agents[0], RowFamily::SwitchGap) == 2);
    CHECK(inst.agents[0].neighbors == std::vector<int>{1, 2, 3});
}

TEST_CASE("build_problem: a CAV that cannot stop has no red-stop rows") {
    auto w = empty_world(1);
    w.lanes[0] = {cav(1, 0, 55.0, 12.0), cav(2, 0, 29.0, 5.0)};
    const auto inst = build_problem(w, single_lane(), ModelParams{}, horizon(4));
    CHECK(inst.agents[1].cav.in_box);
    CHECK_FALSE(inst.agents[2].cav.in_box);
    long front = 0, back = 0;
    for (const auto& r : inst.coupling) {
        if (r.family != RowFamily::RedStop) continue;
        (r.agent_a == 1 ? front : back)++;
    }
    CHECK(front == 0);
    CHECK(back == 5);
}

TEST_CASE("build_problem: modes treat CAV-CAV crossings differently") {
    auto w = empty_world(2);
    w.lanes[0].push_back(cav(1, 0, 40.0, 10.0));
    w.lanes[1].push_back(cav(2, 1, 40.0, 10.0));
    const int H = 5;
    const auto coord = build_problem(w, cross2(), ModelParams{}, horizon(H), ControlMode::Coordinated);
    CHECK(coord.pairs.size() == 1);
    CHECK(count_family(coord, RowFamily::NoConflict) == 0);
    CHECK(count_family(coord, RowFamily::LateralOr) == 1);
    CHECK(count_family(coord, RowFamily::LateralBigM) == 2 * (2 * H + 1));
    CHECK(coord.agents[0].light.binary_names.size() == 2);

    const auto lo = build_problem(w, cross2(), ModelParams{}, horizon(H), ControlMode::LightOnly);
    CHECK(lo.pairs.empty());
    CHECK(count_family(lo, RowFamily::NoConflict) == H);
    CHECK(count_family(lo, RowFamily::LateralOr) == 0);
}

TEST_CASE("build_problem: an HDV crossing makes the lights mutually exclusive") {
    auto w = empty_world(2);
    w.lanes[0].push_back(cav(1, 0, 40.0, 10.0));
    w.lanes[1].push_back(hdv(2, 1, 30.0, 10.0));
    const auto inst = build_problem(w, cross2(), ModelParams{}, horizon(4));
    CHECK(inst.pairs.empty());
    CHECK(count_family(inst, RowFamily::NoConflict) == 4);
}

TEST_CASE("build_problem: HDV rows on its light") {
    const int H = 6;
    SUBCASE("ready HDV predicted past the stop line needs green") {
        auto w = empty_world(1);
        w.lanes[0].push_back(hdv(1, 0, 30.0, 10.0));  // 20 m to stop, needs 28 m ahead
        const auto inst = build_problem(w, single_lane(), ModelParams{}, horizon(H));
        // Predicted at 35, 40, ..., 60: only offset 6 lies past 58.
        CHECK(count_local(inst.agents[0], RowFamily::RedStop) == 1);
    }
    SUBCASE("HDV that cannot stop comfortably keeps the light green until it crosses") {
        auto w = empty_world(1, 1);
        w.lanes[0].push_back(hdv(1, 0, 50.0, 10.0));
        const auto inst = build_problem(w, single_lane(), ModelParams{}, horizon(H));
        // 50 + 5k crosses 58 at k = 2.
        CHECK(count_local(inst.agents[0], RowFamily::MustGo) == 2);
    }
    SUBCASE("HDV inside the box holds the conflicting light red") {
        auto w = empty_world(2);
        w.lanes[0].push_back(hdv(1, 0, 60.0, 4.0));
        w.lanes[1].push_back(cav(2, 1, 30.0, 8.0));
        const auto inst = build_problem(w, cross2(), ModelParams{}, horizon(H));
        // Leaves 64 + 6 = 70 after 10 m at 4 m/s: offset 5.
        CHECK(count_local(inst.agents[1], RowFamily::Clearance) == 5);
        CHECK(count_local(inst.agents[0], RowFamily::Clearance) == 0);
    }
}

TEST_CASE("penalized cost is objective plus rho times summed violations") {
    auto w = empty_world(2);
    w.lanes[0].push_back(cav(1, 0, 40.0, 14.0));
    w.lanes[1].push_back(hdv(2, 1, 50.0, 10.0));
    const auto inst = build_problem(w, cross2(), ModelParams{}, horizon(5));
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-4.0, 3.0);
    for (int t = 0; t < 20; ++t) {
        Eigen::VectorXd u(5);
        for (int k = 0; k < 5; ++k) u[k] = U(rng);
        const auto x = cav_state(5, 0.5, 40.0, 14.0, u);
        const auto& ag = inst.agents[2];
        double pen = 0.0;
        for (const auto& r : ag.local) pen += std::max(0.0, r.a.dot(x) - r.b);
        CHECK(inst.penalized_cost(2, x) == doctest::Approx(ag.objective(x) + inst.params.rho * pen).epsilon(1e-12));
    }
}

TEST_CASE("cav_rollout matches step_dynamics") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> U(-4.0, 3.0);
    const auto roll = cav_rollout(7, 0.5, 12.0, 9.0);
    Eigen::VectorXd u(7);
    for (int k = 0; k < 7; ++k) u[k] = U(rng);
    const Eigen::VectorXd a = roll.T * u + roll.c;
    const auto b = cav_state(7, 0.5, 12.0, 9.0, u);
    CHECK((a - b).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("light_block_mip reproduces the light's schedule space") {
    auto w = empty_world(1);
    w.lanes[0].push_back(cav(1, 0, 20.0, 8.0));
    const auto inst = build_problem(w, single_lane(), ModelParams{}, horizon(4));
    std::vector<Eigen::VectorXd> xs{light_state(4, 0, 6, Eigen::VectorXd()),
                                    cav_state(4, 0.5, 20.0, 8.0, Eigen::VectorXd::Zero(4))};
    const auto lm = light_block_mip(inst, 0, xs);
    CHECK(lm.mip.integers.size() == 5);
    for (int kappa = 1; kappa <= 6; ++kappa) {
        const auto x = light_state(4, 0, kappa, Eigen::VectorXd());
        CHECK(lm.mip.qp.max_violation(x) <= 1e-9);
    }
    // A schedule that does not follow kappa breaks a linking row.
    Eigen::VectorXd bad = light_state(4, 0, 2, Eigen::VectorXd());
    bad[3] = 0.0;
    CHECK(lm.mip.qp.max_violation(bad) > 0.5);
}
