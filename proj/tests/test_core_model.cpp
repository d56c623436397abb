#include <doctest.h>

#include "tlc/core_model.hpp"

#include <cmath>
#include <random>

using namespace tlc;

TEST_CASE("light_schedule examples") {
    CHECK(light_schedule(0, 3, 5) == std::vector<int>{0, 0, 1, 1, 1});
    CHECK(light_schedule(0, 7, 5) == std::vector<int>{0, 0, 0, 0, 0});
    CHECK(light_schedule(1, 1, 4) == std::vector<int>{0, 0, 0, 0});
    // kappa = H+1 and H+2 both leave the decided window unchanged.
    CHECK(light_schedule(1, 6, 5) == light_schedule(1, 7, 5));
    CHECK_THROWS_AS((void)light_schedule(0, 0, 5), DomainError);
    CHECK_THROWS_AS((void)light_schedule(0, 8, 5), DomainError);
}

TEST_CASE("light_schedule is monotone in kappa and switches at most once") {
    for (int H = 1; H <= 12; ++H) {
        for (int kappa = 1; kappa <= H + 1; ++kappa) {
            const auto a = light_schedule(0, kappa, H);
            const auto b = light_schedule(0, kappa + 1, H);
            for (int d = 0; d < H; ++d) CHECK(b[static_cast<std::size_t>(d)] <= a[static_cast<std::size_t>(d)]);
        }
        for (int s0 = 0; s0 <= 1; ++s0) {
            for (int kappa = 1; kappa <= H + 2; ++kappa) {
                const auto s = light_schedule(s0, kappa, H);
                int transitions = s[0] != s0 ? 1 : 0;
                for (std::size_t d = 1; d < s.size(); ++d) transitions += s[d] != s[d - 1] ? 1 : 0;
                CHECK(transitions <= 1);
            }
        }
    }
}

TEST_CASE("kappa_bounds examples") {
    const auto a = kappa_bounds(10, 25, 20, 100, 20);
    CHECK(a.lo == 5);
    CHECK(a.hi == 22);
    const auto b = kappa_bounds(40, 40, 20, 100, 5);
    CHECK(b.lo == 7);
    const auto c = kappa_bounds(0, 200, 20, 100, 20);
    CHECK(c.hi == 1);
    CHECK(c.lo == 1);
}

TEST_CASE("kappa_bounds always returns a nonempty interval inside 1..H+2") {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> H_d(1, 30);
    std::uniform_int_distribution<int> gap(0, 400);
    for (int trial = 0; trial < 2000; ++trial) {
        const int H = H_d(rng);
        const int dmin = gap(rng) % 60;
        const int dmax = dmin + gap(rng) % 200;
        const long kbar = gap(rng);
        const long k0 = kbar + gap(rng);
        const auto kb = kappa_bounds(kbar, k0, dmin, dmax, H);
        CHECK(kb.lo >= 1);
        CHECK(kb.hi <= H + 2);
        CHECK(kb.lo <= kb.hi);
    }
}

TEST_CASE("step_dynamics examples and closed form") {
    auto a = step_dynamics(0, 10, 0, 0.5);
    CHECK(a.p == doctest::Approx(5.0));
    CHECK(a.v == doctest::Approx(10.0));
    auto b = step_dynamics(0, 10, 2, 0.5);
    CHECK(b.p == doctest::Approx(5.25));
    CHECK(b.v == doctest::Approx(11.0));
    auto c = step_dynamics(100, 0, 0, 0.5);
    CHECK(c.p == 100.0);
    CHECK(c.v == 0.0);

    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> U(-4, 3), V(0, 15), P(0, 200);
    for (int trial = 0; trial < 200; ++trial) {
        const double p0 = P(rng), v0 = V(rng), u = U(rng), dt = 0.5;
        Kinematics s{p0, v0};
        for (int k = 1; k <= 25; ++k) {
            s = step_dynamics(s.p, s.v, u, dt);
            const double t = k * dt;
            const double p_ref = p0 + t * v0 + 0.5 * t * t * u;
            const double v_ref = v0 + t * u;
            CHECK(std::abs(s.p - p_ref) <= 1e-9 * std::max(1.0, std::abs(p_ref)));
            CHECK(std::abs(s.v - v_ref) <= 1e-9 * std::max(1.0, std::abs(v_ref)));
        }
    }
}

TEST_CASE("has_lateral_conflict uses the closed far-side crossing rule") {
    const ConflictNode node{0, 0, 1, 160.0, 160.0};
    VehicleState a, b;
    a.lane = 0;
    b.lane = 1;
    a.p = 50;
    b.p = 30;
    CHECK(has_lateral_conflict(a, b, node));
    a.p = 161;
    CHECK_FALSE(has_lateral_conflict(a, b, node));
    a.p = 160;
    CHECK_FALSE(has_lateral_conflict(a, b, node));
    VehicleState c;
    c.lane = 2;
    CHECK_THROWS_AS((void)has_lateral_conflict(a, c, node), DomainError);
}

TEST_CASE("intersection validation") {
    std::vector<LaneGeometry> lanes(2);
    lanes[0].lane_id = 0;
    lanes[1].lane_id = 1;
    const Intersection ok(lanes, {{0, 0, 1, 160.0, 158.0}});
    CHECK(ok.conflicting(0, 1));
    CHECK(ok.lane(1).node_pos(0).value() == 158.0);
    CHECK_THROWS_AS(Intersection(lanes, {{0, 0, 1, 140.0, 158.0}}), DomainError);
    CHECK_THROWS_AS(Intersection(lanes, {{0, 0, 0, 160.0, 158.0}}), DomainError);
}

TEST_CASE("model parameter validation") {
    ModelParams p;
    CHECK_NOTHROW(p.validate());
    p.rho = 1e5;
    CHECK_THROWS_AS(p.validate(), DomainError);
}
