#include <doctest.h>

#include "qp_oracle.hpp"
#include "tlc/qp.hpp"

#include <cstring>
#include <limits>
#include <random>
#include <vector>

using namespace tlc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

const double kInf = std::numeric_limits<double>::infinity();

MatrixXd mat(int rows, int cols, std::initializer_list<double> v) {
    MatrixXd M(rows, cols);
    auto it = v.begin();
    for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) M(i, j) = *it++;
    return M;
}

VectorXd vec(std::initializer_list<double> v) {
    VectorXd x(static_cast<Eigen::Index>(v.size()));
    int i = 0;
    for (double e : v) x[i++] = e;
    return x;
}

}  // namespace

TEST_CASE("solve_qp: active lower bound") {
    // min x^2 s.t. x >= 1
    const QpProblem prob(mat(1, 1, {2.0}), vec({0.0}), mat(1, 1, {-1.0}), vec({-1.0}));
    const auto sol = solve_qp(prob);
    REQUIRE(sol.status == QpStatus::Optimal);
    CHECK(sol.x[0] == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sol.objective == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(sol.kkt.max() <= 1e-6);
}

TEST_CASE("solve_qp: unconstrained minimizer") {
    // (x-3)^2 + (y+1)^2 = x^2 + y^2 - 6x + 2y + 10
    const QpProblem prob(2.0 * MatrixXd::Identity(2, 2), vec({-6.0, 2.0}), MatrixXd(0, 2), VectorXd(0));
    const auto sol = solve_qp(prob);
    REQUIRE(sol.status == QpStatus::Optimal);
    CHECK(sol.x[0] == doctest::Approx(3.0));
    CHECK(sol.x[1] == doctest::Approx(-1.0));
}

TEST_CASE("solve_qp: matches active-set enumeration on 50 seeded random QPs") {
    for (unsigned seed = 0; seed < 50; ++seed) {
        CAPTURE(seed);
        const auto q = testing::random_qp(seed);
        const auto ref = testing::enumerate_active_sets(q);
        REQUIRE(ref.feasible);
        const auto sol = solve_qp(QpProblem(q.P, q.r, q.G, q.h));
        REQUIRE(sol.status == QpStatus::Optimal);
        CHECK(std::abs(sol.objective - ref.objective) <= 1e-6);
        CHECK(sol.kkt.max() <= 1e-6);
    }
}

TEST_CASE("solve_qp: box bounds and an LP-like singular cost") {
    // min -x - y on the unit box with x + y <= 1.5
    const VectorXd lb = VectorXd::Zero(2), ub = VectorXd::Ones(2);
    const QpProblem prob(MatrixXd::Zero(2, 2), vec({-1.0, -1.0}), mat(1, 2, {1.0, 1.0}), vec({1.5}), lb, ub);
    const auto sol = solve_qp(prob);
    REQUIRE(sol.status == QpStatus::Optimal);
    CHECK(sol.objective == doctest::Approx(-1.5).epsilon(1e-9));
}

TEST_CASE("solve_qp: infeasible problem carries a Farkas certificate") {
    // x <= 0 and x >= 1
    const QpProblem prob(mat(1, 1, {2.0}), vec({0.0}), mat(2, 1, {1.0, -1.0}), vec({0.0, -1.0}));
    const auto sol = solve_qp(prob);
    REQUIRE(sol.status == QpStatus::Infeasible);
    REQUIRE(sol.farkas.size() == 2 + 2);
    CHECK(sol.farkas.minCoeff() >= 0.0);
    const VectorXd y = sol.farkas.head(2);
    CHECK((prob.G().transpose() * y).lpNorm<Eigen::Infinity>() <= 1e-9);
    CHECK(prob.h().dot(y) < 0.0);
    CHECK(sol.farkas_residual <= 1e-9);
}

TEST_CASE("QpProblem rejects an indefinite cost") {
    CHECK_THROWS_AS(QpProblem(mat(2, 2, {1.0, 0.0, 0.0, -1.0}), vec({0.0, 0.0}), MatrixXd(0, 2), VectorXd(0)),
                    std::invalid_argument);
    CHECK_THROWS_AS(QpProblem(mat(2, 2, {1.0, 2.0, 0.0, 1.0}), vec({0.0, 0.0}), MatrixXd(0, 2), VectorXd(0)),
                    std::invalid_argument);
}

TEST_CASE("solve_penalized_qp: examples") {
    SUBCASE("no rows at all") {
        const QpProblem prob(mat(1, 1, {2.0}), vec({0.0}), MatrixXd(0, 1), VectorXd(0));
        const auto sol = solve_penalized_qp(prob, {}, 1e6);
        CHECK(sol.qp.x[0] == doctest::Approx(0.0));
    }
    SUBCASE("hard x <= 0 against penalized x >= 1") {
        const QpProblem prob(mat(1, 1, {2.0}), vec({0.0}), mat(2, 1, {1.0, -1.0}), vec({0.0, -1.0}));
        const std::vector<int> local{1};
        const auto sol = solve_penalized_qp(prob, local, 1e6);
        REQUIRE(sol.qp.status == QpStatus::Optimal);
        CHECK(sol.qp.x[0] == doctest::Approx(0.0).epsilon(1e-9));
        CHECK(sol.penalty == doctest::Approx(1e6).epsilon(1e-9));
        CHECK(sol.local_violation == doctest::Approx(1.0));
    }
    SUBCASE("hard rows infeasible") {
        const QpProblem prob(mat(1, 1, {2.0}), vec({0.0}), mat(3, 1, {1.0, -1.0, 1.0}), vec({0.0, -1.0, 5.0}));
        const std::vector<int> local{2};
        CHECK(solve_penalized_qp(prob, local, 1e6).qp.status == QpStatus::Infeasible);
    }
}

namespace {

// A feasible double-integrator style instance: u in a box, rows over the rollout.
struct PenaltyCase {
    QpProblem prob;
    std::vector<int> local;
};

PenaltyCase random_penalty_case(unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    const int n = 3 + static_cast<int>(rng() % 6);
    const int m = 4 + static_cast<int>(rng() % 10);
    MatrixXd P = 0.2 * MatrixXd::Identity(n, n);
    VectorXd r(n);
    for (int i = 0; i < n; ++i) r[i] = -2.0 * std::abs(U(rng)) - 0.1;
    MatrixXd G(m, n);
    VectorXd h(m);
    VectorXd xf(n);
    for (int i = 0; i < n; ++i) xf[i] = U(rng);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) G(i, j) = U(rng);
        h[i] = G.row(i).dot(xf) + 0.3 * std::abs(U(rng));
    }
    std::vector<int> local;
    for (int i = 0; i < m; ++i)
        if (rng() % 2 == 0) local.push_back(i);
    return {QpProblem(P, r, G, h, VectorXd::Constant(n, -4.0), VectorXd::Constant(n, 3.0)), local};
}

}  // namespace

TEST_CASE("solve_penalized_qp: exact penalty on feasible instances") {
    for (unsigned seed = 100; seed < 160; ++seed) {
        CAPTURE(seed);
        const auto c = random_penalty_case(seed);
        const auto hard = solve_qp(c.prob);
        REQUIRE(hard.status == QpStatus::Optimal);
        for (const bool shortcut : {false, true}) {
            CAPTURE(shortcut);
            QpSettings st;
            st.penalty_shortcut = shortcut;
            const auto pen = solve_penalized_qp(c.prob, c.local, 1e6, st);
            REQUIRE(pen.qp.status == QpStatus::Optimal);
            CHECK(pen.local_violation <= 1e-6);
            CHECK((pen.qp.x - hard.x).lpNorm<Eigen::Infinity>() <= 1e-6);
            // Relaxation never costs more than the fully hard problem.
            CHECK(pen.objective <= hard.objective + 1e-6);
        }
    }
}

TEST_CASE("solve_penalized_qp: relaxation bound holds with a small weight") {
    for (unsigned seed = 200; seed < 230; ++seed) {
        const auto c = random_penalty_case(seed);
        const auto hard = solve_qp(c.prob);
        for (const bool shortcut : {false, true}) {
            QpSettings st;
            st.penalty_shortcut = shortcut;
            const auto pen = solve_penalized_qp(c.prob, c.local, 0.5, st);
            CHECK(pen.objective <= hard.objective + 1e-6);
        }
    }
}

TEST_CASE("solve_qp is deterministic") {
    const auto q = testing::random_qp(17);
    const QpProblem prob(q.P, q.r, q.G, q.h);
    const auto a = solve_qp(prob);
    const auto b = solve_qp(prob);
    REQUIRE(a.x.size() == b.x.size());
    CHECK(std::memcmp(a.x.data(), b.x.data(), sizeof(double) * static_cast<std::size_t>(a.x.size())) == 0);
    CHECK(a.objective == b.objective);
}
