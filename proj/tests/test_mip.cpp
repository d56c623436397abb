#include <doctest.h>

#include "tlc/core_model.hpp"
#include "tlc/mip.hpp"

#include <random>
#include <string>
#include <vector>

using namespace tlc;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// Columns: kappa, s01..sH. Linking rows tie s to the schedule of kappa (s0 = 0),
// then any extra rows are appended.
struct LightMip {
    int H;
    std::vector<std::vector<double>> rows;  // coefficients over [kappa, s]
    std::vector<double> rhs;
    std::vector<int> local;

    void add(std::vector<double> row, double b, bool is_local = false) {
        if (is_local) local.push_back(static_cast<int>(rows.size()));
        rows.push_back(std::move(row));
        rhs.push_back(b);
    }

    MipProblem build(double gamma, int kappa_lo = 1) {
        const int n = 1 + H;
        const double big = H + 2;
        std::vector<std::vector<double>> all;
        std::vector<double> b;
        for (int k = 1; k <= H; ++k) {
            std::vector<double> a(n, 0.0), c(n, 0.0);
            a[0] = 1.0;
            a[k] = big;
            all.push_back(a);
            b.push_back(k + big);
            c[0] = -1.0;
            c[k] = -big;
            all.push_back(c);
            b.push_back(-k - 1.0);
        }
        const int shift = static_cast<int>(all.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            all.push_back(rows[i]);
            b.push_back(rhs[i]);
        }
        for (int& l : local) l += shift;
        MatrixXd G(static_cast<int>(all.size()), n);
        VectorXd h(static_cast<int>(all.size()));
        for (int i = 0; i < G.rows(); ++i) {
            for (int j = 0; j < n; ++j) G(i, j) = all[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
            h[i] = b[static_cast<std::size_t>(i)];
        }
        VectorXd r = VectorXd::Zero(n);
        for (int k = 1; k <= H; ++k) r[k] = -gamma;
        VectorXd lb = VectorXd::Zero(n), ub = VectorXd::Ones(n);
        lb[0] = 1;
        ub[0] = H + 2;
        MipProblem mip{QpProblem(MatrixXd::Zero(n, n), r, G, h, lb, ub), {}};
        mip.integers.push_back({"kappa", 0, kappa_lo, H + 2});
        for (int k = 1; k <= H; ++k) {
            const std::string name = (k < 10 ? "s0" : "s") + std::to_string(k);
            mip.integers.push_back({name, k, 0, 1});
        }
        return mip;
    }
};

std::vector<double> unit_row(int n, int j, double v) {
    std::vector<double> a(static_cast<std::size_t>(n), 0.0);
    a[static_cast<std::size_t>(j)] = v;
    return a;
}

MipProblem random_mip(unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    const int ni = 2 + static_cast<int>(rng() % 3);
    const int nc = static_cast<int>(rng() % 3);
    const int n = ni + nc;
    const int m = 2 + static_cast<int>(rng() % 5);
    MatrixXd A(n, n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) A(i, j) = U(rng);
    MatrixXd P = A.transpose() * A + 0.1 * MatrixXd::Identity(n, n);
    if (seed % 3 == 0) P.setZero();
    VectorXd r(n);
    for (int i = 0; i < n; ++i) r[i] = 2.0 * U(rng);
    MatrixXd G(m, n);
    VectorXd h(m);
    for (int i = 0; i < m; ++i) {
        for (int j = 0; j < n; ++j) G(i, j) = U(rng);
        h[i] = 1.5 * std::abs(U(rng)) + 0.2;
    }
    VectorXd lb = VectorXd::Constant(n, -2.0), ub = VectorXd::Constant(n, 3.0);
    MipProblem mip{QpProblem(P, r, G, h, lb, ub), {}};
    for (int j = 0; j < ni; ++j) mip.integers.push_back({"z" + std::to_string(j), j, -2, 3});
    return mip;
}

}  // namespace

TEST_CASE("solve_mip: light alone turns green as early as possible") {
    LightMip lm{5, {}, {}, {}};
    const auto sol = solve_mip(lm.build(2.0));
    REQUIRE(sol.status == MipStatus::Optimal);
    CHECK(sol.x[0] == 1.0);
    CHECK(sol.objective == doctest::Approx(-10.0));
    CHECK(sol.search_space == 7.0 * 32.0);
}

TEST_CASE("solve_mip: a red requirement at offsets 1 and 2 delays the switch") {
    LightMip lm{5, {}, {}, {}};
    lm.add(unit_row(6, 1, 1.0), 0.0);
    lm.add(unit_row(6, 2, 1.0), 0.0);
    const auto sol = solve_mip(lm.build(2.0));
    REQUIRE(sol.status == MipStatus::Optimal);
    CHECK(sol.x[0] == 3.0);
    CHECK(sol.objective == doctest::Approx(-6.0));
}

TEST_CASE("solve_mip: no integers reduces to solve_qp") {
    const QpProblem qp(2.0 * MatrixXd::Identity(2, 2), VectorXd::Constant(2, -2.0), MatrixXd::Ones(1, 2),
                       VectorXd::Constant(1, 1.0));
    const auto a = solve_mip({qp, {}});
    const auto b = solve_qp(qp);
    REQUIRE(a.status == MipStatus::Optimal);
    CHECK(a.objective == b.objective);
    CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() == 0.0);
}

TEST_CASE("solve_mip: branch and bound agrees with enumeration") {
    int feasible = 0;
    for (unsigned seed = 0; seed < 60; ++seed) {
        CAPTURE(seed);
        const auto mip = random_mip(seed);
        MipSettings ex, bb;
        ex.strategy = MipSettings::Strategy::Exhaustive;
        bb.strategy = MipSettings::Strategy::BranchAndBound;
        const auto a = solve_mip(mip, ex);
        const auto b = solve_mip(mip, bb);
        REQUIRE(a.status == b.status);
        if (a.status != MipStatus::Optimal) continue;
        ++feasible;
        CHECK(std::abs(a.objective - b.objective) <= 1e-7 * (1.0 + std::abs(a.objective)));
        CHECK(mip.qp.max_violation(b.x) <= 1e-6);
        for (const auto& v : mip.integers) CHECK(b.x[v.index] == std::round(b.x[v.index]));
    }
    CHECK(feasible >= 30);
}

TEST_CASE("solve_mip: ties resolve to the lexicographically smallest assignment") {
    const QpProblem qp(MatrixXd::Zero(2, 2), VectorXd::Zero(2), MatrixXd(0, 2), VectorXd(0), VectorXd::Zero(2),
                       VectorXd::Constant(2, 3.0));
    MipProblem mip{qp, {{"b", 0, 1, 3}, {"a", 1, 0, 3}}};
    for (auto strat : {MipSettings::Strategy::Exhaustive, MipSettings::Strategy::BranchAndBound}) {
        MipSettings st;
        st.strategy = strat;
        const auto sol = solve_mip(mip, st);
        CHECK(sol.x[0] == 1.0);
        CHECK(sol.x[1] == 0.0);
    }
}

TEST_CASE("solve_mip: budget exhaustion carries the incumbent") {
    LightMip lm{5, {}, {}, {}};
    MipSettings st;
    st.budget = 40;
    st.strategy = MipSettings::Strategy::Exhaustive;
    try {
        (void)solve_mip(lm.build(2.0), st);
        FAIL("expected MipBudgetExceeded");
    } catch (const MipBudgetExceeded& e) {
        CHECK(e.incumbent().nodes_explored == 41);
        CHECK(e.incumbent().status == MipStatus::Optimal);
    }
}

TEST_CASE("solve_penalized_tlc: penalty inactive matches the hard solve") {
    LightMip lm{5, {}, {}, {}};
    lm.add(unit_row(6, 0, -1.0), -2.0, true);  // kappa >= 2, satisfiable
    auto mip = lm.build(1.5);
    const auto pen = solve_penalized_tlc(mip, lm.local, 1e6);
    const auto hard = solve_mip(mip);
    REQUIRE(pen.status == MipStatus::Optimal);
    CHECK(pen.x[0] == hard.x[0]);
    CHECK(pen.objective == doctest::Approx(hard.objective));
    CHECK(pen.local_violation == 0.0);
}

TEST_CASE("solve_penalized_tlc: two-leaf exactness and its negative control") {
    // kappa in {1, 2} with H = 1: kappa = 1 greens offset 1 but breaks s01 <= 0.5 by 0.5.
    LightMip lm{1, {}, {}, {}};
    lm.add(unit_row(2, 1, 1.0), 0.5, true);
    auto mip = lm.build(10.0);
    mip.integers[0].hi = 2;
    const auto exact = solve_penalized_tlc(mip, lm.local, 1e6);
    REQUIRE(exact.status == MipStatus::Optimal);
    CHECK(exact.x[0] == 2.0);
    CHECK(exact.local_violation == 0.0);
    const auto none = solve_penalized_tlc(mip, lm.local, 0.0);
    CHECK(none.x[0] == 1.0);
    CHECK(none.local_violation == doctest::Approx(0.5));
    CHECK(none.objective == doctest::Approx(-10.0));
}

TEST_CASE("solve_mip is deterministic") {
    const auto mip = random_mip(7);
    const auto a = solve_mip(mip);
    const auto b = solve_mip(mip);
    CHECK(a.objective == b.objective);
    CHECK(a.nodes_explored == b.nodes_explored);
    CHECK((a.x - b.x).lpNorm<Eigen::Infinity>() == 0.0);
}
