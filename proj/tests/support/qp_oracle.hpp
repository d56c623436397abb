#pragma once

// Test-only reference solver: enumerates every active set of a small QP,
// solves the equality-constrained KKT system for each, and keeps the best
// point that is primal feasible with nonnegative multipliers.

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <random>

namespace tlc::testing {

struct EnumQp {
    Eigen::MatrixXd P;  // 0.5 x'Px + r'x
    Eigen::VectorXd r;
    Eigen::MatrixXd G;  // G x <= h
    Eigen::VectorXd h;
};

struct EnumResult {
    Eigen::VectorXd x;
    double objective{std::numeric_limits<double>::infinity()};
    bool feasible{false};
};

inline EnumResult enumerate_active_sets(const EnumQp& q) {
    const auto n = static_cast<int>(q.r.size());
    const auto m = static_cast<int>(q.h.size());
    EnumResult best;
    for (unsigned mask = 0; mask < (1u << m); ++mask) {
        std::vector<int> act;
        for (int i = 0; i < m; ++i) {
            if (mask & (1u << i)) act.push_back(i);
        }
        const auto k = static_cast<int>(act.size());
        if (k > n) continue;
        Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
        Eigen::VectorXd rhs(n + k);
        K.topLeftCorner(n, n) = q.P;
        rhs.head(n) = -q.r;
        for (int a = 0; a < k; ++a) {
            K.block(n + a, 0, 1, n) = q.G.row(act[static_cast<std::size_t>(a)]);
            K.block(0, n + a, n, 1) = q.G.row(act[static_cast<std::size_t>(a)]).transpose();
            rhs[n + a] = q.h[act[static_cast<std::size_t>(a)]];
        }
        Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
        if (!lu.isInvertible()) continue;
        const Eigen::VectorXd sol = lu.solve(rhs);
        const Eigen::VectorXd x = sol.head(n);
        const Eigen::VectorXd lam = sol.tail(k);
        if ((K * sol - rhs).lpNorm<Eigen::Infinity>() > 1e-8) continue;
        if (k > 0 && lam.minCoeff() < -1e-9) continue;
        if (m > 0 && (q.G * x - q.h).maxCoeff() > 1e-9) continue;
        const double obj = 0.5 * x.dot(q.P * x) + q.r.dot(x);
        if (!best.feasible || obj < best.objective) {
            best = {x, obj, true};
        }
    }
    return best;
}

/// Random feasible bounded QP. Even seeds get a positive definite P; odd seeds a
/// rank-deficient P with explicit bounding rows so the problem stays bounded.
inline EnumQp random_qp(unsigned seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> U(-1.0, 1.0);
    std::uniform_int_distribution<int> nd(1, 8);
    EnumQp q;
    const bool singular = seed % 2 == 1;
    const int n = singular ? std::uniform_int_distribution<int>(1, 5)(rng) : nd(rng);
    const int rank = singular ? std::max(0, n - 1 - static_cast<int>(rng() % 2)) : n;
    Eigen::MatrixXd B(n, std::max(rank, 1));
    for (int i = 0; i < B.rows(); ++i)
        for (int j = 0; j < B.cols(); ++j) B(i, j) = U(rng);
    if (rank == 0) B.setZero();
    q.P = B * B.transpose() + (singular ? 0.0 : 0.1) * Eigen::MatrixXd::Identity(n, n);
    q.r = Eigen::VectorXd(n);
    for (int i = 0; i < n; ++i) q.r[i] = 3.0 * U(rng);
    const int extra = std::uniform_int_distribution<int>(0, singular ? 12 - 2 * n : 12)(rng);
    const int m = (singular ? 2 * n : 0) + extra;
    q.G = Eigen::MatrixXd::Zero(m, n);
    q.h = Eigen::VectorXd(m);
    Eigen::VectorXd xf(n);
    for (int i = 0; i < n; ++i) xf[i] = U(rng);
    int row = 0;
    if (singular) {
        for (int i = 0; i < n; ++i) {
            q.G(row, i) = 1.0;
            q.h[row++] = 2.0;
            q.G(row, i) = -1.0;
            q.h[row++] = 2.0;
        }
    }
    for (; row < m; ++row) {
        for (int j = 0; j < n; ++j) q.G(row, j) = U(rng);
        q.h[row] = q.G.row(row).dot(xf) + 0.5 * std::abs(U(rng));
    }
    return q;
}

}  // namespace tlc::testing
