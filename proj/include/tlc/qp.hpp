#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <stdexcept>

namespace tlc {

/// Dense convex QP
///
///     minimize    0.5 x'P x + r'x
///     subject to  G x <= h,   lb <= x <= ub.
///
/// Agent objectives are written f(x) = x'Q x + q'x, so callers pass P = 2Q.
/// Infinite entries of lb/ub mean "unbounded". The constructor rejects a
/// non-symmetric or indefinite P (min eigenvalue below -1e-8 * ||P||).
class QpProblem {
public:
    QpProblem(Eigen::MatrixXd P, Eigen::VectorXd r, Eigen::MatrixXd G, Eigen::VectorXd h, Eigen::VectorXd lb,
              Eigen::VectorXd ub);
    /// Unbounded variables.
    QpProblem(Eigen::MatrixXd P, Eigen::VectorXd r, Eigen::MatrixXd G, Eigen::VectorXd h);

    [[nodiscard]] int n() const noexcept { return static_cast<int>(r_.size()); }
    [[nodiscard]] int m() const noexcept { return static_cast<int>(h_.size()); }
    [[nodiscard]] const Eigen::MatrixXd& P() const noexcept { return P_; }
    [[nodiscard]] const Eigen::VectorXd& r() const noexcept { return r_; }
    [[nodiscard]] const Eigen::MatrixXd& G() const noexcept { return G_; }
    [[nodiscard]] const Eigen::VectorXd& h() const noexcept { return h_; }
    [[nodiscard]] const Eigen::VectorXd& lb() const noexcept { return lb_; }
    [[nodiscard]] const Eigen::VectorXd& ub() const noexcept { return ub_; }

    [[nodiscard]] double objective(const Eigen::VectorXd& x) const { return 0.5 * x.dot(P_ * x) + r_.dot(x); }
    /// Largest violation of G x <= h and the box.
    [[nodiscard]] double max_violation(const Eigen::VectorXd& x) const;

private:
    Eigen::MatrixXd P_;
    Eigen::VectorXd r_;
    Eigen::MatrixXd G_;
    Eigen::VectorXd h_;
    Eigen::VectorXd lb_;
    Eigen::VectorXd ub_;
};

enum class QpStatus { Optimal, Infeasible, MaxIter };

[[nodiscard]] const char* to_string(QpStatus status) noexcept;

struct KktResiduals {
    double stationarity{0.0};
    double primal{0.0};
    double complementarity{0.0};

    [[nodiscard]] double max() const noexcept;
};

struct QpSolution {
    Eigen::VectorXd x;
    QpStatus status{QpStatus::MaxIter};
    double objective{0.0};
    KktResiduals kkt;
    /// Multipliers for G rows, then lower bounds, then upper bounds (all >= 0).
    Eigen::VectorXd multipliers;
    /// Infeasible only: y >= 0 over the same row order with G'y ~ 0 and h'y < 0.
    Eigen::VectorXd farkas;
    double farkas_residual{0.0};
    int iterations{0};
};

struct QpSettings {
    double tol{1e-6};
    int max_iter{20000};
    std::optional<Eigen::VectorXd> x0;
    /// solve_penalized_qp: try the all-hard problem first and accept it when its
    /// local multipliers certify optimality for the penalized one.
    bool penalty_shortcut{true};
};

/// Exact (active-set) solve. Stationarity and complementarity residuals are
/// scaled by 1 + the largest gradient term so that large penalty multipliers
/// do not dominate the absolute value.
[[nodiscard]] QpSolution solve_qp(const QpProblem& prob, const QpSettings& settings = {});

struct PenalizedQpSolution {
    QpSolution qp;               // x restricted to the original variables
    Eigen::VectorXd slack;       // sigma = max(0, A_loc x - b_loc), one per local row
    double penalty{0.0};         // rho * sum(slack)
    double objective{0.0};       // f(x) + penalty
    double local_violation{0.0}; // infinity norm of slack
};

/// Minimizes f(x) + rho * 1'max(0, A_loc x - b_loc) subject to the remaining
/// ("hard") rows and the box. The max terms are handled through epigraph
/// slacks, so this is itself a QP solve. `local_rows` indexes rows of G.
[[nodiscard]] PenalizedQpSolution solve_penalized_qp(const QpProblem& prob, std::span<const int> local_rows,
                                                     double rho, const QpSettings& settings = {});

}  // namespace tlc
