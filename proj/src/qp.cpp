#include "tlc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

namespace tlc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_dims(const Eigen::MatrixXd& P, const Eigen::VectorXd& r, const Eigen::MatrixXd& G,
                const Eigen::VectorXd& h, const Eigen::VectorXd& lb, const Eigen::VectorXd& ub) {
    const auto n = r.size();
    if (P.rows() != n || P.cols() != n) throw std::invalid_argument("QpProblem: P must be n x n");
    if (G.cols() != n && G.rows() > 0) throw std::invalid_argument("QpProblem: G must have n columns");
    if (G.rows() != h.size()) throw std::invalid_argument("QpProblem: G and h row counts differ");
    if (lb.size() != n || ub.size() != n) throw std::invalid_argument("QpProblem: bound vectors must have length n");
    for (Eigen::Index i = 0; i < n; ++i) {
        if (lb[i] > ub[i]) throw std::invalid_argument("QpProblem: lb > ub at index " + std::to_string(i));
    }
}

void check_psd(const Eigen::MatrixXd& P) {
    if (P.size() == 0) return;
    const double scale = std::max(1.0, P.cwiseAbs().maxCoeff());
    if ((P - P.transpose()).cwiseAbs().maxCoeff() > 1e-10 * scale) {
        throw std::invalid_argument("QpProblem: P is not symmetric");
    }
    const bool diagonal = (P - Eigen::MatrixXd(P.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
    const double min_eig = diagonal ? P.diagonal().minCoeff()
                                    : Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(P, Eigen::EigenvaluesOnly)
                                          .eigenvalues()
                                          .minCoeff();
    if (min_eig < -1e-8 * P.norm()) throw std::invalid_argument("QpProblem: P is not positive semidefinite");
}

enum class DualStatus { Optimal, Infeasible, MaxIter };

struct DualResult {
    Eigen::VectorXd x;
    Eigen::VectorXd lambda;  // one per row of C (zero when inactive)
    Eigen::VectorXd farkas;
    DualStatus status{DualStatus::MaxIter};
    int iterations{0};
};

// Goldfarb-Idnani dual active-set method for
//     min 0.5 x'Gx + a'x  s.t.  C x >= d,
// with G = L L' positive definite and J = L^{-T} supplied by the caller.
// R and J are kept factored; constraints are added and dropped with Givens
// rotations so each step costs O(n^2).
class DualActiveSet {
public:
    DualActiveSet(const Eigen::LLT<Eigen::MatrixXd>& chol, const Eigen::MatrixXd& J, const Eigen::MatrixXd& C,
                  const Eigen::VectorXd& d)
        : chol_(chol), J0_(J), C_(C), d_(d) {}

    DualResult run(const Eigen::VectorXd& a, int max_iter, double feas_tol) {
        const auto n = static_cast<int>(a.size());
        const auto m = static_cast<int>(d_.size());
        J_ = J0_;
        R_ = Eigen::MatrixXd::Zero(n, n);
        u_ = Eigen::VectorXd::Zero(n);
        active_.clear();
        q_ = 0;
        r_norm_ = 1.0;

        DualResult res;
        res.x = -chol_.solve(a);
        res.lambda = Eigen::VectorXd::Zero(m);
        std::vector<char> in_active(static_cast<std::size_t>(m), 0);
        Eigen::VectorXd& x = res.x;

        int iter = 0;
        for (;;) {
            if (++iter > max_iter) {
                res.status = DualStatus::MaxIter;
                break;
            }
            int ip = -1;
            double worst = 0.0;
            if (m > 0) {
                const Eigen::VectorXd s = C_ * x - d_;
                for (int i = 0; i < m; ++i) {
                    if (in_active[static_cast<std::size_t>(i)]) continue;
                    const double tol_i = feas_tol * (1.0 + std::abs(d_[i]));
                    if (s[i] < -tol_i && s[i] < worst) {
                        worst = s[i];
                        ip = i;
                    }
                }
            }
            if (ip < 0) {
                res.status = DualStatus::Optimal;
                break;
            }

            const Eigen::VectorXd np = C_.row(ip).transpose();
            double u_p = 0.0;
            double s_p = np.dot(x) - d_[ip];
            bool added = false;
            while (!added) {
                if (++iter > max_iter) {
                    res.status = DualStatus::MaxIter;
                    res.iterations = iter;
                    collect(res);
                    return res;
                }
                Eigen::VectorXd dv = J_.transpose() * np;
                const Eigen::VectorXd tail = dv.tail(n - q_);
                const Eigen::VectorXd z = J_.rightCols(n - q_) * tail;
                Eigen::VectorXd rv(q_);
                if (q_ > 0) rv = R_.topLeftCorner(q_, q_).triangularView<Eigen::Upper>().solve(dv.head(q_));

                double t1 = kInf;
                int l = -1;
                for (int k = 0; k < q_; ++k) {
                    if (rv[k] > 0.0) {
                        const double cand = u_[k] / rv[k];
                        if (cand < t1) {
                            t1 = cand;
                            l = k;
                        }
                    }
                }
                const bool z_zero = tail.norm() <= 1e-12 * std::max(1.0, dv.norm());
                const double t2 = z_zero ? kInf : -s_p / z.dot(np);

                if (t1 == kInf && t2 == kInf) {
                    res.status = DualStatus::Infeasible;
                    res.farkas = Eigen::VectorXd::Zero(m);
                    res.farkas[ip] = 1.0;
                    for (int k = 0; k < q_; ++k) res.farkas[active_[static_cast<std::size_t>(k)]] = -rv[k];
                    res.iterations = iter;
                    collect(res);
                    return res;
                }
                if (t2 == kInf) {
                    u_.head(q_) -= t1 * rv;
                    u_p += t1;
                    in_active[static_cast<std::size_t>(active_[static_cast<std::size_t>(l)])] = 0;
                    drop(l);
                    continue;
                }
                const double t = std::min(t1, t2);
                x += t * z;
                if (q_ > 0) u_.head(q_) -= t * rv;
                u_p += t;
                if (t2 <= t1) {
                    if (!add(dv)) {
                        // Numerically dependent on the active set: the row cannot be satisfied.
                        res.status = DualStatus::Infeasible;
                        res.farkas = Eigen::VectorXd::Zero(m);
                        res.farkas[ip] = 1.0;
                        for (int k = 0; k < static_cast<int>(active_.size()); ++k) {
                            res.farkas[active_[static_cast<std::size_t>(k)]] = std::max(0.0, -rv[k]);
                        }
                        res.iterations = iter;
                        collect(res);
                        return res;
                    }
                    active_.push_back(ip);
                    u_[q_ - 1] = u_p;
                    in_active[static_cast<std::size_t>(ip)] = 1;
                    added = true;
                } else {
                    in_active[static_cast<std::size_t>(active_[static_cast<std::size_t>(l)])] = 0;
                    drop(l);
                    s_p = np.dot(x) - d_[ip];
                }
            }
        }
        res.iterations = iter;
        collect(res);
        return res;
    }

private:
    void collect(DualResult& res) const {
        for (int k = 0; k < q_; ++k) res.lambda[active_[static_cast<std::size_t>(k)]] = u_[k];
    }

    bool add(Eigen::VectorXd& dv) {
        const auto n = static_cast<int>(dv.size());
        for (int j = n - 1; j >= q_ + 1; --j) {
            double cc = dv[j - 1];
            double ss = dv[j];
            const double h = std::hypot(cc, ss);
            if (h == 0.0) continue;
            dv[j] = 0.0;
            ss /= h;
            cc /= h;
            if (cc < 0.0) {
                cc = -cc;
                ss = -ss;
                dv[j - 1] = -h;
            } else {
                dv[j - 1] = h;
            }
            const double xny = ss / (1.0 + cc);
            for (int k = 0; k < n; ++k) {
                const double t1 = J_(k, j - 1);
                const double t2 = J_(k, j);
                J_(k, j - 1) = t1 * cc + t2 * ss;
                J_(k, j) = xny * (t1 + J_(k, j - 1)) - t2;
            }
        }
        ++q_;
        R_.col(q_ - 1).head(q_) = dv.head(q_);
        if (std::abs(dv[q_ - 1]) <= std::numeric_limits<double>::epsilon() * r_norm_) {
            --q_;
            return false;
        }
        r_norm_ = std::max(r_norm_, std::abs(dv[q_ - 1]));
        return true;
    }

    void drop(int l) {
        const auto n = static_cast<int>(J_.rows());
        for (int i = l + 1; i < q_; ++i) {
            active_[static_cast<std::size_t>(i - 1)] = active_[static_cast<std::size_t>(i)];
            u_[i - 1] = u_[i];
            R_.col(i - 1) = R_.col(i);
        }
        active_.pop_back();
        u_[q_ - 1] = 0.0;
        R_.col(q_ - 1).setZero();
        --q_;
        for (int j = l; j < q_; ++j) {
            double cc = R_(j, j);
            double ss = R_(j + 1, j);
            const double h = std::hypot(cc, ss);
            if (h == 0.0) continue;
            cc /= h;
            ss /= h;
            R_(j + 1, j) = 0.0;
            if (cc < 0.0) {
                R_(j, j) = -h;
                cc = -cc;
                ss = -ss;
            } else {
                R_(j, j) = h;
            }
            const double xny = ss / (1.0 + cc);
            for (int k = j + 1; k < q_; ++k) {
                const double t1 = R_(j, k);
                const double t2 = R_(j + 1, k);
                R_(j, k) = t1 * cc + t2 * ss;
                R_(j + 1, k) = xny * (t1 + R_(j, k)) - t2;
            }
            for (int k = 0; k < n; ++k) {
                const double t1 = J_(k, j);
                const double t2 = J_(k, j + 1);
                J_(k, j) = t1 * cc + t2 * ss;
                J_(k, j + 1) = xny * (J_(k, j) + t1) - t2;
            }
        }
    }

    const Eigen::LLT<Eigen::MatrixXd>& chol_;
    const Eigen::MatrixXd& J0_;
    const Eigen::MatrixXd& C_;
    const Eigen::VectorXd& d_;
    Eigen::MatrixXd J_;
    Eigen::MatrixXd R_;
    Eigen::VectorXd u_;
    std::vector<int> active_;
    int q_{0};
    double r_norm_{1.0};
};

// Row bookkeeping between the user's (G, lb, ub) layout and the internal C x >= d rows.
struct RowMap {
    enum class Kind { G, Lower, Upper };
    Kind kind;
    int index;
    double norm;
};

}  // namespace

QpProblem::QpProblem(Eigen::MatrixXd P, Eigen::VectorXd r, Eigen::MatrixXd G, Eigen::VectorXd h, Eigen::VectorXd lb,
                     Eigen::VectorXd ub)
    : P_(std::move(P)), r_(std::move(r)), G_(std::move(G)), h_(std::move(h)), lb_(std::move(lb)), ub_(std::move(ub)) {
    if (G_.rows() == 0) G_.resize(0, r_.size());
    check_dims(P_, r_, G_, h_, lb_, ub_);
    check_psd(P_);
}

QpProblem::QpProblem(Eigen::MatrixXd P, Eigen::VectorXd r, Eigen::MatrixXd G, Eigen::VectorXd h)
    : QpProblem(std::move(P), r, std::move(G), std::move(h), Eigen::VectorXd::Constant(r.size(), -kInf),
                Eigen::VectorXd::Constant(r.size(), kInf)) {}

double QpProblem::max_violation(const Eigen::VectorXd& x) const {
    double v = 0.0;
    if (m() > 0) v = std::max(v, (G_ * x - h_).maxCoeff());
    for (int i = 0; i < n(); ++i) v = std::max({v, lb_[i] - x[i], x[i] - ub_[i]});
    return v;
}

const char* to_string(QpStatus status) noexcept {
    switch (status) {
        case QpStatus::Optimal: return "optimal";
        case QpStatus::Infeasible: return "infeasible";
        case QpStatus::MaxIter: return "max_iter";
    }
    return "?";
}

double KktResiduals::max() const noexcept { return std::max({stationarity, primal, complementarity}); }

QpSolution solve_qp(const QpProblem& prob, const QpSettings& settings) {
    const int n = prob.n();
    const int m = prob.m();
    const auto& P = prob.P();
    const auto& r = prob.r();
    const auto& G = prob.G();
    const auto& h = prob.h();
    const auto& lb = prob.lb();
    const auto& ub = prob.ub();

    QpSolution sol;
    sol.multipliers = Eigen::VectorXd::Zero(m + 2 * n);
    auto user_index = [&](const RowMap& rm) {
        switch (rm.kind) {
            case RowMap::Kind::G: return rm.index;
            case RowMap::Kind::Lower: return m + rm.index;
            case RowMap::Kind::Upper: return m + n + rm.index;
        }
        return 0;
    };

    // Rows whose maximum over the box cannot exceed the bound never bind and are skipped.
    std::vector<RowMap> rows;
    std::vector<Eigen::VectorXd> crow;
    std::vector<double> drow;
    for (int i = 0; i < m; ++i) {
        const Eigen::VectorXd g = G.row(i).transpose();
        const double norm = g.norm();
        if (norm == 0.0) {
            if (h[i] < -settings.tol) {
                sol.status = QpStatus::Infeasible;
                sol.x = Eigen::VectorXd::Zero(n);
                sol.farkas = Eigen::VectorXd::Zero(m + 2 * n);
                sol.farkas[i] = 1.0;
                return sol;
            }
            continue;
        }
        double upper = 0.0;
        for (int j = 0; j < n && upper < kInf; ++j) {
            if (g[j] > 0) upper += g[j] * ub[j];
            else if (g[j] < 0) upper += g[j] * lb[j];
        }
        if (upper <= h[i] - 1e-12 * (1.0 + std::abs(h[i]))) continue;
        rows.push_back({RowMap::Kind::G, i, norm});
        crow.emplace_back(-g / norm);
        drow.push_back(-h[i] / norm);
    }
    for (int j = 0; j < n; ++j) {
        if (std::isfinite(lb[j])) {
            rows.push_back({RowMap::Kind::Lower, j, 1.0});
            crow.emplace_back(Eigen::VectorXd::Unit(n, j));
            drow.push_back(lb[j]);
        }
        if (std::isfinite(ub[j])) {
            rows.push_back({RowMap::Kind::Upper, j, 1.0});
            crow.emplace_back(-Eigen::VectorXd::Unit(n, j));
            drow.push_back(-ub[j]);
        }
    }
    const auto mc = static_cast<int>(rows.size());
    Eigen::MatrixXd C(mc, n);
    Eigen::VectorXd d(mc);
    for (int i = 0; i < mc; ++i) {
        C.row(i) = crow[static_cast<std::size_t>(i)].transpose();
        d[i] = drow[static_cast<std::size_t>(i)];
    }

    // Positive definite P: one dual active-set solve. Otherwise a proximal-point
    // outer loop on P + mu I, which converges to an exact minimizer of the original.
    const double pscale = n > 0 ? std::max(1.0, P.diagonal().cwiseAbs().maxCoeff()) : 1.0;
    double mu = 0.0;
    Eigen::LLT<Eigen::MatrixXd> chol(P);
    if (n > 0) {
        const bool pd = chol.info() == Eigen::Success &&
                        Eigen::MatrixXd(chol.matrixL()).diagonal().array().square().minCoeff() >= 1e-10 * pscale;
        if (!pd) {
            mu = 1e-6 * pscale;
            chol.compute(P + mu * Eigen::MatrixXd::Identity(n, n));
        }
    }
    const Eigen::MatrixXd J =
        n > 0 ? Eigen::MatrixXd(chol.matrixU().solve(Eigen::MatrixXd::Identity(n, n))) : Eigen::MatrixXd(0, 0);

    DualActiveSet das(chol, J, C, d);
    Eigen::VectorXd x_prev = settings.x0 && settings.x0->size() == n ? *settings.x0 : Eigen::VectorXd::Zero(n);
    DualResult res;
    int outer = 0;
    int total_iter = 0;
    const int max_outer = mu > 0.0 ? 500 : 1;
    bool converged = false;
    for (; outer < max_outer; ++outer) {
        const Eigen::VectorXd a = mu > 0.0 ? Eigen::VectorXd(r - mu * x_prev) : r;
        res = das.run(a, settings.max_iter, 1e-11);
        total_iter += res.iterations;
        if (res.status != DualStatus::Optimal) break;
        if (mu == 0.0) {
            converged = true;
            break;
        }
        // The prox term is the only stationarity defect w.r.t. the original problem.
        const double step = (res.x - x_prev).lpNorm<Eigen::Infinity>();
        // Remaining error along a direction of curvature c is about step * mu / c.
        const double xscale = 1.0 + res.x.lpNorm<Eigen::Infinity>();
        x_prev = res.x;
        if (step <= 1e-11 * xscale || mu * step <= 1e-12 * pscale * xscale) {
            converged = true;
            break;
        }
    }
    sol.iterations = total_iter;
    sol.x = res.x;

    if (res.status == DualStatus::Infeasible) {
        sol.status = QpStatus::Infeasible;
        sol.farkas = Eigen::VectorXd::Zero(m + 2 * n);
        Eigen::VectorXd combo = Eigen::VectorXd::Zero(n);
        double rhs = 0.0;
        for (int i = 0; i < mc; ++i) {
            const double y = res.farkas[i];
            if (y == 0.0) continue;
            // y_i scales a normalized ">=" row; map back to the user's "<=" row.
            const auto& rm = rows[static_cast<std::size_t>(i)];
            const double yu = y / rm.norm;
            sol.farkas[user_index(rm)] += yu;
            combo += y * C.row(i).transpose();
            rhs += y * d[i];
        }
        sol.farkas_residual = combo.lpNorm<Eigen::Infinity>();
        sol.objective = prob.objective(sol.x);
        (void)rhs;
        return sol;
    }

    Eigen::VectorXd lambda = res.lambda;
    const Eigen::VectorXd Px = P * sol.x;
    const Eigen::VectorXd Ctl = mc > 0 ? Eigen::VectorXd(C.transpose() * lambda) : Eigen::VectorXd::Zero(n);
    const double gscale =
        1.0 + std::max({Px.lpNorm<Eigen::Infinity>(), r.lpNorm<Eigen::Infinity>(), Ctl.lpNorm<Eigen::Infinity>()});
    sol.kkt.stationarity = n > 0 ? (Px + r - Ctl).lpNorm<Eigen::Infinity>() / gscale : 0.0;
    double primal = 0.0;
    double comp = 0.0;
    if (mc > 0) {
        const Eigen::VectorXd s = C * sol.x - d;
        for (int i = 0; i < mc; ++i) {
            primal = std::max(primal, -s[i]);
            comp = std::max(comp, std::abs(lambda[i] * s[i]));
            const auto& rm = rows[static_cast<std::size_t>(i)];
            sol.multipliers[user_index(rm)] = lambda[i] / rm.norm;
        }
    }
    // Skipped redundant rows are still reported in the primal residual.
    if (m > 0) primal = std::max(primal, ((G * sol.x - h).array() / G.rowwise().norm().array().max(1e-300)).maxCoeff());
    sol.kkt.primal = std::max(0.0, primal);
    sol.kkt.complementarity = comp / gscale;
    sol.objective = prob.objective(sol.x);
    sol.status = converged && sol.kkt.max() <= settings.tol ? QpStatus::Optimal : QpStatus::MaxIter;
    return sol;
}

PenalizedQpSolution solve_penalized_qp(const QpProblem& prob, std::span<const int> local_rows, double rho,
                                       const QpSettings& settings) {
    const int n = prob.n();
    const int m = prob.m();
    const auto k = static_cast<int>(local_rows.size());
    std::vector<int> slack_of(static_cast<std::size_t>(m), -1);
    for (int j = 0; j < k; ++j) {
        const int row = local_rows[static_cast<std::size_t>(j)];
        if (row < 0 || row >= m) throw std::invalid_argument("solve_penalized_qp: local row out of range");
        if (slack_of[static_cast<std::size_t>(row)] >= 0) throw std::invalid_argument("solve_penalized_qp: duplicate local row");
        slack_of[static_cast<std::size_t>(row)] = j;
    }

    // If the fully hard problem is solvable and no local multiplier exceeds rho,
    // sigma = 0 satisfies the KKT conditions of the epigraph form as well.
    if (k > 0 && settings.penalty_shortcut) {
        QpSolution hard = solve_qp(prob, settings);
        bool exact = hard.status == QpStatus::Optimal;
        for (int j = 0; exact && j < k; ++j) exact = hard.multipliers[local_rows[static_cast<std::size_t>(j)]] <= rho * (1.0 - 1e-9);
        if (exact) {
            PenalizedQpSolution out;
            out.qp = std::move(hard);
            out.slack = Eigen::VectorXd::Zero(k);
            for (int j = 0; j < k; ++j) {
                const int row = local_rows[static_cast<std::size_t>(j)];
                out.slack[j] = std::max(0.0, prob.G().row(row).dot(out.qp.x) - prob.h()[row]);
            }
            out.local_violation = out.slack.maxCoeff();
            out.penalty = rho * out.slack.sum();
            out.objective = out.qp.objective + out.penalty;
            return out;
        }
    }

    // Epigraph form over [x; sigma]: min f(x) + rho 1'sigma, A_loc x - sigma <= b_loc, sigma >= 0.
    const int na = n + k;
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(na, na);
    P.topLeftCorner(n, n) = prob.P();
    Eigen::VectorXd r(na);
    r.head(n) = prob.r();
    r.tail(k).setConstant(rho);
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(m, na);
    G.leftCols(n) = prob.G();
    for (int i = 0; i < m; ++i) {
        if (slack_of[static_cast<std::size_t>(i)] >= 0) G(i, n + slack_of[static_cast<std::size_t>(i)]) = -1.0;
    }
    Eigen::VectorXd lb(na);
    Eigen::VectorXd ub(na);
    lb.head(n) = prob.lb();
    ub.head(n) = prob.ub();
    lb.tail(k).setZero();
    ub.tail(k).setConstant(kInf);

    QpSettings inner = settings;
    if (settings.x0 && settings.x0->size() == n) {
        Eigen::VectorXd x0(na);
        x0.head(n) = *settings.x0;
        for (int j = 0; j < k; ++j) {
            const int row = local_rows[static_cast<std::size_t>(j)];
            x0[n + j] = std::max(0.0, prob.G().row(row).dot(*settings.x0) - prob.h()[row]);
        }
        inner.x0 = x0;
    } else {
        inner.x0.reset();
    }

    const QpProblem aug(std::move(P), std::move(r), std::move(G), prob.h(), std::move(lb), std::move(ub));
    QpSolution full = solve_qp(aug, inner);

    PenalizedQpSolution out;
    out.qp = full;
    out.qp.x = full.x.head(n);
    if (full.multipliers.size() == m + 2 * na) {
        Eigen::VectorXd mult(m + 2 * n);
        mult << full.multipliers.head(m), full.multipliers.segment(m, n), full.multipliers.segment(m + na, n);
        out.qp.multipliers = mult;
    }
    out.slack = Eigen::VectorXd::Zero(k);
    for (int j = 0; j < k; ++j) {
        const int row = local_rows[static_cast<std::size_t>(j)];
        out.slack[j] = std::max(0.0, prob.G().row(row).dot(out.qp.x) - prob.h()[row]);
    }
    out.local_violation = k > 0 ? out.slack.maxCoeff() : 0.0;
    out.penalty = rho * out.slack.sum();
    out.qp.objective = prob.objective(out.qp.x);
    out.objective = out.qp.objective + out.penalty;
    return out;
}

}  // namespace tlc
