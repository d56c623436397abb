#include "tlc/mip.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace tlc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kTieTol = 1e-9;

struct NodeResult {
    bool feasible{false};
    bool exact{true};  // false when the QP stopped early; the value is then no bound
    Eigen::VectorXd x;
    double objective{kInf};
    double penalty{0.0};
    double violation{0.0};
};

// Solves the continuous problem with the integer coordinates boxed to [lo, hi].
// Coordinates with lo == hi are substituted out before the QP solve.
class NodeSolver {
public:
    NodeSolver(const MipProblem& prob, std::span<const int> local_rows, double rho, bool penalized,
               const QpSettings& qp)
        : prob_(prob), penalized_(penalized), rho_(rho), qp_settings_(qp) {
        is_local_.assign(static_cast<std::size_t>(prob.qp.m()), false);
        for (int row : local_rows) {
            if (row < 0 || row >= prob.qp.m()) throw std::invalid_argument("mip: local row out of range");
            is_local_[static_cast<std::size_t>(row)] = true;
        }
    }

    NodeResult solve(const std::vector<int>& lo, const std::vector<int>& hi) const {
        const auto& qp = prob_.qp;
        const int n = qp.n();
        Eigen::VectorXd lb = qp.lb();
        Eigen::VectorXd ub = qp.ub();
        for (std::size_t v = 0; v < prob_.integers.size(); ++v) {
            const int idx = prob_.integers[v].index;
            lb[idx] = lo[v];
            ub[idx] = hi[v];
        }
        std::vector<int> free;
        Eigen::VectorXd xfix = Eigen::VectorXd::Zero(n);
        for (int j = 0; j < n; ++j) {
            if (lb[j] == ub[j]) xfix[j] = lb[j];
            else free.push_back(j);
        }
        const auto nf = static_cast<int>(free.size());

        NodeResult out;
        const Eigen::VectorXd Pfix = qp.P() * xfix;
        const double constant = 0.5 * xfix.dot(Pfix) + qp.r().dot(xfix);
        const Eigen::VectorXd hres = qp.h() - qp.G() * xfix;

        // Rows with no free coordinate are decided here.
        std::vector<int> kept;
        double fixed_penalty_sum = 0.0;
        double fixed_violation = 0.0;
        for (int i = 0; i < qp.m(); ++i) {
            bool touches = false;
            for (int j : free) touches = touches || qp.G()(i, j) != 0.0;
            if (touches) {
                kept.push_back(i);
                continue;
            }
            const double viol = std::max(0.0, -hres[i]);
            if (penalized_ && is_local_[static_cast<std::size_t>(i)]) {
                fixed_penalty_sum += viol;
                fixed_violation = std::max(fixed_violation, viol);
            } else if (viol > 1e-9 * (1.0 + std::abs(qp.h()[i]))) {
                return out;
            }
        }

        Eigen::VectorXd x = xfix;
        double obj = constant;
        double pen_sum = fixed_penalty_sum;
        double violation = fixed_violation;
        if (nf > 0) {
            Eigen::MatrixXd P(nf, nf);
            Eigen::VectorXd r(nf), flb(nf), fub(nf);
            for (int a = 0; a < nf; ++a) {
                const int ja = free[static_cast<std::size_t>(a)];
                for (int b = 0; b < nf; ++b) P(a, b) = qp.P()(ja, free[static_cast<std::size_t>(b)]);
                r[a] = qp.r()[ja] + Pfix[ja];
                flb[a] = lb[ja];
                fub[a] = ub[ja];
            }
            const auto mk = static_cast<int>(kept.size());
            Eigen::MatrixXd G(mk, nf);
            Eigen::VectorXd h(mk);
            std::vector<int> local;
            for (int a = 0; a < mk; ++a) {
                const int i = kept[static_cast<std::size_t>(a)];
                for (int b = 0; b < nf; ++b) G(a, b) = qp.G()(i, free[static_cast<std::size_t>(b)]);
                h[a] = hres[i];
                if (penalized_ && is_local_[static_cast<std::size_t>(i)]) local.push_back(a);
            }
            const QpProblem sub(std::move(P), std::move(r), std::move(G), std::move(h), std::move(flb), std::move(fub));
            QpSolution sol;
            if (penalized_) {
                const auto pen = solve_penalized_qp(sub, local, rho_, qp_settings_);
                sol = pen.qp;
                pen_sum += pen.slack.sum();
                violation = std::max(violation, pen.local_violation);
            } else {
                sol = solve_qp(sub, qp_settings_);
            }
            if (sol.status == QpStatus::Infeasible) return out;
            out.exact = sol.status == QpStatus::Optimal;
            for (int a = 0; a < nf; ++a) x[free[static_cast<std::size_t>(a)]] = sol.x[a];
            obj = qp.objective(x);
        }
        out.feasible = true;
        out.x = std::move(x);
        out.penalty = rho_ * pen_sum;
        out.violation = violation;
        out.objective = obj + (penalized_ ? out.penalty : 0.0);
        return out;
    }

private:
    const MipProblem& prob_;
    bool penalized_;
    double rho_;
    QpSettings qp_settings_;
    std::vector<bool> is_local_;
};

class Search {
public:
    Search(const MipProblem& prob, const NodeSolver& node, const MipSettings& settings)
        : prob_(prob), node_(node), settings_(settings) {
        order_.resize(prob.integers.size());
        std::iota(order_.begin(), order_.end(), 0);
        std::stable_sort(order_.begin(), order_.end(), [&](std::size_t a, std::size_t b) {
            return prob.integers[a].name < prob.integers[b].name;
        });
        best_.search_space = prob.search_space();
    }

    MipSolution run() {
        const bool exhaustive = settings_.strategy == MipSettings::Strategy::Exhaustive ||
                                (settings_.strategy == MipSettings::Strategy::Auto &&
                                 prob_.search_space() <= settings_.exhaustive_limit);
        std::vector<int> lo(prob_.integers.size()), hi(prob_.integers.size());
        for (std::size_t v = 0; v < lo.size(); ++v) {
            lo[v] = prob_.integers[v].lo;
            hi[v] = prob_.integers[v].hi;
        }
        if (exhaustive) enumerate(lo, hi, 0);
        else branch(lo, hi, 0);
        return best_;
    }

private:
    [[nodiscard]] double tie_tol() const { return kTieTol * (1.0 + std::abs(best_.objective)); }

    void count_node() {
        if (++best_.nodes_explored > settings_.budget) {
            throw MipBudgetExceeded("mip: node budget of " + std::to_string(settings_.budget) + " exhausted", best_);
        }
    }

    void offer(const NodeResult& leaf) {
        if (!leaf.feasible) return;
        if (best_.status == MipStatus::Optimal && !(leaf.objective < best_.objective - tie_tol())) return;
        best_.status = MipStatus::Optimal;
        best_.x = leaf.x;
        best_.objective = leaf.objective;
        best_.penalty = leaf.penalty;
        best_.local_violation = leaf.violation;
    }

    void enumerate(std::vector<int>& lo, std::vector<int>& hi, std::size_t depth) {
        if (depth == order_.size()) {
            count_node();
            offer(node_.solve(lo, hi));
            return;
        }
        const std::size_t v = order_[depth];
        const int dlo = prob_.integers[v].lo, dhi = prob_.integers[v].hi;
        for (int val = dlo; val <= dhi; ++val) {
            lo[v] = hi[v] = val;
            enumerate(lo, hi, depth + 1);
        }
        lo[v] = dlo;
        hi[v] = dhi;
    }

    void branch(std::vector<int>& lo, std::vector<int>& hi, std::size_t depth) {
        count_node();
        const NodeResult rel = node_.solve(lo, hi);
        if (!rel.feasible) return;
        if (depth == order_.size()) {
            offer(rel);
            return;
        }
        if (rel.exact && best_.status == MipStatus::Optimal && rel.objective >= best_.objective - tie_tol()) return;
        const std::size_t v = order_[depth];
        const int dlo = lo[v], dhi = hi[v];
        for (int val = dlo; val <= dhi; ++val) {
            lo[v] = hi[v] = val;
            branch(lo, hi, depth + 1);
        }
        lo[v] = dlo;
        hi[v] = dhi;
    }

    const MipProblem& prob_;
    const NodeSolver& node_;
    const MipSettings& settings_;
    std::vector<std::size_t> order_;
    MipSolution best_;
};

MipSolution run_search(const MipProblem& prob, std::span<const int> local_rows, double rho, bool penalized,
                       const MipSettings& settings) {
    prob.validate();
    const NodeSolver node(prob, local_rows, rho, penalized, settings.qp);
    Search search(prob, node, settings);
    auto sol = search.run();
    if (sol.status != MipStatus::Optimal) sol.x = Eigen::VectorXd::Zero(prob.qp.n());
    return sol;
}

}  // namespace

double MipProblem::search_space() const {
    double total = 1.0;
    for (const auto& v : integers) total = std::min(1e18, total * (static_cast<double>(v.hi) - v.lo + 1.0));
    return total;
}

void MipProblem::validate() const {
    std::vector<bool> seen(static_cast<std::size_t>(qp.n()), false);
    for (const auto& v : integers) {
        if (v.index < 0 || v.index >= qp.n()) throw std::invalid_argument("mip: integer '" + v.name + "' has no column");
        if (seen[static_cast<std::size_t>(v.index)]) throw std::invalid_argument("mip: column declared integer twice");
        seen[static_cast<std::size_t>(v.index)] = true;
        if (v.lo > v.hi) throw std::invalid_argument("mip: empty domain for '" + v.name + "'");
        if (v.lo < qp.lb()[v.index] || v.hi > qp.ub()[v.index]) {
            throw std::invalid_argument("mip: domain of '" + v.name + "' leaves the variable box");
        }
    }
}

MipSolution solve_mip(const MipProblem& prob, const MipSettings& settings) {
    return run_search(prob, {}, 0.0, false, settings);
}

MipSolution solve_penalized_tlc(const MipProblem& prob, std::span<const int> local_rows, double rho,
                                const MipSettings& settings) {
    return run_search(prob, local_rows, rho, true, settings);
}

}  // namespace tlc
