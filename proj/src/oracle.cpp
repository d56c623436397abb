#include "tlc/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <unordered_map>

namespace tlc {

namespace {

constexpr double kLeafTol = 1e-9;

bool is_light(const Instance& inst, int agent) {
    return inst.agents[static_cast<std::size_t>(agent)].kind == AgentKind::Light;
}

// x_i = T z + c over the free coordinates z of a continuous block.
struct Affine {
    Eigen::MatrixXd T;
    Eigen::VectorXd c;
    Eigen::VectorXd lb, ub;
};

Affine affine_of(const Instance& inst, const AgentProblem& ag) {
    Affine a;
    if (ag.kind == AgentKind::Cav) {
        auto roll = cav_rollout(inst.H(), inst.horizon.dt, ag.cav.p0, ag.cav.v0);
        a.T = std::move(roll.T);
        a.c = std::move(roll.c);
        a.lb = Eigen::VectorXd::Constant(inst.H(), inst.params.u_min);
        a.ub = Eigen::VectorXd::Constant(inst.H(), inst.params.u_max);
    } else {
        const double inf = std::numeric_limits<double>::infinity();
        a.T = Eigen::MatrixXd::Identity(ag.n, ag.n);
        a.c = Eigen::VectorXd::Zero(ag.n);
        a.lb = ag.lb.size() == ag.n ? ag.lb : Eigen::VectorXd::Constant(ag.n, -inf);
        a.ub = ag.ub.size() == ag.n ? ag.ub : Eigen::VectorXd::Constant(ag.n, inf);
    }
    return a;
}

// Continuous agents in `free` solved jointly; every other block is read from `xs`.
// Local rows of the free agents are penalized, coupling rows touching them are hard.
class JointProblem {
public:
    JointProblem(const Instance& inst, std::vector<int> free) : inst_(inst), free_(std::move(free)) {
        offset_.assign(inst.agents.size(), -1);
        int nz = 0;
        for (int i : free_) {
            offset_[static_cast<std::size_t>(i)] = nz;
            maps_.push_back(affine_of(inst, inst.agents[static_cast<std::size_t>(i)]));
            nz += static_cast<int>(maps_.back().T.cols());
        }
        nz_ = nz;
        P_ = Eigen::MatrixXd::Zero(nz, nz);
        r_ = Eigen::VectorXd::Zero(nz);
        lb_.resize(nz);
        ub_.resize(nz);
        for (std::size_t j = 0; j < free_.size(); ++j) {
            const auto& ag = inst.agents[static_cast<std::size_t>(free_[j])];
            const auto& m = maps_[j];
            const int o = offset_[static_cast<std::size_t>(free_[j])];
            const auto w = static_cast<int>(m.T.cols());
            P_.block(o, o, w, w) = 2.0 * m.T.transpose() * ag.Q * m.T;
            r_.segment(o, w) = m.T.transpose() * (2.0 * ag.Q * m.c + ag.q);
            lb_.segment(o, w) = m.lb;
            ub_.segment(o, w) = m.ub;
        }
        P_ = 0.5 * (P_ + P_.transpose());
        for (std::size_t r = 0; r < inst.coupling.size(); ++r) {
            const auto& row = inst.coupling[r];
            if (slot(row.agent_a) >= 0 || slot(row.agent_b) >= 0) rows_.push_back(static_cast<int>(r));
        }
    }

    [[nodiscard]] int size() const noexcept { return nz_; }

    struct Result {
        QpStatus status{QpStatus::MaxIter};
        std::vector<Eigen::VectorXd> x;  // per free agent
    };

    Result solve(const std::vector<Eigen::VectorXd>& xs, bool penalize_local, const QpSettings& qp) const {
        std::vector<std::pair<std::vector<std::pair<int, double>>, double>> rows;
        std::vector<int> local;
        // Adds a'x_agent to the row being built, or moves it to the right-hand side when fixed.
        auto add_part = [&](std::vector<std::pair<int, double>>& lhs, double& rhs, int agent, const SparseRow& a) {
            const int s = slot(agent);
            if (s < 0) {
                rhs -= a.dot(xs[static_cast<std::size_t>(agent)]);
                return;
            }
            const auto& m = maps_[static_cast<std::size_t>(s)];
            const int o = offset_[static_cast<std::size_t>(agent)];
            for (std::size_t t = 0; t < a.idx.size(); ++t) {
                rhs -= a.val[t] * m.c[a.idx[t]];
                for (int j = 0; j < m.T.cols(); ++j) {
                    const double v = a.val[t] * m.T(a.idx[t], j);
                    if (v != 0.0) lhs.emplace_back(o + j, v);
                }
            }
        };
        for (int i : free_) {
            for (const auto& lr : inst_.agents[static_cast<std::size_t>(i)].local) {
                std::vector<std::pair<int, double>> lhs;
                double rhs = lr.b;
                add_part(lhs, rhs, i, lr.a);
                if (penalize_local) local.push_back(static_cast<int>(rows.size()));
                rows.emplace_back(std::move(lhs), rhs);
            }
        }
        for (int r : rows_) {
            const auto& row = inst_.coupling[static_cast<std::size_t>(r)];
            std::vector<std::pair<int, double>> lhs;
            double rhs = row.d;
            add_part(lhs, rhs, row.agent_a, row.ca);
            add_part(lhs, rhs, row.agent_b, row.cb);
            rows.emplace_back(std::move(lhs), rhs);
        }
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(static_cast<int>(rows.size()), nz_);
        Eigen::VectorXd h(static_cast<int>(rows.size()));
        for (std::size_t k = 0; k < rows.size(); ++k) {
            for (const auto& [j, v] : rows[k].first) G(static_cast<int>(k), j) += v;
            h[static_cast<int>(k)] = rows[k].second;
        }
        const QpProblem prob(P_, r_, std::move(G), std::move(h), lb_, ub_);
        Result out;
        Eigen::VectorXd z;
        if (penalize_local) {
            const auto sol = solve_penalized_qp(prob, local, inst_.params.rho, qp);
            out.status = sol.qp.status;
            z = sol.qp.x;
        } else {
            const auto sol = solve_qp(prob, qp);
            out.status = sol.status;
            z = sol.x;
        }
        if (out.status != QpStatus::Optimal) return out;
        z = z.cwiseMax(lb_).cwiseMin(ub_);
        for (std::size_t j = 0; j < free_.size(); ++j) {
            const auto& m = maps_[j];
            const int o = offset_[static_cast<std::size_t>(free_[j])];
            out.x.push_back(m.T * z.segment(o, m.T.cols()) + m.c);
        }
        return out;
    }

private:
    [[nodiscard]] int slot(int agent) const {
        const int o = offset_[static_cast<std::size_t>(agent)];
        if (o < 0) return -1;
        return static_cast<int>(std::find(free_.begin(), free_.end(), agent) - free_.begin());
    }

    const Instance& inst_;
    std::vector<int> free_;
    std::vector<int> offset_;
    std::vector<Affine> maps_;
    std::vector<int> rows_;
    int nz_{0};
    Eigen::MatrixXd P_;
    Eigen::VectorXd r_;
    Eigen::VectorXd lb_, ub_;
};

std::string leaf_key(const std::vector<int>& lights, const std::vector<Eigen::VectorXd>& xs) {
    // kappa only enters local rows, so the continuous problem depends on s and the binaries.
    std::string key;
    for (int l : lights) {
        const auto& x = xs[static_cast<std::size_t>(l)];
        for (int j = 1; j < x.size(); ++j) key.push_back(x[j] > 0.5 ? '1' : '0');
        key.push_back('|');
    }
    return key;
}

}  // namespace

double FeasibilityReport::max_local() const {
    double w = 0.0;
    for (const auto& [f, v] : local) w = std::max(w, v);
    return w;
}

double FeasibilityReport::max_coupling() const {
    double w = 0.0;
    for (const auto& [f, v] : coupling) w = std::max(w, v);
    return w;
}

FeasibilityReport check_rows(const Instance& inst, const std::vector<Eigen::VectorXd>& xs) {
    FeasibilityReport rep;
    for (std::size_t i = 0; i < inst.agents.size(); ++i) {
        for (const auto& lr : inst.agents[i].local) {
            auto& slot = rep.local[lr.family];
            slot = std::max(slot, lr.a.dot(xs[i]) - lr.b);
        }
    }
    for (const auto& row : inst.coupling) {
        auto& slot = rep.coupling[row.family];
        slot = std::max(slot, row.residual(xs[static_cast<std::size_t>(row.agent_a)],
                                           xs[static_cast<std::size_t>(row.agent_b)]));
    }
    return rep;
}

double integer_space(const Instance& inst) {
    double n = 1.0;
    for (const auto& ag : inst.agents) {
        if (ag.kind != AgentKind::Light) continue;
        n *= (inst.H() + 2) * std::pow(2.0, static_cast<double>(ag.light.binary_names.size()));
    }
    return n;
}

OracleResult solve_centralized(const Instance& inst, const OracleSettings& settings) {
    const int H = inst.H();
    OracleResult out;
    out.enumeration_size = integer_space(inst);
    if (out.enumeration_size > settings.max_leaves) {
        std::ostringstream os;
        os << "solve_centralized: " << out.enumeration_size << " integer points exceed the limit of "
           << settings.max_leaves;
        throw OracleError(os.str());
    }

    std::vector<int> lights, cont;
    for (std::size_t i = 0; i < inst.agents.size(); ++i) {
        (inst.agents[i].kind == AgentKind::Light ? lights : cont).push_back(static_cast<int>(i));
    }
    const JointProblem joint(inst, cont);

    // Light-light rows, grouped by the later light in enumeration order so that a partial
    // assignment can be pruned as soon as both ends are fixed.
    std::vector<std::vector<int>> ll_rows(lights.size());
    for (std::size_t r = 0; r < inst.coupling.size(); ++r) {
        const auto& row = inst.coupling[r];
        if (!is_light(inst, row.agent_a) || !is_light(inst, row.agent_b)) continue;
        const auto ia = std::find(lights.begin(), lights.end(), row.agent_a) - lights.begin();
        const auto ib = std::find(lights.begin(), lights.end(), row.agent_b) - lights.begin();
        ll_rows[static_cast<std::size_t>(std::max(ia, ib))].push_back(static_cast<int>(r));
    }

    struct Cached {
        bool feasible{false};
        std::vector<Eigen::VectorXd> x;
        double cost{0.0};
    };
    std::unordered_map<std::string, Cached> cache;

    std::vector<Eigen::VectorXd> xs(inst.agents.size());
    for (int i : cont) xs[static_cast<std::size_t>(i)] = Eigen::VectorXd::Zero(inst.agents[static_cast<std::size_t>(i)].n);
    std::vector<int> kappa(lights.size(), 0);
    std::vector<Eigen::VectorXd> bins(lights.size());
    double best = std::numeric_limits<double>::infinity();

    auto evaluate = [&] {
        double light_cost = 0.0;
        for (int l : lights) light_cost += inst.penalized_cost(l, xs[static_cast<std::size_t>(l)]);
        const auto key = leaf_key(lights, xs);
        auto it = cache.find(key);
        if (it == cache.end()) {
            Cached c;
            if (cont.empty()) {
                c.feasible = true;
            } else {
                ++out.qp_solves;
                const auto res = joint.solve(xs, true, settings.qp);
                if (res.status == QpStatus::MaxIter) throw OracleError("solve_centralized: leaf QP did not converge");
                if (res.status == QpStatus::Optimal) {
                    c.feasible = true;
                    c.x = res.x;
                    for (std::size_t j = 0; j < cont.size(); ++j) c.cost += inst.penalized_cost(cont[j], c.x[j]);
                }
            }
            it = cache.emplace(key, std::move(c)).first;
        }
        const auto& c = it->second;
        Leaf leaf;
        leaf.feasible = c.feasible;
        leaf.objective = light_cost + c.cost;
        if (settings.record_leaves) {
            leaf.kappa = kappa;
            leaf.binaries = bins;
            out.leaves.push_back(leaf);
        }
        if (!c.feasible) return;
        if (!out.feasible || leaf.objective < best - kLeafTol * (1.0 + std::abs(best))) {
            best = leaf.objective;
            out.feasible = true;
            out.objective = leaf.objective;
            out.x = xs;
            for (std::size_t j = 0; j < cont.size(); ++j) out.x[static_cast<std::size_t>(cont[j])] = c.x[j];
        }
    };

    auto record_pruned = [&](std::size_t depth) {
        if (!settings.record_leaves) return;
        // Every completion of a pruned prefix is an infeasible leaf.
        std::function<void(std::size_t)> fill = [&](std::size_t d) {
            if (d == lights.size()) {
                Leaf leaf;
                leaf.kappa = kappa;
                leaf.binaries = bins;
                out.leaves.push_back(leaf);
                return;
            }
            const auto& ag = inst.agents[static_cast<std::size_t>(lights[d])];
            const auto nb = static_cast<int>(ag.light.binary_names.size());
            for (int k = H + 2; k >= 1; --k) {
                for (long mask = 0; mask < (1L << nb); ++mask) {
                    kappa[d] = k;
                    bins[d] = Eigen::VectorXd::Zero(nb);
                    for (int j = 0; j < nb; ++j) bins[d][j] = (mask >> j) & 1L ? 1.0 : 0.0;
                    fill(d + 1);
                }
            }
        };
        fill(depth + 1);
    };

    std::function<void(std::size_t)> descend = [&](std::size_t d) {
        if (d == lights.size()) {
            evaluate();
            return;
        }
        const int l = lights[d];
        const auto& ag = inst.agents[static_cast<std::size_t>(l)];
        const auto nb = static_cast<int>(ag.light.binary_names.size());
        for (int k = H + 2; k >= 1; --k) {
            for (long mask = 0; mask < (1L << nb); ++mask) {
                Eigen::VectorXd b(nb);
                for (int j = 0; j < nb; ++j) b[j] = (mask >> j) & 1L ? 1.0 : 0.0;
                kappa[d] = k;
                bins[d] = b;
                xs[static_cast<std::size_t>(l)] = light_state(H, ag.light.s0, k, b);
                bool ok = true;
                for (int r : ll_rows[d]) {
                    const auto& row = inst.coupling[static_cast<std::size_t>(r)];
                    if (row.residual(xs[static_cast<std::size_t>(row.agent_a)], xs[static_cast<std::size_t>(row.agent_b)]) >
                        kLeafTol) {
                        ok = false;
                        break;
                    }
                }
                if (ok) {
                    descend(d + 1);
                } else {
                    record_pruned(d);
                }
            }
        }
    };
    descend(0);

    if (out.feasible) out.report = check_rows(inst, out.x);
    return out;
}

BestResponse best_response(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs, const QpSettings& qp) {
    BestResponse br;
    if (is_light(inst, agent)) {
        const auto lm = light_block_mip(inst, agent, xs);
        MipSettings ms;
        ms.qp = qp;
        const auto sol = solve_penalized_tlc(lm.mip, lm.local_rows, inst.params.rho, ms);
        if (sol.status != MipStatus::Optimal) throw OracleError("best_response: light subproblem infeasible");
        br.x = sol.x.array().round().matrix();
    } else {
        const JointProblem jp(inst, {agent});
        const auto res = jp.solve(xs, true, qp);
        if (res.status != QpStatus::Optimal) {
            throw OracleError("best_response: subproblem of agent " + std::to_string(agent) + " has status " +
                              to_string(res.status));
        }
        br.x = res.x.front();
    }
    br.cost = inst.penalized_cost(agent, br.x);
    return br;
}

std::vector<double> verify_pbp(const Instance& inst, const std::vector<Eigen::VectorXd>& xs, double tol,
                               const QpSettings& qp) {
    if (xs.size() != inst.agents.size()) throw OracleError("verify_pbp: one block per agent required");
    const double res = inst.coupling_residual(xs);
    if (res > tol) {
        std::ostringstream os;
        os << "verify_pbp: input violates a coupling row by " << res;
        throw OracleError(os.str());
    }
    std::vector<double> gaps;
    gaps.reserve(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto br = best_response(inst, static_cast<int>(i), xs, qp);
        gaps.push_back(std::max(0.0, inst.penalized_cost(static_cast<int>(i), xs[i]) - br.cost));
    }
    return gaps;
}

bool hard_subproblem_feasible(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs,
                              const QpSettings& qp) {
    if (is_light(inst, agent)) {
        const auto lm = light_block_mip(inst, agent, xs);
        MipSettings ms;
        ms.qp = qp;
        return solve_mip(lm.mip, ms).status == MipStatus::Optimal;
    }
    const JointProblem jp(inst, {agent});
    const auto res = jp.solve(xs, false, qp);
    if (res.status == QpStatus::MaxIter) throw OracleError("hard_subproblem_feasible: solver did not converge");
    return res.status == QpStatus::Optimal;
}

ModelParams micro_params() {
    ModelParams p;
    p.delta_min = 3;
    p.delta_max = 10;
    return p;
}

namespace {

Intersection micro_geometry(int L) {
    std::vector<LaneGeometry> lanes;
    for (int l = 0; l < L; ++l) {
        LaneGeometry g;
        g.lane_id = l;
        g.control_zone_length = 60.0;
        g.stop_line = 58.0;
        g.downstream_length = 40.0;
        lanes.push_back(g);
    }
    std::vector<ConflictNode> nodes;
    int id = 0;
    for (int l = 0; l < L; ++l) {
        for (int m = l + 1; m < L; ++m) {
            nodes.push_back({id++, l, m, 61.0 + 3.0 * m, 61.0 + 3.0 * l});
        }
    }
    return {std::move(lanes), std::move(nodes)};
}

}  // namespace

MicroInstance make_micro_instance(std::uint64_t seed, ControlMode mode, double max_leaves) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uni = [&](double a, double b) { return a + (b - a) * unit(rng); };
    for (int attempt = 0; attempt < 1000; ++attempt) {
        MicroInstance mi;
        mi.seed = seed;
        mi.mode = mode;
        mi.params = micro_params();
        const int L = unit(rng) < 0.5 ? 2 : 3;
        mi.horizon.H = 4 + static_cast<int>(rng() % 3);
        mi.horizon.dt = 0.5;
        mi.horizon.k0 = 0;
        mi.geo = micro_geometry(L);
        mi.world.step = 0;
        mi.world.dt = mi.horizon.dt;
        mi.world.lanes.resize(static_cast<std::size_t>(L));
        std::uint64_t vid = 1;
        for (int l = 0; l < L; ++l) {
            LightState ls;
            ls.s = unit(rng) < 0.5 ? 1 : 0;
            ls.last_switch = -static_cast<long>(rng() % 13);
            mi.world.lights.push_back(ls);
            const int count = static_cast<int>(rng() % 3);
            double front = 1e9;
            double front_v = 0.0;
            for (int i = 0; i < count; ++i) {
                VehicleState v;
                v.id = vid++;
                v.lane = l;
                v.kind = unit(rng) < 0.6 ? VehicleKind::Cav : VehicleKind::Hdv;
                v.v = uni(0.0, 12.0);
                if (i == 0) {
                    v.p = uni(25.0, 70.0);
                } else {
                    v.p = front - (mi.params.d_min + mi.params.tau * v.v + uni(2.0, 15.0));
                    // A follower faster than its leader needs room to match its speed.
                    v.p -= std::max(0.0, v.v - front_v) * std::max(0.0, v.v - front_v) /
                           (2.0 * std::abs(mi.params.u_min));
                    if (v.p < 0.0) break;
                }
                const double a = uni(-1.0, 1.0);
                for (int j = mi.params.est_steps; j >= 0; --j) {
                    v.speed_history.push_back(std::clamp(v.v - a * mi.horizon.dt * j, 0.0, mi.params.v_max));
                }
                front = v.p;
                front_v = v.v;
                mi.world.lanes[static_cast<std::size_t>(l)].push_back(std::move(v));
            }
        }
        try {
            mi.inst = build_problem(mi.world, mi.geo, mi.params, mi.horizon, mode);
        } catch (const DomainError&) {
            continue;
        }
        if (integer_space(mi.inst) > max_leaves) continue;
        try {
            (void)initialize(mi.inst);
        } catch (const InitError&) {
            continue;
        }
        return mi;
    }
    throw OracleError("make_micro_instance: no admissible draw for seed " + std::to_string(seed));
}

MicroInstance make_crossing_instance(ControlMode mode) {
    MicroInstance mi;
    mi.mode = mode;
    mi.params = micro_params();
    mi.horizon.H = 6;
    mi.horizon.dt = 0.5;
    mi.geo = Intersection({LaneGeometry{0, 60.0, 58.0, {}, 40.0}, LaneGeometry{1, 60.0, 58.0, {}, 40.0}},
                          {ConflictNode{0, 0, 1, 64.0, 64.0}});
    mi.world.dt = mi.horizon.dt;
    mi.world.lanes.resize(2);
    for (int l = 0; l < 2; ++l) {
        VehicleState v;
        v.id = static_cast<std::uint64_t>(l + 1);
        v.lane = l;
        v.kind = VehicleKind::Cav;
        v.p = 40.0;
        v.v = 10.0;
        mi.world.lanes[static_cast<std::size_t>(l)].push_back(v);
        mi.world.lights.push_back({0, -30});
    }
    mi.inst = build_problem(mi.world, mi.geo, mi.params, mi.horizon, mode);
    return mi;
}

}  // namespace tlc

namespace tlc {

bool MicroReport::passed(double tol) const {
    return natural && monotone && exact_penalty <= tol && iterate_residual <= tol && pbp_gap <= tol &&
           oracle_residual <= tol && oracle_pbp_gap <= tol;
}

MicroReport check_micro_instance(const MicroInstance& mi, const MbiSettings& settings) {
    const auto& inst = mi.inst;
    MicroReport rep;
    rep.seed = mi.seed;
    rep.agents = static_cast<int>(inst.agents.size());
    rep.horizon = inst.H();

    MbiSettings st = settings;
    st.record_iterates = true;
    const auto res = run(inst, initialize(inst, st.qp), st);
    rep.iterations = res.certificate.iterations;
    rep.natural = res.certificate.natural_termination;
    for (const auto& it : res.iterates) rep.iterate_residual = std::max(rep.iterate_residual, inst.coupling_residual(it));
    for (std::size_t t = 1; t < res.trace.size(); ++t) {
        const double drop = res.trace[t - 1].total_cost - res.trace[t].total_cost;
        if (drop < 0.0 || (!res.trace[t].accepted.empty() && drop <= st.eps_term)) rep.monotone = false;
    }

    std::vector<Eigen::VectorXd> xs;
    double f_mbi = 0.0;
    for (const auto& b : res.blocks) {
        xs.push_back(b.x);
        f_mbi += b.penalized_cost;
    }
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (hard_subproblem_feasible(inst, static_cast<int>(i), xs, st.qp)) {
            rep.exact_penalty = std::max(rep.exact_penalty, inst.local_violation(static_cast<int>(i), xs[i]));
        }
    }
    for (double g : verify_pbp(inst, xs, 1e-6, st.qp)) rep.pbp_gap = std::max(rep.pbp_gap, g);

    const auto orc = solve_centralized(inst, OracleSettings{.qp = st.qp});
    if (!orc.feasible) throw OracleError("check_micro_instance: centralized problem infeasible");
    rep.oracle_residual = check_rows(inst, xs).max_coupling();
    for (double g : verify_pbp(inst, orc.x, 1e-6, st.qp)) rep.oracle_pbp_gap = std::max(rep.oracle_pbp_gap, g);
    rep.optimality_gap = (f_mbi - orc.objective) / (1.0 + std::abs(orc.objective));
    return rep;
}

}  // namespace tlc
