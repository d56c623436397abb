#include "tlc/mbi.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <functional>
#include <limits>
#include <ostream>
#include <sstream>
#include <thread>

namespace tlc {

namespace {

constexpr double kRowTol = 1e-9;
// Receding-horizon states carry solver-level error, so initialization accepts rows at this absolute slack.
constexpr double kInitTol = 1e-6;
constexpr double kReplanSlack = 1.0;  // m

const Eigen::VectorXd& other_x(const CouplingRow& row, int agent, const std::vector<Eigen::VectorXd>& xs) {
    return xs[static_cast<std::size_t>(row.agent_a == agent ? row.agent_b : row.agent_a)];
}

const SparseRow& own_part(const CouplingRow& row, int agent) { return row.agent_a == agent ? row.ca : row.cb; }
const SparseRow& other_part(const CouplingRow& row, int agent) { return row.agent_a == agent ? row.cb : row.ca; }

double row_scale(const SparseRow& a, double b) {
    double s = std::abs(b);
    for (double v : a.val) s = std::max(s, std::abs(v));
    return 1.0 + s;
}

// Continuous block as a QP in its free coordinates: u for CAVs (x = T u + c), x itself for generic blocks.
struct ContinuousBlock {
    Eigen::MatrixXd T;
    Eigen::VectorXd c;
    Eigen::MatrixXd P;
    Eigen::VectorXd r;
    Eigen::VectorXd lb, ub;
};

ContinuousBlock continuous_block(const Instance& inst, const AgentProblem& ag) {
    ContinuousBlock b;
    if (ag.kind == AgentKind::Cav) {
        auto roll = cav_rollout(inst.H(), inst.horizon.dt, ag.cav.p0, ag.cav.v0);
        b.T = std::move(roll.T);
        b.c = std::move(roll.c);
        b.lb = Eigen::VectorXd::Constant(inst.H(), inst.params.u_min);
        b.ub = Eigen::VectorXd::Constant(inst.H(), inst.params.u_max);
    } else {
        b.T = Eigen::MatrixXd::Identity(ag.n, ag.n);
        b.c = Eigen::VectorXd::Zero(ag.n);
        b.lb = ag.lb.size() == ag.n ? ag.lb : Eigen::VectorXd::Constant(ag.n, -std::numeric_limits<double>::infinity());
        b.ub = ag.ub.size() == ag.n ? ag.ub : Eigen::VectorXd::Constant(ag.n, std::numeric_limits<double>::infinity());
    }
    b.P = 2.0 * b.T.transpose() * ag.Q * b.T;
    b.P = 0.5 * (b.P + b.P.transpose());
    b.r = b.T.transpose() * (2.0 * ag.Q * b.c + ag.q);
    return b;
}

Eigen::VectorXd free_coords(const ContinuousBlock& b, const AgentProblem& ag, const Eigen::VectorXd& x) {
    if (ag.kind == AgentKind::Cav) {
        const int H = static_cast<int>(b.T.cols());
        return x.segment(2 * H, H);
    }
    return x;
}

// Solves the penalized block problem with the selected coupling rows hard.
struct ContinuousResult {
    bool ok{false};
    bool infeasible{false};
    Eigen::VectorXd x;
};

ContinuousResult solve_continuous(const Instance& inst, const ContinuousBlock& blk, int agent,
                                  const std::vector<Eigen::VectorXd>& xs, const std::vector<int>& rows,
                                  const QpSettings& qp) {
    const auto& ag = inst.agents[static_cast<std::size_t>(agent)];
    const int nu = static_cast<int>(blk.T.cols());
    const auto nl = static_cast<int>(ag.local.size());
    const int m = nl + static_cast<int>(rows.size());
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(m, nu);
    Eigen::VectorXd h(m);
    auto put = [&](int i, const SparseRow& a, double b) {
        double ac = 0.0;
        for (std::size_t t = 0; t < a.idx.size(); ++t) {
            G.row(i) += a.val[t] * blk.T.row(a.idx[t]);
            ac += a.val[t] * blk.c[a.idx[t]];
        }
        h[i] = b - ac;
    };
    for (int i = 0; i < nl; ++i) put(i, ag.local[static_cast<std::size_t>(i)].a, ag.local[static_cast<std::size_t>(i)].b);
    for (std::size_t j = 0; j < rows.size(); ++j) {
        const auto& row = inst.coupling[static_cast<std::size_t>(rows[j])];
        put(nl + static_cast<int>(j), own_part(row, agent), row.d - other_part(row, agent).dot(other_x(row, agent, xs)));
    }
    std::vector<int> local(static_cast<std::size_t>(nl));
    for (int i = 0; i < nl; ++i) local[static_cast<std::size_t>(i)] = i;
    QpSettings st = qp;
    st.x0 = free_coords(blk, ag, xs[static_cast<std::size_t>(agent)]);
    const QpProblem prob(blk.P, blk.r, std::move(G), std::move(h), blk.lb, blk.ub);
    const auto sol = solve_penalized_qp(prob, local, inst.params.rho, st);
    ContinuousResult out;
    if (sol.qp.status == QpStatus::Infeasible) {
        out.infeasible = true;
        return out;
    }
    if (sol.qp.status != QpStatus::Optimal) return out;
    out.ok = true;
    out.x = blk.T * sol.qp.x.cwiseMax(blk.lb).cwiseMin(blk.ub) + blk.c;
    return out;
}

double max_row_residual(const Instance& inst, int agent, const Eigen::VectorXd& x, const std::vector<Eigen::VectorXd>& xs,
                        const std::vector<int>& rows) {
    double worst = -std::numeric_limits<double>::infinity();
    for (int r : rows) {
        const auto& row = inst.coupling[static_cast<std::size_t>(r)];
        const double res = own_part(row, agent).dot(x) + other_part(row, agent).dot(other_x(row, agent, xs)) - row.d;
        worst = std::max(worst, res / row_scale(own_part(row, agent), row.d));
    }
    return worst;
}

LocalCandidate light_step(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs) {
    const auto& ag = inst.agents[static_cast<std::size_t>(agent)];
    const int H = inst.H();
    const Eigen::VectorXd& cur = xs[static_cast<std::size_t>(agent)];
    const Eigen::VectorXd bins = cur.tail(ag.n - 1 - H);
    const double cur_cost = inst.penalized_cost(agent, cur);
    LocalCandidate best{cur, cur_cost, 0.0};
    bool have = false;
    // Descending kappa so that ties settle on the later switch (H+2 = no switch).
    for (int kappa = H + 2; kappa >= 1; --kappa) {
        Eigen::VectorXd x = light_state(H, ag.light.s0, kappa, bins);
        if (ag.coupling.size() > 0 && max_row_residual(inst, agent, x, xs, ag.coupling) > kRowTol) continue;
        const double c = inst.penalized_cost(agent, x);
        if (!have || c < best.cost - 1e-12 * (1.0 + std::abs(best.cost))) {
            best.x = std::move(x);
            best.cost = c;
            have = true;
        }
    }
    if (!have) throw MbiError("light " + std::to_string(agent) + ": no feasible switch time against fixed neighbors");
    if (best.cost > cur_cost || (best.x - cur).lpNorm<Eigen::Infinity>() == 0.0) return {cur, cur_cost, 0.0};
    best.delta_f = best.cost - cur_cost;
    return best;
}

LocalCandidate continuous_step(const Instance& inst, const ContinuousBlock& blk, int agent,
                               const std::vector<Eigen::VectorXd>& xs, const QpSettings& qp) {
    const auto& ag = inst.agents[static_cast<std::size_t>(agent)];
    const Eigen::VectorXd& cur = xs[static_cast<std::size_t>(agent)];
    const double cur_cost = inst.penalized_cost(agent, cur);
    const auto res = solve_continuous(inst, blk, agent, xs, ag.coupling, qp);
    // The current iterate satisfies the rows up to solver tolerance; a numerically infeasible
    // report just means no improving move.
    if (res.infeasible || !res.ok) return {cur, cur_cost, 0.0};
    if (!ag.coupling.empty() && max_row_residual(inst, agent, res.x, xs, ag.coupling) > kRowTol) return {cur, cur_cost, 0.0};
    const double c = inst.penalized_cost(agent, res.x);
    if (!(c < cur_cost)) return {cur, cur_cost, 0.0};
    return {res.x, c, c - cur_cost};
}

void parallel_for(int count, int workers, const std::function<void(int)>& fn) {
    if (workers <= 1 || count <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(count));
    auto body = [&] {
        for (int i = next++; i < count; i = next++) {
            try {
                fn(i);
            } catch (...) {
                errors[static_cast<std::size_t>(i)] = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    const int nthreads = std::min(workers, count);
    for (int w = 0; w < nthreads; ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

class Coordinator {
public:
    Coordinator(const Instance& inst, const MbiSettings& settings) : inst_(inst), settings_(settings) {
        blocks_.resize(inst.agents.size());
    }

    LocalCandidate step(int agent, const std::vector<Eigen::VectorXd>& xs) {
        const auto& ag = inst_.agents[static_cast<std::size_t>(agent)];
        if (ag.kind == AgentKind::Light) return light_step(inst_, agent, xs);
        return continuous_step(inst_, block(agent), agent, xs, settings_.qp);
    }

    // Built lazily and only from the owning worker's index, so no two threads touch one slot.
    const ContinuousBlock& block(int agent) {
        auto& b = blocks_[static_cast<std::size_t>(agent)];
        if (b.P.size() == 0 && b.T.size() == 0) b = continuous_block(inst_, inst_.agents[static_cast<std::size_t>(agent)]);
        return b;
    }

private:
    const Instance& inst_;
    const MbiSettings& settings_;
    std::vector<ContinuousBlock> blocks_;
};

}  // namespace

BlockSolution make_block(const Instance& inst, int agent, Eigen::VectorXd x) {
    BlockSolution b;
    b.agent_id = agent;
    b.penalized_cost = inst.penalized_cost(agent, x);
    b.local_violation = std::max(0.0, inst.local_violation(agent, x));
    b.x = std::move(x);
    return b;
}

Eigen::VectorXd braking_controls(int H, double dt, double v0, double u_min) {
    Eigen::VectorXd u(H);
    double v = v0;
    for (int k = 0; k < H; ++k) {
        u[k] = v > 0.0 ? std::max(u_min, -v / dt) : 0.0;
        v = std::max(0.0, v + dt * u[k]);
    }
    return u;
}

WarmStart shift_plan(const Instance& inst, const std::vector<BlockSolution>& blocks) {
    WarmStart w;
    const int H = inst.H();
    const double dt = inst.horizon.dt;
    for (const auto& ag : inst.agents) {
        const auto& x = blocks.at(static_cast<std::size_t>(ag.id)).x;
        if (ag.kind == AgentKind::Cav) {
            Eigen::VectorXd u(H);
            for (int k = 0; k + 1 < H; ++k) u[k] = x[CavInfo::u(H, k + 1)];
            const double v_end = x[CavInfo::v(H, H)];
            u[H - 1] = v_end > 0.0 ? std::max(inst.params.u_min, -v_end / dt) : 0.0;
            w.cav_u.emplace(ag.cav.vid, std::move(u));
        } else if (ag.kind == AgentKind::Light) {
            const int kappa = static_cast<int>(std::lround(x[LightInfo::kappa()]));
            // A switch beyond the old horizon is not a commitment; keep it beyond the new one.
            w.kappa.emplace(ag.light.lane, kappa <= 1 || kappa > H ? H + 2 : kappa - 1);
            for (std::size_t j = 0; j < ag.light.binary_names.size(); ++j) {
                w.binaries.emplace(ag.light.binary_names[j], x[ag.light.binary(H, static_cast<int>(j))]);
            }
        }
    }
    return w;
}

namespace {

std::vector<BlockSolution> initialize_impl(const Instance& inst, const QpSettings& qp, const WarmStart* warm) {
    const int H = inst.H();
    const double dt = inst.horizon.dt;
    const auto& prm = inst.params;
    const auto n = inst.agents.size();
    std::vector<Eigen::VectorXd> xs(n);
    std::vector<int> kappa(n, 0);

    for (std::size_t i = 0; i < n; ++i) {
        const auto& ag = inst.agents[i];
        switch (ag.kind) {
            case AgentKind::Light: {
                const auto& li = ag.light;
                kappa[i] = li.s0 == 0 ? H + 2 : (li.bounds_active ? li.bounds.lo : 1);
                Eigen::VectorXd bins = Eigen::VectorXd::Zero(ag.n - 1 - H);
                // An idle green light gains nothing from its carried schedule and would keep
                // conflicting lanes waiting, so it restarts from the all-red schedule.
                const bool idle_green = li.s0 == 1 && li.gamma == 0.0;
                if (warm && !idle_green) {
                    if (const auto it = warm->kappa.find(li.lane); it != warm->kappa.end()) kappa[i] = it->second;
                }
                if (warm) {
                    for (std::size_t j = 0; j < li.binary_names.size(); ++j) {
                        if (const auto b = warm->binaries.find(li.binary_names[j]); b != warm->binaries.end()) {
                            bins[static_cast<Eigen::Index>(j)] = b->second > 0.5 ? 1.0 : 0.0;
                        }
                    }
                }
                xs[i] = light_state(H, li.s0, kappa[i], bins);
                break;
            }
            case AgentKind::Cav: {
                const Eigen::VectorXd* u = nullptr;
                if (warm) {
                    if (const auto it = warm->cav_u.find(ag.cav.vid); it != warm->cav_u.end() && it->second.size() == H) {
                        u = &it->second;
                    }
                }
                xs[i] = cav_state(H, dt, ag.cav.p0, ag.cav.v0,
                                  u ? *u : braking_controls(H, dt, ag.cav.v0, prm.u_min));
                break;
            }
            case AgentKind::Generic: {
                Eigen::VectorXd x = Eigen::VectorXd::Zero(ag.n);
                if (ag.lb.size() == ag.n) x = x.cwiseMax(ag.lb);
                if (ag.ub.size() == ag.n) x = x.cwiseMin(ag.ub);
                xs[i] = x;
                break;
            }
        }
    }

    auto residual = [&](const CouplingRow& row) {
        return row.residual(xs[static_cast<std::size_t>(row.agent_a)], xs[static_cast<std::size_t>(row.agent_b)]);
    };
    auto violated = [&](const CouplingRow& row) { return residual(row) > kInitTol; };
    auto set_kappa = [&](int light, int value) {
        const auto i = static_cast<std::size_t>(light);
        const auto& ag = inst.agents[i];
        value = std::clamp(value, 1, H + 2);
        if (value == kappa[i]) return false;
        kappa[i] = value;
        xs[i] = light_state(H, ag.light.s0, value, xs[i].tail(ag.n - 1 - H));
        return true;
    };
    // Moves kappa just far enough that the light shows `s` at offset k.
    auto require = [&](int light, int k, int s) {
        const auto i = static_cast<std::size_t>(light);
        const int s0 = inst.agents[i].light.s0;
        if (s == s0) return set_kappa(light, std::max(kappa[i], k + 1));
        return set_kappa(light, std::min(kappa[i], k));
    };
    // Braking is pointwise the slowest trajectory, so it satisfies every keep-behind row
    // that any trajectory can satisfy.
    std::vector<char> braking(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto& ag = inst.agents[i];
        if (ag.kind != AgentKind::Cav) continue;
        const bool carried = warm && warm->cav_u.count(ag.cav.vid) && warm->cav_u.at(ag.cav.vid).size() == H;
        braking[i] = carried ? 0 : 1;
    }
    auto brake = [&](int cav) {
        const auto i = static_cast<std::size_t>(cav);
        if (braking[i]) return false;
        const auto& c = inst.agents[i].cav;
        xs[i] = cav_state(H, dt, c.p0, c.v0, braking_controls(H, dt, c.v0, prm.u_min));
        braking[i] = 1;
        return true;
    };
    const double alpha = stopping_ratio(prm, dt);
    std::vector<char> replanned(n, 0);
    auto braked = [&](int cav) {
        const auto& c = inst.agents[static_cast<std::size_t>(cav)].cav;
        return cav_state(H, dt, c.p0, c.v0, braking_controls(H, dt, c.v0, prm.u_min));
    };
    // Whether every direct follower of `cav` can still brake in behind `plan`.
    auto followers_fit = [&](int cav, const Eigen::VectorXd& plan) {
        for (int r : inst.agents[static_cast<std::size_t>(cav)].coupling) {
            const auto& row = inst.coupling[static_cast<std::size_t>(r)];
            if (row.family != RowFamily::RearEnd || row.agent_b != cav) continue;
            if (row.residual(braked(row.agent_a), plan) > kInitTol) return false;
        }
        return true;
    };
    // Whether the light could follow switch time `k` with every CAV it holds either already
    // stopping in time or able to brake without stranding its follower.
    auto can_schedule = [&](int light, int k) {
        const auto li = static_cast<std::size_t>(light);
        const auto& ag = inst.agents[li];
        const Eigen::VectorXd ls = light_state(H, ag.light.s0, k, xs[li].tail(ag.n - 1 - H));
        for (int r : ag.coupling) {
            const auto& row = inst.coupling[static_cast<std::size_t>(r)];
            if (row.family != RowFamily::RedStop || row.agent_b != light) continue;
            if (row.residual(xs[static_cast<std::size_t>(row.agent_a)], ls) <= kInitTol) continue;
            const Eigen::VectorXd f = braked(row.agent_a);
            if (row.residual(f, ls) > kInitTol || !followers_fit(row.agent_a, f)) return false;
        }
        return true;
    };

    // Red lights whose maximum phase ends inside the horizon claim the box, earliest deadline
    // first, at the first offset from the deadline on that lowers their own cost and that every
    // conflicting light can yield to without breaking its own rows or stranding a CAV.
    {
        std::vector<int> due;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& li = inst.agents[i].light;
            if (inst.agents[i].kind == AgentKind::Light && li.s0 == 0 && li.bounds_active && li.bounds.hi <= H) {
                due.push_back(static_cast<int>(i));
            }
        }
        std::sort(due.begin(), due.end(), [&](int a, int b) {
            const int ha = inst.agents[static_cast<std::size_t>(a)].light.bounds.hi;
            const int hb = inst.agents[static_cast<std::size_t>(b)].light.bounds.hi;
            return ha != hb ? ha < hb : a < b;
        });
        std::vector<char> claimed(n, 0);
        auto no_worse = [&](int light, int k) {
            const auto i = static_cast<std::size_t>(light);
            const auto& ag = inst.agents[i];
            const Eigen::VectorXd x = light_state(H, ag.light.s0, k, xs[i].tail(ag.n - 1 - H));
            return inst.local_violation(light, x) <= inst.local_violation(light, xs[i]) + kInitTol;
        };
        for (int d : due) {
            const auto di = static_cast<std::size_t>(d);
            const auto& ag = inst.agents[di];
            const double cur = inst.penalized_cost(d, xs[di]);
            const int first = std::max(1, std::min(kappa[di], ag.light.bounds.hi));
            for (int target = std::max(ag.light.bounds.lo, first); target <= std::min(kappa[di], H + 1); ++target) {
                const Eigen::VectorXd x = light_state(H, ag.light.s0, target, xs[di].tail(ag.n - 1 - H));
                if (!(inst.penalized_cost(d, x) < cur)) continue;
                std::vector<std::pair<int, int>> yield;
                bool ok = true;
                for (int r : ag.coupling) {
                    const auto& row = inst.coupling[static_cast<std::size_t>(r)];
                    if (row.family != RowFamily::NoConflict) continue;
                    const int j = row.agent_a == d ? row.agent_b : row.agent_a;
                    const auto ji = static_cast<std::size_t>(j);
                    const int kj = inst.agents[ji].light.s0 == 1 ? std::min(kappa[ji], target) : H + 2;
                    if (kj == kappa[ji]) continue;
                    if (claimed[ji] || !no_worse(j, kj) || !can_schedule(j, kj)) {
                        ok = false;
                        break;
                    }
                    yield.emplace_back(j, kj);
                }
                if (!ok) continue;
                claimed[di] = 1;
                set_kappa(d, target);
                for (const auto& [j, kj] : yield) set_kappa(j, kj);
                break;
            }
        }
    }

    for (int round = 0; round < 6; ++round) {
        bool changed = false;

        // Lights. A CAV that overruns a red offset first falls back to braking; if it still
        // overruns, the light turns green there. Conflicting greens are resolved by holding the
        // light that is not green yet, or by ending both greens now.
        for (const auto& row : inst.coupling) {
            if (!violated(row)) continue;
            if (row.family == RowFamily::RedStop) {
                const auto i = static_cast<std::size_t>(row.agent_a);
                if (!braking[i]) {
                    const Eigen::VectorXd keep = xs[i];
                    brake(row.agent_a);
                    if (violated(row) || !followers_fit(row.agent_a, xs[i])) {
                        xs[i] = keep;
                        braking[i] = 0;
                    } else {
                        changed = true;
                        continue;
                    }
                }
                changed = require(row.agent_b, row.cb.idx.front(), 1) || changed;
            } else if (row.family == RowFamily::Clearance) {
                changed = require(row.agent_b, row.cb.idx.front(), 0) || changed;
            }
        }
        for (const auto& row : inst.coupling) {
            if (row.family != RowFamily::NoConflict || !violated(row)) continue;
            const int a = row.agent_a;
            const int b = row.agent_b;
            const int sa = inst.agents[static_cast<std::size_t>(a)].light.s0;
            const int sb = inst.agents[static_cast<std::size_t>(b)].light.s0;
            // Stop a green now (kappa 1) or hold a red (kappa H+2), whichever the held CAVs allow.
            const int ka = sa == 1 ? 1 : H + 2;
            const int kb = sb == 1 ? 1 : H + 2;
            const bool ra = can_schedule(a, ka);
            const bool rb = can_schedule(b, kb);
            if (sa == 1 && sb == 1) {
                if (ra || !rb) changed = set_kappa(a, ka) || changed;
                if (rb || !ra) changed = set_kappa(b, kb) || changed;
            } else if (sa != sb) {
                // Prefer holding the one that is not green yet.
                const int red = sa == 0 ? a : b;
                const int green = sa == 0 ? b : a;
                const bool hold_ok = red == a ? ra : rb;
                const bool stop_ok = green == a ? ra : rb;
                if (hold_ok || !stop_ok) changed = set_kappa(red, H + 2) || changed;
                else changed = set_kappa(green, 1) || changed;
            } else {
                const auto kap_a = kappa[static_cast<std::size_t>(a)];
                const auto kap_b = kappa[static_cast<std::size_t>(b)];
                int hold = kap_a > kap_b || (kap_a == kap_b && a > b) ? a : b;
                if (!(hold == a ? ra : rb) && (hold == a ? rb : ra)) hold = hold == a ? b : a;
                changed = set_kappa(hold, H + 2) || changed;
            }
        }

        // Lateral binaries: keep a carried-over choice that still holds, otherwise the fewest
        // ones that satisfy each OR row against the current trajectories.
        for (const auto& pr : inst.pairs) {
            auto past = [&](int cav, double phi) {
                const auto& x = xs[static_cast<std::size_t>(cav)];
                for (int k = 1; k <= H; ++k) {
                    if (x[CavInfo::p(H, k)] < phi + prm.d_min - kInitTol) return false;
                }
                return true;
            };
            auto before = [&](int cav, double phi) {
                const auto& x = xs[static_cast<std::size_t>(cav)];
                for (int k = 1; k <= H; ++k) {
                    if (x[CavInfo::p(H, k)] > phi - prm.d_min + kInitTol) return false;
                }
                return x[CavInfo::p(H, H)] + alpha * x[CavInfo::v(H, H)] <= phi - prm.d_min + kInitTol;
            };
            // Brakes `cav` only if that keeps it short of the node; otherwise leaves it alone.
            auto try_brake = [&](int cav, double phi, bool& flag) {
                const auto i = static_cast<std::size_t>(cav);
                if (braking[i]) return false;
                const Eigen::VectorXd keep = xs[i];
                brake(cav);
                if (before(cav, phi) && followers_fit(cav, xs[i])) {
                    flag = true;
                    return true;
                }
                xs[i] = keep;
                braking[i] = 0;
                return false;
            };
            auto bin = [&](int light, int col) -> double& {
                const auto& lt = inst.agents[static_cast<std::size_t>(light)].light;
                return xs[static_cast<std::size_t>(light)][lt.binary(H, col)];
            };
            bool ca = past(pr.cav_a, pr.phi_a);
            bool cb = past(pr.cav_b, pr.phi_b);
            bool ea = before(pr.cav_a, pr.phi_a);
            bool eb = before(pr.cav_b, pr.phi_b);
            double& bca = bin(pr.light_a, pr.c_a);
            double& bea = bin(pr.light_a, pr.e_a);
            double& bcb = bin(pr.light_b, pr.c_b);
            double& beb = bin(pr.light_b, pr.e_b);
            const bool box_a = inst.agents[static_cast<std::size_t>(pr.cav_a)].cav.in_box;
            const bool box_b = inst.agents[static_cast<std::size_t>(pr.cav_b)].cav.in_box;
            // A CAV inside the box should not wait on one that can still stop at its line;
            // otherwise the clearance rows hold that line red and neither moves.
            const bool unset = bca + bea + bcb + beb < 0.5;
            if (box_a && !box_b && !eb && !cb && (unset || bea > 0.5)) eb = try_brake(pr.cav_b, pr.phi_b, changed);
            if (box_b && !box_a && !ea && !ca && (unset || beb > 0.5)) ea = try_brake(pr.cav_a, pr.phi_a, changed);
            const bool any = bca + bea + bcb + beb > 0.5;
            const bool inverted = (bea > 0.5 && box_a && !box_b && eb) || (beb > 0.5 && box_b && !box_a && ea);
            const bool sound = (bca < 0.5 || ca) && (bea < 0.5 || ea) && (bcb < 0.5 || cb) && (beb < 0.5 || eb);
            if (any && sound && !inverted) continue;
            if (any && bea > 0.5 && !ea && brake(pr.cav_a)) {
                changed = true;
                ea = before(pr.cav_a, pr.phi_a);
                if (ea) continue;
            }
            if (any && beb > 0.5 && !eb && brake(pr.cav_b)) {
                changed = true;
                eb = before(pr.cav_b, pr.phi_b);
                if (eb) continue;
            }
            changed = true;
            bca = bea = bcb = beb = 0.0;
            if (ca) {
                bca = 1.0;
                continue;
            }
            if (cb) {
                bcb = 1.0;
                continue;
            }
            if (!ea && !eb) {
                if (brake(pr.cav_a)) ea = before(pr.cav_a, pr.phi_a);
                if (brake(pr.cav_b)) eb = before(pr.cav_b, pr.phi_b);
            }
            if (!ea && !eb) {
                const auto& a = inst.agents[static_cast<std::size_t>(pr.cav_a)];
                const auto& b = inst.agents[static_cast<std::size_t>(pr.cav_b)];
                throw InitError("initialization: lateral pair " + a.name + " / " + b.name + " at node " +
                                std::to_string(pr.node) + " has no feasible order");
            }
            bool a_yields = ea;
            if (ea && eb) {
                const auto& a = inst.agents[static_cast<std::size_t>(pr.cav_a)].cav;
                const auto& b = inst.agents[static_cast<std::size_t>(pr.cav_b)].cav;
                const double ta = (pr.phi_a - a.p0) / std::max(a.v0, 0.1);
                const double tb = (pr.phi_b - b.p0) / std::max(b.v0, 0.1);
                if (box_a != box_b) a_yields = box_b;
                else a_yields = ta > tb || (ta == tb && pr.cav_a > pr.cav_b);
            }
            if (a_yields) bea = 1.0;
            else beb = 1.0;
        }

        // Rear-end repair, front to back: re-plan a follower against everything ahead of it.
        // A carried plan that now runs into an HDV leader is re-planned once as well, before
        // the CAVs behind it commit to following it.
        for (std::size_t i = 0; i < n; ++i) {
            const auto& ag = inst.agents[i];
            if (ag.kind != AgentKind::Cav) continue;
            const int id = static_cast<int>(i);
            std::vector<int> ahead;
            std::vector<int> behind;
            bool broken = false;
            for (int r : ag.coupling) {
                const auto& row = inst.coupling[static_cast<std::size_t>(r)];
                if (row.family == RowFamily::RearEnd && row.agent_b == id) {
                    behind.push_back(r);
                    continue;
                }
                ahead.push_back(r);
                if (row.family == RowFamily::RearEnd && violated(row)) broken = true;
            }
            if (!broken && !replanned[i] && !braking[i] && inst.local_violation(id, xs[i]) > kInitTol) broken = true;
            if (!broken) continue;
            replanned[i] = 1;
            changed = true;
            // Prefer a plan the followers' current plans still fit behind. Only when that leaves a
            // real overlap with an HDV leader, leave room for the followers' braking plans instead.
            std::vector<int> rows = ahead;
            rows.insert(rows.end(), behind.begin(), behind.end());
            const auto blk = continuous_block(inst, ag);
            auto res = solve_continuous(inst, blk, id, xs, rows, qp);
            if (!res.ok || inst.local_violation(id, res.x) > kReplanSlack) {
                std::vector<Eigen::VectorXd> view = xs;
                for (int r : behind) {
                    const auto f = static_cast<std::size_t>(inst.coupling[static_cast<std::size_t>(r)].agent_a);
                    const auto& c = inst.agents[f].cav;
                    view[f] = cav_state(H, dt, c.p0, c.v0, braking_controls(H, dt, c.v0, prm.u_min));
                }
                auto alt = solve_continuous(inst, blk, id, view, rows, qp);
                if (alt.ok && (!res.ok || inst.local_violation(id, alt.x) <
                                              inst.local_violation(id, res.x) - kReplanSlack)) {
                    res = std::move(alt);
                }
            }
            if (!res.ok) res = solve_continuous(inst, blk, id, xs, ahead, qp);
            if (!res.ok) {
                braking[i] = 0;
                brake(id);
                continue;
            }
            xs[i] = res.x;
            braking[i] = 0;
        }

        if (!changed) break;
    }
    for (const auto& row : inst.coupling) {
        if (violated(row)) {
            std::ostringstream os;
            os << "initialization: " << to_string(row.family) << " row between "
               << inst.agents[static_cast<std::size_t>(row.agent_a)].name << " and "
               << inst.agents[static_cast<std::size_t>(row.agent_b)].name << " violated by " << residual(row);
            throw InitError(os.str());
        }
    }

    std::vector<BlockSolution> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make_block(inst, static_cast<int>(i), std::move(xs[i])));
    return out;
}

}  // namespace

std::vector<BlockSolution> initialize(const Instance& inst, const QpSettings& qp, const WarmStart* warm) {
    if (warm) {
        try {
            return initialize_impl(inst, qp, warm);
        } catch (const InitError&) {
            // fall back to the cold start
        }
    }
    return initialize_impl(inst, qp, nullptr);
}

LocalCandidate local_step(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs,
                          const MbiSettings& settings) {
    const auto& ag = inst.agents.at(static_cast<std::size_t>(agent));
    if (ag.kind == AgentKind::Light) return light_step(inst, agent, xs);
    return continuous_step(inst, continuous_block(inst, ag), agent, xs, settings.qp);
}

bool accept_rule(double delta_f, int id, std::span<const NeighborDelta> neighbors, double eps, AcceptanceOrder order) {
    if (!(delta_f < -eps)) return false;
    for (const auto& nb : neighbors) {
        if (!(nb.delta_f < -eps)) continue;
        const bool better = order == AcceptanceOrder::GreatestReduction ? nb.delta_f < delta_f : nb.delta_f > delta_f;
        if (better || (nb.delta_f == delta_f && nb.id < id)) return false;
    }
    return true;
}

MbiResult run(const Instance& inst, std::vector<BlockSolution> init, const MbiSettings& settings) {
    const auto n = static_cast<int>(inst.agents.size());
    if (static_cast<int>(init.size()) != n) throw MbiError("run: one initial block per agent required");
    std::vector<Eigen::VectorXd> xs(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) xs[static_cast<std::size_t>(i)] = init[static_cast<std::size_t>(i)].x;

    MbiResult out;
    Coordinator coord(inst, settings);
    std::vector<double> cost(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) cost[static_cast<std::size_t>(i)] = inst.penalized_cost(i, xs[static_cast<std::size_t>(i)]);
    auto total = [&] {
        double s = 0.0;
        for (double c : cost) s += c;
        return s;
    };
    {
        IterationTrace t0;
        t0.total_cost = total();
        t0.coupling_residual = inst.coupling_residual(xs);
        out.trace.push_back(t0);
    }
    if (settings.record_iterates) out.iterates.push_back(xs);

    std::vector<LocalCandidate> cand(static_cast<std::size_t>(n));
    std::vector<char> dirty(static_cast<std::size_t>(n), 1);
    bool natural = false;
    int t = 1;
    for (; t <= settings.max_iterations; ++t) {
        std::vector<int> todo;
        for (int i = 0; i < n; ++i) {
            if (dirty[static_cast<std::size_t>(i)]) todo.push_back(i);
        }
        out.local_solves += static_cast<long>(todo.size());
        parallel_for(static_cast<int>(todo.size()), settings.workers, [&](int j) {
            const int i = todo[static_cast<std::size_t>(j)];
            cand[static_cast<std::size_t>(i)] = coord.step(i, xs);
        });
        std::fill(dirty.begin(), dirty.end(), 0);

        IterationTrace tr;
        tr.t = t;
        tr.delta_f.resize(static_cast<std::size_t>(n));
        for (int i = 0; i < n; ++i) tr.delta_f[static_cast<std::size_t>(i)] = cand[static_cast<std::size_t>(i)].delta_f;
        std::vector<NeighborDelta> nbs;
        for (int i = 0; i < n; ++i) {
            nbs.clear();
            for (int j : inst.agents[static_cast<std::size_t>(i)].neighbors) {
                nbs.push_back({cand[static_cast<std::size_t>(j)].delta_f, j});
            }
            if (accept_rule(cand[static_cast<std::size_t>(i)].delta_f, i, nbs, settings.eps_term, settings.order)) {
                tr.accepted.push_back(i);
            }
        }
        for (int i : tr.accepted) {
            auto& c = cand[static_cast<std::size_t>(i)];
            xs[static_cast<std::size_t>(i)] = c.x;
            cost[static_cast<std::size_t>(i)] = c.cost;
            dirty[static_cast<std::size_t>(i)] = 1;
            for (int j : inst.agents[static_cast<std::size_t>(i)].neighbors) dirty[static_cast<std::size_t>(j)] = 1;
        }
        tr.total_cost = total();
        tr.coupling_residual = inst.coupling_residual(xs);
        const bool done = tr.accepted.empty();
        out.trace.push_back(std::move(tr));
        if (settings.record_iterates) out.iterates.push_back(xs);
        if (done) {
            natural = true;
            break;
        }
    }

    // Person-by-person gap from a best-response pass against the final iterate.
    double gap = 0.0;
    for (int i = 0; i < n; ++i) {
        if (dirty[static_cast<std::size_t>(i)]) cand[static_cast<std::size_t>(i)] = coord.step(i, xs);
        gap = std::max(gap, -cand[static_cast<std::size_t>(i)].delta_f);
    }
    out.certificate.pbp_gap = gap;
    out.certificate.natural_termination = natural;
    out.certificate.iterations = natural ? t : settings.max_iterations;
    out.certificate.coupling_residual = std::max(0.0, inst.coupling_residual(xs));
    out.blocks.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) out.blocks.push_back(make_block(inst, i, std::move(xs[static_cast<std::size_t>(i)])));
    return out;
}

void write_trace_csv(std::ostream& os, const std::vector<IterationTrace>& trace) {
    os << "t,agent_id,delta_f,accepted,total_cost\n";
    for (const auto& tr : trace) {
        for (std::size_t i = 0; i < tr.delta_f.size(); ++i) {
            const bool acc = std::find(tr.accepted.begin(), tr.accepted.end(), static_cast<int>(i)) != tr.accepted.end();
            os << tr.t << ',' << i << ',' << tr.delta_f[i] << ',' << (acc ? 1 : 0) << ',' << tr.total_cost << '\n';
        }
    }
}

}  // namespace tlc
