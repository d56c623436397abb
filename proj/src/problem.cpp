#include "tlc/problem.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

namespace tlc {

namespace {

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Offset (1..H) at which a braking rollout first reaches `landmark`, or 0 if it stays short.
// CAV-CAV pairs keep their lateral constraint until one vehicle is d_min past the node,
// so that a follower cannot reach the node while the other is still inside its d_min disc.
bool cav_pair_active(double pa, double phi_a, double pb, double phi_b, double d_min) {
    return pa < phi_a + d_min && pb < phi_b + d_min;
}

}  // namespace

const char* to_string(RowFamily f) noexcept {
    switch (f) {
        case RowFamily::SwitchGap: return "switch_gap";
        case RowFamily::NoConflict: return "no_conflict";
        case RowFamily::RedStop: return "red_stop";
        case RowFamily::RearEnd: return "rear_end";
        case RowFamily::LateralBigM: return "lateral_bigm";
        case RowFamily::LateralOr: return "lateral_or";
        case RowFamily::SpeedLimit: return "speed_limit";
        case RowFamily::MustGo: return "must_go";
        case RowFamily::Clearance: return "clearance";
        case RowFamily::Generic: return "generic";
    }
    return "?";
}

const char* to_string(AgentKind k) noexcept {
    switch (k) {
        case AgentKind::Light: return "light";
        case AgentKind::Cav: return "cav";
        case AgentKind::Generic: return "generic";
    }
    return "?";
}

const char* to_string(ControlMode m) noexcept { return m == ControlMode::Coordinated ? "coordinated" : "light_only"; }

double SparseRow::dot(const Eigen::VectorXd& x) const {
    double s = 0.0;
    for (std::size_t i = 0; i < idx.size(); ++i) s += val[i] * x[idx[i]];
    return s;
}

void Instance::link() {
    std::vector<std::set<int>> nb(agents.size());
    for (auto& a : agents) a.coupling.clear();
    for (std::size_t r = 0; r < coupling.size(); ++r) {
        const auto& row = coupling[r];
        if (row.agent_a == row.agent_b) throw DomainError("coupling row joins an agent to itself");
        agents.at(static_cast<std::size_t>(row.agent_a)).coupling.push_back(static_cast<int>(r));
        agents.at(static_cast<std::size_t>(row.agent_b)).coupling.push_back(static_cast<int>(r));
        nb[static_cast<std::size_t>(row.agent_a)].insert(row.agent_b);
        nb[static_cast<std::size_t>(row.agent_b)].insert(row.agent_a);
    }
    for (std::size_t i = 0; i < agents.size(); ++i) agents[i].neighbors.assign(nb[i].begin(), nb[i].end());
}

double Instance::penalized_cost(int agent, const Eigen::VectorXd& x) const {
    const auto& a = agents.at(static_cast<std::size_t>(agent));
    double pen = 0.0;
    for (const auto& row : a.local) pen += std::max(0.0, row.a.dot(x) - row.b);
    return a.objective(x) + params.rho * pen;
}

double Instance::local_violation(int agent, const Eigen::VectorXd& x) const {
    double worst = 0.0;
    for (const auto& row : agents.at(static_cast<std::size_t>(agent)).local) {
        worst = std::max(worst, row.a.dot(x) - row.b);
    }
    return worst;
}

double Instance::coupling_residual(const std::vector<Eigen::VectorXd>& xs) const {
    double worst = 0.0;
    for (const auto& row : coupling) {
        worst = std::max(worst, row.residual(xs[static_cast<std::size_t>(row.agent_a)],
                                             xs[static_cast<std::size_t>(row.agent_b)]));
    }
    return worst;
}

CavRollout cav_rollout(int H, double dt, double p0, double v0) {
    CavRollout out{Eigen::MatrixXd::Zero(3 * H, H), Eigen::VectorXd::Zero(3 * H)};
    for (int k = 1; k <= H; ++k) {
        const double t = k * dt;
        out.c[CavInfo::p(H, k)] = p0 + t * v0;
        out.c[CavInfo::v(H, k)] = v0;
        // u(j) acts for the remaining (k - j) steps of the window.
        for (int j = 0; j < k; ++j) {
            const double rem = (k - j - 1) * dt;
            out.T(CavInfo::p(H, k), j) = 0.5 * dt * dt + dt * rem;
            out.T(CavInfo::v(H, k), j) = dt;
        }
    }
    for (int j = 0; j < H; ++j) out.T(CavInfo::u(H, j), j) = 1.0;
    return out;
}

Eigen::VectorXd cav_state(int H, double dt, double p0, double v0, const Eigen::VectorXd& u) {
    Eigen::VectorXd x(3 * H);
    double p = p0, v = v0;
    for (int k = 1; k <= H; ++k) {
        const auto next = step_dynamics(p, v, u[k - 1], dt);
        p = next.p;
        v = next.v;
        x[CavInfo::p(H, k)] = p;
        x[CavInfo::v(H, k)] = v;
        x[CavInfo::u(H, k - 1)] = u[k - 1];
    }
    return x;
}

Eigen::VectorXd light_state(int H, int s0, int kappa, const Eigen::VectorXd& binaries) {
    Eigen::VectorXd x(1 + H + binaries.size());
    x[0] = kappa;
    const auto s = light_schedule(s0, kappa, H);
    for (int k = 1; k <= H; ++k) x[k] = s[static_cast<std::size_t>(k - 1)];
    x.tail(binaries.size()) = binaries;
    return x;
}

HdvPrediction predict_hdv(const std::vector<double>& history, const VehicleState& state, int H, double dt,
                          double v_max, int est_steps) {
    if (history.empty()) throw DomainError("predict_hdv: empty speed history");
    HdvPrediction out;
    out.vid = state.id;
    const int span = std::min<int>(est_steps, static_cast<int>(history.size()) - 1);
    if (span > 0) {
        out.accel = (history.back() - history[history.size() - 1 - static_cast<std::size_t>(span)]) / (span * dt);
    }
    const double a = out.accel;
    double p = state.p, v = std::clamp(state.v, 0.0, v_max);
    for (int k = 1; k <= H; ++k) {
        double next_v = v + dt * a;
        if (next_v < 0.0) {
            const double t0 = a < 0.0 ? v / -a : 0.0;
            p += v * t0 + 0.5 * a * t0 * t0;
            next_v = 0.0;
        } else if (next_v > v_max) {
            const double t1 = (v_max - v) / a;
            p += v * t1 + 0.5 * a * t1 * t1 + v_max * (dt - t1);
            next_v = v_max;
        } else {
            p += dt * v + 0.5 * dt * dt * a;
        }
        v = next_v;
        out.p.push_back(p);
        out.v.push_back(v);
    }
    return out;
}

int count_eta(const WorldState& world, const Intersection& geo, int l, int m) {
    const auto nodes = geo.shared_nodes(l, m);
    if (nodes.empty()) throw DomainError("count_eta: lanes " + std::to_string(l) + " and " + std::to_string(m) + " do not cross");
    int count = 0;
    for (const auto& a : world.lanes.at(static_cast<std::size_t>(l))) {
        for (const auto& b : world.lanes.at(static_cast<std::size_t>(m))) {
            if (a.is_cav() && b.is_cav()) continue;
            bool conflict = false;
            for (const auto* n : nodes) conflict = conflict || has_lateral_conflict(a, b, *n);
            if (conflict) ++count;
        }
    }
    return count;
}

double priority_gamma(const WorldState& world, const Intersection& geo, int l) {
    const double psi = geo.lane(l).stop_line;
    double g = 0.0;
    for (const auto& veh : world.lanes.at(static_cast<std::size_t>(l))) {
        if (veh.p < psi) g += sigmoid((veh.p - psi / 2.0) / (psi / 2.0));
    }
    return g;
}

double stopping_ratio(const ModelParams& params, double dt) {
    if (params.v_max <= 0.0) return 0.0;
    double p = 0.0;
    double v = params.v_max;
    while (v > 0.0) {
        const double u = std::max(params.u_min, -v / dt);
        const auto next = step_dynamics(p, v, u, dt);
        p = next.p;
        v = std::max(0.0, next.v);
    }
    return p / params.v_max;
}

// A CAV held exactly at its stop line by a red-stop row is still upstream of it.
namespace {
bool cav_past_stop_line(double p, double psi) { return p > psi + 1e-6; }

// Whether full braking keeps the vehicle at or before `psi` over the horizon, terminal
// stopping distance included.
bool can_hold_at(double p, double v, double psi, const ModelParams& params, int H, double dt, double alpha) {
    constexpr double tol = 1e-6;
    for (int k = 0; k < H; ++k) {
        const double u = v > 0.0 ? std::max(params.u_min, -v / dt) : 0.0;
        const auto next = step_dynamics(p, v, u, dt);
        p = next.p;
        v = std::max(0.0, next.v);
        if (p > psi + tol) return false;
    }
    return p + alpha * v <= psi + tol;
}
}  // namespace

bool ready_to_stop(const VehicleState& state, double psi, double u_min, double margin) {
    return state.p < psi && state.p + state.v * state.v / (2.0 * std::abs(u_min)) <= psi - margin;
}

Instance build_problem(const WorldState& world, const Intersection& geo, const ModelParams& params,
                       const HorizonParams& horizon, ControlMode mode) {
    params.validate();
    world.validate(params);
    if (static_cast<int>(world.lanes.size()) != geo.lane_count()) throw DomainError("build_problem: lane count mismatch");
    const int H = horizon.H;
    const double dt = horizon.dt;
    const int L = geo.lane_count();
    const double M = params.big_m;
    const double margin = params.d_min / 2.0;

    Instance inst;
    inst.horizon = horizon;
    inst.params = params;

    // Agent ids: lights first, then CAVs lane by lane, front first.
    std::vector<std::vector<int>> cav_id(static_cast<std::size_t>(L));
    int next_id = L;
    for (int l = 0; l < L; ++l) {
        const auto& lane = world.lanes[static_cast<std::size_t>(l)];
        cav_id[static_cast<std::size_t>(l)].assign(lane.size(), -1);
        for (std::size_t i = 0; i < lane.size(); ++i) {
            if (lane[i].is_cav()) cav_id[static_cast<std::size_t>(l)][i] = next_id++;
        }
    }
    inst.agents.resize(static_cast<std::size_t>(next_id));

    // Terminal rows bound the stopping distance beyond the horizon by alpha * v(H).
    const double alpha = stopping_ratio(params, dt);
    // Past its stop line, or too close and fast to stop at it: either way it enters the box.
    auto cav_committed = [&](const VehicleState& v, double psi) {
        return cav_past_stop_line(v.p, psi) || !can_hold_at(v.p, v.v, psi, params, H, dt, alpha);
    };

    // Every position expression must stay well inside the big-M range.
    for (const auto& lane : world.lanes) {
        for (const auto& veh : lane) {
            if (std::abs(veh.p) + params.v_max * (H * dt + alpha) + params.d_min >= M) {
                throw DomainError("build_problem: big-M does not dominate position range");
            }
        }
    }

    // Lateral CAV-CAV pairs (coordinated mode only), binaries allocated per (CAV, pair).
    std::vector<std::vector<std::string>> bin_names(static_cast<std::size_t>(L));
    if (mode == ControlMode::Coordinated) {
        for (int l = 0; l < L; ++l) {
            for (int m = l + 1; m < L; ++m) {
                for (const auto* node : geo.shared_nodes(l, m)) {
                    const double phi_l = node->pos_on(l), phi_m = node->pos_on(m);
                    const auto& la = world.lanes[static_cast<std::size_t>(l)];
                    const auto& lb = world.lanes[static_cast<std::size_t>(m)];
                    for (std::size_t i = 0; i < la.size(); ++i) {
                        if (!la[i].is_cav()) continue;
                        for (std::size_t j = 0; j < lb.size(); ++j) {
                            if (!lb[j].is_cav()) continue;
                            if (!cav_pair_active(la[i].p, phi_l, lb[j].p, phi_m, params.d_min)) continue;
                            LateralPair pr;
                            pr.cav_a = cav_id[static_cast<std::size_t>(l)][i];
                            pr.cav_b = cav_id[static_cast<std::size_t>(m)][j];
                            pr.light_a = l;
                            pr.light_b = m;
                            pr.node = node->id;
                            pr.phi_a = phi_l;
                            pr.phi_b = phi_m;
                            auto alloc = [&](int lane, const VehicleState& own, const VehicleState& other, char kind) {
                                auto& names = bin_names[static_cast<std::size_t>(lane)];
                                std::ostringstream os;
                                os << "x_" << kind << "_v" << own.id << "_v" << other.id << "_n" << node->id;
                                names.push_back(os.str());
                                return static_cast<int>(names.size()) - 1;
                            };
                            pr.c_a = alloc(l, la[i], lb[j], 'c');
                            pr.e_a = alloc(l, la[i], lb[j], 'e');
                            pr.c_b = alloc(m, lb[j], la[i], 'c');
                            pr.e_b = alloc(m, lb[j], la[i], 'e');
                            inst.pairs.push_back(pr);
                        }
                    }
                }
            }
        }
    }

    // Light blocks.
    for (int l = 0; l < L; ++l) {
        auto& ag = inst.agents[static_cast<std::size_t>(l)];
        const auto& lane = world.lanes[static_cast<std::size_t>(l)];
        const auto& lg = geo.lane(l);
        const double psi = lg.stop_line;
        ag.id = l;
        ag.kind = AgentKind::Light;
        ag.name = "light" + std::to_string(l);
        auto& li = ag.light;
        li.lane = l;
        li.s0 = world.lights[static_cast<std::size_t>(l)].s;
        li.bounds = kappa_bounds(world.lights[static_cast<std::size_t>(l)].last_switch, horizon.k0, params.delta_min,
                                 params.delta_max, H);
        li.bounds_active = std::any_of(lane.begin(), lane.end(), [](const VehicleState& v) { return !v.is_cav(); });
        li.gamma = priority_gamma(world, geo, l);
        li.binary_names = bin_names[static_cast<std::size_t>(l)];
        ag.n = 1 + H + static_cast<int>(li.binary_names.size());
        ag.Q = Eigen::MatrixXd::Zero(ag.n, ag.n);
        ag.q = Eigen::VectorXd::Zero(ag.n);
        for (int k = 1; k <= H; ++k) ag.q[LightInfo::s(k)] = -li.gamma;
        if (li.bounds_active) {
            LocalRow lo, hi;
            lo.a.add(LightInfo::kappa(), -1.0);
            lo.b = -li.bounds.lo;
            lo.family = RowFamily::SwitchGap;
            hi.a.add(LightInfo::kappa(), 1.0);
            hi.b = li.bounds.hi;
            hi.family = RowFamily::SwitchGap;
            ag.local.push_back(lo);
            ag.local.push_back(hi);
        }
        for (const auto& veh : lane) {
            if (has_crossed(veh.p, psi)) continue;
            if (veh.is_cav()) continue;  // CAVs carry their own red-stop coupling rows
            const bool ready = ready_to_stop(veh, psi, -kHdvComfortDecel, 0.0);
            const std::vector<double> hist(veh.speed_history.begin(), veh.speed_history.end());
            const auto pred = predict_hdv(hist.empty() ? std::vector<double>{veh.v} : hist, veh, H, dt,
                                          params.v_max, params.est_steps);
            if (ready) {
                for (int k = 1; k <= H; ++k) {
                    const double pk = pred.p[static_cast<std::size_t>(k - 1)];
                    if (pk <= psi) continue;
                    LocalRow row;
                    row.a.add(LightInfo::s(k), -M);
                    row.b = psi - pk;
                    row.family = RowFamily::RedStop;
                    ag.local.push_back(row);
                }
                continue;
            }
            int must_until = 0;
            for (int k = 1; k <= H && must_until == 0; ++k) {
                if (has_crossed(pred.p[static_cast<std::size_t>(k - 1)], psi)) must_until = k;
            }
            if (must_until == 0) must_until = H;
            for (int k = 1; k <= must_until; ++k) {
                LocalRow row;
                row.a.add(LightInfo::s(k), -M);
                row.b = -M;
                row.family = RowFamily::MustGo;
                ag.local.push_back(row);
            }
        }

        // Box clearance: stay red while a conflicting HDV that passed (or can no longer stop
        // before) its own stop line is still within d_min of a node it shares with a vehicle
        // waiting here. These rows and the must-go rows are scaled by M so that their penalty
        // outweighs the meter-scaled prediction rows.
        int clear_until = 0;
        for (int m = 0; m < L; ++m) {
            if (m == l) continue;
            const double psi_m = geo.lane(m).stop_line;
            for (const auto* node : geo.shared_nodes(m, l)) {
                const double exit_m = node->pos_on(m) + params.d_min;
                const double phi_l = node->pos_on(l);
                for (const auto& a : world.lanes[static_cast<std::size_t>(m)]) {
                    if (a.is_cav() || has_crossed(a.p, exit_m)) continue;
                    // An HDV that can no longer stop is committed to the box as well.
                    if (!has_crossed(a.p, psi_m) && ready_to_stop(a, psi_m, -kHdvComfortDecel, 0.0)) continue;
                    const bool waiting = std::any_of(lane.begin(), lane.end(), [&](const VehicleState& b) {
                        if (has_crossed(b.p, phi_l)) return false;
                        return mode == ControlMode::LightOnly || !(a.is_cav() && b.is_cav());
                    });
                    if (!waiting) continue;
                    int k_clear = 0;
                    const std::vector<double> hist(a.speed_history.begin(), a.speed_history.end());
                    const auto pred = predict_hdv(hist.empty() ? std::vector<double>{a.v} : hist, a, H, dt,
                                                  params.v_max, params.est_steps);
                    for (int k = 1; k <= H && k_clear == 0; ++k) {
                        if (has_crossed(pred.p[static_cast<std::size_t>(k - 1)], exit_m)) k_clear = k;
                    }
                    clear_until = std::max(clear_until, k_clear == 0 ? H : k_clear);
                }
            }
        }
        for (int k = 1; k <= clear_until; ++k) {
            LocalRow row;
            row.a.add(LightInfo::s(k), M);
            row.b = 0.0;
            row.family = RowFamily::Clearance;
            ag.local.push_back(row);
        }
    }

    // CAV blocks.
    for (int l = 0; l < L; ++l) {
        const auto& lane = world.lanes[static_cast<std::size_t>(l)];
        const double psi = geo.lane(l).stop_line;
        for (std::size_t i = 0; i < lane.size(); ++i) {
            const int id = cav_id[static_cast<std::size_t>(l)][i];
            if (id < 0) continue;
            const auto& veh = lane[i];
            auto& ag = inst.agents[static_cast<std::size_t>(id)];
            ag.id = id;
            ag.kind = AgentKind::Cav;
            ag.name = "cav" + std::to_string(veh.id);
            ag.n = 3 * H;
            ag.cav = {veh.id, l, static_cast<int>(i), veh.p, veh.v, ready_to_stop(veh, psi, params.u_min, margin),
                      cav_committed(veh, psi)};
            ag.Q = Eigen::MatrixXd::Zero(ag.n, ag.n);
            ag.q = Eigen::VectorXd::Zero(ag.n);
            for (int k = 1; k <= H; ++k) ag.q[CavInfo::p(H, k)] = -params.w_p;
            for (int k = 0; k < H; ++k) ag.Q(CavInfo::u(H, k), CavInfo::u(H, k)) = params.w_u;
            for (int k = 1; k <= H; ++k) {
                LocalRow up, dn;
                up.a.add(CavInfo::v(H, k), 1.0);
                up.b = params.v_max;
                up.family = RowFamily::SpeedLimit;
                dn.a.add(CavInfo::v(H, k), -1.0);
                dn.b = -params.v_min;
                dn.family = RowFamily::SpeedLimit;
                ag.local.push_back(up);
                ag.local.push_back(dn);
            }
            if (i > 0) {
                const auto& leader = lane[i - 1];
                const int lid = cav_id[static_cast<std::size_t>(l)][i - 1];
                if (lid >= 0) {
                    for (int k = 1; k <= H; ++k) {
                        CouplingRow row;
                        row.agent_a = id;
                        row.agent_b = lid;
                        row.ca.add(CavInfo::p(H, k), 1.0);
                        row.ca.add(CavInfo::v(H, k), params.tau);
                        row.cb.add(CavInfo::p(H, k), -1.0);
                        row.d = -params.d_min;
                        row.family = RowFamily::RearEnd;
                        inst.coupling.push_back(row);
                    }
                } else {
                    const std::vector<double> hist(leader.speed_history.begin(), leader.speed_history.end());
                    const auto pred = predict_hdv(hist.empty() ? std::vector<double>{leader.v} : hist, leader, H, dt,
                                                  params.v_max, params.est_steps);
                    for (int k = 1; k <= H; ++k) {
                        LocalRow row;
                        row.a.add(CavInfo::p(H, k), 1.0);
                        row.a.add(CavInfo::v(H, k), params.tau);
                        row.b = pred.p[static_cast<std::size_t>(k - 1)] - params.d_min;
                        row.family = RowFamily::RearEnd;
                        ag.local.push_back(row);
                    }
                }
            }
            if (!cav_committed(veh, psi)) {
                for (int k = 1; k <= H; ++k) {
                    CouplingRow row;
                    row.agent_a = id;
                    row.agent_b = l;
                    row.ca.add(CavInfo::p(H, k), 1.0);
                    row.cb.add(LightInfo::s(k), -M);
                    row.d = psi;
                    row.family = RowFamily::RedStop;
                    inst.coupling.push_back(row);
                }
                CouplingRow term;
                term.agent_a = id;
                term.agent_b = l;
                term.ca.add(CavInfo::p(H, H), 1.0);
                term.ca.add(CavInfo::v(H, H), alpha);
                term.cb.add(LightInfo::s(H), -M);
                term.d = psi;
                term.family = RowFamily::RedStop;
                inst.coupling.push_back(term);
            }
        }
    }

    // Box clearance for CAVs past their stop line: a conflicting light may show green at
    // offset k only once the CAV is d_min beyond the shared node.
    for (int l = 0; l < L; ++l) {
        const auto& lane = world.lanes[static_cast<std::size_t>(l)];
        const double psi = geo.lane(l).stop_line;
        for (std::size_t i = 0; i < lane.size(); ++i) {
            const auto& a = lane[i];
            if (!a.is_cav() || !cav_committed(a, psi)) continue;
            for (int m = 0; m < L; ++m) {
                if (m == l) continue;
                double exit_pos = -1.0;
                for (const auto* node : geo.shared_nodes(l, m)) {
                    const double exit_l = node->pos_on(l) + params.d_min;
                    if (has_crossed(a.p, exit_l)) continue;
                    const auto& other = world.lanes[static_cast<std::size_t>(m)];
                    const bool waiting = std::any_of(other.begin(), other.end(), [&](const VehicleState& b) {
                        if (has_crossed(b.p, node->pos_on(m))) return false;
                        return mode == ControlMode::LightOnly || !b.is_cav();
                    });
                    if (waiting) exit_pos = std::max(exit_pos, exit_l);
                }
                if (exit_pos < 0.0) continue;
                for (int k = 1; k <= H; ++k) {
                    CouplingRow row;
                    row.agent_a = cav_id[static_cast<std::size_t>(l)][i];
                    row.agent_b = m;
                    row.ca.add(CavInfo::p(H, k), -1.0);
                    row.cb.add(LightInfo::s(k), M);
                    row.d = M - exit_pos;
                    row.family = RowFamily::Clearance;
                    inst.coupling.push_back(row);
                }
            }
        }
    }

    // Lateral big-M rows and the OR rows between the two lights.
    for (const auto& pr : inst.pairs) {
        const int cavs[2] = {pr.cav_a, pr.cav_b};
        const int lights[2] = {pr.light_a, pr.light_b};
        const double phis[2] = {pr.phi_a, pr.phi_b};
        const int cs[2] = {pr.c_a, pr.c_b};
        const int es[2] = {pr.e_a, pr.e_b};
        for (int side = 0; side < 2; ++side) {
            const auto& lt = inst.agents[static_cast<std::size_t>(lights[side])].light;
            for (int k = 1; k <= H; ++k) {
                CouplingRow c, e;
                c.agent_a = e.agent_a = cavs[side];
                c.agent_b = e.agent_b = lights[side];
                c.ca.add(CavInfo::p(H, k), -1.0);
                c.cb.add(lt.binary(H, cs[side]), M);
                c.d = M - phis[side] - params.d_min;
                e.ca.add(CavInfo::p(H, k), 1.0);
                e.cb.add(lt.binary(H, es[side]), M);
                e.d = phis[side] - params.d_min + M;
                c.family = e.family = RowFamily::LateralBigM;
                inst.coupling.push_back(c);
                inst.coupling.push_back(e);
            }
            CouplingRow term;
            term.agent_a = cavs[side];
            term.agent_b = lights[side];
            term.ca.add(CavInfo::p(H, H), 1.0);
            term.ca.add(CavInfo::v(H, H), alpha);
            term.cb.add(lt.binary(H, es[side]), M);
            term.d = phis[side] - params.d_min + M;
            term.family = RowFamily::LateralBigM;
            inst.coupling.push_back(term);
        }
        const auto& la = inst.agents[static_cast<std::size_t>(pr.light_a)].light;
        const auto& lb = inst.agents[static_cast<std::size_t>(pr.light_b)].light;
        CouplingRow orow;
        orow.agent_a = pr.light_a;
        orow.agent_b = pr.light_b;
        orow.ca.add(la.binary(H, pr.c_a), -1.0);
        orow.ca.add(la.binary(H, pr.e_a), -1.0);
        orow.cb.add(lb.binary(H, pr.c_b), -1.0);
        orow.cb.add(lb.binary(H, pr.e_b), -1.0);
        orow.d = -1.0;
        orow.family = RowFamily::LateralOr;
        inst.coupling.push_back(orow);
    }

    // Mutual exclusion of conflicting lights.
    for (int l = 0; l < L; ++l) {
        for (int m = l + 1; m < L; ++m) {
            if (!geo.conflicting(l, m)) continue;
            int eta = count_eta(world, geo, l, m);
            if (mode == ControlMode::LightOnly && eta == 0) {
                // CAV-CAV pairs are resolved by the lights alone here, with the same
                // persistence window as the coordinated lateral rows.
                for (const auto* node : geo.shared_nodes(l, m)) {
                    for (const auto& a : world.lanes[static_cast<std::size_t>(l)]) {
                        for (const auto& b : world.lanes[static_cast<std::size_t>(m)]) {
                            if (a.is_cav() && b.is_cav() &&
                                cav_pair_active(a.p, node->pos_on(l), b.p, node->pos_on(m), params.d_min)) {
                                ++eta;
                            }
                        }
                    }
                }
            }
            if (eta == 0) continue;
            for (int k = 1; k <= H; ++k) {
                CouplingRow row;
                row.agent_a = l;
                row.agent_b = m;
                row.ca.add(LightInfo::s(k), 1.0);
                row.cb.add(LightInfo::s(k), 1.0);
                row.d = 1.0;
                row.family = RowFamily::NoConflict;
                inst.coupling.push_back(row);
            }
        }
    }

    inst.link();
    return inst;
}

LightMip light_block_mip(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs) {
    const auto& ag = inst.agents.at(static_cast<std::size_t>(agent));
    if (ag.kind != AgentKind::Light) throw DomainError("light_block_mip: agent is not a light");
    const int H = inst.H();
    const int n = ag.n;
    const double big = H + 2;
    const int s0 = ag.light.s0;

    std::vector<std::pair<SparseRow, double>> rows;
    // Schedule linking: s(k) = [k >= kappa] xor s0.
    for (int k = 1; k <= H; ++k) {
        SparseRow a, b;
        if (s0 == 0) {
            a.add(0, 1.0);
            a.add(k, big);
            rows.emplace_back(a, k + big);
            b.add(0, -1.0);
            b.add(k, -big);
            rows.emplace_back(b, -k - 1.0);
        } else {
            a.add(0, 1.0);
            a.add(k, -big);
            rows.emplace_back(a, k);
            b.add(0, -1.0);
            b.add(k, big);
            rows.emplace_back(b, big - k - 1.0);
        }
    }
    std::vector<int> local_rows;
    for (const auto& lr : ag.local) {
        local_rows.push_back(static_cast<int>(rows.size()));
        rows.emplace_back(lr.a, lr.b);
    }
    for (int r : ag.coupling) {
        const auto& row = inst.coupling[static_cast<std::size_t>(r)];
        const bool own_a = row.agent_a == agent;
        const auto& mine = own_a ? row.ca : row.cb;
        const auto& theirs = own_a ? row.cb : row.ca;
        const int other = own_a ? row.agent_b : row.agent_a;
        rows.emplace_back(mine, row.d - theirs.dot(xs.at(static_cast<std::size_t>(other))));
    }
    Eigen::MatrixXd G = Eigen::MatrixXd::Zero(static_cast<int>(rows.size()), n);
    Eigen::VectorXd h(static_cast<int>(rows.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t t = 0; t < rows[i].first.idx.size(); ++t) {
            G(static_cast<int>(i), rows[i].first.idx[t]) += rows[i].first.val[t];
        }
        h[static_cast<int>(i)] = rows[i].second;
    }
    Eigen::VectorXd lb = Eigen::VectorXd::Zero(n), ub = Eigen::VectorXd::Ones(n);
    lb[0] = 1.0;
    ub[0] = big;
    LightMip out{MipProblem{QpProblem(2.0 * ag.Q, ag.q, std::move(G), std::move(h), std::move(lb), std::move(ub)), {}},
                 std::move(local_rows)};
    out.mip.integers.push_back({"kappa", 0, 1, H + 2});
    for (int k = 1; k <= H; ++k) {
        std::ostringstream os;
        os << 's' << (k < 10 ? "0" : "") << k;
        out.mip.integers.push_back({os.str(), k, 0, 1});
    }
    for (std::size_t j = 0; j < ag.light.binary_names.size(); ++j) {
        out.mip.integers.push_back({ag.light.binary_names[j], ag.light.binary(H, static_cast<int>(j)), 0, 1});
    }
    return out;
}

}  // namespace tlc
