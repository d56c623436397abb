#include "tlc/sim.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_map>

namespace tlc {

namespace {

constexpr double kCollisionRadius = 2.0;
// Tolerance on d_min separations; planned trajectories sit exactly on the bound.
constexpr double kSafetySlack = 1e-3;

struct AccelSum {
    double sum{0.0};
    long n{0};
};

void push_capped(std::deque<double>& dq, double value, std::size_t cap) {
    dq.push_back(value);
    while (dq.size() > cap) dq.pop_front();
}

// Integrates one step with constant acceleration, stopping at rest or capping at v_max
// part-way through the step instead of overshooting.
Kinematics integrate(double p, double v, double u, double dt, double v_max) {
    const double v_next = v + dt * u;
    if (v_next < 0.0) {
        const double t_stop = u < 0.0 ? v / -u : 0.0;
        return {p + 0.5 * v * t_stop, 0.0};
    }
    if (v_next > v_max && u > 0.0) {
        const double t_cap = std::max(0.0, (v_max - v) / u);
        return {p + v * t_cap + 0.5 * u * t_cap * t_cap + v_max * (dt - t_cap), v_max};
    }
    return step_dynamics(p, v, u, dt);
}

bool lane_has_hdv(const std::vector<VehicleState>& lane) {
    return std::any_of(lane.begin(), lane.end(), [](const VehicleState& v) { return !v.is_cav(); });
}

}  // namespace

double idm_accel(double v, std::optional<double> gap, double v_leader, const IdmParams& idm) {
    const double free = 1.0 - std::pow(std::max(v, 0.0) / idm.v0, idm.delta);
    if (!gap) return idm.a * free;
    const double s_star = idm.s0 + std::max(0.0, v * idm.T + v * (v - v_leader) / (2.0 * std::sqrt(idm.a * idm.b)));
    const double s = std::max(*gap, 1e-3);
    return idm.a * (free - (s_star / s) * (s_star / s));
}

double hdv_accel(const VehicleState& veh, const VehicleState* leader, bool red_ahead, double stop_line,
                 const ModelParams& params, const IdmParams& idm) {
    double u = leader ? idm_accel(veh.v, leader->p - veh.p - idm.length, leader->v, idm)
                      : idm_accel(veh.v, std::nullopt, 0.0, idm);
    if (red_ahead && veh.p < stop_line && ready_to_stop(veh, stop_line, -kHdvComfortDecel, 0.0)) {
        u = std::min(u, idm_accel(veh.v, stop_line - veh.p, 0.0, idm));
    }
    return std::clamp(u, params.u_min, params.u_max);
}

std::vector<Arrival> generate_arrivals(const ScenarioConfig& cfg, std::uint64_t seed) {
    std::vector<Arrival> out;
    const int lanes = cfg.geo.lane_count();
    if (cfg.duration <= 0.0 || cfg.demand.volume <= 0.0 || lanes == 0) return out;
    const double directions = std::max(1.0, lanes / 2.0);
    for (int l = 0; l < lanes; ++l) {
        const bool through = l % 2 == 0;
        const double share = lanes == 1 ? 1.0 : (through ? cfg.demand.through_share : 1.0 - cfg.demand.through_share);
        const double rate = cfg.demand.volume / directions * share / 3600.0;  // veh/s
        if (rate <= 0.0) continue;
        std::mt19937_64 rng(seed * 1000003ULL + static_cast<std::uint64_t>(l) * 7919ULL + 17ULL);
        std::exponential_distribution<double> gap(rate);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        double t = gap(rng);
        while (t < cfg.duration) {
            const VehicleKind kind = unit(rng) < cfg.demand.penetration ? VehicleKind::Cav : VehicleKind::Hdv;
            out.push_back({t, l, kind});
            t += gap(rng);
        }
    }
    std::sort(out.begin(), out.end(), [](const Arrival& a, const Arrival& b) {
        return a.time != b.time ? a.time < b.time : a.lane < b.lane;
    });
    return out;
}

ControlPlan plan_from_blocks(const WorldState& world, const Instance& inst, const std::vector<BlockSolution>& blocks) {
    ControlPlan plan;
    const int H = inst.H();
    plan.next_light.resize(world.lights.size());
    for (std::size_t l = 0; l < world.lights.size(); ++l) plan.next_light[l] = world.lights[l].s;
    plan.cav_accel.resize(world.lanes.size());
    for (std::size_t l = 0; l < world.lanes.size(); ++l) plan.cav_accel[l].assign(world.lanes[l].size(), 0.0);
    for (const auto& agent : inst.agents) {
        const auto& x = blocks.at(static_cast<std::size_t>(agent.id)).x;
        if (agent.kind == AgentKind::Light) {
            plan.next_light.at(static_cast<std::size_t>(agent.light.lane)) =
                x(LightInfo::s(1)) > 0.5 ? 1 : 0;
        } else if (agent.kind == AgentKind::Cav) {
            plan.cav_accel.at(static_cast<std::size_t>(agent.cav.lane)).at(static_cast<std::size_t>(agent.cav.index)) =
                x(CavInfo::u(H, 0));
        }
    }
    return plan;
}

WorldState advance(const WorldState& world, const Intersection& geo, const ControlPlan& plan,
                   const ModelParams& params, const IdmParams& idm, std::vector<VehicleState>* retired) {
    WorldState next;
    next.step = world.step + 1;
    next.dt = world.dt;
    next.lights = world.lights;
    next.lanes.resize(world.lanes.size());
    const double dt = world.dt;
    const double t_next = next.time();
    const auto hist_cap = static_cast<std::size_t>(std::max(params.est_steps, 1) + 1);

    for (std::size_t l = 0; l < world.lanes.size(); ++l) {
        const auto& lane = world.lanes[l];
        const auto& lg = geo.lane(static_cast<int>(l));
        const bool red = world.lights.at(l).s == 0;
        for (std::size_t i = 0; i < lane.size(); ++i) {
            VehicleState veh = lane[i];
            double u = 0.0;
            if (veh.is_cav()) {
                u = plan.cav_accel.at(l).at(i);
            } else {
                u = hdv_accel(veh, i > 0 ? &lane[i - 1] : nullptr, red, lg.stop_line, params, idm);
            }
            const auto kin = integrate(veh.p, veh.v, u, dt, params.v_max);
            const double applied = (kin.v - veh.v) / dt;
            veh.p = kin.p;
            veh.v = kin.v;
            push_capped(veh.speed_history, veh.v, hist_cap);
            push_capped(veh.last_accels, applied, hist_cap);
            if (veh.p >= lg.exit_pos()) {
                veh.exit_time = t_next;
                if (retired) retired->push_back(std::move(veh));
            } else {
                next.lanes[l].push_back(std::move(veh));
            }
        }
        const int s_next = plan.next_light.at(l);
        if (s_next != world.lights[l].s) {
            next.lights[l].s = s_next;
            next.lights[l].last_switch = next.step;
        }
    }
    return next;
}

double EpisodeResult::avg_travel_time() const {
    if (completed.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : completed) s += r.exit_time - r.entry_time;
    return s / static_cast<double>(completed.size());
}

double EpisodeResult::avg_abs_accel() const {
    if (completed.empty()) return 0.0;
    double s = 0.0;
    for (const auto& r : completed) s += r.mean_abs_accel;
    return s / static_cast<double>(completed.size());
}

std::string dump_world(const WorldState& world) {
    std::ostringstream os;
    os.precision(10);
    os << "step " << world.step << " t=" << world.time() << "\n";
    for (std::size_t l = 0; l < world.lights.size(); ++l) {
        os << "lane " << l << " light=" << world.lights[l].s << " last_switch=" << world.lights[l].last_switch << "\n";
        for (const auto& v : world.lanes.at(l)) {
            os << "  vid=" << v.id << " " << to_string(v.kind) << " p=" << v.p << " v=" << v.v << "\n";
        }
    }
    return os.str();
}

namespace {

void check_safety(const WorldState& w, const Intersection& geo, const ModelParams& params, const IdmParams& idm,
                  SafetyCounters& sc, std::string& collision) {
    for (std::size_t l = 0; l < w.lanes.size(); ++l) {
        const auto& lane = w.lanes[l];
        for (std::size_t i = 1; i < lane.size(); ++i) {
            const double gap = lane[i - 1].p - lane[i].p;
            if (gap - idm.length < 0.0) {
                ++sc.collisions;
                if (collision.empty()) {
                    collision = "rear-end collision on lane " + std::to_string(l) + " between vid " +
                                std::to_string(lane[i - 1].id) + " and " + std::to_string(lane[i].id);
                }
            }
            if (lane[i].is_cav() && lane[i - 1].is_cav()) {
                sc.min_cav_gap = std::min(sc.min_cav_gap, gap);
                if (gap < params.d_min - kSafetySlack) ++sc.cav_rear_end;
            }
        }
    }
    for (const auto& node : geo.nodes()) {
        const auto& la = w.lanes.at(static_cast<std::size_t>(node.lane_a));
        const auto& lb = w.lanes.at(static_cast<std::size_t>(node.lane_b));
        for (const auto& a : la) {
            const double da = std::abs(a.p - node.pos_a);
            if (da >= params.d_min - kSafetySlack) continue;
            for (const auto& b : lb) {
                const double db = std::abs(b.p - node.pos_b);
                if (db >= params.d_min - kSafetySlack) continue;
                if (a.is_cav() && b.is_cav()) ++sc.cav_lateral;
                if (da < kCollisionRadius && db < kCollisionRadius) {
                    ++sc.collisions;
                    if (collision.empty()) {
                        collision = "lateral collision at node " + std::to_string(node.id) + " between vid " +
                                    std::to_string(a.id) + " and " + std::to_string(b.id);
                    }
                }
            }
        }
    }
}

}  // namespace

EpisodeResult run_episode(const ScenarioConfig& cfg, const EpisodeOptions& opts) {
    EpisodeResult out;
    const auto& geo = cfg.geo;
    const auto& params = cfg.params;
    const int L = geo.lane_count();
    HorizonParams horizon = cfg.horizon;

    WorldState world;
    world.dt = horizon.dt;
    world.lanes.resize(static_cast<std::size_t>(L));
    world.lights.assign(static_cast<std::size_t>(L), LightState{0, 0});

    const auto arrivals = generate_arrivals(cfg, cfg.seed);
    out.arrivals = static_cast<long>(arrivals.size());
    std::vector<std::deque<Arrival>> queues(static_cast<std::size_t>(L));
    std::size_t next_arrival = 0;
    std::uint64_t next_id = 1;
    std::unordered_map<std::uint64_t, AccelSum> accel;
    std::optional<WarmStart> warm;

    const long steps = std::lround(cfg.duration / horizon.dt);
    const double ve = cfg.demand.entry_speed;
    const double brake = -params.u_min;
    const auto hist_cap = static_cast<std::size_t>(std::max(params.est_steps, 1) + 1);

    for (long k = 0; k < steps; ++k) {
        world.step = k;
        const double t = world.time();
        while (next_arrival < arrivals.size() && arrivals[next_arrival].time <= t) {
            queues[static_cast<std::size_t>(arrivals[next_arrival].lane)].push_back(arrivals[next_arrival]);
            ++next_arrival;
        }
        for (int l = 0; l < L; ++l) {
            auto& q = queues[static_cast<std::size_t>(l)];
            if (q.empty()) continue;
            auto& lane = world.lanes[static_cast<std::size_t>(l)];
            if (!lane.empty()) {
                const auto& back = lane.back();
                const double need = params.d_min + params.tau * ve + std::max(0.0, (ve * ve - back.v * back.v) / (2.0 * brake));
                if (back.p < need) continue;
            }
            VehicleState veh;
            veh.id = next_id++;
            veh.lane = l;
            veh.kind = q.front().kind;
            veh.p = 0.0;
            veh.v = ve;
            veh.entry_time = q.front().time;
            push_capped(veh.speed_history, ve, hist_cap);
            lane.push_back(std::move(veh));
            q.pop_front();
            ++out.entered;
        }

        horizon.k0 = k;
        std::vector<BlockSolution> blocks;
        Instance inst;
        try {
            inst = build_problem(world, geo, params, horizon, cfg.mode);
            blocks = initialize(inst, opts.mbi.qp, warm ? &*warm : nullptr);
            auto res = run(inst, std::move(blocks), opts.mbi);
            if (opts.on_step) opts.on_step(world, inst, res);
            blocks = std::move(res.blocks);
            if (opts.record_steps) {
                StepRecord sr;
                sr.step = k;
                for (const auto& ls : world.lights) sr.lights.push_back(ls.s);
                sr.agents = static_cast<int>(inst.agents.size());
                sr.iterations = res.certificate.iterations;
                sr.coupling_residual = res.certificate.coupling_residual;
                sr.pbp_gap = res.certificate.pbp_gap;
                sr.natural_termination = res.certificate.natural_termination;
                out.steps.push_back(std::move(sr));
            }
        } catch (const std::exception& e) {
            out.fault = true;
            out.fault_message = "step " + std::to_string(k) + ": " + e.what();
            out.fault_dump = dump_world(world);
            break;
        }

        const auto plan = plan_from_blocks(world, inst, blocks);
        warm = shift_plan(inst, blocks);
        for (int l = 0; l < L; ++l) {
            const auto& lane = world.lanes[static_cast<std::size_t>(l)];
            if (!lane_has_hdv(lane)) continue;
            const auto& ls = world.lights[static_cast<std::size_t>(l)];
            const auto kb = kappa_bounds(ls.last_switch, k, params.delta_min, params.delta_max, horizon.H);
            const bool switched = plan.next_light[static_cast<std::size_t>(l)] != ls.s;
            if ((switched && kb.lo > 1) || (!switched && kb.hi <= 1)) ++out.safety.light_legality;
        }

        std::vector<VehicleState> retired;
        world = advance(world, geo, plan, params, cfg.idm, &retired);
        for (const auto& lane : world.lanes) {
            for (const auto& v : lane) {
                auto& acc = accel[v.id];
                acc.sum += std::abs(v.last_accels.back());
                ++acc.n;
            }
        }
        for (auto& v : retired) {
            auto& acc = accel[v.id];
            acc.sum += std::abs(v.last_accels.back());
            ++acc.n;
            out.completed.push_back({v.id, v.lane, v.kind, v.entry_time, *v.exit_time,
                                     acc.sum / static_cast<double>(acc.n)});
            accel.erase(v.id);
        }

        std::string collision;
        const long before = out.safety.cav_rear_end + out.safety.cav_lateral;
        check_safety(world, geo, params, cfg.idm, out.safety, collision);
        if (out.first_violation.empty() && out.safety.cav_rear_end + out.safety.cav_lateral > before) {
            out.first_violation = dump_world(world);
        }
        if (!collision.empty()) {
            out.fault = true;
            out.fault_message = "step " + std::to_string(world.step) + ": " + collision;
            out.fault_dump = dump_world(world);
            break;
        }
    }

    out.in_network = static_cast<long>(world.vehicle_count());
    for (const auto& q : queues) out.waiting += static_cast<long>(q.size());
    out.waiting += static_cast<long>(arrivals.size() - next_arrival);
    return out;
}

}  // namespace tlc
