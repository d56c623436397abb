#include "tlc/core_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace tlc {

std::optional<double> LaneGeometry::node_pos(int node_id) const noexcept {
    for (const auto& c : conflicts) {
        if (c.node_id == node_id) return c.own_pos;
    }
    return std::nullopt;
}

double ConflictNode::pos_on(int lane) const {
    if (lane == lane_a) return pos_a;
    if (lane == lane_b) return pos_b;
    throw DomainError("conflict node " + std::to_string(id) + " is not on lane " + std::to_string(lane));
}

Intersection::Intersection(std::vector<LaneGeometry> lanes, std::vector<ConflictNode> nodes)
    : lanes_(std::move(lanes)), nodes_(std::move(nodes)) {
    // Lane-side views of the node table are derived, never supplied separately.
    for (auto& lane : lanes_) lane.conflicts.clear();
    for (const auto& n : nodes_) {
        if (n.lane_a < 0 || n.lane_a >= lane_count() || n.lane_b < 0 || n.lane_b >= lane_count()) {
            throw DomainError("conflict node " + std::to_string(n.id) + " references an unknown lane");
        }
        lanes_[static_cast<std::size_t>(n.lane_a)].conflicts.push_back({n.id, n.pos_a});
        lanes_[static_cast<std::size_t>(n.lane_b)].conflicts.push_back({n.id, n.pos_b});
    }
    for (auto& lane : lanes_) {
        std::sort(lane.conflicts.begin(), lane.conflicts.end(),
                  [](const ConflictRef& a, const ConflictRef& b) { return a.own_pos < b.own_pos; });
    }
    validate();
}

std::vector<const ConflictNode*> Intersection::shared_nodes(int l, int m) const {
    std::vector<const ConflictNode*> out;
    for (const auto& n : nodes_) {
        if ((n.lane_a == l && n.lane_b == m) || (n.lane_a == m && n.lane_b == l)) out.push_back(&n);
    }
    return out;
}

void Intersection::validate() const {
    for (std::size_t i = 0; i < lanes_.size(); ++i) {
        const auto& lane = lanes_[i];
        if (lane.lane_id != static_cast<int>(i)) throw DomainError("lane ids must be 0..L-1 in order");
        if (!(lane.stop_line > 0.0 && lane.stop_line < lane.exit_pos())) {
            throw DomainError("lane " + std::to_string(lane.lane_id) + ": stop line outside the control zone");
        }
        for (const auto& c : lane.conflicts) {
            if (!(c.own_pos > lane.stop_line)) {
                throw DomainError("lane " + std::to_string(lane.lane_id) + ": conflict node " +
                                  std::to_string(c.node_id) + " is not past the stop line");
            }
        }
    }
    std::map<int, int> seen;
    for (const auto& n : nodes_) {
        if (n.lane_a == n.lane_b) throw DomainError("conflict node " + std::to_string(n.id) + " joins a lane to itself");
        if (++seen[n.id] > 1) throw DomainError("duplicate conflict node id " + std::to_string(n.id));
    }
}

const char* to_string(VehicleKind kind) noexcept { return kind == VehicleKind::Cav ? "CAV" : "HDV"; }

void ModelParams::validate() const {
    auto fail = [](const std::string& what) { throw DomainError("model parameters: " + what); };
    if (!(u_min < 0.0 && 0.0 < u_max)) fail("need u_min < 0 < u_max");
    if (!(0.0 <= v_min && v_min < v_max)) fail("need 0 <= v_min < v_max");
    if (delta_min > delta_max) fail("need delta_min <= delta_max");
    if (!(w_p > 0 && w_u > 0 && big_m > 0 && rho > 0 && eps_term > 0)) fail("weights, M, rho, eps_term must be positive");
    if (rho < 1e3 * big_m) fail("rho must exceed M by at least three orders of magnitude");
    if (tau <= 0 || d_min <= 0) fail("tau and d_min must be positive");
    if (est_steps < 1) fail("estimation horizon must be at least one step");
}

std::size_t WorldState::vehicle_count() const noexcept {
    std::size_t n = 0;
    for (const auto& lane : lanes) n += lane.size();
    return n;
}

void WorldState::validate(const ModelParams& params) const {
    if (lanes.size() != lights.size()) throw DomainError("world: lane and light counts differ");
    for (std::size_t l = 0; l < lanes.size(); ++l) {
        const auto& lane = lanes[l];
        for (std::size_t i = 0; i < lane.size(); ++i) {
            const auto& veh = lane[i];
            if (veh.lane != static_cast<int>(l)) throw DomainError("world: vehicle stored on the wrong lane");
            if (veh.v < params.v_min - 1e-9 || veh.v > params.v_max + 1e-9) {
                std::ostringstream os;
                os << "world: vehicle " << veh.id << " speed " << veh.v << " outside limits";
                throw DomainError(os.str());
            }
            if (i > 0 && !(lane[i - 1].p > veh.p)) {
                std::ostringstream os;
                os << "world: lane " << l << " ordering violated at index " << i;
                throw DomainError(os.str());
            }
        }
        if (lights[l].s != 0 && lights[l].s != 1) throw DomainError("world: light state must be 0 or 1");
        if (lights[l].last_switch > step) throw DomainError("world: last switch lies in the future");
    }
}

std::vector<int> light_schedule(int s0, int kappa, int H) {
    if (H < 1) throw DomainError("light_schedule: horizon must be positive");
    if (kappa < 1 || kappa > H + 2) {
        throw DomainError("light_schedule: kappa " + std::to_string(kappa) + " outside 1.." + std::to_string(H + 2));
    }
    std::vector<int> out(static_cast<std::size_t>(H));
    for (int d = 1; d <= H; ++d) out[static_cast<std::size_t>(d - 1)] = d >= kappa ? 1 - s0 : s0;
    return out;
}

KappaBounds kappa_bounds(long last_switch, long k0, int delta_min, int delta_max, int H) {
    const long cap = H + 2;
    long lo = std::min<long>(delta_min + last_switch - k0, cap);
    long hi = std::max<long>(delta_max + last_switch - k0, 1);
    lo = std::clamp<long>(lo, 1, cap);
    hi = std::clamp<long>(hi, 1, cap);
    return {static_cast<int>(lo), static_cast<int>(hi)};
}

bool has_lateral_conflict(const VehicleState& a, const VehicleState& b, const ConflictNode& node) {
    if (a.lane == b.lane || !node.touches(a.lane) || !node.touches(b.lane)) {
        throw DomainError("has_lateral_conflict: node " + std::to_string(node.id) + " is not shared by lanes " +
                          std::to_string(a.lane) + " and " + std::to_string(b.lane));
    }
    return !has_crossed(a.p, node.pos_on(a.lane)) && !has_crossed(b.p, node.pos_on(b.lane));
}

}  // namespace tlc
