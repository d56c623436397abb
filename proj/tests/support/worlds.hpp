#pragma once

#include "tlc/core_model.hpp"

#include <vector>

namespace tlc::testing {

// Two crossing lanes: stop line at 58, one node at 64 on both.
inline Intersection cross2(double node0 = 64.0, double node1 = 64.0) {
    return Intersection({LaneGeometry{0, 60.0, 58.0, {}, 40.0}, LaneGeometry{1, 60.0, 58.0, {}, 40.0}},
                        {ConflictNode{0, 0, 1, node0, node1}});
}

inline Intersection single_lane() { return Intersection({LaneGeometry{0, 60.0, 58.0, {}, 40.0}}, {}); }

inline VehicleState vehicle(std::uint64_t id, int lane, VehicleKind kind, double p, double v) {
    VehicleState s;
    s.id = id;
    s.lane = lane;
    s.kind = kind;
    s.p = p;
    s.v = v;
    return s;
}

inline VehicleState cav(std::uint64_t id, int lane, double p, double v) {
    return vehicle(id, lane, VehicleKind::Cav, p, v);
}

inline VehicleState hdv(std::uint64_t id, int lane, double p, double v) {
    auto s = vehicle(id, lane, VehicleKind::Hdv, p, v);
    s.speed_history.assign(6, v);
    return s;
}

inline WorldState empty_world(int lanes, int s = 0, long last_switch = -30) {
    WorldState w;
    w.lanes.resize(static_cast<std::size_t>(lanes));
    w.lights.assign(static_cast<std::size_t>(lanes), LightState{s, last_switch});
    return w;
}

}  // namespace tlc::testing
