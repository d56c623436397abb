#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlc {

class DomainError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// A conflict point as seen from one lane: its id and its arc-length position on that lane.
struct ConflictRef {
    int node_id{0};
    double own_pos{0.0};
};

/// One approach lane. Positions are 1-D arc lengths measured from the control-zone entry.
struct LaneGeometry {
    int lane_id{0};
    double control_zone_length{150.0};  // entry to stop line region (upstream part)
    double stop_line{150.0};            // psi_l
    std::vector<ConflictRef> conflicts; // phi_l^n for every node on this lane
    double downstream_length{100.0};

    /// Position at which a vehicle leaves the control zone.
    [[nodiscard]] double exit_pos() const noexcept { return control_zone_length + downstream_length; }
    [[nodiscard]] std::optional<double> node_pos(int node_id) const noexcept;
};

/// A node n = l (x) m with its position along both lanes.
struct ConflictNode {
    int id{0};
    int lane_a{0};
    int lane_b{0};
    double pos_a{0.0};
    double pos_b{0.0};

    [[nodiscard]] double pos_on(int lane) const;
    [[nodiscard]] bool touches(int lane) const noexcept { return lane == lane_a || lane == lane_b; }
};

class Intersection {
public:
    Intersection() = default;
    Intersection(std::vector<LaneGeometry> lanes, std::vector<ConflictNode> nodes);

    [[nodiscard]] const std::vector<LaneGeometry>& lanes() const noexcept { return lanes_; }
    [[nodiscard]] const std::vector<ConflictNode>& nodes() const noexcept { return nodes_; }
    [[nodiscard]] const LaneGeometry& lane(int id) const { return lanes_.at(static_cast<std::size_t>(id)); }
    [[nodiscard]] int lane_count() const noexcept { return static_cast<int>(lanes_.size()); }

    /// Nodes shared by lanes l and m (empty when the lanes do not cross).
    [[nodiscard]] std::vector<const ConflictNode*> shared_nodes(int l, int m) const;
    [[nodiscard]] bool conflicting(int l, int m) const { return !shared_nodes(l, m).empty(); }

    /// Checks the geometry invariants; throws DomainError on the first violation.
    void validate() const;

private:
    std::vector<LaneGeometry> lanes_;
    std::vector<ConflictNode> nodes_;
};

enum class VehicleKind { Cav, Hdv };

[[nodiscard]] const char* to_string(VehicleKind kind) noexcept;

struct VehicleState {
    std::uint64_t id{0};
    int lane{0};
    VehicleKind kind{VehicleKind::Hdv};
    double p{0.0};
    double v{0.0};
    std::deque<double> speed_history;  // most recent last, sampled every step
    std::deque<double> last_accels;
    double entry_time{0.0};
    std::optional<double> exit_time;

    [[nodiscard]] bool is_cav() const noexcept { return kind == VehicleKind::Cav; }
};

struct LightState {
    int s{0};               // 0 = red, 1 = green
    long last_switch{0};    // k-bar: step index of the last switch
};

struct HorizonParams {
    int H{20};
    double dt{0.5};
    long k0{0};
};

/// Formulation constants. Defaults are the published parameter table.
struct ModelParams {
    double v_min{0.0};
    double v_max{15.0};
    double u_min{-4.0};
    double u_max{3.0};
    double tau{1.0};
    double d_min{6.0};
    int delta_min{20};
    int delta_max{100};
    double w_p{1.0};
    double w_u{0.1};
    double big_m{1e3};
    double rho{1e6};
    double eps_term{1e-6};
    int est_steps{5};

    void validate() const;
};

/// World snapshot at step k. Vehicles per lane are ordered front first (index 0 is closest to the exit).
struct WorldState {
    long step{0};
    double dt{0.5};
    std::vector<std::vector<VehicleState>> lanes;
    std::vector<LightState> lights;

    [[nodiscard]] double time() const noexcept { return static_cast<double>(step) * dt; }
    [[nodiscard]] std::size_t vehicle_count() const noexcept;
    /// Throws DomainError if lane ordering or speed bounds are violated.
    void validate(const ModelParams& params) const;
};

/// Light values at offsets 1..H for a switch at k0 + kappa.
[[nodiscard]] std::vector<int> light_schedule(int s0, int kappa, int H);

struct KappaBounds {
    int lo{1};
    int hi{1};
};

[[nodiscard]] KappaBounds kappa_bounds(long last_switch, long k0, int delta_min, int delta_max, int H);

struct Kinematics {
    double p{0.0};
    double v{0.0};
};

[[nodiscard]] constexpr Kinematics step_dynamics(double p, double v, double u, double dt) noexcept {
    return {p + dt * v + 0.5 * dt * dt * u, v + dt * u};
}

/// Crossing is closed on the far side: p >= landmark counts as crossed.
[[nodiscard]] constexpr bool has_crossed(double p, double landmark) noexcept { return p >= landmark; }

[[nodiscard]] bool has_lateral_conflict(const VehicleState& a, const VehicleState& b, const ConflictNode& node);

}  // namespace tlc
