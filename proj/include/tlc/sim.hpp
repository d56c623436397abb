#pragma once

#include "tlc/mbi.hpp"
#include "tlc/scenario.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace tlc {

/// IDM acceleration for a follower at speed v behind a leader `gap` meters ahead (bumper to bumper).
[[nodiscard]] double idm_accel(double v, std::optional<double> gap, double v_leader, const IdmParams& idm);

/// Acceleration an HDV applies this step: IDM against its leader and, when the light is red and
/// a comfortable stop is still possible, against a standing obstacle at the stop line.
[[nodiscard]] double hdv_accel(const VehicleState& veh, const VehicleState* leader, bool red_ahead, double stop_line,
                               const ModelParams& params, const IdmParams& idm);

struct Arrival {
    double time{0.0};
    int lane{0};
    VehicleKind kind{VehicleKind::Hdv};
};

/// Poisson arrivals per lane over [0, duration), sorted by time then lane.
[[nodiscard]] std::vector<Arrival> generate_arrivals(const ScenarioConfig& cfg, std::uint64_t seed);

/// Per-step control decisions applied by `advance`.
struct ControlPlan {
    std::vector<int> next_light;                 // per lane
    std::vector<std::vector<double>> cav_accel;  // per lane, per vehicle; ignored for HDVs
};

/// Reads u(0) of every CAV block and s(1) of every light block.
[[nodiscard]] ControlPlan plan_from_blocks(const WorldState& world, const Instance& inst,
                                           const std::vector<BlockSolution>& blocks);

/// Moves every vehicle one step, updates lights, and retires vehicles past the exit.
/// Retired vehicles are appended to `retired` with their exit time set.
[[nodiscard]] WorldState advance(const WorldState& world, const Intersection& geo, const ControlPlan& plan,
                                 const ModelParams& params, const IdmParams& idm,
                                 std::vector<VehicleState>* retired = nullptr);

struct SafetyCounters {
    long cav_rear_end{0};   // CAV following another CAV closer than d_min
    long cav_lateral{0};    // two CAVs within d_min of a shared node (coordinated mode)
    long collisions{0};     // bumper overlap, or two vehicles within 2 m of a shared node
    long light_legality{0}; // switches inside the minimum phase or phases over the maximum
    double min_cav_gap{1e9};
};

struct VehicleRecord {
    std::uint64_t id{0};
    int lane{0};
    VehicleKind kind{VehicleKind::Hdv};
    double entry_time{0.0};
    double exit_time{0.0};
    double mean_abs_accel{0.0};
};

struct StepRecord {
    long step{0};
    std::vector<int> lights;
    int agents{0};
    int iterations{0};
    double coupling_residual{0.0};
    double pbp_gap{0.0};
    bool natural_termination{true};
};

struct EpisodeResult {
    std::vector<VehicleRecord> completed;
    std::vector<StepRecord> steps;
    SafetyCounters safety;
    long arrivals{0};
    long entered{0};
    long in_network{0};   // still inside at the end
    long waiting{0};      // generated but never admitted
    bool fault{false};
    std::string fault_message;
    std::string fault_dump;
    std::string first_violation;  // first CAV safety violation with a state dump, if any

    [[nodiscard]] double avg_travel_time() const;
    [[nodiscard]] double avg_abs_accel() const;
};

struct EpisodeOptions {
    MbiSettings mbi;
    bool record_steps{false};
    /// Called after each control step's solve, before the world advances.
    std::function<void(const WorldState&, const Instance&, const MbiResult&)> on_step;
};

/// Closed-loop run of `cfg.duration` seconds from an empty intersection with all lights red.
/// Initialization or solver failures and collisions stop the run and set `fault`.
[[nodiscard]] EpisodeResult run_episode(const ScenarioConfig& cfg, const EpisodeOptions& opts = {});

/// Human-readable state snapshot used in fault reports.
[[nodiscard]] std::string dump_world(const WorldState& world);

}  // namespace tlc
