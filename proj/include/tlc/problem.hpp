#pragma once

#include "tlc/core_model.hpp"
#include "tlc/mip.hpp"

#include <Eigen/Dense>

#include <string>
#include <vector>

namespace tlc {

enum class AgentKind { Light, Cav, Generic };

/// Constraint families, used for reporting and audits.
enum class RowFamily {
    SwitchGap,    // kappa bounds
    NoConflict,   // s_l + s_m <= 1
    RedStop,      // stop at red (CAV coupling or HDV local)
    RearEnd,
    LateralBigM,  // position vs c/e binary
    LateralOr,    // c + e + c' + e' >= 1
    SpeedLimit,
    MustGo,       // keep green for a vehicle that can no longer stop
    Clearance,    // stay red while a conflicting vehicle is inside the box
    Generic,
};

[[nodiscard]] const char* to_string(RowFamily f) noexcept;
[[nodiscard]] const char* to_string(AgentKind k) noexcept;

struct SparseRow {
    std::vector<int> idx;
    std::vector<double> val;

    void add(int i, double v) {
        idx.push_back(i);
        val.push_back(v);
    }
    [[nodiscard]] double dot(const Eigen::VectorXd& x) const;
    [[nodiscard]] bool empty() const noexcept { return idx.empty(); }
};

/// a'x <= b on one agent's variables. Every local row is penalized.
struct LocalRow {
    SparseRow a;
    double b{0.0};
    RowFamily family{RowFamily::Generic};
};

/// ca'x_a + cb'x_b <= d between two agents.
struct CouplingRow {
    int agent_a{0};
    int agent_b{0};
    SparseRow ca;
    SparseRow cb;
    double d{0.0};
    RowFamily family{RowFamily::Generic};

    [[nodiscard]] double residual(const Eigen::VectorXd& xa, const Eigen::VectorXd& xb) const {
        return ca.dot(xa) + cb.dot(xb) - d;
    }
};

/// Layout of a CAV block: x = [p(1..H), v(1..H), u(0..H-1)], tied by the dynamics
/// x = T u + c. The u box is the block's domain.
struct CavInfo {
    std::uint64_t vid{0};
    int lane{0};
    int index{0};  // position in the lane's vehicle list
    double p0{0.0};
    double v0{0.0};
    bool ready{false};
    bool in_box{false};  // past its stop line

    [[nodiscard]] static int p(int /*H*/, int k) { return k - 1; }      // k = 1..H
    [[nodiscard]] static int v(int H, int k) { return H + k - 1; }  // k = 1..H
    [[nodiscard]] static int u(int H, int k) { return 2 * H + k; }  // k = 0..H-1
};

/// Layout of a light block: x = [kappa, s(1..H), binaries...]; s follows kappa.
struct LightInfo {
    int lane{0};
    int s0{0};
    KappaBounds bounds;
    bool bounds_active{false};  // lane holds at least one HDV
    double gamma{0.0};
    std::vector<std::string> binary_names;

    [[nodiscard]] static int kappa() { return 0; }
    [[nodiscard]] static int s(int k) { return k; }  // k = 1..H
    [[nodiscard]] int binary(int H, int j) const { return 1 + H + j; }
};

struct AgentProblem {
    int id{0};
    AgentKind kind{AgentKind::Generic};
    std::string name;
    int n{0};
    // f(x) = x'Qx + q'x + c0
    Eigen::MatrixXd Q;
    Eigen::VectorXd q;
    double c0{0.0};
    Eigen::VectorXd lb, ub;  // Generic blocks: variable box
    std::vector<LocalRow> local;
    std::vector<int> coupling;  // indices into Instance::coupling
    std::vector<int> neighbors;
    CavInfo cav;
    LightInfo light;

    [[nodiscard]] double objective(const Eigen::VectorXd& x) const { return x.dot(Q * x) + q.dot(x) + c0; }
};

/// A CAV-CAV conflict with its four binaries: c/e of CAV a on light la, c/e of CAV b on light lb.
struct LateralPair {
    int cav_a{0};
    int cav_b{0};
    int light_a{0};
    int light_b{0};
    int node{0};
    double phi_a{0.0};
    double phi_b{0.0};
    int c_a{0}, e_a{0}, c_b{0}, e_b{0};  // column indices inside the light blocks
};

struct Instance {
    HorizonParams horizon;
    ModelParams params;
    std::vector<AgentProblem> agents;
    std::vector<CouplingRow> coupling;
    std::vector<LateralPair> pairs;

    [[nodiscard]] int H() const noexcept { return horizon.H; }
    /// Rebuilds each agent's coupling index and neighbor list from `coupling`.
    void link();
    /// f~_i(x) = f_i(x) + rho * sum max(0, A_i x - b_i)
    [[nodiscard]] double penalized_cost(int agent, const Eigen::VectorXd& x) const;
    [[nodiscard]] double local_violation(int agent, const Eigen::VectorXd& x) const;
    /// Largest positive coupling residual.
    [[nodiscard]] double coupling_residual(const std::vector<Eigen::VectorXd>& xs) const;
};

/// Affine map from the controls of a CAV block to its full layout.
struct CavRollout {
    Eigen::MatrixXd T;  // 3H x H
    Eigen::VectorXd c;  // 3H
};
[[nodiscard]] CavRollout cav_rollout(int H, double dt, double p0, double v0);

/// Expands controls into the [p, v, u] layout.
[[nodiscard]] Eigen::VectorXd cav_state(int H, double dt, double p0, double v0, const Eigen::VectorXd& u);

/// Light block from kappa and binaries.
[[nodiscard]] Eigen::VectorXd light_state(int H, int s0, int kappa, const Eigen::VectorXd& binaries);

struct HdvPrediction {
    std::uint64_t vid{0};
    double accel{0.0};
    std::vector<double> p;  // offsets 1..H
    std::vector<double> v;
};

/// Constant-acceleration rollout from the averaged finite-difference acceleration
/// over the last `est_steps` speed samples. Speed is clamped to [0, v_max].
[[nodiscard]] HdvPrediction predict_hdv(const std::vector<double>& history, const VehicleState& state, int H,
                                        double dt, double v_max, int est_steps = 5);

/// Laterally conflicting pairs between lanes l and m with at least one HDV.
[[nodiscard]] int count_eta(const WorldState& world, const Intersection& geo, int l, int m);
[[nodiscard]] double priority_gamma(const WorldState& world, const Intersection& geo, int l);
[[nodiscard]] bool ready_to_stop(const VehicleState& state, double psi, double u_min, double margin);

/// Distance covered while braking at u_min from v_max to rest, divided by v_max. Stopping
/// distance is convex in speed, so alpha * v bounds it from above on [0, v_max].
[[nodiscard]] double stopping_ratio(const ModelParams& params, double dt);

/// Comfortable deceleration human drivers are assumed to accept at a red light.
inline constexpr double kHdvComfortDecel = 2.5;

enum class ControlMode { Coordinated, LightOnly };
[[nodiscard]] const char* to_string(ControlMode m) noexcept;

/// One control step's separable problem. Agent ids: lights 0..L-1, then CAVs lane by lane, front first.
[[nodiscard]] Instance build_problem(const WorldState& world, const Intersection& geo, const ModelParams& params,
                                     const HorizonParams& horizon, ControlMode mode = ControlMode::Coordinated);

/// A light block written as a mixed-integer program: columns [kappa, s, binaries],
/// with the listed coupling rows as hard rows against fixed neighbor values.
struct LightMip {
    MipProblem mip;
    std::vector<int> local_rows;
};
[[nodiscard]] LightMip light_block_mip(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs);

}  // namespace tlc
