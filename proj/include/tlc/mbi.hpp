#pragma once

#include "tlc/problem.hpp"
#include "tlc/qp.hpp"

#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace tlc {

struct BlockSolution {
    int agent_id{0};
    Eigen::VectorXd x;
    double penalized_cost{0.0};
    double local_violation{0.0};
};

struct IterationTrace {
    int t{0};
    std::vector<double> delta_f;  // per agent; empty for t = 0
    std::vector<int> accepted;
    double total_cost{0.0};
    double coupling_residual{0.0};
};

struct Certificate {
    double coupling_residual{0.0};
    double pbp_gap{0.0};
    int iterations{0};
    bool natural_termination{false};
};

enum class AcceptanceOrder { GreatestReduction, Literal };

struct MbiSettings {
    int max_iterations{500};
    double eps_term{1e-6};
    AcceptanceOrder order{AcceptanceOrder::GreatestReduction};
    int workers{1};
    /// Keep every iterate (tests); otherwise only the final one.
    bool record_iterates{false};
    QpSettings qp;
};

struct MbiResult {
    std::vector<BlockSolution> blocks;
    Certificate certificate;
    std::vector<IterationTrace> trace;
    std::vector<std::vector<Eigen::VectorXd>> iterates;
    long local_solves{0};
};

class InitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class MbiError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

[[nodiscard]] BlockSolution make_block(const Instance& inst, int agent, Eigen::VectorXd x);

/// Controls that brake at u_min until rest, with a partial last step so v reaches 0 exactly.
[[nodiscard]] Eigen::VectorXd braking_controls(int H, double dt, double v0, double u_min);

/// The accepted plan of one step, shifted by one offset so it can seed the next step.
struct WarmStart {
    std::unordered_map<std::uint64_t, Eigen::VectorXd> cav_u;  // vid -> controls for offsets 0..H-1
    std::unordered_map<int, int> kappa;                         // lane -> switch offset
    std::unordered_map<std::string, double> binaries;           // lateral binary name -> value
};

[[nodiscard]] WarmStart shift_plan(const Instance& inst, const std::vector<BlockSolution>& blocks);

/// Braking CAVs and holding lights (or the shifted previous plan when `warm` is given), light
/// repairs for red-stop, clearance and exclusion rows, a front-to-back repair of rear-end rows,
/// and lateral binaries chosen against the resulting trajectories. A warm start that cannot be
/// repaired falls back to the cold one. Throws InitError if a coupling row still fails.
[[nodiscard]] std::vector<BlockSolution> initialize(const Instance& inst, const QpSettings& qp = {},
                                                    const WarmStart* warm = nullptr);

struct LocalCandidate {
    Eigen::VectorXd x;
    double cost{0.0};
    double delta_f{0.0};
};

/// Best response of one agent against fixed neighbor blocks.
[[nodiscard]] LocalCandidate local_step(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs,
                                        const MbiSettings& settings = {});

struct NeighborDelta {
    double delta_f{0.0};
    int id{0};
};

[[nodiscard]] bool accept_rule(double delta_f, int id, std::span<const NeighborDelta> neighbors, double eps,
                               AcceptanceOrder order = AcceptanceOrder::GreatestReduction);

[[nodiscard]] MbiResult run(const Instance& inst, std::vector<BlockSolution> init, const MbiSettings& settings = {});

/// One line per (iteration, agent): t,agent_id,delta_f,accepted,total_cost
void write_trace_csv(std::ostream& os, const std::vector<IterationTrace>& trace);

}  // namespace tlc
