#pragma once

#include "tlc/mbi.hpp"
#include "tlc/problem.hpp"

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlc {

class OracleError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Largest violation per constraint family, local and coupling rows reported separately.
struct FeasibilityReport {
    std::map<RowFamily, double> local;
    std::map<RowFamily, double> coupling;

    [[nodiscard]] double max_local() const;
    [[nodiscard]] double max_coupling() const;
};

[[nodiscard]] FeasibilityReport check_rows(const Instance& inst, const std::vector<Eigen::VectorXd>& xs);

/// One integer assignment: kappa and binaries of every light.
struct Leaf {
    std::vector<int> kappa;
    std::vector<Eigen::VectorXd> binaries;
    bool feasible{false};
    double objective{0.0};
};

struct OracleSettings {
    double max_leaves{1e6};
    bool record_leaves{false};
    QpSettings qp;
};

struct OracleResult {
    bool feasible{false};
    std::vector<Eigen::VectorXd> x;  // one block per agent
    double objective{0.0};           // sum of penalized costs
    FeasibilityReport report;
    double enumeration_size{0.0};
    long qp_solves{0};
    std::vector<Leaf> leaves;        // only with record_leaves
};

/// Number of integer points: prod over lights of (H + 2) * 2^binaries.
[[nodiscard]] double integer_space(const Instance& inst);

/// Exact minimizer of the summed penalized costs with every coupling row hard. Enumerates the
/// integer part of all lights (kappa from H + 2 down to 1, then binaries in increasing order)
/// and solves the joint continuous problem of all CAVs per leaf. Ties keep the first leaf.
/// Throws OracleError when the integer space exceeds `max_leaves`.
[[nodiscard]] OracleResult solve_centralized(const Instance& inst, const OracleSettings& settings = {});

/// Exact best response of one agent against fixed neighbors, computed without the coordinator.
struct BestResponse {
    Eigen::VectorXd x;
    double cost{0.0};
};
[[nodiscard]] BestResponse best_response(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs,
                                         const QpSettings& qp = {});

/// gap_i = f~_i(x_i) - f~_i(best response), clamped at 0. Throws OracleError if the input
/// violates a coupling row by more than `tol`.
[[nodiscard]] std::vector<double> verify_pbp(const Instance& inst, const std::vector<Eigen::VectorXd>& xs,
                                             double tol = 1e-6, const QpSettings& qp = {});

/// Whether the agent's problem with local rows hard (no penalty) has a feasible point
/// against fixed neighbors.
[[nodiscard]] bool hard_subproblem_feasible(const Instance& inst, int agent, const std::vector<Eigen::VectorXd>& xs,
                                            const QpSettings& qp = {});

/// Small seeded instance: 2 or 3 mutually crossing lanes, up to 2 vehicles per lane, H in {4, 5, 6}.
/// Draws are repeated until cold initialization succeeds and the integer space has at most
/// `max_leaves` points.
struct MicroInstance {
    std::uint64_t seed{0};
    Intersection geo;
    WorldState world;
    ModelParams params;
    HorizonParams horizon;
    ControlMode mode{ControlMode::Coordinated};
    Instance inst;
};

[[nodiscard]] ModelParams micro_params();
[[nodiscard]] MicroInstance make_micro_instance(std::uint64_t seed, ControlMode mode = ControlMode::Coordinated,
                                                double max_leaves = 1e4);

/// Two CAVs on crossing lanes, equally far from the shared node, both lights red.
[[nodiscard]] MicroInstance make_crossing_instance(ControlMode mode);

/// Checks run by `tlc verify` on one micro instance.
struct MicroReport {
    std::uint64_t seed{0};
    int agents{0};
    int horizon{0};
    int iterations{0};
    bool natural{false};
    double exact_penalty{0.0};    // worst local violation among blocks whose hard subproblem is feasible
    double iterate_residual{0.0}; // worst coupling residual over all iterates
    bool monotone{true};
    double pbp_gap{0.0};          // verify_pbp on the MBI output
    double oracle_residual{0.0};  // MBI output against the centralized row set
    double oracle_pbp_gap{0.0};   // verify_pbp on the global optimum
    double optimality_gap{0.0};   // (f_mbi - f*) / (1 + |f*|)

    [[nodiscard]] bool passed(double tol = 1e-6) const;
};

[[nodiscard]] MicroReport check_micro_instance(const MicroInstance& mi, const MbiSettings& settings = {});

}  // namespace tlc
