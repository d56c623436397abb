#pragma once

#include "tlc/qp.hpp"

#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tlc {

/// An integer-valued coordinate of the underlying QP with a finite domain lo..hi.
struct IntegerVar {
    std::string name;
    int index{0};
    int lo{0};
    int hi{0};
};

/// Mixed-integer convex QP: the continuous model of `qp` with some coordinates
/// restricted to integers. The QP box must contain every integer domain.
struct MipProblem {
    QpProblem qp;
    std::vector<IntegerVar> integers;

    /// Number of integer points, saturating at 1e18.
    [[nodiscard]] double search_space() const;
    void validate() const;
};

enum class MipStatus { Optimal, Infeasible };

struct MipSolution {
    Eigen::VectorXd x;
    double objective{0.0};
    MipStatus status{MipStatus::Infeasible};
    long nodes_explored{0};
    double search_space{0.0};
    // Penalized solves only.
    double penalty{0.0};
    double local_violation{0.0};
};

struct MipSettings {
    long budget{1'000'000};
    /// Plain enumeration is used up to this many integer points.
    double exhaustive_limit{4096};
    /// Tests use this to compare both search strategies on the same instance.
    enum class Strategy { Auto, Exhaustive, BranchAndBound } strategy{Strategy::Auto};
    QpSettings qp;
};

class MipBudgetExceeded : public std::runtime_error {
public:
    MipBudgetExceeded(const std::string& what, MipSolution incumbent)
        : std::runtime_error(what), incumbent_(std::move(incumbent)) {}
    [[nodiscard]] const MipSolution& incumbent() const noexcept { return incumbent_; }

private:
    MipSolution incumbent_;
};

/// Exact minimizer. Integer variables are explored in name order, lower values
/// first; among equal objectives the lexicographically smallest assignment wins.
[[nodiscard]] MipSolution solve_mip(const MipProblem& prob, const MipSettings& settings = {});

/// Same search, with the listed rows moved into rho * sum(max(0, row)) terms.
[[nodiscard]] MipSolution solve_penalized_tlc(const MipProblem& prob, std::span<const int> local_rows, double rho,
                                              const MipSettings& settings = {});

}  // namespace tlc
