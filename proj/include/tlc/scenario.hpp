#pragma once

#include "tlc/core_model.hpp"
#include "tlc/problem.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>

namespace tlc {

struct IdmParams {
    double v0{15.0};
    double T{1.0};
    double s0{2.0};
    double a{1.5};
    double b{2.5};
    double delta{4.0};
    double length{5.0};
};

struct DemandConfig {
    double volume{1200.0};        // veh/h over all lanes
    double penetration{0.6};      // CAV share
    double through_share{0.55};   // within a direction; the rest turns left
    double entry_speed{12.0};
};

struct ScenarioConfig {
    Intersection geo;
    ModelParams params;
    HorizonParams horizon;
    IdmParams idm;
    DemandConfig demand;
    ControlMode mode{ControlMode::Coordinated};
    double duration{300.0};
    std::uint64_t seed{1};
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Reads the sectioned key-value scenario format ([geometry], [params], [demand]).
/// A `schema = 1` key is required. Throws ConfigError with the offending key.
[[nodiscard]] ScenarioConfig load_scenario(const std::string& path);
[[nodiscard]] ScenarioConfig parse_scenario(std::istream& in, const std::string& origin = "<stream>");

}  // namespace tlc
