#pragma once

#include "tlc/sim.hpp"

#include <iosfwd>
#include <string>

namespace tlc {

struct MetricsRow {
    double volume{0.0};
    double penetration{0.0};
    ControlMode mode{ControlMode::Coordinated};
    std::uint64_t seed{0};
    double avg_travel_time{0.0};
    double avg_abs_accel{0.0};
    long vehicle_count{0};
    bool fault{false};
};

inline constexpr const char* kMetricsHeader =
    "volume,penetration,mode,seed,avg_travel_time,avg_abs_accel,vehicle_count,fault";

[[nodiscard]] MetricsRow make_metrics_row(const ScenarioConfig& cfg, const EpisodeResult& ep);
[[nodiscard]] std::string format_metrics_row(const MetricsRow& row);
void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows);

}  // namespace tlc
