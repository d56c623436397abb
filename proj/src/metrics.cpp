#include "tlc/metrics.hpp"

#include <cstdio>
#include <ostream>

namespace tlc {

MetricsRow make_metrics_row(const ScenarioConfig& cfg, const EpisodeResult& ep) {
    return {cfg.demand.volume, cfg.demand.penetration, cfg.mode, cfg.seed,
            ep.avg_travel_time(), ep.avg_abs_accel(), static_cast<long>(ep.completed.size()), ep.fault};
}

// Fixed-precision formatting so identical runs give identical bytes.
std::string format_metrics_row(const MetricsRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%.0f,%.2f,%s,%llu,%.6f,%.6f,%ld,%d", r.volume, r.penetration, to_string(r.mode),
                  static_cast<unsigned long long>(r.seed), r.avg_travel_time, r.avg_abs_accel, r.vehicle_count,
                  r.fault ? 1 : 0);
    return buf;
}

void write_metrics_csv(std::ostream& os, const std::vector<MetricsRow>& rows) {
    os << kMetricsHeader << '\n';
    for (const auto& r : rows) os << format_metrics_row(r) << '\n';
}

}  // namespace tlc
