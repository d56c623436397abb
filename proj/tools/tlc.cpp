#include "tlc/metrics.hpp"
#include "tlc/oracle.hpp"
#include "tlc/scenario.hpp"
#include "tlc/sim.hpp"

#include <CLI11.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

namespace {

constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitFault = 3;

int env_workers() {
    if (const char* w = std::getenv("TLC_WORKERS")) {
        const int n = std::atoi(w);
        if (n > 0) return n;
    }
    return 1;
}

tlc::ControlMode parse_mode(const std::string& s) {
    if (s == "coordinated") return tlc::ControlMode::Coordinated;
    if (s == "light_only") return tlc::ControlMode::LightOnly;
    throw tlc::ConfigError("unknown mode '" + s + "' (expected coordinated or light_only)");
}

void write_rows(const std::string& path, const std::vector<tlc::MetricsRow>& rows, bool append) {
    const bool fresh = !append || !std::filesystem::exists(path) || std::filesystem::file_size(path) == 0;
    std::ofstream os(path, append ? std::ios::app : std::ios::trunc);
    if (!os) throw tlc::ConfigError("cannot write '" + path + "'");
    if (fresh) os << tlc::kMetricsHeader << '\n';
    for (const auto& r : rows) os << tlc::format_metrics_row(r) << '\n';
}

void write_steps(const std::string& path, const tlc::EpisodeResult& ep) {
    std::ofstream os(path);
    if (!os) throw tlc::ConfigError("cannot write '" + path + "'");
    os << "step,agents,iterations,coupling_residual,pbp_gap,natural_termination,lights\n";
    os.precision(10);
    for (const auto& s : ep.steps) {
        os << s.step << ',' << s.agents << ',' << s.iterations << ',' << s.coupling_residual << ',' << s.pbp_gap << ','
           << (s.natural_termination ? 1 : 0) << ',';
        for (int v : s.lights) os << v;
        os << '\n';
    }
}

struct Common {
    std::string scenario;
    std::optional<double> duration;
    int workers{0};
};

tlc::ScenarioConfig load(const Common& c) {
    auto cfg = tlc::load_scenario(c.scenario);
    if (c.duration) {
        if (*c.duration < 0.0) throw tlc::ConfigError("--duration must be >= 0");
        cfg.duration = *c.duration;
    }
    return cfg;
}

tlc::EpisodeOptions episode_options(const Common& c, bool record) {
    tlc::EpisodeOptions opts;
    opts.mbi.workers = c.workers > 0 ? c.workers : env_workers();
    opts.record_steps = record;
    return opts;
}

// "1..5,9" -> 1 2 3 4 5 9
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            const auto dots = item.find("..");
            if (dots == std::string::npos) {
                out.push_back(std::stoull(item));
                continue;
            }
            const auto lo = std::stoull(item.substr(0, dots));
            const auto hi = std::stoull(item.substr(dots + 2));
            if (hi < lo) throw tlc::ConfigError("empty seed range '" + item + "'");
            for (auto s = lo; s <= hi; ++s) out.push_back(s);
        } catch (const std::logic_error&) {
            throw tlc::ConfigError("bad seed list entry '" + item + "'");
        }
    }
    if (out.empty()) throw tlc::ConfigError("empty seed list");
    return out;
}

int run_verify(const std::vector<std::uint64_t>& seeds, tlc::AcceptanceOrder order) {
    tlc::MbiSettings st;
    st.order = order;
    std::cout << "  seed agents H iters exact_pen  iter_res  monotone pbp_gap   oracle    opt_gap   result\n";
    std::vector<std::uint64_t> failed;
    for (auto seed : seeds) {
        std::ostringstream line;
        line << std::setw(6) << seed;
        try {
            const auto mi = tlc::make_micro_instance(seed);
            const auto r = tlc::check_micro_instance(mi, st);
            line << std::setw(7) << r.agents << std::setw(3) << r.horizon << std::setw(6) << r.iterations
                 << std::scientific << std::setprecision(2) << std::setw(10) << r.exact_penalty << std::setw(10)
                 << r.iterate_residual << std::setw(9) << (r.monotone ? "yes" : "no") << std::setw(10) << r.pbp_gap
                 << std::setw(10) << std::max(r.oracle_residual, r.oracle_pbp_gap) << std::setw(10)
                 << r.optimality_gap << "  " << (r.passed() ? "pass" : "FAIL");
            if (!r.passed()) failed.push_back(seed);
        } catch (const std::exception& e) {
            line << "  error: " << e.what();
            failed.push_back(seed);
        }
        std::cout << line.str() << '\n';
    }
    if (failed.empty()) {
        std::cout << "all " << seeds.size() << " instances passed\n";
        return 0;
    }
    std::cerr << "failed seeds:";
    for (auto s : failed) std::cerr << ' ' << s;
    std::cerr << '\n';
    return kExitFailure;
}

void report_fault(const tlc::EpisodeResult& ep) {
    std::cerr << "fault: " << ep.fault_message << '\n' << ep.fault_dump;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Joint traffic-light and CAV coordination controller"};
    app.require_subcommand(1);

    Common sim_common;
    std::optional<double> sim_volume, sim_pen;
    std::optional<std::uint64_t> sim_seed;
    std::optional<std::string> sim_mode;
    std::string sim_out, sim_trace;
    auto* sim = app.add_subcommand("simulate", "Run one closed-loop episode");
    sim->add_option("--scenario", sim_common.scenario, "Scenario file")->required();
    sim->add_option("--volume", sim_volume, "Total demand in veh/h");
    sim->add_option("--penetration", sim_pen, "CAV share in [0, 1]");
    sim->add_option("--duration", sim_common.duration, "Episode length in seconds");
    sim->add_option("--seed", sim_seed, "Arrival seed");
    sim->add_option("--mode", sim_mode, "coordinated or light_only");
    sim->add_option("--out", sim_out, "Metrics CSV (row appended)");
    sim->add_option("--trace", sim_trace, "Per-step solver trace CSV");
    sim->add_option("--workers", sim_common.workers, "Threads per control step (default: TLC_WORKERS or 1)");

    Common sw_common;
    std::vector<double> sw_volumes, sw_pens;
    std::vector<std::uint64_t> sw_seeds;
    std::vector<std::string> sw_modes{"coordinated", "light_only"};
    std::string sw_out;
    int sw_jobs = 1;
    auto* sweep = app.add_subcommand("sweep", "Run the cross product of volumes, penetrations, seeds and modes");
    sweep->add_option("--scenario", sw_common.scenario, "Scenario file")->required();
    sweep->add_option("--volumes", sw_volumes, "Comma-separated volumes")->delimiter(',')->required();
    sweep->add_option("--penetrations", sw_pens, "Comma-separated penetrations")->delimiter(',')->required();
    sweep->add_option("--seeds", sw_seeds, "Comma-separated seeds")->delimiter(',')->required();
    sweep->add_option("--modes", sw_modes, "Comma-separated modes")->delimiter(',');
    sweep->add_option("--duration", sw_common.duration, "Episode length in seconds");
    sweep->add_option("--out", sw_out, "Metrics CSV (overwritten)");
    sweep->add_option("--jobs", sw_jobs, "Concurrent episodes")->check(CLI::PositiveNumber);
    sweep->add_option("--workers", sw_common.workers, "Threads per control step");

    std::string vf_seeds = "1..20";
    std::string vf_order = "greatest";
    auto* verify = app.add_subcommand("verify", "Run the solver checks on seeded micro instances");
    verify->add_option("--seeds", vf_seeds, "Seeds, e.g. 1..20 or 3,7,9");
    verify->add_option("--order", vf_order, "Acceptance order: greatest or literal")
        ->check(CLI::IsMember({"greatest", "literal"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : kExitConfig;
    }

    try {
        if (*sim) {
            auto cfg = load(sim_common);
            if (sim_volume) cfg.demand.volume = *sim_volume;
            if (sim_pen) cfg.demand.penetration = *sim_pen;
            if (sim_seed) cfg.seed = *sim_seed;
            if (sim_mode) cfg.mode = parse_mode(*sim_mode);
            if (cfg.demand.volume < 0.0) throw tlc::ConfigError("--volume must be >= 0");
            if (cfg.demand.penetration < 0.0 || cfg.demand.penetration > 1.0) {
                throw tlc::ConfigError("--penetration must lie in [0, 1]");
            }
            const auto ep = tlc::run_episode(cfg, episode_options(sim_common, !sim_trace.empty()));
            std::vector<tlc::MetricsRow> rows;
            if (cfg.duration > 0.0) rows.push_back(tlc::make_metrics_row(cfg, ep));
            if (!sim_out.empty()) {
                write_rows(sim_out, rows, true);
            } else {
                tlc::write_metrics_csv(std::cout, rows);
            }
            if (!sim_trace.empty()) write_steps(sim_trace, ep);
            std::cerr << "completed=" << ep.completed.size() << " entered=" << ep.entered
                      << " in_network=" << ep.in_network << " waiting=" << ep.waiting
                      << " avg_travel_time=" << ep.avg_travel_time() << " avg_abs_accel=" << ep.avg_abs_accel()
                      << " cav_rear_end=" << ep.safety.cav_rear_end << " cav_lateral=" << ep.safety.cav_lateral
                      << " collisions=" << ep.safety.collisions << '\n';
            if (!ep.first_violation.empty()) std::cerr << "first CAV safety violation:\n" << ep.first_violation;
            if (ep.fault) {
                report_fault(ep);
                return kExitFault;
            }
            return 0;
        }

        if (*sweep) {
            if (sw_volumes.empty() || sw_pens.empty() || sw_seeds.empty() || sw_modes.empty()) {
                throw tlc::ConfigError("sweep lists must be non-empty");
            }
            const auto base = load(sw_common);
            std::vector<tlc::ScenarioConfig> jobs;
            for (double vol : sw_volumes) {
                for (double pen : sw_pens) {
                    if (vol < 0.0 || pen < 0.0 || pen > 1.0) throw tlc::ConfigError("volume/penetration out of range");
                    for (const auto& m : sw_modes) {
                        const auto mode = parse_mode(m);
                        for (auto seed : sw_seeds) {
                            auto cfg = base;
                            cfg.demand.volume = vol;
                            cfg.demand.penetration = pen;
                            cfg.mode = mode;
                            cfg.seed = seed;
                            jobs.push_back(std::move(cfg));
                        }
                    }
                }
            }
            std::vector<tlc::MetricsRow> rows(jobs.size());
            std::vector<std::string> faults(jobs.size());
            std::atomic<std::size_t> next{0};
            std::mutex log_mu;
            const auto opts = episode_options(sw_common, false);
            auto worker = [&] {
                for (std::size_t i = next++; i < jobs.size(); i = next++) {
                    const auto ep = tlc::run_episode(jobs[i], opts);
                    rows[i] = tlc::make_metrics_row(jobs[i], ep);
                    if (ep.fault) faults[i] = ep.fault_message;
                    std::lock_guard lock(log_mu);
                    std::cerr << tlc::format_metrics_row(rows[i]) << '\n';
                }
            };
            std::vector<std::thread> pool;
            const auto n = std::min<std::size_t>(static_cast<std::size_t>(sw_jobs), jobs.size());
            for (std::size_t t = 1; t < n; ++t) pool.emplace_back(worker);
            worker();
            for (auto& t : pool) t.join();
            if (!sw_out.empty()) {
                write_rows(sw_out, rows, false);
            } else {
                tlc::write_metrics_csv(std::cout, rows);
            }
            int rc = 0;
            for (std::size_t i = 0; i < jobs.size(); ++i) {
                if (!faults[i].empty()) {
                    std::cerr << "fault in row " << i << ": " << faults[i] << '\n';
                    rc = kExitFault;
                }
            }
            return rc;
        }

        if (*verify) {
            return run_verify(parse_seeds(vf_seeds), vf_order == "literal" ? tlc::AcceptanceOrder::Literal
                                                                           : tlc::AcceptanceOrder::GreatestReduction);
        }
    } catch (const tlc::ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const tlc::DomainError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitFailure;
    }
    return 0;
}
