#include "tlc/scenario.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <fstream>
#include <sstream>

namespace tlc {

namespace pt = boost::property_tree;

namespace {

template <typename T>
T get_or(const pt::ptree& tree, const std::string& key, T fallback, const std::string& origin) {
    const auto node = tree.get_child_optional(key);
    if (!node) return fallback;
    try {
        return node->get_value<T>();
    } catch (const pt::ptree_bad_data&) {
        throw ConfigError(origin + ": bad value for '" + key + "'");
    }
}

ControlMode parse_mode(const std::string& s, const std::string& origin) {
    if (s == "coordinated") return ControlMode::Coordinated;
    if (s == "light_only") return ControlMode::LightOnly;
    throw ConfigError(origin + ": unknown mode '" + s + "'");
}

}  // namespace

ScenarioConfig parse_scenario(std::istream& in, const std::string& origin) {
    pt::ptree tree;
    try {
        pt::read_ini(in, tree);
    } catch (const pt::ini_parser_error& e) {
        throw ConfigError(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }
    const auto schema = tree.get_optional<int>("schema");
    if (!schema) throw ConfigError(origin + ": missing 'schema' key");
    if (*schema != 1) throw ConfigError(origin + ": unsupported schema " + std::to_string(*schema));

    ScenarioConfig cfg;
    const auto& geo = tree.get_child("geometry", pt::ptree{});
    const int lanes = get_or(geo, "lanes", 0, origin);
    if (lanes < 1) throw ConfigError(origin + ": geometry.lanes must be positive");
    std::vector<LaneGeometry> lg(static_cast<std::size_t>(lanes));
    for (int l = 0; l < lanes; ++l) {
        auto& lane = lg[static_cast<std::size_t>(l)];
        lane.lane_id = l;
        lane.control_zone_length = get_or(geo, "control_zone_length", 150.0, origin);
        lane.stop_line = get_or(geo, "stop_line", lane.control_zone_length, origin);
        lane.downstream_length = get_or(geo, "downstream_length", 100.0, origin);
    }
    std::vector<ConflictNode> nodes;
    for (const auto& [key, value] : geo) {
        if (key.rfind("conflict_", 0) != 0) continue;
        std::istringstream row(value.data());
        ConflictNode n;
        n.id = static_cast<int>(nodes.size());
        if (!(row >> n.lane_a >> n.lane_b >> n.pos_a >> n.pos_b)) {
            throw ConfigError(origin + ": '" + key + "' needs: lane_a lane_b pos_a pos_b");
        }
        nodes.push_back(n);
    }
    try {
        cfg.geo = Intersection(std::move(lg), std::move(nodes));
    } catch (const DomainError& e) {
        throw ConfigError(origin + ": " + e.what());
    }

    const auto& prm = tree.get_child("params", pt::ptree{});
    auto& mp = cfg.params;
    mp.v_min = get_or(prm, "v_min", mp.v_min, origin);
    mp.v_max = get_or(prm, "v_max", mp.v_max, origin);
    mp.u_min = get_or(prm, "u_min", mp.u_min, origin);
    mp.u_max = get_or(prm, "u_max", mp.u_max, origin);
    mp.tau = get_or(prm, "tau", mp.tau, origin);
    mp.d_min = get_or(prm, "d_min", mp.d_min, origin);
    mp.delta_min = get_or(prm, "delta_min", mp.delta_min, origin);
    mp.delta_max = get_or(prm, "delta_max", mp.delta_max, origin);
    mp.w_p = get_or(prm, "w_p", mp.w_p, origin);
    mp.w_u = get_or(prm, "w_u", mp.w_u, origin);
    mp.big_m = get_or(prm, "big_m", mp.big_m, origin);
    mp.rho = get_or(prm, "rho", mp.rho, origin);
    mp.eps_term = get_or(prm, "eps_term", mp.eps_term, origin);
    mp.est_steps = get_or(prm, "est_steps", mp.est_steps, origin);
    cfg.horizon.H = get_or(prm, "horizon", cfg.horizon.H, origin);
    cfg.horizon.dt = get_or(prm, "dt", cfg.horizon.dt, origin);
    try {
        mp.validate();
    } catch (const DomainError& e) {
        throw ConfigError(origin + ": " + e.what());
    }
    if (cfg.horizon.H < 1 || !(cfg.horizon.dt > 0.0)) throw ConfigError(origin + ": need horizon >= 1 and dt > 0");

    const auto& dem = tree.get_child("demand", pt::ptree{});
    cfg.demand.volume = get_or(dem, "volume", cfg.demand.volume, origin);
    cfg.demand.penetration = get_or(dem, "penetration", cfg.demand.penetration, origin);
    cfg.demand.through_share = get_or(dem, "through_share", cfg.demand.through_share, origin);
    cfg.demand.entry_speed = get_or(dem, "entry_speed", cfg.demand.entry_speed, origin);
    cfg.duration = get_or(dem, "duration", cfg.duration, origin);
    cfg.seed = get_or<std::uint64_t>(dem, "seed", cfg.seed, origin);
    cfg.mode = parse_mode(get_or<std::string>(dem, "mode", "coordinated", origin), origin);
    if (cfg.demand.volume < 0.0) throw ConfigError(origin + ": demand.volume must be >= 0");
    if (cfg.demand.penetration < 0.0 || cfg.demand.penetration > 1.0) {
        throw ConfigError(origin + ": demand.penetration must lie in [0, 1]");
    }
    if (cfg.demand.through_share < 0.0 || cfg.demand.through_share > 1.0) {
        throw ConfigError(origin + ": demand.through_share must lie in [0, 1]");
    }
    return cfg;
}

ScenarioConfig load_scenario(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open scenario file '" + path + "'");
    return parse_scenario(in, path);
}

}  // namespace tlc
