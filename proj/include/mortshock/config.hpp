#pragma once

#include "mortshock/common.hpp"

#include <json.hpp>

#include <fstream>
#include <map>
#include <string>
#include <vector>

namespace mortshock {

using json = nlohmann::ordered_json;

// "1914-1919" or "1929" -> closed year range
inline closed_range parse_year_range(const std::string& s) {
    const auto dash = s.find('-');
    try {
        if (dash == std::string::npos) {
            const int y = std::stoi(s);
            return {y, y};
        }
        const int lo = std::stoi(s.substr(0, dash));
        const int hi = std::stoi(s.substr(dash + 1));
        require(lo <= hi, "year range reversed: " + s);
        return {lo, hi};
    } catch (const validation_error&) {
        throw;
    } catch (const std::exception&) {
        throw validation_error("cannot parse year range '" + s + "'");
    }
}

inline std::string format_range(closed_range r) {
    return r.lo == r.hi ? std::to_string(r.lo) : std::to_string(r.lo) + "-" + std::to_string(r.hi);
}

struct country_config {
    std::string code;
    std::string path;
    int entry_year = 0;
};

struct data_config {
    std::vector<country_config> countries;
    int age_min = 20, age_max = 85;
    int year_min = 1850, year_max = 2021;
    std::string target_country;

    age_range ages() const { return {age_min, age_max}; }
    year_range years() const { return {year_min, year_max}; }
};

struct baseline_config {
    int m = 2, l = 2;
    double loglik_tol = 1e-10;
    double constraint_tol = 1e-8;
    double gradient_tol = 1e-9;
    int max_sweeps = 5000;
};

struct outlier_config {
    double quantile = 0.99;
    int epoch_split_year = 1970;
    std::vector<closed_range> a_priori_exclusions = {
        {1854, 1856}, {1859, 1859}, {1866, 1866}, {1870, 1871},
        {1889, 1892}, {1914, 1919}, {1940, 1945}, {2020, 2021}};
    std::uint64_t mcd_seed = 20240601;
};

struct regime_config {
    std::vector<closed_range> age_groups;  // empty -> default split
    std::map<std::string, double> nu_weights;  // year-range string -> weight
    int epoch_year = 1970;
    std::uint64_t seed = 1;
    int jde_max_generations = 3000;
    int jde_stall_generations = 200;
    int outer_max = 25;
};

struct dynamics_config {
    double gamma_min = 0.90;
    double gamma_max = 1.00;
    double gamma_step = 0.001;
    int first_eval_year = 1900;

    std::vector<double> grid() const {
        std::vector<double> g;
        for (double v = gamma_min; v <= gamma_max + 1e-12; v += gamma_step)
            g.push_back(std::min(v, 1.0));
        return g;
    }
};

struct projection_cfg {
    int horizon_end = 2080;
    int n_paths = 10000;
    std::uint64_t seed = 2;
    std::string shock_mean = "zero";  // or "mu_h"
    // group range string -> { year -> "lvs" | "hvs" }
    std::map<std::string, std::map<int, std::string>> forced_states;
};

struct contract_config {
    std::string type;  // "annuity" | "term"
    int issue_age = 65;
    int issue_year = 2021;
    double annual_payout = 10000.0;
    int max_age = 120;
    int terminal_age = 65;
    double death_benefit = 150000.0;
};

struct scr_config {
    double interest_rate = 0.02;
    int kannisto_fit_age_min = 76;
    int kannisto_fit_age_max = 85;
    int max_age = 120;
    std::vector<contract_config> contracts;
};

struct pipeline_config {
    std::string output_dir = "out";
    data_config data;
    baseline_config baseline;
    outlier_config outliers;
    regime_config regime;
    dynamics_config dynamics;
    projection_cfg projection;
    scr_config scr;

    std::vector<age_range> age_groups() const {
        if (!regime.age_groups.empty()) {
            int expected = data.age_min;
            for (const auto& g : regime.age_groups) {
                require(g.lo == expected, "age groups must partition the age range");
                expected = g.hi + 1;
            }
            require(expected == data.age_max + 1, "age groups must partition the age range");
            return regime.age_groups;
        }
        if (data.age_min <= 59 && data.age_max >= 60)
            return {{data.age_min, 59}, {60, data.age_max}};
        return {{data.age_min, data.age_max}};
    }
};

// ---------------------------------------------------------------------------
// JSON (de)serialization; unknown keys are rejected to catch typos.
// ---------------------------------------------------------------------------

namespace detail {

inline void check_keys(const json& j, const std::vector<std::string>& allowed,
                       const std::string& where) {
    for (const auto& [key, _] : j.items()) {
        bool ok = false;
        for (const auto& a : allowed)
            if (key == a) ok = true;
        require(ok, "unknown config key '" + key + "' in " + where);
    }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline pipeline_config parse_config(const json& j) {
    pipeline_config c;
    detail::check_keys(j, {"output_dir", "data", "baseline", "outliers", "regime", "dynamics",
                           "projection", "scr"},
                       "top level");
    detail::maybe(j, "output_dir", c.output_dir);

    require(j.contains("data"), "config: missing 'data' section");
    {
        const json& d = j.at("data");
        detail::check_keys(d, {"countries", "age_min", "age_max", "year_min", "year_max",
                               "target_country"},
                           "data");
        for (const auto& cc : d.at("countries")) {
            detail::check_keys(cc, {"code", "path", "entry_year"}, "data.countries");
            c.data.countries.push_back(
                {cc.at("code").get<std::string>(), cc.at("path").get<std::string>(),
                 cc.at("entry_year").get<int>()});
        }
        c.data.age_min = d.at("age_min").get<int>();
        c.data.age_max = d.at("age_max").get<int>();
        c.data.year_min = d.at("year_min").get<int>();
        c.data.year_max = d.at("year_max").get<int>();
        c.data.target_country = d.at("target_country").get<std::string>();
        require(c.data.age_min <= c.data.age_max, "config: empty age window");
        require(c.data.year_min < c.data.year_max, "config: empty year window");
        require(!c.data.countries.empty(), "config: no countries");
    }

    if (j.contains("baseline")) {
        const json& b = j.at("baseline");
        detail::check_keys(
            b, {"m", "l", "loglik_tol", "constraint_tol", "gradient_tol", "max_sweeps"},
            "baseline");
        detail::maybe(b, "m", c.baseline.m);
        detail::maybe(b, "l", c.baseline.l);
        detail::maybe(b, "loglik_tol", c.baseline.loglik_tol);
        detail::maybe(b, "constraint_tol", c.baseline.constraint_tol);
        detail::maybe(b, "gradient_tol", c.baseline.gradient_tol);
        detail::maybe(b, "max_sweeps", c.baseline.max_sweeps);
    }

    if (j.contains("outliers")) {
        const json& o = j.at("outliers");
        detail::check_keys(o, {"quantile", "epoch_split_year", "a_priori_exclusions", "mcd_seed"},
                           "outliers");
        detail::maybe(o, "quantile", c.outliers.quantile);
        detail::maybe(o, "epoch_split_year", c.outliers.epoch_split_year);
        detail::maybe(o, "mcd_seed", c.outliers.mcd_seed);
        if (o.contains("a_priori_exclusions")) {
            c.outliers.a_priori_exclusions.clear();
            for (const auto& s : o.at("a_priori_exclusions"))
                c.outliers.a_priori_exclusions.push_back(parse_year_range(s.get<std::string>()));
        }
    }

    if (j.contains("regime")) {
        const json& r = j.at("regime");
        detail::check_keys(r,
                           {"age_groups", "nu_weights", "epoch_year", "seed",
                            "jde_max_generations", "jde_stall_generations", "outer_max"},
                           "regime");
        if (r.contains("age_groups"))
            for (const auto& s : r.at("age_groups"))
                c.regime.age_groups.push_back(parse_year_range(s.get<std::string>()));
        if (r.contains("nu_weights"))
            for (const auto& [k, v] : r.at("nu_weights").items())
                c.regime.nu_weights[k] = v.get<double>();
        detail::maybe(r, "epoch_year", c.regime.epoch_year);
        detail::maybe(r, "seed", c.regime.seed);
        detail::maybe(r, "jde_max_generations", c.regime.jde_max_generations);
        detail::maybe(r, "jde_stall_generations", c.regime.jde_stall_generations);
        detail::maybe(r, "outer_max", c.regime.outer_max);
    }

    if (j.contains("dynamics")) {
        const json& d = j.at("dynamics");
        detail::check_keys(d, {"gamma_min", "gamma_max", "gamma_step", "first_eval_year"},
                           "dynamics");
        detail::maybe(d, "gamma_min", c.dynamics.gamma_min);
        detail::maybe(d, "gamma_max", c.dynamics.gamma_max);
        detail::maybe(d, "gamma_step", c.dynamics.gamma_step);
        detail::maybe(d, "first_eval_year", c.dynamics.first_eval_year);
    }

    if (j.contains("projection")) {
        const json& p = j.at("projection");
        detail::check_keys(p, {"horizon_end", "n_paths", "seed", "shock_mean", "forced_states"},
                           "projection");
        detail::maybe(p, "horizon_end", c.projection.horizon_end);
        detail::maybe(p, "n_paths", c.projection.n_paths);
        detail::maybe(p, "seed", c.projection.seed);
        detail::maybe(p, "shock_mean", c.projection.shock_mean);
        require(c.projection.shock_mean == "zero" || c.projection.shock_mean == "mu_h",
                "config: shock_mean must be 'zero' or 'mu_h'");
        if (p.contains("forced_states")) {
            for (const auto& [group, states] : p.at("forced_states").items()) {
                std::map<int, std::string> by_year;
                for (const auto& [year, state] : states.items()) {
                    const std::string s = state.get<std::string>();
                    require(s == "lvs" || s == "hvs",
                            "config: forced state must be 'lvs' or 'hvs'");
                    by_year[std::stoi(year)] = s;
                }
                c.projection.forced_states[group] = std::move(by_year);
            }
        }
    }

    if (j.contains("scr")) {
        const json& s = j.at("scr");
        detail::check_keys(
            s, {"interest_rate", "kannisto_fit_age_min", "kannisto_fit_age_max", "max_age",
                "contracts"},
            "scr");
        detail::maybe(s, "interest_rate", c.scr.interest_rate);
        detail::maybe(s, "kannisto_fit_age_min", c.scr.kannisto_fit_age_min);
        detail::maybe(s, "kannisto_fit_age_max", c.scr.kannisto_fit_age_max);
        detail::maybe(s, "max_age", c.scr.max_age);
        if (s.contains("contracts")) {
            for (const auto& cc : s.at("contracts")) {
                detail::check_keys(cc,
                                   {"type", "issue_age", "issue_year", "annual_payout", "max_age",
                                    "terminal_age", "death_benefit"},
                                   "scr.contracts");
                contract_config con;
                con.type = cc.at("type").get<std::string>();
                require(con.type == "annuity" || con.type == "term",
                        "config: contract type must be 'annuity' or 'term'");
                detail::maybe(cc, "issue_age", con.issue_age);
                detail::maybe(cc, "issue_year", con.issue_year);
                detail::maybe(cc, "annual_payout", con.annual_payout);
                detail::maybe(cc, "max_age", con.max_age);
                detail::maybe(cc, "terminal_age", con.terminal_age);
                detail::maybe(cc, "death_benefit", con.death_benefit);
                c.scr.contracts.push_back(con);
            }
        }
    }
    return c;
}

inline json to_json(const pipeline_config& c) {
    json j;
    j["output_dir"] = c.output_dir;
    json d;
    d["countries"] = json::array();
    for (const auto& cc : c.data.countries)
        d["countries"].push_back({{"code", cc.code}, {"path", cc.path},
                                  {"entry_year", cc.entry_year}});
    d["age_min"] = c.data.age_min;
    d["age_max"] = c.data.age_max;
    d["year_min"] = c.data.year_min;
    d["year_max"] = c.data.year_max;
    d["target_country"] = c.data.target_country;
    j["data"] = d;

    j["baseline"] = {{"m", c.baseline.m},
                     {"l", c.baseline.l},
                     {"loglik_tol", c.baseline.loglik_tol},
                     {"constraint_tol", c.baseline.constraint_tol},
                     {"gradient_tol", c.baseline.gradient_tol},
                     {"max_sweeps", c.baseline.max_sweeps}};

    json excl = json::array();
    for (const auto& r : c.outliers.a_priori_exclusions) excl.push_back(format_range(r));
    j["outliers"] = {{"quantile", c.outliers.quantile},
                     {"epoch_split_year", c.outliers.epoch_split_year},
                     {"a_priori_exclusions", excl},
                     {"mcd_seed", c.outliers.mcd_seed}};

    json groups = json::array();
    for (const auto& g : c.regime.age_groups) groups.push_back(format_range(g));
    j["regime"] = {{"age_groups", groups},
                   {"nu_weights", c.regime.nu_weights},
                   {"epoch_year", c.regime.epoch_year},
                   {"seed", c.regime.seed},
                   {"jde_max_generations", c.regime.jde_max_generations},
                   {"jde_stall_generations", c.regime.jde_stall_generations},
                   {"outer_max", c.regime.outer_max}};

    j["dynamics"] = {{"gamma_min", c.dynamics.gamma_min},
                     {"gamma_max", c.dynamics.gamma_max},
                     {"gamma_step", c.dynamics.gamma_step},
                     {"first_eval_year", c.dynamics.first_eval_year}};

    json forced;
    for (const auto& [group, states] : c.projection.forced_states) {
        json by_year;
        for (const auto& [year, state] : states) by_year[std::to_string(year)] = state;
        forced[group] = by_year;
    }
    j["projection"] = {{"horizon_end", c.projection.horizon_end},
                       {"n_paths", c.projection.n_paths},
                       {"seed", c.projection.seed},
                       {"shock_mean", c.projection.shock_mean},
                       {"forced_states", forced.is_null() ? json::object() : forced}};

    json contracts = json::array();
    for (const auto& con : c.scr.contracts) {
        json cc = {{"type", con.type}, {"issue_age", con.issue_age},
                   {"issue_year", con.issue_year}};
        if (con.type == "annuity") {
            cc["annual_payout"] = con.annual_payout;
            cc["max_age"] = con.max_age;
        } else {
            cc["terminal_age"] = con.terminal_age;
            cc["death_benefit"] = con.death_benefit;
        }
        contracts.push_back(cc);
    }
    j["scr"] = {{"interest_rate", c.scr.interest_rate},
                {"kannisto_fit_age_min", c.scr.kannisto_fit_age_min},
                {"kannisto_fit_age_max", c.scr.kannisto_fit_age_max},
                {"max_age", c.scr.max_age},
                {"contracts", contracts}};
    return j;
}

inline pipeline_config load_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), "cannot open config file: " + path);
    json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw validation_error("config parse error in " + path + ": " + e.what());
    }
    return parse_config(j);
}

// FNV-1a digest of the canonical serialized config, for run manifests.
inline std::string config_digest(const pipeline_config& c) {
    const std::string s = to_json(c).dump();
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

// nu weights expanded over a year axis; unlisted years get weight one.
inline Eigen::VectorXd expand_nu_weights(const std::map<std::string, double>& ranges,
                                         year_range years) {
    Eigen::VectorXd nu = Eigen::VectorXd::Ones(years.count());
    for (const auto& [key, w] : ranges) {
        require(w >= 0.0, "nu weight for " + key + " must be non-negative");
        const closed_range r = parse_year_range(key);
        for (int y = r.lo; y <= r.hi; ++y)
            if (years.contains(y)) nu[years.index(y)] = w;
    }
    return nu;
}

}  // namespace mortshock
