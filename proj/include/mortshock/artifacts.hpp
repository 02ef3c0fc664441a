#pragma once

#include "mortshock/baseline.hpp"
#include "mortshock/common.hpp"
#include "mortshock/config.hpp"
#include "mortshock/csv.hpp"
#include "mortshock/data_ingestion.hpp"
#include "mortshock/outliers.hpp"
#include "mortshock/period_dynamics.hpp"
#include "mortshock/projection.hpp"
#include "mortshock/regime.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

namespace mortshock::artifacts {

namespace fs = std::filesystem;

inline std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return std::string(buf);
}

inline void require_artifact(const fs::path& p, const std::string& producing_stage) {
    if (!fs::exists(p))
        throw validation_error("missing artifact " + p.string() + "; run stage '" +
                               producing_stage + "' first");
}

// ---------------------------------------------------------------------------
// generic vector / matrix CSV
// ---------------------------------------------------------------------------

inline void write_vector_csv(const fs::path& path, const std::string& axis_name,
                             closed_range axis, const Eigen::VectorXd& v) {
    require(axis.count() == static_cast<int>(v.size()), "write_vector_csv: length mismatch");
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << axis_name << ",value\n";
    for (int i = 0; i < axis.count(); ++i) out << axis.at(i) << ',' << fmt(v[i]) << '\n';
}

inline Eigen::VectorXd read_vector_csv(const fs::path& path, closed_range expected_axis) {
    const csv::table t = csv::read_file(path.string());
    require(static_cast<int>(t.rows.size()) == expected_axis.count(),
            path.string() + ": unexpected row count");
    Eigen::VectorXd v(expected_axis.count());
    for (std::size_t r = 0; r < t.rows.size(); ++r) {
        require(std::stoi(t.rows[r][0]) == expected_axis.at(static_cast<int>(r)),
                path.string() + ": axis mismatch");
        v[static_cast<Eigen::Index>(r)] = std::stod(t.rows[r][1]);
    }
    return v;
}

// matrix CSV: first column the age, remaining columns one per year
inline void write_matrix_csv(const fs::path& path, age_range ages, year_range years,
                             const Eigen::MatrixXd& m) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << "age";
    for (int j = 0; j < years.count(); ++j) out << ',' << years.at(j);
    out << '\n';
    for (int i = 0; i < ages.count(); ++i) {
        out << ages.at(i);
        for (int j = 0; j < years.count(); ++j) out << ',' << fmt(m(i, j));
        out << '\n';
    }
}

inline Eigen::MatrixXd read_matrix_csv(const fs::path& path, age_range ages, year_range years) {
    const csv::table t = csv::read_file(path.string());
    require(static_cast<int>(t.rows.size()) == ages.count(), path.string() + ": row count");
    require(static_cast<int>(t.header.size()) == years.count() + 1, path.string() + ": col count");
    Eigen::MatrixXd m(ages.count(), years.count());
    for (int i = 0; i < ages.count(); ++i)
        for (int j = 0; j < years.count(); ++j)
            m(i, j) = std::stod(t.rows[static_cast<std::size_t>(i)][static_cast<std::size_t>(j + 1)]);
    return m;
}

// ---------------------------------------------------------------------------
// panel
// ---------------------------------------------------------------------------

inline void write_panel(const fs::path& dir, const mortality_panel& panel,
                        const std::string& target_country) {
    fs::create_directories(dir);
    write_matrix_csv(dir / "common_deaths.csv", panel.ages, panel.years, panel.common_deaths);
    write_matrix_csv(dir / "common_exposures.csv", panel.ages, panel.years,
                     panel.common_exposures);
    const country_series& target = panel.country(target_country);
    write_matrix_csv(dir / "target_deaths.csv", panel.ages, panel.years, target.deaths);
    write_matrix_csv(dir / "target_exposures.csv", panel.ages, panel.years, target.exposures);

    json j;
    j["age_min"] = panel.ages.lo;
    j["age_max"] = panel.ages.hi;
    j["year_min"] = panel.years.lo;
    j["year_max"] = panel.years.hi;
    j["target_country"] = target_country;
    json comp;
    for (int t = 0; t < panel.years.count(); ++t) {
        json codes = json::array();
        for (const auto& c : panel.composition[static_cast<std::size_t>(t)]) codes.push_back(c);
        comp[std::to_string(panel.years.at(t))] = codes;
    }
    j["composition"] = comp;
    std::ofstream out(dir / "panel.json");
    out << j.dump(2) << '\n';
}

// The pipeline's reduced view of the panel: the aggregate plus the target.
struct panel_artifact {
    age_range ages;
    year_range years;
    Eigen::MatrixXd common_deaths, common_exposures;
    Eigen::MatrixXd target_deaths, target_exposures;
    std::string target_country;
};

inline panel_artifact read_panel(const fs::path& dir) {
    require_artifact(dir / "panel.json", "ingest");
    std::ifstream in(dir / "panel.json");
    json j;
    in >> j;
    panel_artifact p;
    p.ages = {j.at("age_min").get<int>(), j.at("age_max").get<int>()};
    p.years = {j.at("year_min").get<int>(), j.at("year_max").get<int>()};
    p.target_country = j.at("target_country").get<std::string>();
    p.common_deaths = read_matrix_csv(dir / "common_deaths.csv", p.ages, p.years);
    p.common_exposures = read_matrix_csv(dir / "common_exposures.csv", p.ages, p.years);
    p.target_deaths = read_matrix_csv(dir / "target_deaths.csv", p.ages, p.years);
    p.target_exposures = read_matrix_csv(dir / "target_exposures.csv", p.ages, p.years);
    return p;
}

// ---------------------------------------------------------------------------
// baseline parameter bundle
// ---------------------------------------------------------------------------

inline void write_baseline(const fs::path& dir, const baseline_params& p,
                           const fit_diagnostics& common_diag,
                           const fit_diagnostics& deviation_diag) {
    fs::create_directories(dir);
    const age_range ages = p.common.ages;
    const year_range years = p.common.years;
    const year_range kyears{years.lo + 1, years.hi};

    write_vector_csv(dir / "A.csv", "age", ages, p.common.a);
    for (int f = 0; f < p.common.factors; ++f) {
        const std::string n = std::to_string(f + 1);
        write_vector_csv(dir / ("B" + n + ".csv"), "age", ages, p.common.b[static_cast<std::size_t>(f)]);
        write_vector_csv(dir / ("L" + n + ".csv"), "year", years, p.common.l[static_cast<std::size_t>(f)]);
        write_vector_csv(dir / ("K" + n + ".csv"), "year", kyears,
                         first_differences(p.common.l[static_cast<std::size_t>(f)]));
    }
    for (int f = 0; f < p.deviation.factors; ++f) {
        const std::string n = std::to_string(f + 1);
        write_vector_csv(dir / ("beta" + n + ".csv"), "age", ages,
                         p.deviation.beta[static_cast<std::size_t>(f)]);
        write_vector_csv(dir / ("lambda" + n + ".csv"), "year", years,
                         p.deviation.lambda[static_cast<std::size_t>(f)]);
        write_vector_csv(dir / ("kappa" + n + ".csv"), "year", kyears,
                         first_differences(p.deviation.lambda[static_cast<std::size_t>(f)]));
    }
    write_vector_csv(dir / "anchor_common.csv", "age", ages, p.anchor_common);
    write_vector_csv(dir / "anchor_country.csv", "age", ages, p.anchor_country);

    json j;
    j["m"] = p.common.factors;
    j["l"] = p.deviation.factors;
    j["country"] = p.deviation.country_code;
    j["age_min"] = ages.lo;
    j["age_max"] = ages.hi;
    j["year_min"] = years.lo;
    j["year_max"] = years.hi;
    json anchors_common = json::array(), anchors_country = json::array();
    for (int i = 0; i < ages.count(); ++i) {
        anchors_common.push_back(p.anchor_common[i]);
        anchors_country.push_back(p.anchor_country[i]);
    }
    j["anchor_common"] = anchors_common;
    j["anchor_country"] = anchors_country;
    j["common_constraint_violation"] = common_diag.constraint_violation;
    j["common_loglik"] = common_diag.loglik;
    j["common_gradient_supnorm"] = common_diag.gradient_supnorm;
    j["common_sweeps"] = common_diag.sweeps;
    j["deviation_constraint_violation"] = deviation_diag.constraint_violation;
    j["deviation_loglik"] = deviation_diag.loglik;
    j["deviation_gradient_supnorm"] = deviation_diag.gradient_supnorm;
    j["deviation_sweeps"] = deviation_diag.sweeps;
    std::ofstream out(dir / "manifest.json");
    out << j.dump(2) << '\n';
}

inline baseline_params read_baseline(const fs::path& dir, const std::string& stage_name) {
    require_artifact(dir / "manifest.json", stage_name);
    std::ifstream in(dir / "manifest.json");
    json j;
    in >> j;
    baseline_params p;
    const age_range ages{j.at("age_min").get<int>(), j.at("age_max").get<int>()};
    const year_range years{j.at("year_min").get<int>(), j.at("year_max").get<int>()};
    p.common.ages = ages;
    p.common.years = years;
    p.common.factors = j.at("m").get<int>();
    p.common.a = read_vector_csv(dir / "A.csv", ages);
    for (int f = 0; f < p.common.factors; ++f) {
        const std::string n = std::to_string(f + 1);
        p.common.b.push_back(read_vector_csv(dir / ("B" + n + ".csv"), ages));
        p.common.l.push_back(read_vector_csv(dir / ("L" + n + ".csv"), years));
    }
    p.deviation.ages = ages;
    p.deviation.years = years;
    p.deviation.factors = j.at("l").get<int>();
    p.deviation.country_code = j.at("country").get<std::string>();
    for (int f = 0; f < p.deviation.factors; ++f) {
        const std::string n = std::to_string(f + 1);
        p.deviation.beta.push_back(read_vector_csv(dir / ("beta" + n + ".csv"), ages));
        p.deviation.lambda.push_back(read_vector_csv(dir / ("lambda" + n + ".csv"), years));
    }
    p.anchor_common = read_vector_csv(dir / "anchor_common.csv", ages);
    p.anchor_country = read_vector_csv(dir / "anchor_country.csv", ages);
    return p;
}

// ---------------------------------------------------------------------------
// outlier report
// ---------------------------------------------------------------------------

inline void write_outliers(const fs::path& dir, const outlier_report& rep) {
    fs::create_directories(dir);
    {
        std::ofstream out(dir / "outliers.csv");
        out << "year,distance,epoch,flagged\n";
        for (int t = 0; t < rep.years.count(); ++t)
            out << rep.years.at(t) << ',' << fmt(rep.distances[t]) << ','
                << rep.epoch_of_year[static_cast<std::size_t>(t)] << ','
                << int(rep.flagged[static_cast<std::size_t>(t)]) << '\n';
    }
    json j;
    j["threshold"] = rep.threshold;
    j["outlier_years"] = rep.outlier_years;
    j["runs"] = format_year_runs(rep.outlier_years);
    std::ofstream out(dir / "outlier_years.json");
    out << j.dump(2) << '\n';
}

inline std::set<int> read_outlier_years(const fs::path& dir) {
    require_artifact(dir / "outlier_years.json", "outliers");
    std::ifstream in(dir / "outlier_years.json");
    json j;
    in >> j;
    std::set<int> years;
    for (const auto& y : j.at("outlier_years")) years.insert(y.get<int>());
    return years;
}

// ---------------------------------------------------------------------------
// regime parameters
// ---------------------------------------------------------------------------

inline void write_regime(const fs::path& dir, const regime_params& p,
                         const Eigen::Vector3d& filtered_tmax, double loglik) {
    fs::create_directories(dir);
    const std::string tag = format_range(p.group);
    json j;
    j["group"] = tag;
    j["epoch_year"] = p.epoch_year;
    j["p12"] = p.p12;
    j["p21"] = p.p21;
    j["sigma_e1"] = p.sigma_e1;
    j["slope1"] = p.slope1;
    j["sigma_e2"] = p.sigma_e2;
    j["slope2"] = p.slope2;
    j["mu_h"] = p.mu_h;
    j["sigma_h"] = p.sigma_h;
    j["loglik"] = loglik;
    j["filtered_tmax"] = {filtered_tmax[0], filtered_tmax[1], filtered_tmax[2]};
    std::ofstream out(dir / ("regime_" + tag + ".json"));
    out << j.dump(2) << '\n';
    write_vector_csv(dir / ("frakB_" + tag + ".csv"), "age", p.group, p.frak_b);
}

inline regime_inputs read_regime(const fs::path& dir, age_range group) {
    const std::string tag = format_range(group);
    require_artifact(dir / ("regime_" + tag + ".json"), "regime");
    std::ifstream in(dir / ("regime_" + tag + ".json"));
    json j;
    in >> j;
    regime_inputs ri;
    ri.params.group = group;
    ri.params.epoch_year = j.at("epoch_year").get<int>();
    ri.params.p12 = j.at("p12").get<double>();
    ri.params.p21 = j.at("p21").get<double>();
    ri.params.sigma_e1 = j.at("sigma_e1").get<double>();
    ri.params.slope1 = j.at("slope1").get<double>();
    ri.params.sigma_e2 = j.at("sigma_e2").get<double>();
    ri.params.slope2 = j.at("slope2").get<double>();
    ri.params.mu_h = j.at("mu_h").get<double>();
    ri.params.sigma_h = j.at("sigma_h").get<double>();
    ri.params.frak_b = read_vector_csv(dir / ("frakB_" + tag + ".csv"), group);
    const auto& f = j.at("filtered_tmax");
    ri.init_probs = Eigen::Vector3d(f.at(0).get<double>(), f.at(1).get<double>(),
                                    f.at(2).get<double>());
    return ri;
}

// ---------------------------------------------------------------------------
// period dynamics
// ---------------------------------------------------------------------------

inline void write_dynamics(const fs::path& path, const period_dyn_params& p) {
    json j;
    j["gamma"] = p.gamma;
    j["n_free"] = p.n_free;
    json c = json::array();
    for (Eigen::Index i = 0; i < p.c.size(); ++i) c.push_back(p.c[i]);
    j["c"] = c;
    json s = json::array();  // row-major
    for (Eigen::Index r = 0; r < p.sigma_w.rows(); ++r)
        for (Eigen::Index col = 0; col < p.sigma_w.cols(); ++col) s.push_back(p.sigma_w(r, col));
    j["sigma_w"] = s;
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

inline period_dyn_params read_dynamics(const fs::path& path) {
    require_artifact(path, "dynamics");
    std::ifstream in(path);
    json j;
    in >> j;
    period_dyn_params p;
    p.gamma = j.at("gamma").get<double>();
    p.n_free = j.at("n_free").get<int>();
    const auto& c = j.at("c");
    p.c.resize(static_cast<Eigen::Index>(c.size()));
    for (std::size_t i = 0; i < c.size(); ++i)
        p.c[static_cast<Eigen::Index>(i)] = c.at(i).get<double>();
    const auto& s = j.at("sigma_w");
    const auto dim = static_cast<Eigen::Index>(p.c.size());
    require(static_cast<Eigen::Index>(s.size()) == dim * dim, "dynamics: sigma_w size mismatch");
    p.sigma_w.resize(dim, dim);
    for (Eigen::Index r = 0; r < dim; ++r)
        for (Eigen::Index col = 0; col < dim; ++col)
            p.sigma_w(r, col) = s.at(static_cast<std::size_t>(r * dim + col)).get<double>();
    return p;
}

// ---------------------------------------------------------------------------
// scenario store: little-endian binary column store plus quantile summary
// ---------------------------------------------------------------------------
//
// Layout: magic "MSCN", u32 version(1), i32 age_min, i32 age_max,
// i32 anchor_year, i32 horizon_lo, i32 horizon_hi, u32 n_paths, u64 seed,
// anchor mu (n_ages doubles), then per path: u8 truncated flag, then mu as
// n_ages x n_years doubles in age-major order. All doubles IEEE-754
// little-endian.

inline void write_scenarios(const fs::path& path, const scenario_set& s) {
    std::ofstream out(path, std::ios::binary);
    require(static_cast<bool>(out), "cannot write " + path.string());
    const char magic[4] = {'M', 'S', 'C', 'N'};
    out.write(magic, 4);
    auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_i32 = [&](std::int32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
    auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
    put_u32(1);
    put_i32(s.ages.lo);
    put_i32(s.ages.hi);
    put_i32(s.anchor_year);
    put_i32(s.horizon.lo);
    put_i32(s.horizon.hi);
    put_u32(static_cast<std::uint32_t>(s.n_paths()));
    put_u64(s.seed);
    out.write(reinterpret_cast<const char*>(s.anchor_mu.data()),
              static_cast<std::streamsize>(sizeof(double)) * s.anchor_mu.size());
    for (int p = 0; p < s.n_paths(); ++p) {
        const char flag = static_cast<char>(s.truncated_flag[static_cast<std::size_t>(p)]);
        out.write(&flag, 1);
        const auto& m = s.mu[static_cast<std::size_t>(p)];
        for (int i = 0; i < s.ages.count(); ++i)
            for (int j = 0; j < s.horizon.count(); ++j) {
                const double v = m(i, j);
                out.write(reinterpret_cast<const char*>(&v), sizeof(double));
            }
    }
}

inline scenario_set read_scenarios(const fs::path& path) {
    require_artifact(path, "project");
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    in.read(magic, 4);
    require(in && magic[0] == 'M' && magic[1] == 'S' && magic[2] == 'C' && magic[3] == 'N',
            path.string() + ": not a scenario store");
    auto get_u32 = [&]() {
        std::uint32_t v;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_i32 = [&]() {
        std::int32_t v;
        in.read(reinterpret_cast<char*>(&v), 4);
        return v;
    };
    auto get_u64 = [&]() {
        std::uint64_t v;
        in.read(reinterpret_cast<char*>(&v), 8);
        return v;
    };
    const std::uint32_t version = get_u32();
    require(version == 1, path.string() + ": unsupported scenario store version");
    scenario_set s;
    s.ages = {get_i32(), get_i32()};
    s.anchor_year = get_i32();
    s.horizon = {get_i32(), get_i32()};
    const std::uint32_t n_paths = get_u32();
    s.seed = get_u64();
    s.anchor_mu.resize(s.ages.count());
    in.read(reinterpret_cast<char*>(s.anchor_mu.data()),
            static_cast<std::streamsize>(sizeof(double)) * s.ages.count());
    s.mu.resize(n_paths);
    s.truncated_flag.resize(n_paths);
    for (std::uint32_t p = 0; p < n_paths; ++p) {
        char flag;
        in.read(&flag, 1);
        s.truncated_flag[p] = static_cast<std::uint8_t>(flag);
        Eigen::MatrixXd m(s.ages.count(), s.horizon.count());
        for (int i = 0; i < s.ages.count(); ++i)
            for (int j = 0; j < s.horizon.count(); ++j) {
                double v;
                in.read(reinterpret_cast<char*>(&v), sizeof(double));
                m(i, j) = v;
            }
        s.mu[p] = std::move(m);
    }
    require(static_cast<bool>(in), path.string() + ": truncated scenario store");
    return s;
}

// Empirical quantile: ceiling order statistic on the ascending sample.
inline double scenario_quantile(std::vector<double>& values, double level) {
    std::sort(values.begin(), values.end());
    const std::size_t rank = std::min(
        values.size(),
        std::max<std::size_t>(1, static_cast<std::size_t>(
                                     std::ceil(level * static_cast<double>(values.size())))));
    return values[rank - 1];
}

inline void write_quantile_summary(const fs::path& path, const scenario_set& s) {
    const std::vector<double> levels{0.005, 0.05, 0.5, 0.95, 0.995};
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << "age,year,q0.005,q0.05,q0.5,q0.95,q0.995\n";
    std::vector<double> v(static_cast<std::size_t>(s.n_paths()));
    for (int i = 0; i < s.ages.count(); ++i) {
        for (int j = 0; j < s.horizon.count(); ++j) {
            for (int p = 0; p < s.n_paths(); ++p) v[static_cast<std::size_t>(p)] = s.q(p, i, j);
            out << s.ages.at(i) << ',' << s.horizon.at(j);
            for (double lvl : levels) out << ',' << fmt(scenario_quantile(v, lvl));
            out << '\n';
        }
    }
}

// Full per-path CSV export (one column per path).
inline void write_scenarios_csv(const fs::path& path, const scenario_set& s) {
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << "age,year";
    for (int p = 0; p < s.n_paths(); ++p) out << ",q_path" << (p + 1);
    out << '\n';
    for (int i = 0; i < s.ages.count(); ++i)
        for (int j = 0; j < s.horizon.count(); ++j) {
            out << s.ages.at(i) << ',' << s.horizon.at(j);
            for (int p = 0; p < s.n_paths(); ++p) out << ',' << fmt(s.q(p, i, j));
            out << '\n';
        }
}

inline void write_manifest(const fs::path& path, const std::string& stage,
                           const pipeline_config& cfg, const json& extra = json::object()) {
    json j;
    j["stage"] = stage;
    j["config_digest"] = config_digest(cfg);
    j["format_version"] = 1;
    j["seeds"] = {{"regime", cfg.regime.seed},
                  {"projection", cfg.projection.seed},
                  {"mcd", cfg.outliers.mcd_seed}};
    for (const auto& [k, v] : extra.items()) j[k] = v;
    std::ofstream out(path);
    require(static_cast<bool>(out), "cannot write " + path.string());
    out << j.dump(2) << '\n';
}

}  // namespace mortshock::artifacts
