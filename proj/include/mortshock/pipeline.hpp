#pragma once

#include "mortshock/artifacts.hpp"
#include "mortshock/baseline.hpp"
#include "mortshock/config.hpp"
#include "mortshock/data_ingestion.hpp"
#include "mortshock/outliers.hpp"
#include "mortshock/period_dynamics.hpp"
#include "mortshock/projection.hpp"
#include "mortshock/regime.hpp"
#include "mortshock/scr.hpp"
#include "mortshock/spline.hpp"

#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

namespace mortshock {

namespace fs = std::filesystem;

struct pipeline_context {
    pipeline_config cfg;
    int threads = 1;
    std::ostream* log = &std::cout;

    fs::path out() const { return fs::path(cfg.output_dir); }
    fs::path panel_dir() const { return out() / "panel"; }
    fs::path baseline_dir() const { return out() / "baseline"; }
    fs::path outliers_dir() const { return out() / "outliers"; }
    fs::path rebaseline_dir() const { return out() / "rebaseline"; }
    fs::path regime_dir() const { return out() / "regime"; }
    fs::path dynamics_file() const { return out() / "dynamics.json"; }
    fs::path scenarios_file() const { return out() / "scenarios.bin"; }
    fs::path quantiles_file() const { return out() / "scenario_quantiles.csv"; }
    fs::path scr_file() const { return out() / "scr_report.csv"; }
};

inline void stage_ingest(const pipeline_context& ctx) {
    const auto& d = ctx.cfg.data;
    std::vector<country_series> series;
    std::map<std::string, int> entries;
    for (const auto& cc : d.countries) {
        series.push_back(load_country_table(cc.path, cc.code, d.ages(), d.years()));
        entries[cc.code] = cc.entry_year;
    }
    const mortality_panel panel = build_panel(std::move(series), entries, d.ages(), d.years());
    panel.country(d.target_country);  // target must be present
    artifacts::write_panel(ctx.panel_dir(), panel, d.target_country);
    artifacts::write_manifest(ctx.panel_dir() / "stage_manifest.json", "ingest", ctx.cfg);
    *ctx.log << "[ingest] panel " << d.ages().count() << " ages x " << d.years().count()
             << " years, " << d.countries.size() << " countries\n";
}

namespace detail {

inline baseline_fit_options fit_options(const pipeline_config& cfg) {
    baseline_fit_options o;
    o.factors = cfg.baseline.m;
    o.loglik_tol = cfg.baseline.loglik_tol;
    o.constraint_tol = cfg.baseline.constraint_tol;
    o.gradient_tol = cfg.baseline.gradient_tol;
    o.max_sweeps = cfg.baseline.max_sweeps;
    return o;
}

inline baseline_params fit_from_panel(const pipeline_context& ctx,
                                      const artifacts::panel_artifact& panel,
                                      const std::vector<char>& active,
                                      fit_diagnostics& diag_common, fit_diagnostics& diag_dev) {
    require(ctx.cfg.baseline.l == ctx.cfg.baseline.m && ctx.cfg.baseline.m == 2,
            "baseline: only the two-factor specification is supported");
    baseline_params p;
    p.common = fit_common_trend(panel.common_deaths, panel.common_exposures, panel.ages,
                                panel.years, active, fit_options(ctx.cfg), &diag_common);
    p.anchor_common.resize(panel.ages.count());
    p.anchor_country.resize(panel.ages.count());
    for (int i = 0; i < panel.ages.count(); ++i) {
        require(panel.common_deaths(i, 0) > 0.0 && panel.target_deaths(i, 0) > 0.0,
                "baseline: zero deaths in the anchor year at age " +
                    std::to_string(panel.ages.at(i)));
        p.anchor_common[i] =
            std::log(panel.common_deaths(i, 0) / panel.common_exposures(i, 0));
        p.anchor_country[i] =
            std::log(panel.target_deaths(i, 0) / panel.target_exposures(i, 0));
    }
    p.deviation = fit_country_deviation(panel.target_deaths, panel.target_exposures, panel.ages,
                                        panel.years, p.common, p.anchor_country,
                                        panel.target_country, active, fit_options(ctx.cfg),
                                        &diag_dev);
    return p;
}

}  // namespace detail

inline void stage_baseline(const pipeline_context& ctx) {
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    fit_diagnostics dc, dd;
    const std::vector<char> active(static_cast<std::size_t>(panel.years.count()), 1);
    const baseline_params p = detail::fit_from_panel(ctx, panel, active, dc, dd);
    artifacts::write_baseline(ctx.baseline_dir(), p, dc, dd);
    artifacts::write_manifest(ctx.baseline_dir() / "stage_manifest.json", "baseline", ctx.cfg);
    *ctx.log << "[baseline] loglik " << dc.loglik << " (common), " << dd.loglik
             << " (deviation), constraint violation " << std::max(dc.constraint_violation,
                                                                  dd.constraint_violation)
             << "\n";
}

inline void stage_outliers(const pipeline_context& ctx) {
    const auto p = artifacts::read_baseline(ctx.baseline_dir(), "baseline");
    const year_range years = p.common.years;
    std::vector<int> year_values(static_cast<std::size_t>(years.count()));
    for (int j = 0; j < years.count(); ++j) year_values[static_cast<std::size_t>(j)] = years.at(j);

    std::set<int> excluded;
    for (const auto& r : ctx.cfg.outliers.a_priori_exclusions)
        for (int y = r.lo; y <= r.hi; ++y)
            if (years.contains(y)) excluded.insert(y);

    std::vector<spline_fit> splines;
    for (const auto& l : p.common.l)
        splines.push_back(fit_smoothing_spline(year_values, l, excluded));
    const remainder_series rem =
        compute_remainders(p.common.l, years, splines, ctx.cfg.outliers.epoch_split_year);

    mcd_options mo;
    mo.seed = ctx.cfg.outliers.mcd_seed;
    const outlier_report rep = detect_outliers(rem, ctx.cfg.outliers.quantile, mo);
    artifacts::write_outliers(ctx.outliers_dir(), rep);
    artifacts::write_manifest(ctx.outliers_dir() / "stage_manifest.json", "outliers", ctx.cfg);
    *ctx.log << "[outliers] flagged " << rep.outlier_years.size() << " years: "
             << format_year_runs(rep.outlier_years) << "\n";
}

inline void stage_rebaseline(const pipeline_context& ctx) {
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    const std::set<int> outliers = artifacts::read_outlier_years(ctx.outliers_dir());
    std::vector<char> active(static_cast<std::size_t>(panel.years.count()), 1);
    for (int y : outliers)
        if (panel.years.contains(y)) active[static_cast<std::size_t>(panel.years.index(y))] = 0;

    fit_diagnostics dc, dd;
    const baseline_params p = detail::fit_from_panel(ctx, panel, active, dc, dd);
    artifacts::write_baseline(ctx.rebaseline_dir(), p, dc, dd);
    artifacts::write_manifest(ctx.rebaseline_dir() / "stage_manifest.json", "rebaseline", ctx.cfg);
    *ctx.log << "[rebaseline] excluded " << outliers.size() << " years, loglik " << dc.loglik
             << " (common)\n";
}

inline residual_panel residuals_from_artifacts(const pipeline_context& ctx,
                                               const artifacts::panel_artifact& panel,
                                               const baseline_params& p) {
    const Eigen::MatrixXd rates = crude_death_rates(panel.target_deaths, panel.target_exposures);
    return compute_residuals(rates, p, ctx.cfg.age_groups());
}

inline void stage_regime(const pipeline_context& ctx) {
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    const auto p = artifacts::read_baseline(ctx.rebaseline_dir(), "rebaseline");
    const residual_panel rp = residuals_from_artifacts(ctx, panel, p);
    const Eigen::VectorXd nu = expand_nu_weights(ctx.cfg.regime.nu_weights, rp.years);

    for (std::size_t gi = 0; gi < rp.age_groups.size(); ++gi) {
        const age_range group = rp.age_groups[gi];
        const int row0 = rp.ages.index(group.lo);
        const Eigen::MatrixXd z_group = rp.z.middleRows(row0, group.count());

        regime_fit_config rc;
        rc.epoch_year = ctx.cfg.regime.epoch_year;
        rc.seed = mix_seed(ctx.cfg.regime.seed, gi);
        rc.threads = ctx.threads;
        rc.jde_max_generations = ctx.cfg.regime.jde_max_generations;
        rc.jde_stall_generations = ctx.cfg.regime.jde_stall_generations;
        rc.outer_max = ctx.cfg.regime.outer_max;

        regime_fit_diagnostics diag;
        const regime_params fitted = fit_regime(z_group, rp.years, group, nu, rc, &diag);
        const filter_output filt = filter_loglik(z_group, rp.years, fitted, nu);
        artifacts::write_regime(ctx.regime_dir(), fitted,
                                filt.filtered.row(filt.filtered.rows() - 1).transpose(),
                                diag.loglik);
        *ctx.log << "[regime] group " << format_range(group) << " p12 " << fitted.p12
                 << " p21 " << fitted.p21 << " sigma_h " << fitted.sigma_h << " loglik "
                 << diag.loglik << "\n";
    }
    artifacts::write_manifest(ctx.regime_dir() / "stage_manifest.json", "regime", ctx.cfg);
}

inline void stage_dynamics(const pipeline_context& ctx) {
    const auto p = artifacts::read_baseline(ctx.rebaseline_dir(), "rebaseline");
    const improvement_effects eff = to_improvement_form(p);
    const int m = p.common.factors, l = p.deviation.factors;
    const int t_count = eff.years.count();
    Eigen::MatrixXd series(t_count, m + l);
    for (int f = 0; f < m; ++f) series.col(f) = eff.k[static_cast<std::size_t>(f)];
    for (int f = 0; f < l; ++f) series.col(m + f) = eff.kappa[static_cast<std::size_t>(f)];

    const std::vector<double> grid = ctx.cfg.dynamics.grid();
    double gamma = grid.front();
    if (grid.size() > 1)
        gamma = select_decay(series, eff.years, grid, ctx.cfg.dynamics.first_eval_year, m);
    const period_dyn_params dyn = fit_weighted_gaussian(series, gamma, m);
    artifacts::write_dynamics(ctx.dynamics_file(), dyn);
    artifacts::write_manifest(ctx.out() / "dynamics_manifest.json", "dynamics", ctx.cfg);
    *ctx.log << "[dynamics] gamma " << gamma << " c = (" << dyn.c.transpose() << ")\n";
}

inline void stage_project(const pipeline_context& ctx) {
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    const auto p = artifacts::read_baseline(ctx.rebaseline_dir(), "rebaseline");
    const auto dyn = artifacts::read_dynamics(ctx.dynamics_file());

    std::vector<regime_inputs> regimes;
    projection_config pc;
    for (const age_range& group : ctx.cfg.age_groups()) {
        regimes.push_back(artifacts::read_regime(ctx.regime_dir(), group));
        std::map<int, forced_state> forced;
        const auto it = ctx.cfg.projection.forced_states.find(format_range(group));
        if (it != ctx.cfg.projection.forced_states.end())
            for (const auto& [year, state] : it->second)
                forced[year] = state == "lvs" ? forced_state::lvs : forced_state::hvs;
        pc.forced_states.push_back(std::move(forced));
    }

    pc.horizon = {panel.years.hi + 1, ctx.cfg.projection.horizon_end};
    require(pc.horizon.lo <= pc.horizon.hi, "projection: horizon_end before the first forecast year");
    pc.n_paths = ctx.cfg.projection.n_paths;
    pc.seed = ctx.cfg.projection.seed;
    pc.shock_mean_mu_h = ctx.cfg.projection.shock_mean == "mu_h";
    pc.threads = ctx.threads;

    const int last = panel.years.count() - 1;
    Eigen::VectorXd anchor(panel.ages.count());
    for (int i = 0; i < panel.ages.count(); ++i)
        anchor[i] = panel.target_deaths(i, last) / panel.target_exposures(i, last);

    const scenario_set set = project_scenarios(p, dyn, regimes, anchor, pc);
    artifacts::write_scenarios(ctx.scenarios_file(), set);
    artifacts::write_quantile_summary(ctx.quantiles_file(), set);
    artifacts::write_manifest(ctx.out() / "project_manifest.json", "project", ctx.cfg);
    *ctx.log << "[project] " << set.n_paths() << " paths over " << pc.horizon.count()
             << " years\n";
}

inline void stage_scr(const pipeline_context& ctx) {
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    const auto p = artifacts::read_baseline(ctx.rebaseline_dir(), "rebaseline");
    const auto dyn = artifacts::read_dynamics(ctx.dynamics_file());
    const scenario_set set = artifacts::read_scenarios(ctx.scenarios_file());
    require(!ctx.cfg.scr.contracts.empty(), "scr: no contracts configured");

    runoff_options ro;
    ro.kannisto_fit_ages = {ctx.cfg.scr.kannisto_fit_age_min, ctx.cfg.scr.kannisto_fit_age_max};
    ro.max_age = ctx.cfg.scr.max_age;

    // best estimate over anchor year + horizon
    const int n_t = set.horizon.count() + 1;
    Eigen::MatrixXd be_mu(set.ages.count(), n_t);
    be_mu.col(0) = set.anchor_mu;
    be_mu.rightCols(n_t - 1) =
        project_best_estimate(p, dyn, set.anchor_mu, set.horizon);
    const mortality_surface best =
        make_closed_surface(be_mu, set.ages, {set.anchor_year, set.horizon.hi},
                            ro.kannisto_fit_ages, ro.max_age, "best-estimate");

    std::ofstream out(ctx.scr_file());
    require(static_cast<bool>(out), "cannot write " + ctx.scr_file().string());
    out << "contract,issue_age,bel0,scr_standard,scr_runoff,scr_mort,scr_cat\n";
    for (const auto& con : ctx.cfg.scr.contracts) {
        if (con.type == "annuity") {
            annuity_contract c{con.issue_age, con.issue_year, con.annual_payout, con.max_age,
                               ctx.cfg.scr.interest_rate};
            const double bel0 = bel_annuity(c, best);
            const double standard = scr_standard_annuity(c, best);
            ro.tail = "longevity";
            const double runoff = scr_runoff(c, set, best, ro);
            out << "annuity," << con.issue_age << ',' << artifacts::fmt(bel0) << ','
                << artifacts::fmt(standard) << ',' << artifacts::fmt(runoff) << ",,\n";
            *ctx.log << "[scr] annuity age " << con.issue_age << " BEL " << bel0 << " standard "
                     << standard << " runoff " << runoff << "\n";
        } else {
            term_life_contract c{con.issue_age, con.issue_year, con.terminal_age,
                                 con.death_benefit, ctx.cfg.scr.interest_rate};
            const double bel0 = bel_term(c, best);
            const term_scr_breakdown standard = scr_standard_term(c, best);
            ro.tail = "mortality";
            const double runoff = scr_runoff(c, set, best, ro);
            out << "term," << con.issue_age << ',' << artifacts::fmt(bel0) << ','
                << artifacts::fmt(standard.total) << ',' << artifacts::fmt(runoff) << ','
                << artifacts::fmt(standard.mortality) << ',' << artifacts::fmt(standard.catastrophe)
                << '\n';
            *ctx.log << "[scr] term age " << con.issue_age << " BEL " << bel0 << " standard "
                     << standard.total << " runoff " << runoff << "\n";
        }
    }
    artifacts::write_manifest(ctx.out() / "scr_manifest.json", "scr", ctx.cfg);
}

inline const std::vector<std::string>& stage_order() {
    static const std::vector<std::string> order{"ingest",  "baseline", "outliers", "rebaseline",
                                                "regime",  "dynamics", "project",  "scr"};
    return order;
}

inline void run_pipeline(const pipeline_context& ctx, const std::set<std::string>& stages) {
    for (const auto& s : stages) {
        bool known = false;
        for (const auto& o : stage_order()) known = known || o == s;
        require(known, "unknown stage '" + s + "'");
    }
    fs::create_directories(ctx.out());
    for (const auto& stage : stage_order()) {
        if (!stages.count(stage)) continue;
        if (stage == "ingest") stage_ingest(ctx);
        else if (stage == "baseline") stage_baseline(ctx);
        else if (stage == "outliers") stage_outliers(ctx);
        else if (stage == "rebaseline") stage_rebaseline(ctx);
        else if (stage == "regime") stage_regime(ctx);
        else if (stage == "dynamics") stage_dynamics(ctx);
        else if (stage == "project") stage_project(ctx);
        else if (stage == "scr") stage_scr(ctx);
    }
}

// Scenario export for downstream tooling.
inline void export_scenarios(const std::string& scenario_file, const std::string& format,
                             const std::string& output) {
    const scenario_set set = artifacts::read_scenarios(scenario_file);
    require(set.n_paths() > 0, "export: empty scenario set");
    if (format == "csv")
        artifacts::write_scenarios_csv(output, set);
    else if (format == "quantile-summary")
        artifacts::write_quantile_summary(output, set);
    else
        throw validation_error("unknown export format '" + format + "'");
}

}  // namespace mortshock
