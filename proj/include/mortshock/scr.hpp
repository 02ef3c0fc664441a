#pragma once

#include "mortshock/common.hpp"
#include "mortshock/projection.hpp"

#include <algorithm>
#include <string>
#include <vector>

namespace mortshock {

struct annuity_contract {
    int issue_age = 65;
    int issue_year = 2021;
    double annual_payout = 10000.0;
    int max_age = 120;           // omega
    double interest_rate = 0.02;
};

struct term_life_contract {
    int issue_age = 40;
    int issue_year = 2021;
    int terminal_age = 65;
    double death_benefit = 150000.0;
    double interest_rate = 0.02;
};

// Mortality-rate surface q_{x,t} covering every age/year a contract needs;
// old ages are filled by Kannisto closing of the force of mortality.
struct mortality_surface {
    age_range ages;
    year_range years;
    Eigen::MatrixXd q;
    std::string provenance;

    double at(int age, int year) const {
        require(ages.contains(age) && years.contains(year),
                "mortality surface does not cover (age " + std::to_string(age) + ", year " +
                    std::to_string(year) + ")");
        return q(ages.index(age), years.index(year));
    }
};

// Kannisto closing: per year, fit logit mu_x = log c + gamma x by least
// squares on the fit ages and extend with mu_x = c e^(gamma x) / (1 + c
// e^(gamma x)) up to `extend_to`. Input rows must cover the fit ages.
inline Eigen::MatrixXd close_kannisto(const Eigen::MatrixXd& mu, age_range ages,
                                      age_range fit_ages = {76, 85}, int extend_to = 120) {
    require(ages.contains(fit_ages.lo) && ages.contains(fit_ages.hi) && fit_ages.count() >= 2,
            "close_kannisto: fit ages must lie inside the surface");
    require(extend_to > ages.hi, "close_kannisto: nothing to extend");
    const int n_t = static_cast<int>(mu.cols());
    const int n_ext = extend_to - ages.hi;

    Eigen::MatrixXd out(ages.count() + n_ext, n_t);
    out.topRows(ages.count()) = mu;

    for (int j = 0; j < n_t; ++j) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        for (int x = fit_ages.lo; x <= fit_ages.hi; ++x) {
            const double m = mu(ages.index(x), j);
            if (!(m > 0.0))
                throw validation_error("close_kannisto: non-positive mu at age " +
                                       std::to_string(x) + " column " + std::to_string(j));
            if (!(m < 1.0))
                throw validation_error("close_kannisto: mu >= 1 at fit age " + std::to_string(x) +
                                       " column " + std::to_string(j));
            const double y = std::log(m / (1.0 - m));
            sx += x;
            sy += y;
            sxx += double(x) * x;
            sxy += x * y;
        }
        const double n = fit_ages.count();
        const double gamma = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        const double intercept = (sy - gamma * sx) / n;  // log c
        for (int x = ages.hi + 1; x <= extend_to; ++x) {
            const double e = std::exp(intercept + gamma * x);
            out(ages.count() + (x - ages.hi - 1), j) = e / (1.0 + e);
        }
    }
    return out;
}

// Builds a q surface from a mu surface (model ages) with Kannisto closing.
inline mortality_surface make_closed_surface(const Eigen::MatrixXd& mu, age_range ages,
                                             year_range years, age_range fit_ages = {76, 85},
                                             int extend_to = 120,
                                             const std::string& provenance = "") {
    mortality_surface s;
    const Eigen::MatrixXd mu_ext =
        extend_to > ages.hi ? close_kannisto(mu, ages, fit_ages, extend_to) : mu;
    s.ages = {ages.lo, std::max(extend_to, ages.hi)};
    s.years = years;
    s.q = 1.0 - (-mu_ext).array().exp();
    s.provenance = provenance;
    return s;
}

// k-year survival probabilities along the cohort diagonal, k = 0..omega-x.
inline Eigen::VectorXd survival_curve(const mortality_surface& surface, int age, int start_year,
                                      int max_age) {
    require(max_age >= age, "survival_curve: max_age below the start age");
    Eigen::VectorXd p(max_age - age + 1);
    p[0] = 1.0;
    for (int k = 1; k <= max_age - age; ++k)
        p[k] = p[k - 1] * (1.0 - surface.at(age + k - 1, start_year + k - 1));
    return p;
}

inline double bel_annuity(const annuity_contract& c, const mortality_surface& surface) {
    require(c.issue_age < c.max_age, "bel_annuity: issue age at or above omega");
    require(c.interest_rate > -1.0, "bel_annuity: interest rate must exceed -1");
    const double v = 1.0 / (1.0 + c.interest_rate);
    const Eigen::VectorXd p = survival_curve(surface, c.issue_age, c.issue_year, c.max_age);
    double bel = 0.0;
    double disc = 1.0;
    for (int k = 1; k <= c.max_age - c.issue_age; ++k) {
        disc *= v;
        bel += disc * p[k];
    }
    return c.annual_payout * bel;
}

inline double bel_term(const term_life_contract& c, const mortality_surface& surface) {
    require(c.issue_age < c.terminal_age, "bel_term: issue age at or above the terminal age");
    require(c.interest_rate > -1.0, "bel_term: interest rate must exceed -1");
    const double v = 1.0 / (1.0 + c.interest_rate);
    const Eigen::VectorXd p = survival_curve(surface, c.issue_age, c.issue_year, c.terminal_age);
    double bel = 0.0;
    double disc = 1.0;
    for (int k = 1; k <= c.terminal_age - c.issue_age; ++k) {
        disc *= v;
        bel += disc * p[k - 1] * surface.at(c.issue_age + k - 1, c.issue_year + k - 1);
    }
    return c.death_benefit * bel;
}

namespace detail {

inline mortality_surface scaled_q(const mortality_surface& s, double factor) {
    mortality_surface out = s;
    out.q = (s.q * factor).cwiseMin(1.0);
    return out;
}

}  // namespace detail

// Standard-model longevity SCR: permanent 20% reduction of all mortality
// rates, SCR = BEL(0.8 q) - BEL(q).
inline double scr_standard_annuity(const annuity_contract& c, const mortality_surface& best) {
    return bel_annuity(c, detail::scaled_q(best, 0.8)) - bel_annuity(c, best);
}

struct term_scr_breakdown {
    double mortality = 0.0;
    double catastrophe = 0.0;
    double total = 0.0;
};

inline double aggregate_scr(double scr_mort, double scr_cat) {
    return std::sqrt(scr_mort * scr_mort + scr_cat * scr_cat);
}

// Standard-model term-life SCR: +15% mortality shock on all years, +0.0015
// catastrophe shock on the issue year only, aggregated by root-sum-of-squares.
inline term_scr_breakdown scr_standard_term(const term_life_contract& c,
                                            const mortality_surface& best) {
    const double bel0 = bel_term(c, best);

    term_scr_breakdown out;
    out.mortality = bel_term(c, detail::scaled_q(best, 1.15)) - bel0;

    mortality_surface cat = best;
    const int j = cat.years.index(c.issue_year);
    for (int i = 0; i < cat.q.rows(); ++i) cat.q(i, j) = std::min(1.0, cat.q(i, j) + 0.0015);
    out.catastrophe = bel_term(c, cat) - bel0;

    out.total = aggregate_scr(out.mortality, out.catastrophe);
    return out;
}

// Empirical VaR at `level` using the ceiling order statistic on ascending
// liabilities (no interpolation).
inline double empirical_var(std::vector<double> values, double level) {
    require(!values.empty(), "empirical_var: no scenarios");
    std::sort(values.begin(), values.end());
    const std::size_t rank =
        static_cast<std::size_t>(std::ceil(level * static_cast<double>(values.size())));
    require(rank >= 1 && rank <= values.size(), "empirical_var: level out of range");
    return values[rank - 1];
}

struct runoff_options {
    age_range kannisto_fit_ages = {76, 85};
    int max_age = 120;
    double level = 0.995;
    int min_scenarios = 1000;
    std::string tail = "longevity";  // or "mortality"; recorded for reporting
};

namespace detail {

// Builds the per-path closed surface including the anchor year, evaluates the
// liability, and returns the run-off SCR.
template <typename LiabilityFn>
double scr_runoff_impl(const scenario_set& scenarios, double bel0, const LiabilityFn& liability,
                       const runoff_options& opts) {
    require(scenarios.n_paths() >= opts.min_scenarios,
            "scr_runoff: need at least " + std::to_string(opts.min_scenarios) + " scenarios");
    const int n_t = scenarios.horizon.count() + 1;  // anchor year + horizon
    std::vector<double> liabilities(static_cast<std::size_t>(scenarios.n_paths()));
    Eigen::MatrixXd mu(scenarios.ages.count(), n_t);
    for (int p = 0; p < scenarios.n_paths(); ++p) {
        mu.col(0) = scenarios.anchor_mu;
        mu.rightCols(n_t - 1) = scenarios.mu[static_cast<std::size_t>(p)];
        const mortality_surface s = make_closed_surface(
            mu, scenarios.ages, {scenarios.anchor_year, scenarios.horizon.hi},
            opts.kannisto_fit_ages, opts.max_age, "scenario " + std::to_string(p));
        liabilities[static_cast<std::size_t>(p)] = liability(s);
    }
    return empirical_var(std::move(liabilities), opts.level) - bel0;
}

}  // namespace detail

inline double scr_runoff(const annuity_contract& c, const scenario_set& scenarios,
                         const mortality_surface& best, const runoff_options& opts = {}) {
    const double bel0 = bel_annuity(c, best);
    return detail::scr_runoff_impl(
        scenarios, bel0, [&](const mortality_surface& s) { return bel_annuity(c, s); }, opts);
}

inline double scr_runoff(const term_life_contract& c, const scenario_set& scenarios,
                         const mortality_surface& best, const runoff_options& opts = {}) {
    const double bel0 = bel_term(c, best);
    return detail::scr_runoff_impl(
        scenarios, bel0, [&](const mortality_surface& s) { return bel_term(c, s); }, opts);
}

}  // namespace mortshock
