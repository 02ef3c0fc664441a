#pragma once

#include "mortshock/baseline.hpp"
#include "mortshock/common.hpp"
#include "mortshock/jde.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace mortshock {

// Residuals of the calibrated improvement model,
//   z_{x,t} = log m_{x,t} - log m_{x,t-1} - eta_{x,t},
// defined from t_min + 1 onwards.
struct residual_panel {
    age_range ages;
    year_range years;  // t_min + 1 .. t_max
    Eigen::MatrixXd z;
    std::vector<age_range> age_groups;
};

inline residual_panel compute_residuals(const Eigen::MatrixXd& crude_rates,
                                        const baseline_params& baseline,
                                        std::vector<age_range> age_groups = {}) {
    const age_range ages = baseline.common.ages;
    const year_range years = baseline.common.years;
    require(crude_rates.rows() == ages.count() && crude_rates.cols() == years.count(),
            "compute_residuals: crude rate matrix shape mismatch");
    for (int i = 0; i < ages.count(); ++i)
        for (int j = 0; j < years.count(); ++j)
            if (!(crude_rates(i, j) > 0.0))
                throw validation_error("compute_residuals: zero crude rate at (age " +
                                       std::to_string(ages.at(i)) + ", year " +
                                       std::to_string(years.at(j)) + ")");

    const Eigen::MatrixXd eta = improvement_predictor(baseline);
    residual_panel out;
    out.ages = ages;
    out.years = {years.lo + 1, years.hi};
    out.z.resize(ages.count(), years.count() - 1);
    for (int j = 1; j < years.count(); ++j)
        for (int i = 0; i < ages.count(); ++i)
            out.z(i, j - 1) = std::log(crude_rates(i, j)) - std::log(crude_rates(i, j - 1)) -
                              eta(i, j - 1);
    if (age_groups.empty()) {
        // default split 20-59 / 60-85 where it applies, otherwise halves
        if (ages.contains(59) && ages.lo <= 59 && ages.hi >= 60)
            age_groups = {{ages.lo, 59}, {60, ages.hi}};
        else
            age_groups = {ages};
    }
    out.age_groups = std::move(age_groups);
    return out;
}

// Parameters of the regime-switching shock model for one age group.
struct regime_params {
    age_range group;
    int epoch_year = 1970;
    double p12 = 0.05, p21 = 0.5;
    double sigma_e1 = 0.1, slope1 = 0.0;
    double sigma_e2 = 0.1, slope2 = 0.0;
    double mu_h = 0.0;
    double sigma_h = 1.0;
    Eigen::VectorXd frak_b;  // unit Euclidean norm, sum >= 0
};

// sigma_e(x, t): epoch-dependent residual volatility, linear in age within
// the group. Non-positive values signal an infeasible parameter vector.
inline double sigma_e(const regime_params& p, int age, int year) {
    require(p.group.contains(age), "sigma_e: age outside the group");
    const double base = year < p.epoch_year ? p.sigma_e1 : p.sigma_e2;
    const double slope = year < p.epoch_year ? p.slope1 : p.slope2;
    const double s = base + slope * double(age - p.group.lo);
    if (!(s > 0.0))
        throw numerical_error("sigma_e: non-positive volatility at age " + std::to_string(age) +
                              ", year " + std::to_string(year));
    return s;
}

inline bool sigma_e_feasible(const regime_params& p, year_range years) {
    for (int epoch = 0; epoch < 2; ++epoch) {
        const bool pre = epoch == 0;
        if (pre && years.lo >= p.epoch_year) continue;
        if (!pre && years.hi < p.epoch_year) continue;
        const double base = pre ? p.sigma_e1 : p.sigma_e2;
        const double slope = pre ? p.slope1 : p.slope2;
        // linear in age: the extremes decide
        if (base <= 0.0 || base + slope * double(p.group.hi - p.group.lo) <= 0.0) return false;
    }
    return true;
}

// Three-state Markov chain with a memory state: (X,1) low volatility, (1,2)
// freshly entered high volatility, (2,2) continued high volatility. The
// sparsity forces at least two consecutive high-volatility years.
constexpr int state_lvs = 0;       // (X,1)
constexpr int state_hvs_enter = 1; // (1,2)
constexpr int state_hvs_stay = 2;  // (2,2)

struct memory_chain_spec {
    double p12 = 0.0, p21 = 0.0;
    Eigen::Matrix3d transition;
};

inline memory_chain_spec memory_transition_matrix(double p12, double p21) {
    require(p12 > 0.0 && p12 < 1.0 && p21 > 0.0 && p21 < 1.0,
            "memory_transition_matrix: probabilities must lie in (0,1)");
    memory_chain_spec s;
    s.p12 = p12;
    s.p21 = p21;
    s.transition << 1.0 - p12, p12, 0.0,
                    0.0, 0.0, 1.0,
                    p21, 0.0, 1.0 - p21;
    return s;
}

inline Eigen::Vector3d stationary_distribution(const memory_chain_spec& s) {
    const double denom = s.p12 + s.p21 + s.p12 * s.p21;
    return Eigen::Vector3d(s.p21 / denom, s.p12 * s.p21 / denom, s.p12 / denom);
}

namespace detail {

// Per-epoch emission quantities; the HVS covariance B B^T sigma_H^2 + D is
// evaluated through its rank-one structure so every density costs O(n).
struct emission_terms {
    Eigen::VectorXd sigma2;
    Eigen::VectorXd mean_hvs;    // frak_b * mu_h
    Eigen::VectorXd b_over_s2;   // frak_b / sigma2
    double s1 = 0.0;             // sum frak_b^2 / sigma2
    double lvs_logconst = 0.0;
    double hvs_logconst = 0.0;
    double sigma_h2 = 0.0;

    double lvs_logpdf(const Eigen::VectorXd& z) const {
        return lvs_logconst - 0.5 * (z.array().square() / sigma2.array()).sum();
    }
    double hvs_logpdf(const Eigen::VectorXd& z) const {
        const Eigen::VectorXd q = z - mean_hvs;
        const double base = (q.array().square() / sigma2.array()).sum();
        const double cross = b_over_s2.dot(q);
        const double quad = base - sigma_h2 * cross * cross / (1.0 + sigma_h2 * s1);
        return hvs_logconst - 0.5 * quad;
    }
};

inline emission_terms make_emission_terms(const regime_params& p, bool pre_epoch) {
    const int n = p.group.count();
    require(p.frak_b.size() == n, "emission: frak_b dimension mismatch");
    emission_terms e;
    e.sigma2.resize(n);
    const int probe_year = pre_epoch ? p.epoch_year - 1 : p.epoch_year;
    for (int i = 0; i < n; ++i) {
        const double s = sigma_e(p, p.group.at(i), probe_year);
        e.sigma2[i] = s * s;
    }
    e.mean_hvs = p.frak_b * p.mu_h;
    e.b_over_s2 = p.frak_b.array() / e.sigma2.array();
    e.s1 = (p.frak_b.array().square() / e.sigma2.array()).sum();
    e.sigma_h2 = p.sigma_h * p.sigma_h;
    const double log2pi = std::log(2.0 * M_PI);
    const double logdet_d = e.sigma2.array().log().sum();
    e.lvs_logconst = -0.5 * (n * log2pi + logdet_d);
    e.hvs_logconst = -0.5 * (n * log2pi + logdet_d + std::log1p(e.sigma_h2 * e.s1));
    return e;
}

}  // namespace detail

// Log density of the residual vector given the occupied state; LVS is a
// diagonal Gaussian, HVS adds the rank-one shock covariance.
inline double emission_logdensity(const Eigen::VectorXd& z, int state, int year,
                                  const regime_params& p) {
    require(state >= 0 && state <= 2, "emission_logdensity: bad state");
    require(z.allFinite(), "emission_logdensity: non-finite input");
    const auto terms = detail::make_emission_terms(p, year < p.epoch_year);
    return state == state_lvs ? terms.lvs_logpdf(z) : terms.hvs_logpdf(z);
}

struct filter_output {
    double loglik = 0.0;
    Eigen::MatrixXd filtered;      // years x 3, rows sum to one
    Eigen::VectorXd log_density;   // log f(z_t | z_<t)
    bool feasible = true;
};

// Hamilton filter over the memory chain, initialized from the stationary
// distribution. nu weights scale the per-year log-density contributions; an
// empty nu means all ones. A zero-probability observation yields an -inf
// log-likelihood rather than an exception.
inline filter_output filter_loglik(const Eigen::MatrixXd& z, year_range years,
                                   const regime_params& p, const Eigen::VectorXd& nu = {}) {
    const int n = static_cast<int>(z.rows());
    const int t_count = static_cast<int>(z.cols());
    require(t_count == years.count(), "filter_loglik: year count mismatch");
    require(n == p.group.count(), "filter_loglik: group dimension mismatch");
    if (nu.size() != 0) {
        require(static_cast<int>(nu.size()) == t_count, "filter_loglik: nu length mismatch");
        require((nu.array() >= 0.0).all(), "filter_loglik: nu weights must be non-negative");
    }
    if (!sigma_e_feasible(p, years))
        throw numerical_error("filter_loglik: non-positive sigma_e over the data range");

    const memory_chain_spec chain = memory_transition_matrix(p.p12, p.p21);
    const Eigen::Vector3d pi = stationary_distribution(chain);
    const auto pre = detail::make_emission_terms(p, true);
    const auto post = detail::make_emission_terms(p, false);

    filter_output out;
    out.filtered.resize(t_count, 3);
    out.log_density.resize(t_count);

    Eigen::Vector3d filt = Eigen::Vector3d::Zero();
    for (int t = 0; t < t_count; ++t) {
        Eigen::Vector3d pred;
        if (t == 0)
            pred = pi;
        else
            pred = chain.transition.transpose() * filt;

        const auto& terms = years.at(t) < p.epoch_year ? pre : post;
        const double lvs = terms.lvs_logpdf(z.col(t));
        const double hvs = terms.hvs_logpdf(z.col(t));
        Eigen::Vector3d lg;
        lg[0] = pred[0] > 0.0 ? std::log(pred[0]) + lvs : -std::numeric_limits<double>::infinity();
        lg[1] = pred[1] > 0.0 ? std::log(pred[1]) + hvs : -std::numeric_limits<double>::infinity();
        lg[2] = pred[2] > 0.0 ? std::log(pred[2]) + hvs : -std::numeric_limits<double>::infinity();

        const double lf = logsumexp3(lg[0], lg[1], lg[2]);
        out.log_density[t] = lf;
        if (!std::isfinite(lf)) {
            out.loglik = -std::numeric_limits<double>::infinity();
            out.feasible = false;
            return out;
        }
        for (int s = 0; s < 3; ++s) filt[s] = std::exp(lg[s] - lf);
        filt /= filt.sum();
        out.filtered.row(t) = filt.transpose();
        out.loglik += (nu.size() ? nu[t] : 1.0) * lf;
    }
    return out;
}

struct regime_fit_config {
    int epoch_year = 1970;
    std::uint64_t seed = 1;
    int threads = 1;
    int jde_max_generations = 3000;
    int jde_stall_generations = 200;
    int outer_max = 25;
    double outer_tol = 1e-5;  // relative precision of the alternation
    // theta_1 search box
    double p_lo = 1e-4, p_hi = 0.999;
    double sigma_lo = 1e-4, sigma_hi = 5.0;
    double slope_lo = -0.02, slope_hi = 0.02;
    double mu_h_lo = -1.0, mu_h_hi = 1.0;
    double sigma_h_lo = 1e-3, sigma_h_hi = 10.0;
};

struct regime_fit_diagnostics {
    int outer_iterations = 0;
    double loglik = -std::numeric_limits<double>::infinity();
    long evaluations = 0;
};

// Two-step alternating maximization of the filter log-likelihood with jDE:
// the eight scalars (transition probabilities, volatility law, shock moments)
// against the age loading vector, repeated until the objective stabilizes.
// frak_b is renormalized to unit norm with sum >= 0 after every second step.
inline regime_params fit_regime(const Eigen::MatrixXd& z_group, year_range years, age_range group,
                                const Eigen::VectorXd& nu = {}, const regime_fit_config& cfg = {},
                                regime_fit_diagnostics* diag_out = nullptr) {
    const int n = static_cast<int>(z_group.rows());
    require(group.count() == n, "fit_regime: group size mismatch");
    require(years.count() >= 30, "fit_regime: need at least 30 years of residuals");

    regime_params cur;
    cur.group = group;
    cur.epoch_year = cfg.epoch_year;
    cur.frak_b = Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(double(n)));

    auto theta1_of = [](const regime_params& p) {
        Eigen::VectorXd v(8);
        v << p.p12, p.p21, p.sigma_e1, p.slope1, p.sigma_e2, p.slope2, p.mu_h, p.sigma_h;
        return v;
    };
    auto apply_theta1 = [](regime_params p, const Eigen::VectorXd& v) {
        p.p12 = v[0];
        p.p21 = v[1];
        p.sigma_e1 = v[2];
        p.slope1 = v[3];
        p.sigma_e2 = v[4];
        p.slope2 = v[5];
        p.mu_h = v[6];
        p.sigma_h = v[7];
        return p;
    };
    auto loglik_of = [&](const regime_params& p) {
        if (!sigma_e_feasible(p, years)) return -std::numeric_limits<double>::infinity();
        return filter_loglik(z_group, years, p, nu).loglik;
    };

    Eigen::VectorXd lo1(8), hi1(8);
    lo1 << cfg.p_lo, cfg.p_lo, cfg.sigma_lo, cfg.slope_lo, cfg.sigma_lo, cfg.slope_lo, cfg.mu_h_lo,
        cfg.sigma_h_lo;
    hi1 << cfg.p_hi, cfg.p_hi, cfg.sigma_hi, cfg.slope_hi, cfg.sigma_hi, cfg.slope_hi, cfg.mu_h_hi,
        cfg.sigma_h_hi;
    const Eigen::VectorXd lo2 = Eigen::VectorXd::Constant(n, -1.0);
    const Eigen::VectorXd hi2 = Eigen::VectorXd::Constant(n, 1.0);

    regime_fit_diagnostics diag;
    double ll_prev = -std::numeric_limits<double>::infinity();

    for (int outer = 1; outer <= cfg.outer_max; ++outer) {
        jde_options o1;
        o1.seed = mix_seed(cfg.seed, 2 * static_cast<std::uint64_t>(outer));
        o1.max_generations = cfg.jde_max_generations;
        o1.stall_generations = cfg.jde_stall_generations;
        o1.threads = cfg.threads;
        const Eigen::VectorXd t1 = theta1_of(cur);
        auto r1 = jde_maximize(
            [&](const Eigen::VectorXd& v) { return loglik_of(apply_theta1(cur, v)); }, lo1, hi1,
            o1, &t1);
        diag.evaluations += r1.evaluations;
        cur = apply_theta1(cur, r1.best);

        jde_options o2 = o1;
        o2.seed = mix_seed(cfg.seed, 2 * static_cast<std::uint64_t>(outer) + 1);
        auto r2 = jde_maximize(
            [&](const Eigen::VectorXd& v) {
                const double nrm = v.norm();
                if (!(nrm > 0.0)) return -std::numeric_limits<double>::infinity();
                regime_params p = cur;
                p.frak_b = v / nrm;
                return loglik_of(p);
            },
            lo2, hi2, o2, &cur.frak_b);
        diag.evaluations += r2.evaluations;
        {
            const double nrm = r2.best.norm();
            if (nrm > 0.0) cur.frak_b = r2.best / nrm;
        }
        if (cur.frak_b.sum() < 0.0) {  // sign convention; flips are likelihood-invariant
            cur.frak_b = -cur.frak_b;
            cur.mu_h = -cur.mu_h;
        }

        const double ll = loglik_of(cur);
        diag.outer_iterations = outer;
        diag.loglik = ll;
        if (std::isfinite(ll) && std::isfinite(ll_prev) &&
            std::abs(ll - ll_prev) <= cfg.outer_tol * (std::abs(ll_prev) + 1.0))
            break;
        ll_prev = ll;
    }

    if (diag_out) *diag_out = diag;
    if (!std::isfinite(diag.loglik))
        throw numerical_error("fit_regime: no feasible parameter vector found (best loglik -inf "
                              "after " + std::to_string(diag.outer_iterations) + " iterations)");
    return cur;
}

}  // namespace mortshock
