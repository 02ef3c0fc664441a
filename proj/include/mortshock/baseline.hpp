#pragma once

#include "mortshock/common.hpp"
#include "mortshock/data_ingestion.hpp"

#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace mortshock {

// Common two-factor trend in level form: eta_{x,t} = anchor_x + (t-t0) A_x
// + sum_i B^(i)_x L^(i)_t, with L^(i)_{t0} = 0 and L^(i)_{tmax} = 0 after
// canonicalization.
struct common_trend_params {
    age_range ages;
    year_range years;
    int factors = 2;
    Eigen::VectorXd a;               // per age
    std::vector<Eigen::VectorXd> b;  // factors x ages, unit norm, orthogonal
    std::vector<Eigen::VectorXd> l;  // factors x years, cumulated period effects
};

// Country-specific deviation: l factors of beta_x lambda_t with lambda_{t0}=0.
// No location constraint on kappa (there is no country drift term to absorb
// it), so lambda_{tmax} is free.
struct country_deviation_params {
    std::string country_code;
    age_range ages;
    year_range years;
    int factors = 2;
    std::vector<Eigen::VectorXd> beta;
    std::vector<Eigen::VectorXd> lambda;
};

struct baseline_params {
    common_trend_params common;
    country_deviation_params deviation;
    Eigen::VectorXd anchor_common;   // log crude rates of the aggregate at t0
    Eigen::VectorXd anchor_country;  // log crude rates of the target at t0
};

struct fit_diagnostics {
    int sweeps = 0;
    double loglik = 0.0;
    double gradient_supnorm = 0.0;
    double constraint_violation = 0.0;
};

struct baseline_fit_options {
    int factors = 2;
    double loglik_tol = 1e-10;
    double constraint_tol = 1e-8;
    double gradient_tol = 1e-9;  // sup-norm of the score, scaled by total deaths
    int max_sweeps = 5000;
};

// ---------------------------------------------------------------------------
// Poisson log-likelihood (constant terms omitted)
// ---------------------------------------------------------------------------

inline double poisson_loglik(const Eigen::MatrixXd& eta, const Eigen::MatrixXd& deaths,
                             const Eigen::MatrixXd& exposures,
                             const std::vector<char>& active_years) {
    require(eta.rows() == deaths.rows() && eta.cols() == deaths.cols() &&
                deaths.rows() == exposures.rows() && deaths.cols() == exposures.cols(),
            "poisson_loglik: shape mismatch");
    require(static_cast<Eigen::Index>(active_years.size()) == eta.cols(),
            "poisson_loglik: active-year mask length mismatch");
    double ll = 0.0;
    for (Eigen::Index j = 0; j < eta.cols(); ++j) {
        if (!active_years[static_cast<std::size_t>(j)]) continue;
        for (Eigen::Index i = 0; i < eta.rows(); ++i) {
            const double e = eta(i, j);
            const double mean = exposures(i, j) * std::exp(e);
            if (!std::isfinite(mean))
                throw numerical_error("poisson_loglik: exp overflow at cell (row " +
                                      std::to_string(i) + ", col " + std::to_string(j) + ")");
            ll += deaths(i, j) * e - mean;
        }
    }
    return ll;
}

// ---------------------------------------------------------------------------
// Two-factor canonicalization
// ---------------------------------------------------------------------------

struct two_factor_normalization {
    Eigen::VectorXd b1, b2;  // unit norm, orthogonal, range(b1) >= range(b2)
    Eigen::VectorXd k1, k2;  // orthogonal; sum zero when centered
    Eigen::VectorXd a_adjustment;
};

namespace detail {

inline double vec_range(const Eigen::VectorXd& v) { return v.maxCoeff() - v.minCoeff(); }

inline double sign_or_one(double v) { return v < 0.0 ? -1.0 : 1.0; }

// Rescales (b_i, k_i) to unit-norm b with the sum-positive sign convention.
inline void scale_pair(Eigen::VectorXd& b, Eigen::VectorXd& k) {
    const double nrm = b.norm();
    if (!(nrm > 0.0)) throw numerical_error("two-factor normalization: zero age loading");
    const double s = sign_or_one(b.sum());
    b *= s / nrm;
    k *= s * nrm;
}

// Canonicalizes a two-factor block (B, K). With `center` the K location
// constraint applies and the induced shift is returned as an A adjustment
// computed with the pre-rotation loadings; without it the K vectors are left
// uncentered (country-specific deviations).
inline two_factor_normalization canonicalize_pair(Eigen::VectorXd b1, Eigen::VectorXd b2,
                                                  Eigen::VectorXd k1, Eigen::VectorXd k2,
                                                  bool center) {
    require(b1.size() == b2.size() && k1.size() == k2.size(), "factor dimension mismatch");
    two_factor_normalization out;
    out.a_adjustment = Eigen::VectorXd::Zero(b1.size());

    if (center) {
        const double m1 = k1.mean(), m2 = k2.mean();
        out.a_adjustment = b1 * m1 + b2 * m2;
        k1.array() -= m1;
        k2.array() -= m2;
    }

    const double b11 = b1.squaredNorm(), b22 = b2.squaredNorm(), b12 = b1.dot(b2);
    const double k11 = k1.squaredNorm(), k22 = k2.squaredNorm(), k12 = k1.dot(k2);

    const double xi1 = k12 * b11 + b12 * k22;
    const double xi2 = k12 * b22 + b12 * k11;
    const double scale = std::abs(k12) * std::max(b11, b22) + std::abs(b12) * std::max(k11, k22);

    double zeta_bar, eta_bar;  // mixing ratios zeta2/zeta1 and eta2/eta1
    bool rotate = true;
    if (std::abs(xi1) <= 1e-14 * scale && std::abs(xi2) <= 1e-14 * scale) {
        // Already orthogonal in both age and period space: only rescale.
        rotate = false;
        zeta_bar = eta_bar = 0.0;
    } else {
        const double qa = xi2 * k12;
        const double qb = xi1 * k11 - xi2 * k22;
        const double qc = -xi1 * k12;
        const double coeff_scale = std::max({std::abs(qa), std::abs(qb), std::abs(qc)});
        if (std::abs(qa) <= 1e-14 * coeff_scale) {
            // Leading coefficient vanished: fall through to the linear root.
            if (!(std::abs(qb) > 0.0))
                throw numerical_error("two-factor normalization: degenerate constraint system");
            eta_bar = -qc / qb;
            const double denom = k12 - eta_bar * k11;
            if (xi2 * eta_bar != 0.0)
                zeta_bar = -xi1 / (xi2 * eta_bar);
            else if (std::abs(denom) > 0.0)
                zeta_bar = (k22 - eta_bar * k12) / denom;
            else
                throw numerical_error("two-factor normalization: degenerate constraint system");
        } else {
            double disc = qb * qb - 4.0 * qa * qc;
            if (disc < 0.0) disc = 0.0;  // provably >= 0, clamp rounding noise
            const double root = std::sqrt(disc);
            if (root <= 1e-14 * std::abs(qb) && std::abs(qb) == 0.0)
                throw numerical_error("two-factor normalization: coinciding roots");
            // Stable root pair; the two roots are exactly the (zeta, eta) pair.
            double q;
            if (qb == 0.0)
                q = -root / 2.0;
            else
                q = -(qb + sign_or_one(qb) * root) / 2.0;
            if (q == 0.0) throw numerical_error("two-factor normalization: coinciding roots");
            zeta_bar = q / qa;
            eta_bar = qc / q;
        }
    }

    if (rotate) {
        const Eigen::VectorXd bz = b1 + zeta_bar * b2;
        const Eigen::VectorXd be = b1 + eta_bar * b2;
        const double nz = bz.norm(), ne = be.norm();
        if (!(nz > 0.0) || !(ne > 0.0))
            throw numerical_error("two-factor normalization: collinear age loadings");
        const double zeta1 = sign_or_one(bz.sum()) / nz;
        const double eta1 = sign_or_one(be.sum()) / ne;
        const double zeta2 = zeta1 * zeta_bar;
        const double eta2 = eta1 * eta_bar;
        const double det = zeta1 * eta2 - eta1 * zeta2;
        if (det == 0.0) throw numerical_error("two-factor normalization: singular transform");
        out.b1 = zeta1 * b1 + zeta2 * b2;
        out.b2 = eta1 * b1 + eta2 * b2;
        out.k1 = (eta2 * k1 - eta1 * k2) / det;
        out.k2 = (-zeta2 * k1 + zeta1 * k2) / det;
    } else {
        out.b1 = std::move(b1);
        out.b2 = std::move(b2);
        out.k1 = std::move(k1);
        out.k2 = std::move(k2);
        scale_pair(out.b1, out.k1);
        scale_pair(out.b2, out.k2);
    }

    if (vec_range(out.b1) < vec_range(out.b2)) {
        out.b1.swap(out.b2);
        out.k1.swap(out.k2);
    }
    return out;
}

}  // namespace detail

// Transforms raw two-factor parameters into the canonical representation:
// sum_t K = 0 per factor, unit-norm loadings, mutual orthogonality of both
// the loadings and the period effects, range(B1) >= range(B2), and
// sum_x B >= 0. The reconstructed surface A_x + sum_i B_x K_t is unchanged
// once `a_adjustment` is added to A.
inline two_factor_normalization normalize_two_factor(const Eigen::VectorXd& b1,
                                                     const Eigen::VectorXd& b2,
                                                     const Eigen::VectorXd& k1,
                                                     const Eigen::VectorXd& k2) {
    return detail::canonicalize_pair(b1, b2, k1, k2, /*center=*/true);
}

// ---------------------------------------------------------------------------
// Missing-period imputation (two-sided exponential moving average)
// ---------------------------------------------------------------------------

// Fills gaps with a weighted mean of observed neighbours inside a +-k window,
// weights 2^-|offset|, normalized over the neighbours actually observed. If a
// window holds no observation it grows until one is found.
inline Eigen::VectorXd impute_missing_periods(const Eigen::VectorXd& values,
                                              const std::vector<char>& observed, int k = 4) {
    const int n = static_cast<int>(values.size());
    require(static_cast<int>(observed.size()) == n, "impute: mask length mismatch");
    int n_obs = 0;
    for (char o : observed) n_obs += o ? 1 : 0;
    if (n_obs == 0) throw validation_error("impute: all values missing");
    require(n_obs >= 2, "impute: need at least 2 observed values");

    Eigen::VectorXd out = values;
    for (int i = 0; i < n; ++i) {
        if (observed[static_cast<std::size_t>(i)]) continue;
        for (int window = k; window <= n; ++window) {
            double wsum = 0.0, acc = 0.0;
            for (int off = 1; off <= window; ++off) {
                const double w = std::pow(2.0, -off);
                if (i - off >= 0 && observed[static_cast<std::size_t>(i - off)]) {
                    acc += w * values[i - off];
                    wsum += w;
                }
                if (i + off < n && observed[static_cast<std::size_t>(i + off)]) {
                    acc += w * values[i + off];
                    wsum += w;
                }
            }
            if (wsum > 0.0) {
                out[i] = acc / wsum;
                break;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Level-form predictors
// ---------------------------------------------------------------------------

inline Eigen::MatrixXd level_predictor_common(const common_trend_params& p,
                                              const Eigen::VectorXd& anchor) {
    const int n_a = p.ages.count(), n_t = p.years.count();
    Eigen::MatrixXd eta(n_a, n_t);
    for (int j = 0; j < n_t; ++j) {
        eta.col(j) = anchor + double(j) * p.a;
        for (int i = 0; i < p.factors; ++i)
            eta.col(j) += p.b[static_cast<std::size_t>(i)] * p.l[static_cast<std::size_t>(i)][j];
    }
    return eta;
}

inline Eigen::MatrixXd level_predictor_country(const baseline_params& p) {
    Eigen::MatrixXd eta = level_predictor_common(p.common, p.anchor_country);
    const auto& dev = p.deviation;
    for (int j = 0; j < p.common.years.count(); ++j)
        for (int i = 0; i < dev.factors; ++i)
            eta.col(j) +=
                dev.beta[static_cast<std::size_t>(i)] * dev.lambda[static_cast<std::size_t>(i)][j];
    return eta;
}

// ---------------------------------------------------------------------------
// Improvement form
// ---------------------------------------------------------------------------

inline Eigen::VectorXd first_differences(const Eigen::VectorXd& l) {
    Eigen::VectorXd k(l.size() - 1);
    for (Eigen::Index j = 1; j < l.size(); ++j) k[j - 1] = l[j] - l[j - 1];
    return k;
}

inline Eigen::VectorXd cumulate(const Eigen::VectorXd& k) {
    Eigen::VectorXd l = Eigen::VectorXd::Zero(k.size() + 1);
    for (Eigen::Index j = 0; j < k.size(); ++j) l[j + 1] = l[j] + k[j];
    return l;
}

// Improvement-rate effects K_t = L_t - L_{t-1}; defined from t_min + 1.
struct improvement_effects {
    year_range years;  // t_min + 1 .. t_max
    std::vector<Eigen::VectorXd> k;
    std::vector<Eigen::VectorXd> kappa;
};

inline improvement_effects to_improvement_form(const baseline_params& p) {
    improvement_effects out;
    out.years = {p.common.years.lo + 1, p.common.years.hi};
    for (const auto& l : p.common.l) out.k.push_back(first_differences(l));
    for (const auto& l : p.deviation.lambda) out.kappa.push_back(first_differences(l));
    return out;
}

// Improvement predictor A_x + sum B K + sum beta kappa over years t_min+1..t_max.
inline Eigen::MatrixXd improvement_predictor(const baseline_params& p) {
    const improvement_effects eff = to_improvement_form(p);
    const int n_a = p.common.ages.count();
    const int n_t = eff.years.count();
    Eigen::MatrixXd eta(n_a, n_t);
    for (int j = 0; j < n_t; ++j) {
        eta.col(j) = p.common.a;
        for (int i = 0; i < p.common.factors; ++i)
            eta.col(j) +=
                p.common.b[static_cast<std::size_t>(i)] * eff.k[static_cast<std::size_t>(i)][j];
        for (int i = 0; i < p.deviation.factors; ++i)
            eta.col(j) += p.deviation.beta[static_cast<std::size_t>(i)] *
                          eff.kappa[static_cast<std::size_t>(i)][j];
    }
    return eta;
}

// ---------------------------------------------------------------------------
// Newton-Raphson calibration
// ---------------------------------------------------------------------------

namespace detail {

inline double constraint_violation_common(const common_trend_params& p) {
    double v = 0.0;
    for (int i = 0; i < p.factors; ++i) {
        const auto& b = p.b[static_cast<std::size_t>(i)];
        const auto& l = p.l[static_cast<std::size_t>(i)];
        v = std::max(v, std::abs(b.squaredNorm() - 1.0));
        v = std::max(v, std::abs(l[l.size() - 1]));
    }
    v = std::max(v, std::abs(p.b[0].dot(p.b[1])));
    v = std::max(v, std::abs(first_differences(p.l[0]).dot(first_differences(p.l[1]))));
    return v;
}

inline double constraint_violation_deviation(const country_deviation_params& p) {
    double v = 0.0;
    for (int i = 0; i < p.factors; ++i)
        v = std::max(v, std::abs(p.beta[static_cast<std::size_t>(i)].squaredNorm() - 1.0));
    v = std::max(v, std::abs(p.beta[0].dot(p.beta[1])));
    v = std::max(v, std::abs(first_differences(p.lambda[0]).dot(first_differences(p.lambda[1]))));
    return v;
}

inline Eigen::VectorXd ols_slope_log_rates(const Eigen::MatrixXd& deaths,
                                           const Eigen::MatrixXd& exposures) {
    const Eigen::Index n_a = deaths.rows(), n_t = deaths.cols();
    Eigen::VectorXd slope = Eigen::VectorXd::Zero(n_a);
    for (Eigen::Index i = 0; i < n_a; ++i) {
        double sx = 0, sy = 0, sxx = 0, sxy = 0;
        int n = 0;
        for (Eigen::Index j = 0; j < n_t; ++j) {
            if (deaths(i, j) <= 0.0) continue;
            const double y = std::log(deaths(i, j) / exposures(i, j));
            sx += double(j);
            sy += y;
            sxx += double(j) * double(j);
            sxy += double(j) * y;
            ++n;
        }
        const double den = n * sxx - sx * sx;
        if (n >= 2 && std::abs(den) > 0.0) slope[i] = (n * sxy - sx * sy) / den;
    }
    return slope;
}

inline Eigen::VectorXd flat_unit(Eigen::Index n) {
    return Eigen::VectorXd::Constant(n, 1.0 / std::sqrt(double(n)));
}

// Deterministic ramp orthogonal to the flat vector; breaks the symmetry
// between the two factors at initialization.
inline Eigen::VectorXd ramp_unit(Eigen::Index n) {
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = double(i) - 0.5 * double(n - 1);
    const double nrm = v.norm();
    return nrm > 0.0 ? Eigen::VectorXd(v / nrm) : flat_unit(n);
}

struct newton_workspace {
    const Eigen::MatrixXd& deaths;
    const Eigen::MatrixXd& exposures;
    const std::vector<char>& active;
    Eigen::MatrixXd mean;   // E exp(eta)
    Eigen::MatrixXd resid;  // deaths - mean

    void refresh(const Eigen::MatrixXd& eta) {
        mean = exposures.array() * eta.array().exp();
        if (!mean.allFinite())
            throw numerical_error("baseline fit diverged: exp overflow in predictor");
        resid = deaths - mean;
    }
};

}  // namespace detail

// Calibrates the common trend on the aggregated panel by maximizing the
// Poisson log-likelihood with coordinate-wise Newton-Raphson updates,
// re-imposing the identifiability constraints after every sweep. Years
// outside `active_years` are excluded from the likelihood; their period
// effects are refilled by imputation inside each sweep.
inline common_trend_params fit_common_trend(const Eigen::MatrixXd& deaths,
                                            const Eigen::MatrixXd& exposures, age_range ages,
                                            year_range years, const std::vector<char>& active_years,
                                            const baseline_fit_options& opts = {},
                                            fit_diagnostics* diag_out = nullptr) {
    const int n_a = ages.count(), n_t = years.count();
    require(opts.factors == 2, "fit_common_trend: only two-factor models are supported");
    require(deaths.rows() == n_a && deaths.cols() == n_t, "fit_common_trend: deaths shape");
    require(exposures.rows() == n_a && exposures.cols() == n_t, "fit_common_trend: exposures shape");
    require(static_cast<int>(active_years.size()) == n_t, "fit_common_trend: active mask length");
    int n_active = 0;
    bool active_after_t0 = false;
    for (int j = 0; j < n_t; ++j)
        if (active_years[static_cast<std::size_t>(j)]) {
            ++n_active;
            if (j > 0) active_after_t0 = true;
        }
    require(n_active >= 3 && active_after_t0, "fit_common_trend: too few active years");
    for (int i = 0; i < n_a; ++i) {
        require(deaths(i, 0) > 0.0, "fit_common_trend: zero deaths at anchor year for age " +
                                        std::to_string(ages.at(i)));
        if (deaths.row(i).sum() <= 0.0)
            throw validation_error("fit_common_trend: all-zero deaths for age " +
                                   std::to_string(ages.at(i)));
    }

    Eigen::VectorXd anchor(n_a);
    for (int i = 0; i < n_a; ++i) anchor[i] = std::log(deaths(i, 0) / exposures(i, 0));

    common_trend_params p;
    p.ages = ages;
    p.years = years;
    p.factors = 2;
    p.a = detail::ols_slope_log_rates(deaths, exposures);
    p.b = {detail::flat_unit(n_a), detail::ramp_unit(n_a)};
    p.l = {Eigen::VectorXd::Zero(n_t), Eigen::VectorXd::Zero(n_t)};

    std::vector<char> l_observed(static_cast<std::size_t>(n_t));
    for (int j = 0; j < n_t; ++j)
        l_observed[static_cast<std::size_t>(j)] = (j == 0) ? 1 : active_years[static_cast<std::size_t>(j)];
    const bool has_gaps = n_active + (active_years[0] ? 0 : 1) < n_t;

    detail::newton_workspace ws{deaths, exposures, active_years, {}, {}};
    Eigen::MatrixXd eta = level_predictor_common(p, anchor);
    double ll_prev = poisson_loglik(eta, deaths, exposures, active_years);

    fit_diagnostics diag;
    const double total_deaths = deaths.sum();
    bool converged = false;

    auto scaled_gradient = [&]() {
        ws.refresh(eta);
        double g = 0.0;
        for (int i = 0; i < n_a; ++i) {
            double ga = 0, gb0 = 0, gb1 = 0;
            for (int j = 0; j < n_t; ++j) {
                if (!active_years[static_cast<std::size_t>(j)]) continue;
                ga += double(j) * ws.resid(i, j);
                gb0 += p.l[0][j] * ws.resid(i, j);
                gb1 += p.l[1][j] * ws.resid(i, j);
            }
            g = std::max({g, std::abs(ga), std::abs(gb0), std::abs(gb1)});
        }
        for (int j = 1; j < n_t; ++j) {
            if (!active_years[static_cast<std::size_t>(j)]) continue;
            g = std::max(g, std::abs(p.b[0].dot(ws.resid.col(j))));
            g = std::max(g, std::abs(p.b[1].dot(ws.resid.col(j))));
        }
        return g / std::max(1.0, total_deaths);
    };

    for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        // drift block
        ws.refresh(eta);
        for (int i = 0; i < n_a; ++i) {
            double num = 0, den = 0;
            for (int j = 0; j < n_t; ++j) {
                if (!active_years[static_cast<std::size_t>(j)]) continue;
                num += double(j) * ws.resid(i, j);
                den += double(j) * double(j) * ws.mean(i, j);
            }
            if (den > 0.0) p.a[i] += num / den;
        }
        eta = level_predictor_common(p, anchor);

        for (int f = 0; f < 2; ++f) {
            auto& b = p.b[static_cast<std::size_t>(f)];
            auto& l = p.l[static_cast<std::size_t>(f)];
            // age loadings
            ws.refresh(eta);
            for (int i = 0; i < n_a; ++i) {
                double num = 0, den = 0;
                for (int j = 0; j < n_t; ++j) {
                    if (!active_years[static_cast<std::size_t>(j)]) continue;
                    num += l[j] * ws.resid(i, j);
                    den += l[j] * l[j] * ws.mean(i, j);
                }
                if (den > 0.0) b[i] += num / den;
            }
            eta = level_predictor_common(p, anchor);
            // period effects
            ws.refresh(eta);
            for (int j = 1; j < n_t; ++j) {
                if (!active_years[static_cast<std::size_t>(j)]) continue;
                double num = 0, den = 0;
                for (int i = 0; i < n_a; ++i) {
                    num += b[i] * ws.resid(i, j);
                    den += b[i] * b[i] * ws.mean(i, j);
                }
                if (den > 0.0) l[j] += num / den;
            }
            eta = level_predictor_common(p, anchor);
        }

        if (has_gaps)
            for (auto& l : p.l) l = impute_missing_periods(l, l_observed);

        auto norm = normalize_two_factor(p.b[0], p.b[1], first_differences(p.l[0]),
                                         first_differences(p.l[1]));
        p.a += norm.a_adjustment;
        p.b[0] = std::move(norm.b1);
        p.b[1] = std::move(norm.b2);
        p.l[0] = cumulate(norm.k1);
        p.l[1] = cumulate(norm.k2);

        eta = level_predictor_common(p, anchor);
        const double ll = poisson_loglik(eta, deaths, exposures, active_years);
        diag.sweeps = sweep;
        diag.loglik = ll;
        diag.constraint_violation = detail::constraint_violation_common(p);

        if (std::abs(ll - ll_prev) <= opts.loglik_tol * (std::abs(ll) + 1.0) &&
            diag.constraint_violation < opts.constraint_tol) {
            diag.gradient_supnorm = scaled_gradient();
            if (diag.gradient_supnorm < opts.gradient_tol) converged = true;
        }
        ll_prev = ll;
        if (converged) break;
    }

    if (!converged) diag.gradient_supnorm = scaled_gradient();
    if (diag_out) *diag_out = diag;

    if (!converged)
        throw numerical_error("fit_common_trend: no convergence after " +
                              std::to_string(opts.max_sweeps) +
                              " sweeps (scaled gradient sup-norm " +
                              std::to_string(diag.gradient_supnorm) + ")");
    return p;
}

inline common_trend_params fit_common_trend(const mortality_panel& panel,
                                            const std::vector<char>& active_years,
                                            const baseline_fit_options& opts = {},
                                            fit_diagnostics* diag_out = nullptr) {
    return fit_common_trend(panel.common_deaths, panel.common_exposures, panel.ages, panel.years,
                            active_years, opts, diag_out);
}

// Calibrates the country-specific deviation holding the fitted common part
// fixed. Same sweep structure as the common fit; the deviation has no drift
// term, so its canonicalization applies no location shift.
inline country_deviation_params fit_country_deviation(
    const Eigen::MatrixXd& deaths, const Eigen::MatrixXd& exposures, age_range ages,
    year_range years, const common_trend_params& common, const Eigen::VectorXd& anchor_country,
    const std::string& country_code, const std::vector<char>& active_years,
    const baseline_fit_options& opts = {}, fit_diagnostics* diag_out = nullptr) {
    const int n_a = ages.count(), n_t = years.count();
    require(opts.factors == 2, "fit_country_deviation: only two-factor models are supported");
    require(deaths.rows() == n_a && deaths.cols() == n_t, "fit_country_deviation: deaths shape");
    require(common.ages == ages && common.years == years,
            "fit_country_deviation: window mismatch with common trend");

    country_deviation_params p;
    p.country_code = country_code;
    p.ages = ages;
    p.years = years;
    p.factors = 2;
    p.beta = {detail::flat_unit(n_a), detail::ramp_unit(n_a)};
    p.lambda = {Eigen::VectorXd::Zero(n_t), Eigen::VectorXd::Zero(n_t)};

    const Eigen::MatrixXd eta_fixed = level_predictor_common(common, anchor_country);
    auto predictor = [&]() {
        Eigen::MatrixXd eta = eta_fixed;
        for (int j = 0; j < n_t; ++j)
            for (int f = 0; f < 2; ++f)
                eta.col(j) += p.beta[static_cast<std::size_t>(f)] * p.lambda[static_cast<std::size_t>(f)][j];
        return eta;
    };

    std::vector<char> l_observed(static_cast<std::size_t>(n_t));
    int n_active = 0;
    for (int j = 0; j < n_t; ++j) {
        l_observed[static_cast<std::size_t>(j)] = (j == 0) ? 1 : active_years[static_cast<std::size_t>(j)];
        n_active += active_years[static_cast<std::size_t>(j)] ? 1 : 0;
    }
    require(n_active >= 3, "fit_country_deviation: too few active years");
    const bool has_gaps = n_active + (active_years[0] ? 0 : 1) < n_t;

    detail::newton_workspace ws{deaths, exposures, active_years, {}, {}};
    Eigen::MatrixXd eta = predictor();
    double ll_prev = poisson_loglik(eta, deaths, exposures, active_years);

    fit_diagnostics diag;
    bool converged = false;

    auto scaled_gradient = [&]() {
        ws.refresh(eta);
        double g = 0.0;
        for (int f = 0; f < 2; ++f) {
            for (int i = 0; i < n_a; ++i) {
                double gb = 0;
                for (int j = 0; j < n_t; ++j)
                    if (active_years[static_cast<std::size_t>(j)])
                        gb += p.lambda[static_cast<std::size_t>(f)][j] * ws.resid(i, j);
                g = std::max(g, std::abs(gb));
            }
            for (int j = 1; j < n_t; ++j)
                if (active_years[static_cast<std::size_t>(j)])
                    g = std::max(g,
                                 std::abs(p.beta[static_cast<std::size_t>(f)].dot(ws.resid.col(j))));
        }
        return g / std::max(1.0, deaths.sum());
    };

    for (int sweep = 1; sweep <= opts.max_sweeps; ++sweep) {
        for (int f = 0; f < 2; ++f) {
            auto& b = p.beta[static_cast<std::size_t>(f)];
            auto& l = p.lambda[static_cast<std::size_t>(f)];
            ws.refresh(eta);
            for (int i = 0; i < n_a; ++i) {
                double num = 0, den = 0;
                for (int j = 0; j < n_t; ++j) {
                    if (!active_years[static_cast<std::size_t>(j)]) continue;
                    num += l[j] * ws.resid(i, j);
                    den += l[j] * l[j] * ws.mean(i, j);
                }
                if (den > 0.0) b[i] += num / den;
            }
            eta = predictor();
            ws.refresh(eta);
            for (int j = 1; j < n_t; ++j) {
                if (!active_years[static_cast<std::size_t>(j)]) continue;
                double num = 0, den = 0;
                for (int i = 0; i < n_a; ++i) {
                    num += b[i] * ws.resid(i, j);
                    den += b[i] * b[i] * ws.mean(i, j);
                }
                if (den > 0.0) l[j] += num / den;
            }
            eta = predictor();
        }

        if (has_gaps)
            for (auto& l : p.lambda) l = impute_missing_periods(l, l_observed);

        auto norm = detail::canonicalize_pair(p.beta[0], p.beta[1], first_differences(p.lambda[0]),
                                              first_differences(p.lambda[1]), /*center=*/false);
        p.beta[0] = std::move(norm.b1);
        p.beta[1] = std::move(norm.b2);
        p.lambda[0] = cumulate(norm.k1);
        p.lambda[1] = cumulate(norm.k2);

        eta = predictor();
        const double ll = poisson_loglik(eta, deaths, exposures, active_years);
        diag.sweeps = sweep;
        diag.loglik = ll;
        diag.constraint_violation = detail::constraint_violation_deviation(p);
        if (std::abs(ll - ll_prev) <= opts.loglik_tol * (std::abs(ll) + 1.0) &&
            diag.constraint_violation < opts.constraint_tol) {
            diag.gradient_supnorm = scaled_gradient();
            if (diag.gradient_supnorm < opts.gradient_tol) converged = true;
        }
        ll_prev = ll;
        if (converged) break;
    }

    if (!converged) diag.gradient_supnorm = scaled_gradient();
    if (diag_out) *diag_out = diag;

    if (!converged)
        throw numerical_error("fit_country_deviation: no convergence after " +
                              std::to_string(opts.max_sweeps) +
                              " sweeps (scaled gradient sup-norm " +
                              std::to_string(diag.gradient_supnorm) + ")");
    return p;
}

// Full baseline calibration for a target country: common trend on the
// aggregated panel, then the country deviation with the common part fixed.
inline baseline_params fit_baseline(const mortality_panel& panel, const std::string& target_country,
                                    const std::vector<char>& active_years,
                                    const baseline_fit_options& opts = {},
                                    fit_diagnostics* common_diag = nullptr,
                                    fit_diagnostics* deviation_diag = nullptr) {
    baseline_params out;
    out.common = fit_common_trend(panel, active_years, opts, common_diag);

    const country_series& target = panel.country(target_country);
    const int n_a = panel.ages.count();
    out.anchor_common.resize(n_a);
    out.anchor_country.resize(n_a);
    for (int i = 0; i < n_a; ++i) {
        require(panel.common_deaths(i, 0) > 0.0 && target.deaths(i, 0) > 0.0,
                "fit_baseline: zero deaths in the anchor year at age " +
                    std::to_string(panel.ages.at(i)));
        out.anchor_common[i] = std::log(panel.common_deaths(i, 0) / panel.common_exposures(i, 0));
        out.anchor_country[i] = std::log(target.deaths(i, 0) / target.exposures(i, 0));
    }
    out.deviation =
        fit_country_deviation(target.deaths, target.exposures, panel.ages, panel.years, out.common,
                              out.anchor_country, target_country, active_years, opts, deviation_diag);
    return out;
}

}  // namespace mortshock
