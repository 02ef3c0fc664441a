#pragma once

#include "mortshock/common.hpp"

#include <random>
#include <vector>

namespace mortshock {

// Drift-plus-white-noise dynamics of the stacked period-effect vector
// K_t = c + W_t with c = (c_1 .. c_m, 0 .. 0) and W_t ~ N(0, Sigma_w).
// The country-specific components carry a zero drift by construction.
struct period_dyn_params {
    Eigen::VectorXd c;
    Eigen::MatrixXd sigma_w;
    double gamma = 1.0;
    int n_free = 0;            // leading entries of c that are estimated
    bool rank_deficient = false;  // Sigma_w not positive definite (allowed)
};

// Weighted Gaussian fit with geometrically decaying weights w_t =
// gamma^(t_max - t): free drift entries are the weighted means, constrained
// entries are exactly zero, and Sigma_w is the weighted second moment about
// the constrained drift.
inline period_dyn_params fit_weighted_gaussian(const Eigen::MatrixXd& series, double gamma,
                                               int n_free) {
    const int t_count = static_cast<int>(series.rows());
    const int dim = static_cast<int>(series.cols());
    require(gamma > 0.0 && gamma <= 1.0, "fit_weighted_gaussian: gamma must lie in (0, 1]");
    require(n_free >= 0 && n_free <= dim, "fit_weighted_gaussian: bad free-entry count");
    require(t_count >= dim + 2, "fit_weighted_gaussian: too few observations");

    Eigen::VectorXd w(t_count);
    for (int t = 0; t < t_count; ++t) w[t] = std::pow(gamma, double(t_count - 1 - t));
    const double wsum = w.sum();

    period_dyn_params p;
    p.gamma = gamma;
    p.n_free = n_free;
    p.c = Eigen::VectorXd::Zero(dim);
    for (int d = 0; d < n_free; ++d) p.c[d] = w.dot(series.col(d)) / wsum;

    p.sigma_w = Eigen::MatrixXd::Zero(dim, dim);
    for (int t = 0; t < t_count; ++t) {
        const Eigen::VectorXd dev = series.row(t).transpose() - p.c;
        p.sigma_w += w[t] * dev * dev.transpose();
    }
    p.sigma_w /= wsum;
    p.rank_deficient = Eigen::LLT<Eigen::MatrixXd>(p.sigma_w).info() != Eigen::Success;
    return p;
}

inline double mvn_logpdf(const Eigen::VectorXd& x, const Eigen::VectorXd& mean,
                         const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    double logdet = 0.0;
    for (Eigen::Index i = 0; i < cov.rows(); ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
    const Eigen::VectorXd c = x - mean;
    return -0.5 * (double(cov.rows()) * std::log(2.0 * M_PI) + logdet + c.dot(llt.solve(c)));
}

// Selects the decay rate by average one-step-ahead predictive log-likelihood:
// for each t from first_eval_year to the last-but-one year, refit on data up
// to t and score the next observation. Ties break toward the larger gamma.
inline double select_decay(const Eigen::MatrixXd& series, year_range years,
                           const std::vector<double>& grid, int first_eval_year, int n_free) {
    require(!grid.empty(), "select_decay: empty gamma grid");
    require(years.count() == static_cast<int>(series.rows()), "select_decay: year count mismatch");
    require(first_eval_year - years.lo + 1 >= 50,
            "select_decay: need at least 50 years before the first evaluation year");
    require(first_eval_year < years.hi, "select_decay: nothing to evaluate");

    double best_gamma = grid.front();
    double best_score = -std::numeric_limits<double>::infinity();
    for (double gamma : grid) {
        require(gamma > 0.0 && gamma <= 1.0, "select_decay: gamma outside (0, 1]");
        double score = 0.0;
        int n_terms = 0;
        for (int t = years.index(first_eval_year); t + 1 < years.count(); ++t) {
            const auto fit = fit_weighted_gaussian(series.topRows(t + 1), gamma, n_free);
            score += mvn_logpdf(series.row(t + 1).transpose(), fit.c, fit.sigma_w);
            ++n_terms;
        }
        score /= double(n_terms);
        if (score > best_score || (score == best_score && gamma > best_gamma)) {
            best_score = score;
            best_gamma = gamma;
        }
    }
    return best_gamma;
}

inline std::vector<double> default_gamma_grid() {
    std::vector<double> g;
    for (int i = 0; i <= 100; ++i) g.push_back(0.90 + 0.001 * i);
    return g;
}

// Factor of Sigma_w for sampling: Cholesky when positive definite, otherwise
// an eigen factor with negative eigenvalues clipped at zero.
inline Eigen::MatrixXd covariance_factor(const Eigen::MatrixXd& cov) {
    Eigen::LLT<Eigen::MatrixXd> llt(cov);
    if (llt.info() == Eigen::Success) return llt.matrixL();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    require(es.info() == Eigen::Success, "covariance_factor: eigen decomposition failed");
    require(es.eigenvalues().minCoeff() > -1e-10, "covariance_factor: covariance not PSD");
    Eigen::VectorXd lam = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * lam.asDiagonal();
}

// Draws n_paths independent trajectories of length `horizon_years`, each year
// i.i.d. N(c, Sigma_w). Output: one (years x dim) matrix per path.
inline std::vector<Eigen::MatrixXd> simulate_periods(const period_dyn_params& p, int horizon_years,
                                                     int n_paths, std::uint64_t seed) {
    require(horizon_years > 0 && n_paths > 0, "simulate_periods: empty request");
    const int dim = static_cast<int>(p.c.size());
    const Eigen::MatrixXd factor = covariance_factor(p.sigma_w);

    std::vector<Eigen::MatrixXd> paths;
    paths.reserve(static_cast<std::size_t>(n_paths));
    std::normal_distribution<double> g(0.0, 1.0);
    for (int path = 0; path < n_paths; ++path) {
        std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(path)));
        Eigen::MatrixXd m(horizon_years, dim);
        Eigen::VectorXd zvec(dim);
        for (int t = 0; t < horizon_years; ++t) {
            for (int d = 0; d < dim; ++d) zvec[d] = g(rng);
            m.row(t) = (p.c + factor * zvec).transpose();
        }
        paths.push_back(std::move(m));
    }
    return paths;
}

}  // namespace mortshock
