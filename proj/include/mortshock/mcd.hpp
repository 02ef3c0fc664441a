#pragma once

#include "mortshock/common.hpp"

#include <boost/math/distributions/chi_squared.hpp>

#include <algorithm>
#include <numeric>
#include <random>
#include <vector>

namespace mortshock {

inline double chi_squared_quantile(int df, double p) {
    return boost::math::quantile(boost::math::chi_squared_distribution<double>(df), p);
}

inline double chi_squared_cdf(int df, double x) {
    return boost::math::cdf(boost::math::chi_squared_distribution<double>(df), x);
}

inline Eigen::VectorXd mahalanobis_distances(const Eigen::MatrixXd& x, const Eigen::VectorXd& mu,
                                             const Eigen::MatrixXd& sigma) {
    Eigen::LLT<Eigen::MatrixXd> llt(sigma);
    if (llt.info() != Eigen::Success)
        throw numerical_error("mahalanobis: singular scatter matrix");
    Eigen::VectorXd d(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::VectorXd c = x.row(i).transpose() - mu;
        d[i] = std::sqrt(c.dot(llt.solve(c)));
    }
    return d;
}

struct mcd_options {
    int n_trials = 500;        // random elemental starts
    int n_initial_csteps = 2;  // C-steps per start before short-listing
    int n_best = 10;           // starts iterated to convergence
    int max_csteps = 100;
    std::uint64_t seed = 20240601;
};

struct mcd_estimate {
    Eigen::VectorXd location;
    Eigen::MatrixXd scatter;
    std::vector<int> support;  // h-subset behind the raw estimate
};

namespace detail {

struct subset_stats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
    double log_det = 0.0;
    bool singular = true;
};

inline subset_stats stats_of(const Eigen::MatrixXd& x, const std::vector<int>& idx) {
    const Eigen::Index p = x.cols();
    subset_stats s;
    s.mean = Eigen::VectorXd::Zero(p);
    for (int i : idx) s.mean += x.row(i).transpose();
    s.mean /= double(idx.size());
    s.cov = Eigen::MatrixXd::Zero(p, p);
    for (int i : idx) {
        const Eigen::VectorXd c = x.row(i).transpose() - s.mean;
        s.cov += c * c.transpose();
    }
    s.cov /= double(idx.size() - 1);
    Eigen::LLT<Eigen::MatrixXd> llt(s.cov);
    if (llt.info() == Eigen::Success) {
        s.singular = false;
        s.log_det = 0.0;
        for (Eigen::Index i = 0; i < p; ++i) s.log_det += 2.0 * std::log(llt.matrixL()(i, i));
    }
    return s;
}

inline std::vector<int> c_step(const Eigen::MatrixXd& x, const subset_stats& s, int h) {
    Eigen::LLT<Eigen::MatrixXd> llt(s.cov);
    std::vector<std::pair<double, int>> d(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const Eigen::VectorXd c = x.row(i).transpose() - s.mean;
        d[static_cast<std::size_t>(i)] = {c.dot(llt.solve(c)), static_cast<int>(i)};
    }
    std::sort(d.begin(), d.end());
    std::vector<int> idx(static_cast<std::size_t>(h));
    for (int i = 0; i < h; ++i) idx[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(i)].second;
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Consistency factor making the truncated-sample covariance unbiased for
// Gaussian data: alpha / F_{chi2(p+2)}(chi2_p quantile at alpha).
inline double mcd_consistency(double alpha, int p) {
    if (alpha >= 1.0) return 1.0;
    const double q = chi_squared_quantile(p, alpha);
    return alpha / chi_squared_cdf(p + 2, q);
}

}  // namespace detail

// FAST-MCD of Rousseeuw & Van Driessen with a fixed trial budget, followed by
// the usual consistency correction and one reweighting step. Deterministic
// given the seed.
inline mcd_estimate fast_mcd(const Eigen::MatrixXd& x, int h, const mcd_options& opts = {}) {
    const int n = static_cast<int>(x.rows());
    const int p = static_cast<int>(x.cols());
    require(h > p && h <= n, "fast_mcd: h must satisfy p < h <= n");

    std::vector<int> best_subset;
    detail::subset_stats best_stats;

    if (h == n) {
        best_subset.resize(static_cast<std::size_t>(n));
        std::iota(best_subset.begin(), best_subset.end(), 0);
        best_stats = detail::stats_of(x, best_subset);
        if (best_stats.singular) throw numerical_error("fast_mcd: singular covariance");
        return {best_stats.mean, best_stats.cov, best_subset};
    }

    std::mt19937_64 rng(opts.seed);
    std::uniform_int_distribution<int> pick(0, n - 1);
    auto draw_subset = [&](int size) {
        std::vector<char> used(static_cast<std::size_t>(n), 0);
        std::vector<int> idx;
        idx.reserve(static_cast<std::size_t>(size));
        while (static_cast<int>(idx.size()) < size) {
            const int i = pick(rng);
            if (!used[static_cast<std::size_t>(i)]) {
                used[static_cast<std::size_t>(i)] = 1;
                idx.push_back(i);
            }
        }
        return idx;
    };

    struct candidate {
        double log_det;
        std::vector<int> subset;
    };
    std::vector<candidate> shortlist;

    for (int trial = 0; trial < opts.n_trials; ++trial) {
        std::vector<int> seed_idx = draw_subset(p + 1);
        detail::subset_stats s = detail::stats_of(x, seed_idx);
        while (s.singular && static_cast<int>(seed_idx.size()) < n) {
            int extra = pick(rng);
            if (std::find(seed_idx.begin(), seed_idx.end(), extra) != seed_idx.end()) continue;
            seed_idx.push_back(extra);
            s = detail::stats_of(x, seed_idx);
        }
        if (s.singular) throw numerical_error("fast_mcd: data lie on a lower-dimensional subspace");

        std::vector<int> idx = detail::c_step(x, s, h);
        s = detail::stats_of(x, idx);
        for (int k = 1; k < opts.n_initial_csteps && !s.singular; ++k) {
            idx = detail::c_step(x, s, h);
            s = detail::stats_of(x, idx);
        }
        if (s.singular) continue;
        shortlist.push_back({s.log_det, std::move(idx)});
    }
    if (shortlist.empty()) throw numerical_error("fast_mcd: no nonsingular start found");

    std::sort(shortlist.begin(), shortlist.end(),
              [](const candidate& a, const candidate& b) { return a.log_det < b.log_det; });
    if (static_cast<int>(shortlist.size()) > opts.n_best)
        shortlist.resize(static_cast<std::size_t>(opts.n_best));

    double best_log_det = std::numeric_limits<double>::infinity();
    for (auto& cand : shortlist) {
        std::vector<int> idx = std::move(cand.subset);
        detail::subset_stats s = detail::stats_of(x, idx);
        for (int k = 0; k < opts.max_csteps && !s.singular; ++k) {
            std::vector<int> next = detail::c_step(x, s, h);
            if (next == idx) break;
            idx = std::move(next);
            s = detail::stats_of(x, idx);
        }
        if (!s.singular && s.log_det < best_log_det) {
            best_log_det = s.log_det;
            best_stats = s;
            best_subset = idx;
        }
    }
    if (!std::isfinite(best_log_det)) throw numerical_error("fast_mcd: singular covariance");

    // raw estimate, rescaled so the median squared distance matches the
    // chi-square median (empirical consistency correction)
    Eigen::VectorXd d_raw = mahalanobis_distances(x, best_stats.mean, best_stats.cov);
    std::vector<double> d2(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) d2[static_cast<std::size_t>(i)] = d_raw[i] * d_raw[i];
    std::nth_element(d2.begin(), d2.begin() + n / 2, d2.end());
    const double med_d2 = d2[static_cast<std::size_t>(n / 2)];
    if (!(med_d2 > 0.0)) throw numerical_error("fast_mcd: degenerate distance distribution");
    Eigen::MatrixXd scatter_raw = best_stats.cov * (med_d2 / chi_squared_quantile(p, 0.5));

    // reweighting at the 0.975 chi-square cutoff, iterated to a fixed point
    // so the shape noise of the raw subset does not clip honest points
    const double cutoff = chi_squared_quantile(p, 0.975);
    const double rew_consistency = 0.975 / chi_squared_cdf(p + 2, cutoff);
    Eigen::VectorXd mu_w = best_stats.mean;
    Eigen::MatrixXd cov_w = scatter_raw;
    std::vector<char> kept(static_cast<std::size_t>(n), 0), kept_prev;
    for (int iter = 0; iter < 50; ++iter) {
        const Eigen::VectorXd d = mahalanobis_distances(x, mu_w, cov_w);
        kept_prev = kept;
        double wsum = 0.0;
        for (int i = 0; i < n; ++i) {
            kept[static_cast<std::size_t>(i)] = d[i] * d[i] <= cutoff ? 1 : 0;
            wsum += kept[static_cast<std::size_t>(i)];
        }
        if (wsum < double(p + 1))
            throw numerical_error("fast_mcd: reweighting kept too few points");
        Eigen::VectorXd mu = Eigen::VectorXd::Zero(p);
        for (int i = 0; i < n; ++i)
            if (kept[static_cast<std::size_t>(i)]) mu += x.row(i).transpose();
        mu /= wsum;
        Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(p, p);
        for (int i = 0; i < n; ++i) {
            if (kept[static_cast<std::size_t>(i)]) {
                const Eigen::VectorXd c = x.row(i).transpose() - mu;
                cov += c * c.transpose();
            }
        }
        cov /= wsum;
        cov *= rew_consistency;
        Eigen::LLT<Eigen::MatrixXd> check(cov);
        if (check.info() != Eigen::Success)
            throw numerical_error("fast_mcd: singular reweighted covariance");
        mu_w = std::move(mu);
        cov_w = std::move(cov);
        if (kept == kept_prev) break;
    }
    return {mu_w, cov_w, best_subset};
}

}  // namespace mortshock
