#pragma once

#include "mortshock/common.hpp"
#include "mortshock/mcd.hpp"
#include "mortshock/spline.hpp"

#include <set>
#include <string>
#include <vector>

namespace mortshock {

// Remainders of the calibrated common period effects after spline detrending,
// R_t = L_t - f(t), one vector of length |factors| per year.
struct remainder_series {
    year_range years;
    Eigen::MatrixXd r;  // rows = years, cols = factors
    int epoch_split_year = 1970;
};

inline remainder_series compute_remainders(const std::vector<Eigen::VectorXd>& l_series,
                                           year_range years, const std::vector<spline_fit>& splines,
                                           int epoch_split_year = 1970) {
    require(l_series.size() == splines.size(), "compute_remainders: factor count mismatch");
    const int m = static_cast<int>(l_series.size());
    const int n_t = years.count();
    remainder_series out;
    out.years = years;
    out.epoch_split_year = epoch_split_year;
    out.r.resize(n_t, m);
    for (int f = 0; f < m; ++f) {
        require(l_series[static_cast<std::size_t>(f)].size() == n_t,
                "compute_remainders: series length mismatch");
        for (int j = 0; j < n_t; ++j)
            out.r(j, f) = l_series[static_cast<std::size_t>(f)][j] -
                          splines[static_cast<std::size_t>(f)].eval(years.at(j));
    }
    return out;
}

struct epoch_estimate {
    Eigen::VectorXd location;
    Eigen::MatrixXd scatter;
    int first_year = 0;
    int last_year = 0;
};

struct outlier_report {
    year_range years;
    Eigen::VectorXd distances;
    std::vector<int> epoch_of_year;      // epoch index per year
    std::vector<char> flagged;
    std::set<int> outlier_years;
    double threshold = 0.0;              // sqrt chi2 quantile
    std::vector<epoch_estimate> epochs;
};

// Robust Mahalanobis outlier detection on the remainder vectors: FAST-MCD
// location/scale per epoch with subset size h = ceil((n + m + 1)/2), flag
// years whose distance exceeds sqrt of the chi-square quantile.
inline outlier_report detect_outliers(const remainder_series& rem, double quantile = 0.99,
                                      const mcd_options& mcd_opts = {}) {
    const int n_t = rem.years.count();
    const int m = static_cast<int>(rem.r.cols());
    require(m >= 1, "detect_outliers: need at least one factor");
    require(quantile > 0.0 && quantile < 1.0, "detect_outliers: quantile must be in (0,1)");

    outlier_report rep;
    rep.years = rem.years;
    rep.distances = Eigen::VectorXd::Zero(n_t);
    rep.epoch_of_year.assign(static_cast<std::size_t>(n_t), 0);
    rep.flagged.assign(static_cast<std::size_t>(n_t), 0);
    rep.threshold = std::sqrt(chi_squared_quantile(m, quantile));

    // split at the epoch year; an empty side collapses to a single epoch
    std::vector<std::vector<int>> epochs_idx(2);
    for (int j = 0; j < n_t; ++j)
        epochs_idx[rem.years.at(j) < rem.epoch_split_year ? 0 : 1].push_back(j);
    if (epochs_idx[0].empty() || epochs_idx[1].empty()) {
        epochs_idx = {{}};
        epochs_idx[0].resize(static_cast<std::size_t>(n_t));
        for (int j = 0; j < n_t; ++j) epochs_idx[0][static_cast<std::size_t>(j)] = j;
    }

    for (std::size_t e = 0; e < epochs_idx.size(); ++e) {
        const auto& idx = epochs_idx[e];
        const int n = static_cast<int>(idx.size());
        require(n >= m + 2, "detect_outliers: epoch starting " +
                                std::to_string(rem.years.at(idx.front())) +
                                " has too few points");
        Eigen::MatrixXd x(n, m);
        for (int i = 0; i < n; ++i) x.row(i) = rem.r.row(idx[static_cast<std::size_t>(i)]);

        const int h = (n + m + 1 + 1) / 2;  // ceil((n + m + 1)/2)
        mcd_options o = mcd_opts;
        o.seed = mix_seed(mcd_opts.seed, e);
        const mcd_estimate est = fast_mcd(x, std::min(h, n), o);
        const Eigen::VectorXd d = mahalanobis_distances(x, est.location, est.scatter);

        epoch_estimate ee;
        ee.location = est.location;
        ee.scatter = est.scatter;
        ee.first_year = rem.years.at(idx.front());
        ee.last_year = rem.years.at(idx.back());
        rep.epochs.push_back(std::move(ee));

        for (int i = 0; i < n; ++i) {
            const int j = idx[static_cast<std::size_t>(i)];
            rep.distances[j] = d[i];
            rep.epoch_of_year[static_cast<std::size_t>(j)] = static_cast<int>(e);
            if (d[i] > rep.threshold) {
                rep.flagged[static_cast<std::size_t>(j)] = 1;
                rep.outlier_years.insert(rem.years.at(j));
            }
        }
    }
    return rep;
}

// Renders consecutive years as runs, e.g. {1914..1918, 1940} -> "1914-1918, 1940".
inline std::string format_year_runs(const std::set<int>& years) {
    std::string out;
    auto it = years.begin();
    while (it != years.end()) {
        int start = *it, end = *it;
        auto next = std::next(it);
        while (next != years.end() && *next == end + 1) {
            end = *next;
            ++next;
        }
        if (!out.empty()) out += ", ";
        out += std::to_string(start);
        if (end > start) out += "-" + std::to_string(end);
        it = next;
    }
    return out;
}

}  // namespace mortshock
