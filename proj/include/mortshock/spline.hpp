#pragma once

#include "mortshock/common.hpp"

#include <algorithm>
#include <set>
#include <vector>

namespace mortshock {

// Natural cubic smoothing spline fitted by penalized least squares,
//   sum_i (y_i - f(t_i))^2 + lambda * int f''(t)^2 dt,
// with the observation points as knots. Evaluable anywhere; linear beyond the
// knot range (natural boundary).
struct spline_fit {
    std::vector<double> knots;    // strictly increasing
    Eigen::VectorXd values;       // fitted f at knots
    Eigen::VectorXd second_deriv; // f'' at knots, endpoints zero
    double lambda = 0.0;
    double gcv_score = 0.0;

    double eval(double t) const {
        const std::size_t n = knots.size();
        if (n == 1) return values[0];
        if (t <= knots.front()) {
            const double h = knots[1] - knots[0];
            const double slope = (values[1] - values[0]) / h - h / 6.0 * second_deriv[1];
            return values[0] + slope * (t - knots.front());
        }
        if (t >= knots.back()) {
            const double h = knots[n - 1] - knots[n - 2];
            const double slope =
                (values[n - 1] - values[n - 2]) / h + h / 6.0 * second_deriv[n - 2];
            return values[n - 1] + slope * (t - knots.back());
        }
        const auto it = std::upper_bound(knots.begin(), knots.end(), t);
        const std::size_t i = static_cast<std::size_t>(it - knots.begin()) - 1;
        const double h = knots[i + 1] - knots[i];
        const double a = (knots[i + 1] - t) / h;
        const double b = (t - knots[i]) / h;
        return a * values[i] + b * values[i + 1] +
               ((a * a * a - a) * second_deriv[i] + (b * b * b - b) * second_deriv[i + 1]) *
                   (h * h) / 6.0;
    }
};

namespace detail {

struct spline_system {
    Eigen::MatrixXd penalty;  // K = D^T W^-1 D
    Eigen::MatrixXd diff;     // D, (n-2) x n second divided differences
    Eigen::MatrixXd weight;   // W, (n-2) x (n-2)
};

inline spline_system build_spline_system(const std::vector<double>& t) {
    const int n = static_cast<int>(t.size());
    Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n - 2, n);
    Eigen::MatrixXd w = Eigen::MatrixXd::Zero(n - 2, n - 2);
    for (int i = 0; i < n - 2; ++i) {
        const double h0 = t[static_cast<std::size_t>(i + 1)] - t[static_cast<std::size_t>(i)];
        const double h1 = t[static_cast<std::size_t>(i + 2)] - t[static_cast<std::size_t>(i + 1)];
        d(i, i) = 1.0 / h0;
        d(i, i + 1) = -1.0 / h0 - 1.0 / h1;
        d(i, i + 2) = 1.0 / h1;
        w(i, i) = (h0 + h1) / 3.0;
        if (i + 1 < n - 2) {
            w(i, i + 1) = h1 / 6.0;
            w(i + 1, i) = h1 / 6.0;
        }
    }
    spline_system s;
    s.diff = d;
    s.weight = w;
    Eigen::LLT<Eigen::MatrixXd> llt(w);
    if (llt.info() != Eigen::Success) throw numerical_error("spline: singular weight matrix");
    s.penalty = d.transpose() * llt.solve(d);
    return s;
}

}  // namespace detail

// Fits the smoothing spline to (years, series), skipping `exclude_years`, and
// selects lambda over a log-spaced grid by generalized cross validation,
//   GCV(lambda) = n RSS / (n - tr S_lambda)^2.
inline spline_fit fit_smoothing_spline(const std::vector<int>& years,
                                       const Eigen::VectorXd& series,
                                       const std::set<int>& exclude_years = {},
                                       const std::vector<double>& lambda_grid = log_spaced(
                                           1e-4, 1e4, 61)) {
    require(static_cast<Eigen::Index>(years.size()) == series.size(),
            "fit_smoothing_spline: length mismatch");
    std::vector<double> t;
    std::vector<double> y;
    for (std::size_t i = 0; i < years.size(); ++i) {
        if (exclude_years.count(years[i])) continue;
        t.push_back(static_cast<double>(years[i]));
        y.push_back(series[static_cast<Eigen::Index>(i)]);
    }
    const int n = static_cast<int>(t.size());
    require(n >= 10, "fit_smoothing_spline: need at least 10 non-excluded points");
    for (int i = 1; i < n; ++i)
        require(t[static_cast<std::size_t>(i)] > t[static_cast<std::size_t>(i - 1)],
                "fit_smoothing_spline: years must be strictly increasing");

    const auto sys = detail::build_spline_system(t);
    const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), n);
    const Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);

    double best_lambda = lambda_grid.front();
    double best_gcv = std::numeric_limits<double>::infinity();
    for (double lam : lambda_grid) {
        Eigen::LDLT<Eigen::MatrixXd> solver(eye + lam * sys.penalty);
        if (solver.info() != Eigen::Success)
            throw numerical_error("spline: singular smoother system");
        const Eigen::VectorXd fhat = solver.solve(yv);
        const double rss = (yv - fhat).squaredNorm();
        const double trace = solver.solve(eye).trace();
        const double denom = double(n) - trace;
        const double gcv = denom != 0.0 ? double(n) * rss / (denom * denom)
                                        : std::numeric_limits<double>::infinity();
        if (gcv < best_gcv) {
            best_gcv = gcv;
            best_lambda = lam;
        }
    }

    spline_fit fit;
    fit.lambda = best_lambda;
    fit.gcv_score = best_gcv;
    fit.knots = t;
    Eigen::LDLT<Eigen::MatrixXd> solver(eye + best_lambda * sys.penalty);
    fit.values = solver.solve(yv);
    Eigen::LLT<Eigen::MatrixXd> wllt(sys.weight);
    const Eigen::VectorXd gamma = wllt.solve(sys.diff * fit.values);
    fit.second_deriv = Eigen::VectorXd::Zero(n);
    fit.second_deriv.segment(1, n - 2) = gamma;
    return fit;
}

}  // namespace mortshock
