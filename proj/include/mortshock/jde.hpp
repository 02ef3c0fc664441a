#pragma once

#include "mortshock/common.hpp"

#include <functional>
#include <random>
#include <thread>
#include <vector>

namespace mortshock {

// Runs fn(i) for i in [0, n). With more than one thread the index space is
// split into contiguous chunks; fn must be pure for results to be
// thread-count invariant.
inline void parallel_for(int n, int threads, const std::function<void(int)>& fn) {
    if (threads <= 1 || n <= 1) {
        for (int i = 0; i < n; ++i) fn(i);
        return;
    }
    const int n_threads = std::min(threads, n);
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(n_threads));
    for (int t = 0; t < n_threads; ++t) {
        const int lo = static_cast<int>(std::int64_t(n) * t / n_threads);
        const int hi = static_cast<int>(std::int64_t(n) * (t + 1) / n_threads);
        pool.emplace_back([&fn, lo, hi]() {
            for (int i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& th : pool) th.join();
}

struct jde_options {
    int population = 0;        // 0 -> 10 * dim
    int max_generations = 3000;
    int stall_generations = 200;  // stop when the best stops improving
    double stall_tol = 1e-9;      // relative improvement considered progress
    std::uint64_t seed = 1;
    int threads = 1;
};

struct jde_result {
    Eigen::VectorXd best;
    double value = -std::numeric_limits<double>::infinity();
    int generations = 0;
    long evaluations = 0;
};

// Self-adaptive differential evolution (jDE): per-individual F and CR evolve
// with the population (tau = 0.1, F in [0.1, 1]). Maximizes the objective;
// candidates scoring NaN or -inf are treated as infeasible. Trials of one
// generation are built from the previous population only, so population
// evaluation parallelizes without affecting the result.
template <typename Objective>
jde_result jde_maximize(Objective&& objective, const Eigen::VectorXd& lower,
                        const Eigen::VectorXd& upper, const jde_options& opts = {},
                        const Eigen::VectorXd* initial = nullptr) {
    const int dim = static_cast<int>(lower.size());
    require(upper.size() == dim, "jde: bound length mismatch");
    for (int d = 0; d < dim; ++d) require(lower[d] < upper[d], "jde: empty search box");
    const int np = std::max(opts.population > 0 ? opts.population : 10 * dim, 5);

    std::mt19937_64 rng(opts.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto clamp_box = [&](Eigen::VectorXd& v) {
        for (int d = 0; d < dim; ++d) v[d] = std::clamp(v[d], lower[d], upper[d]);
    };
    auto score = [&](const Eigen::VectorXd& v) {
        const double s = objective(v);
        return std::isnan(s) ? -std::numeric_limits<double>::infinity() : s;
    };

    std::vector<Eigen::VectorXd> pop(static_cast<std::size_t>(np));
    std::vector<double> fit(static_cast<std::size_t>(np));
    std::vector<double> f_par(static_cast<std::size_t>(np), 0.5);
    std::vector<double> cr_par(static_cast<std::size_t>(np), 0.9);

    for (int i = 0; i < np; ++i) {
        auto& v = pop[static_cast<std::size_t>(i)];
        v.resize(dim);
        for (int d = 0; d < dim; ++d) v[d] = lower[d] + (upper[d] - lower[d]) * unit(rng);
    }
    if (initial) {
        pop[0] = *initial;
        clamp_box(pop[0]);
    }

    jde_result res;
    parallel_for(np, opts.threads,
                 [&](int i) { fit[static_cast<std::size_t>(i)] = score(pop[static_cast<std::size_t>(i)]); });
    res.evaluations += np;

    int best_idx = 0;
    for (int i = 1; i < np; ++i)
        if (fit[static_cast<std::size_t>(i)] > fit[static_cast<std::size_t>(best_idx)]) best_idx = i;
    double best_val = fit[static_cast<std::size_t>(best_idx)];
    double stall_ref = best_val;
    int stall_count = 0;

    std::vector<Eigen::VectorXd> trials(static_cast<std::size_t>(np));
    std::vector<double> trial_fit(static_cast<std::size_t>(np));
    std::vector<double> f_new(static_cast<std::size_t>(np)), cr_new(static_cast<std::size_t>(np));
    std::uniform_int_distribution<int> pick(0, np - 1);
    std::uniform_int_distribution<int> pick_dim(0, dim - 1);

    for (int gen = 1; gen <= opts.max_generations; ++gen) {
        for (int i = 0; i < np; ++i) {
            f_new[static_cast<std::size_t>(i)] =
                unit(rng) < 0.1 ? 0.1 + 0.9 * unit(rng) : f_par[static_cast<std::size_t>(i)];
            cr_new[static_cast<std::size_t>(i)] =
                unit(rng) < 0.1 ? unit(rng) : cr_par[static_cast<std::size_t>(i)];
            int r1, r2, r3;
            do r1 = pick(rng); while (r1 == i);
            do r2 = pick(rng); while (r2 == i || r2 == r1);
            do r3 = pick(rng); while (r3 == i || r3 == r1 || r3 == r2);
            const int j_rand = pick_dim(rng);
            Eigen::VectorXd trial = pop[static_cast<std::size_t>(i)];
            for (int d = 0; d < dim; ++d) {
                if (unit(rng) < cr_new[static_cast<std::size_t>(i)] || d == j_rand)
                    trial[d] = pop[static_cast<std::size_t>(r1)][d] +
                               f_new[static_cast<std::size_t>(i)] *
                                   (pop[static_cast<std::size_t>(r2)][d] -
                                    pop[static_cast<std::size_t>(r3)][d]);
            }
            clamp_box(trial);
            trials[static_cast<std::size_t>(i)] = std::move(trial);
        }

        parallel_for(np, opts.threads, [&](int i) {
            trial_fit[static_cast<std::size_t>(i)] = score(trials[static_cast<std::size_t>(i)]);
        });
        res.evaluations += np;

        for (int i = 0; i < np; ++i) {
            if (trial_fit[static_cast<std::size_t>(i)] >= fit[static_cast<std::size_t>(i)]) {
                pop[static_cast<std::size_t>(i)] = std::move(trials[static_cast<std::size_t>(i)]);
                fit[static_cast<std::size_t>(i)] = trial_fit[static_cast<std::size_t>(i)];
                f_par[static_cast<std::size_t>(i)] = f_new[static_cast<std::size_t>(i)];
                cr_par[static_cast<std::size_t>(i)] = cr_new[static_cast<std::size_t>(i)];
                if (fit[static_cast<std::size_t>(i)] > best_val) {
                    best_val = fit[static_cast<std::size_t>(i)];
                    best_idx = i;
                }
            }
        }
        res.generations = gen;

        if (std::isfinite(best_val) &&
            best_val - stall_ref <= opts.stall_tol * (std::abs(stall_ref) + 1.0)) {
            if (++stall_count >= opts.stall_generations) break;
        } else {
            stall_count = 0;
            stall_ref = best_val;
        }
    }

    res.best = pop[static_cast<std::size_t>(best_idx)];
    res.value = best_val;
    return res;
}

}  // namespace mortshock
