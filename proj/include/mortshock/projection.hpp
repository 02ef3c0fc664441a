#pragma once

#include "mortshock/baseline.hpp"
#include "mortshock/common.hpp"
#include "mortshock/jde.hpp"
#include "mortshock/period_dynamics.hpp"
#include "mortshock/regime.hpp"

#include <map>
#include <random>
#include <string>
#include <vector>

namespace mortshock {

// Forced chain states supplied by configuration. `hvs` resolves to the entry
// state (1,2) after an LVS year and to the continuation state (2,2) after an
// HVS year, preserving the memory sparsity.
enum class forced_state { lvs, hvs };

struct markov_path {
    year_range years;
    std::vector<int> states;
    std::map<int, forced_state> forced;  // by calendar year

    bool hvs_at(int idx) const { return states[static_cast<std::size_t>(idx)] != state_lvs; }
};

// Simulates the memory chain over the horizon. The start state at t_max is
// the most probable filtered state (ties toward the LVS); projection years
// are drawn from the transition rows, then overridden by any forced states.
inline markov_path simulate_chain(const regime_params& params, const Eigen::Vector3d& init_probs,
                                  year_range horizon,
                                  const std::map<int, forced_state>& forced, std::mt19937_64& rng) {
    require(init_probs.minCoeff() >= 0.0 && std::abs(init_probs.sum() - 1.0) < 1e-8,
            "simulate_chain: init is not a distribution");
    const auto chain = memory_transition_matrix(params.p12, params.p21);

    markov_path path;
    path.years = horizon;
    path.forced = forced;
    path.states.resize(static_cast<std::size_t>(horizon.count()));

    int prev = 0;
    double best = -1.0;
    for (int s = 0; s < 3; ++s) {
        if (init_probs[s] > best) {
            best = init_probs[s];
            prev = s;
        }
    }

    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int t = 0; t < horizon.count(); ++t) {
        int state;
        const auto it = forced.find(horizon.at(t));
        if (it != forced.end()) {
            if (it->second == forced_state::lvs)
                state = state_lvs;
            else
                state = prev == state_lvs ? state_hvs_enter : state_hvs_stay;
        } else if (prev == state_hvs_enter) {
            state = state_hvs_stay;  // memory: deterministic second HVS year
        } else {
            const double r = u(rng);
            const auto row = chain.transition.row(prev);
            state = r < row[0] ? 0 : (r < row[0] + row[1] ? 1 : 2);
        }
        path.states[static_cast<std::size_t>(t)] = state;
        prev = state;
    }
    return path;
}

// Shock contributions per age and projection year. Within every completed
// high-volatility run the per-age sums vanish and the year with the highest
// age-average comes first; low-volatility years are exactly zero. A run cut
// by the end of the horizon after a single realized year keeps its raw draw
// (nothing left to offset it) and flags the panel.
struct shock_panel {
    age_range group;
    year_range years;
    Eigen::MatrixXd s;                              // group ages x years
    std::vector<std::pair<int, int>> hvs_runs;      // index ranges [first, last]
    bool truncated_open_run = false;
};

inline shock_panel simulate_shock_panel(const markov_path& path, const regime_params& params,
                                        std::mt19937_64& rng, bool shock_mean_mu_h = false) {
    const int n = params.group.count();
    const int t_count = path.years.count();
    require(static_cast<int>(path.states.size()) == t_count, "simulate_shock_panel: path length");

    shock_panel panel;
    panel.group = params.group;
    panel.years = path.years;
    panel.s = Eigen::MatrixXd::Zero(n, t_count);

    // projection-epoch volatility (t >= epoch_year branch)
    Eigen::VectorXd sig(n);
    for (int i = 0; i < n; ++i)
        sig[i] = sigma_e(params, params.group.at(i), std::max(path.years.lo, params.epoch_year));

    std::normal_distribution<double> g(0.0, 1.0);
    auto draw_hvs_vector = [&]() {
        const double shock = (shock_mean_mu_h ? params.mu_h : 0.0) + params.sigma_h * g(rng);
        Eigen::VectorXd z(n);
        for (int i = 0; i < n; ++i) z[i] = params.frak_b[i] * shock + sig[i] * g(rng);
        return z;
    };

    int t = 0;
    while (t < t_count) {
        if (!path.hvs_at(t)) {
            ++t;
            continue;
        }
        int last = t;
        while (last + 1 < t_count && path.hvs_at(last + 1)) ++last;
        const int len = last - t + 1;
        panel.hvs_runs.emplace_back(t, last);

        const bool open_ended = last == t_count - 1;
        if (len == 1 && open_ended) {
            // no room for the offsetting partner
            panel.s.col(t) = draw_hvs_vector();
            panel.truncated_open_run = true;
        } else {
            for (int k = 0; k < len - 1; ++k) panel.s.col(t + k) = draw_hvs_vector();
            panel.s.col(last) = -panel.s.middleCols(t, len - 1).rowwise().sum();
            // reorder: the vector with the highest age-average leads the run
            int arg_max = t;
            double best = panel.s.col(t).mean();
            for (int k = t + 1; k <= last; ++k) {
                const double avg = panel.s.col(k).mean();
                if (avg > best) {
                    best = avg;
                    arg_max = k;
                }
            }
            if (arg_max != t) panel.s.col(t).swap(panel.s.col(arg_max));
        }
        t = last + 1;
    }
    return panel;
}

// One simulated mortality-rate surface set: mu over (age, projection year,
// path) plus the shared anchor year. q is derived cellwise as 1 - exp(-mu).
struct scenario_set {
    age_range ages;
    int anchor_year = 0;
    year_range horizon;
    Eigen::VectorXd anchor_mu;
    std::vector<Eigen::MatrixXd> mu;   // per path, ages x horizon years
    std::vector<std::uint8_t> truncated_flag;
    std::uint64_t seed = 0;
    std::string config_digest;

    int n_paths() const { return static_cast<int>(mu.size()); }
    double q(int path, int age_idx, int year_idx) const {
        return 1.0 - std::exp(-mu[static_cast<std::size_t>(path)](age_idx, year_idx));
    }
};

struct projection_config {
    year_range horizon;
    int n_paths = 10000;
    std::uint64_t seed = 0;
    bool shock_mean_mu_h = false;  // default: zero-mean shock draws
    std::vector<std::map<int, forced_state>> forced_states;  // aligned with the regime groups
    int threads = 1;
};

struct regime_inputs {
    regime_params params;
    Eigen::Vector3d init_probs;  // filtered probabilities at t_max
};

// Generates shock-equipped scenarios by the log-mu recursion
//   log mu_{x,t} = log mu_{x,t-1} + A_x + sum B K + sum beta kappa + s_{x,t},
// anchored at the observed crude rates of t_max. Paths are independent, each
// driven by an RNG derived from (seed, path), so results do not depend on the
// thread count.
inline scenario_set project_scenarios(const baseline_params& baseline,
                                      const period_dyn_params& dyn,
                                      const std::vector<regime_inputs>& regimes,
                                      const Eigen::VectorXd& anchor_rates,
                                      const projection_config& cfg) {
    const age_range ages = baseline.common.ages;
    const int n_a = ages.count();
    require(anchor_rates.size() == n_a, "project_scenarios: anchor length mismatch");
    require((anchor_rates.array() > 0.0).all(), "project_scenarios: anchor rates must be positive");
    require(cfg.horizon.lo == baseline.common.years.hi + 1,
            "project_scenarios: horizon must start right after the data");
    require(cfg.n_paths > 0, "project_scenarios: need at least one path");
    const int m = baseline.common.factors, l = baseline.deviation.factors;
    require(static_cast<int>(dyn.c.size()) == m + l, "project_scenarios: dynamics dimension");
    for (std::size_t gi = 0; gi < regimes.size(); ++gi) {
        require(ages.contains(regimes[gi].params.group.lo) &&
                    ages.contains(regimes[gi].params.group.hi),
                "project_scenarios: regime group outside the age range");
    }

    const int t_count = cfg.horizon.count();
    const Eigen::MatrixXd period_factor = covariance_factor(dyn.sigma_w);

    scenario_set out;
    out.ages = ages;
    out.anchor_year = baseline.common.years.hi;
    out.horizon = cfg.horizon;
    out.anchor_mu = anchor_rates;
    out.mu.resize(static_cast<std::size_t>(cfg.n_paths));
    out.truncated_flag.assign(static_cast<std::size_t>(cfg.n_paths), 0);
    out.seed = cfg.seed;

    const Eigen::VectorXd log_anchor = anchor_rates.array().log();

    parallel_for(cfg.n_paths, cfg.threads, [&](int path) {
        std::mt19937_64 rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(path)));
        std::normal_distribution<double> g(0.0, 1.0);

        // period effects: K_t = c + factor * z
        Eigen::MatrixXd periods(t_count, m + l);
        Eigen::VectorXd zvec(m + l);
        for (int t = 0; t < t_count; ++t) {
            for (int d = 0; d < m + l; ++d) zvec[d] = g(rng);
            periods.row(t) = (dyn.c + period_factor * zvec).transpose();
        }

        // per-group chains and shock panels
        Eigen::MatrixXd shocks = Eigen::MatrixXd::Zero(n_a, t_count);
        bool truncated = false;
        static const std::map<int, forced_state> no_forcing;
        for (std::size_t gi = 0; gi < regimes.size(); ++gi) {
            const auto& reg = regimes[gi];
            const auto& forced = gi < cfg.forced_states.size() ? cfg.forced_states[gi] : no_forcing;
            const markov_path chain_path =
                simulate_chain(reg.params, reg.init_probs, cfg.horizon, forced, rng);
            const shock_panel panel =
                simulate_shock_panel(chain_path, reg.params, rng, cfg.shock_mean_mu_h);
            truncated = truncated || panel.truncated_open_run;
            const int row0 = ages.index(reg.params.group.lo);
            shocks.middleRows(row0, reg.params.group.count()) = panel.s;
        }

        Eigen::MatrixXd mu(n_a, t_count);
        Eigen::VectorXd log_mu = log_anchor;
        for (int t = 0; t < t_count; ++t) {
            log_mu += baseline.common.a;
            for (int f = 0; f < m; ++f)
                log_mu += baseline.common.b[static_cast<std::size_t>(f)] * periods(t, f);
            for (int f = 0; f < l; ++f)
                log_mu += baseline.deviation.beta[static_cast<std::size_t>(f)] * periods(t, m + f);
            log_mu += shocks.col(t);
            mu.col(t) = log_mu.array().exp();
        }
        if (!mu.allFinite())
            throw numerical_error("project_scenarios: non-finite mu in path " +
                                  std::to_string(path));
        out.mu[static_cast<std::size_t>(path)] = std::move(mu);
        out.truncated_flag[static_cast<std::size_t>(path)] = truncated ? 1 : 0;
    });
    return out;
}

// Deterministic best-estimate projection: innovation and shock terms all
// zero, so period effects stay at the drift c.
inline Eigen::MatrixXd project_best_estimate(const baseline_params& baseline,
                                             const period_dyn_params& dyn,
                                             const Eigen::VectorXd& anchor_rates,
                                             year_range horizon) {
    const age_range ages = baseline.common.ages;
    const int n_a = ages.count();
    require(anchor_rates.size() == n_a, "project_best_estimate: anchor length mismatch");
    require((anchor_rates.array() > 0.0).all(),
            "project_best_estimate: anchor rates must be positive");
    const int m = baseline.common.factors, l = baseline.deviation.factors;

    Eigen::MatrixXd mu(n_a, horizon.count());
    Eigen::VectorXd log_mu = anchor_rates.array().log();
    Eigen::VectorXd step = baseline.common.a;
    for (int f = 0; f < m; ++f) step += baseline.common.b[static_cast<std::size_t>(f)] * dyn.c[f];
    for (int f = 0; f < l; ++f)
        step += baseline.deviation.beta[static_cast<std::size_t>(f)] * dyn.c[m + f];
    for (int t = 0; t < horizon.count(); ++t) {
        log_mu += step;
        mu.col(t) = log_mu.array().exp();
    }
    return mu;
}

}  // namespace mortshock
