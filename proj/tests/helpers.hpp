#pragma once

#include "mortshock/baseline.hpp"
#include "mortshock/data_ingestion.hpp"

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

namespace testutil {

using namespace mortshock;

// Smooth synthetic level surface with known effects, deaths set to their
// Poisson means (optionally sampled) so fits can be checked against truth.
struct synthetic_truth {
    age_range ages;
    year_range years;
    Eigen::VectorXd anchor;
    Eigen::VectorXd a;
    std::vector<Eigen::VectorXd> b;  // canonical two-factor loadings
    std::vector<Eigen::VectorXd> l;  // cumulated period effects

    Eigen::MatrixXd eta() const {
        const int n_a = ages.count(), n_t = years.count();
        Eigen::MatrixXd e(n_a, n_t);
        for (int j = 0; j < n_t; ++j) {
            e.col(j) = anchor + double(j) * a;
            for (std::size_t i = 0; i < b.size(); ++i) e.col(j) += b[i] * l[i][j];
        }
        return e;
    }
};

// Deterministic canonical truth: builds raw smooth effects then passes them
// through the same canonicalization used by the fitter, so recovered and true
// parameters are directly comparable.
inline synthetic_truth make_truth(age_range ages, year_range years, unsigned seed = 1234) {
    const int n_a = ages.count(), n_t = years.count();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, 1.0);

    synthetic_truth t;
    t.ages = ages;
    t.years = years;
    t.anchor.resize(n_a);
    t.a.resize(n_a);
    for (int i = 0; i < n_a; ++i) {
        const double u = double(i) / std::max(1, n_a - 1);
        t.anchor[i] = -7.0 + 3.0 * u;          // log rates from ~e-7 to ~e-4
        t.a[i] = -0.02 + 0.01 * u;             // improving mortality drift
    }
    Eigen::VectorXd b1(n_a), b2(n_a), k1(n_t - 1), k2(n_t - 1);
    for (int i = 0; i < n_a; ++i) {
        const double u = double(i) / std::max(1, n_a - 1);
        b1[i] = 1.0 + 0.5 * std::sin(3.0 * u);
        b2[i] = u - 0.5 + 0.15 * std::cos(5.0 * u);
    }
    for (int j = 0; j + 1 < n_t; ++j) {
        k1[j] = 0.10 * std::sin(0.4 * j) + 0.03 * noise(rng);
        k2[j] = 0.06 * std::cos(0.7 * j) + 0.02 * noise(rng);
    }
    auto norm = normalize_two_factor(b1, b2, k1, k2);
    t.a += norm.a_adjustment;
    t.b = {norm.b1, norm.b2};
    t.l = {cumulate(norm.k1), cumulate(norm.k2)};
    return t;
}

inline Eigen::MatrixXd exposures_grid(age_range ages, year_range years, double level = 1e5) {
    Eigen::MatrixXd e(ages.count(), years.count());
    for (int i = 0; i < ages.count(); ++i)
        for (int j = 0; j < years.count(); ++j)
            e(i, j) = level * (1.0 + 0.2 * std::sin(0.1 * i + 0.05 * j));
    return e;
}

inline std::vector<char> all_active(int n) { return std::vector<char>(static_cast<std::size_t>(n), 1); }

// Writes a Year,Age,Deaths,Exposure CSV for a full matrix pair.
inline void write_series_csv(const std::filesystem::path& path, age_range ages, year_range years,
                             const Eigen::MatrixXd& deaths, const Eigen::MatrixXd& exposures) {
    std::ofstream out(path);
    out << "Year,Age,Deaths,Exposure\n";
    out.precision(17);
    for (int j = 0; j < years.count(); ++j)
        for (int i = 0; i < ages.count(); ++i)
            out << years.at(j) << ',' << ages.at(i) << ',' << deaths(i, j) << ','
                << exposures(i, j) << '\n';
}

inline std::filesystem::path temp_dir(const std::string& tag) {
    auto dir = std::filesystem::temp_directory_path() / ("mortshock_test_" + tag);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// ---------------------------------------------------------------------------
// Whole-pipeline fixture: three synthetic countries, 10 ages x 40 years, a
// time-varying composition, noisy Poisson-mean deaths, and level shocks in
// known years so outlier detection has something to find.
// ---------------------------------------------------------------------------

struct pipeline_fixture {
    std::filesystem::path dir;
    std::filesystem::path config_path;
    age_range ages{20, 29};
    year_range years{1982, 2021};
    std::vector<int> shock_years{1995, 1996, 2013};
};

inline pipeline_fixture make_pipeline_fixture(const std::string& tag, int n_paths = 1000,
                                              unsigned noise_seed = 2718) {
    pipeline_fixture fx;
    fx.dir = temp_dir(tag);
    const int n_a = fx.ages.count(), n_t = fx.years.count();

    auto truth = make_truth(fx.ages, fx.years, 314159);
    std::mt19937_64 rng(noise_seed);
    std::normal_distribution<double> g(0.0, 1.0);

    // common level shocks: elevated log mortality in the shock years
    Eigen::VectorXd shock_level = Eigen::VectorXd::Zero(n_t);
    for (int y : fx.shock_years) shock_level[fx.years.index(y)] = 0.40;

    const char* codes[3] = {"AA", "BB", "CC"};
    const int entries[3] = {1982, 1982, 1992};
    for (int c = 0; c < 3; ++c) {
        Eigen::MatrixXd expo = exposures_grid(fx.ages, fx.years, 2e5 * (1.0 + 0.3 * c));
        Eigen::MatrixXd deaths(n_a, n_t);
        const Eigen::MatrixXd eta = truth.eta();
        for (int i = 0; i < n_a; ++i)
            for (int j = 0; j < n_t; ++j) {
                const double country_tilt = 0.02 * c * std::sin(0.3 * j + i);
                const double noise = 0.03 * g(rng);
                deaths(i, j) =
                    expo(i, j) * std::exp(eta(i, j) + shock_level[j] + country_tilt + noise);
            }
        // restrict to the entry window like a real source file would be
        const int j0 = fx.years.index(entries[c]);
        std::ofstream out(fx.dir / (std::string(codes[c]) + ".csv"));
        out << "Year,Age,Deaths,Exposure\n";
        out.precision(17);
        for (int j = j0; j < n_t; ++j)
            for (int i = 0; i < n_a; ++i)
                out << fx.years.at(j) << ',' << fx.ages.at(i) << ',' << deaths(i, j) << ','
                    << expo(i, j) << '\n';
    }

    const std::string out_dir = (fx.dir / "out").string();
    std::ofstream cfg(fx.dir / "config.json");
    cfg << R"({
  "output_dir": ")" << out_dir << R"(",
  "data": {
    "countries": [
      {"code": "AA", "path": ")" << (fx.dir / "AA.csv").string() << R"(", "entry_year": 1982},
      {"code": "BB", "path": ")" << (fx.dir / "BB.csv").string() << R"(", "entry_year": 1982},
      {"code": "CC", "path": ")" << (fx.dir / "CC.csv").string() << R"(", "entry_year": 1992}
    ],
    "age_min": 20, "age_max": 29, "year_min": 1982, "year_max": 2021,
    "target_country": "AA"
  },
  "baseline": {"m": 2, "l": 2},
  "outliers": {
    "quantile": 0.99, "epoch_split_year": 2002,
    "a_priori_exclusions": ["1995-1996", "2013"],
    "mcd_seed": 77
  },
  "regime": {
    "age_groups": ["20-24", "25-29"],
    "nu_weights": {},
    "epoch_year": 2002,
    "seed": 4242,
    "jde_stall_generations": 40,
    "outer_max": 4
  },
  "dynamics": {"gamma_min": 1.0, "gamma_max": 1.0, "gamma_step": 0.001, "first_eval_year": 2010},
  "projection": {
    "horizon_end": 2061, "n_paths": )" << n_paths << R"(, "seed": 90125,
    "shock_mean": "zero",
    "forced_states": {"20-24": {"2022": "lvs", "2023": "lvs"},
                      "25-29": {"2022": "hvs", "2023": "lvs"}}
  },
  "scr": {
    "interest_rate": 0.02,
    "kannisto_fit_age_min": 25, "kannisto_fit_age_max": 29, "max_age": 40,
    "contracts": [
      {"type": "annuity", "issue_age": 22, "issue_year": 2021, "annual_payout": 10000, "max_age": 40},
      {"type": "term", "issue_age": 21, "issue_year": 2021, "terminal_age": 27, "death_benefit": 150000}
    ]
  }
})";
    cfg.close();
    fx.config_path = fx.dir / "config.json";
    return fx;
}

}  // namespace testutil

#include "mortshock/regime.hpp"

namespace testutil {

// Simulates residuals from the regime-switching model: memory chain started
// from its stationary law, LVS diagonal noise, HVS adds the common shock.
// Returns the residual matrix and the simulated state path.
struct simulated_regime {
    Eigen::MatrixXd z;
    std::vector<int> states;
};

inline simulated_regime simulate_regime_residuals(const mortshock::regime_params& p,
                                                  mortshock::year_range years, std::uint64_t seed) {
    using namespace mortshock;
    const int n = p.group.count();
    const int t_count = years.count();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_real_distribution<double> u(0.0, 1.0);

    const auto chain = memory_transition_matrix(p.p12, p.p21);
    const Eigen::Vector3d pi = stationary_distribution(chain);

    simulated_regime out;
    out.z.resize(n, t_count);
    out.states.resize(static_cast<std::size_t>(t_count));

    auto draw_state = [&](const Eigen::Vector3d& probs) {
        const double r = u(rng);
        if (r < probs[0]) return 0;
        if (r < probs[0] + probs[1]) return 1;
        return 2;
    };

    int state = draw_state(pi);
    for (int t = 0; t < t_count; ++t) {
        if (t > 0) state = draw_state(chain.transition.row(state).transpose());
        out.states[static_cast<std::size_t>(t)] = state;
        const double shock = state == state_lvs ? 0.0 : p.mu_h + p.sigma_h * g(rng);
        for (int i = 0; i < n; ++i) {
            const double se = sigma_e(p, p.group.at(i), years.at(t));
            out.z(i, t) = p.frak_b[i] * shock + se * g(rng);
        }
    }
    return out;
}

}  // namespace testutil
