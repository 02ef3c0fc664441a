#include "mortshock/regime.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace mortshock;
using Catch::Approx;

namespace {

regime_params one_dim_params(double sigma_e1, double mu_h, double sigma_h) {
    regime_params p;
    p.group = {50, 50};
    p.epoch_year = 1970;
    p.sigma_e1 = sigma_e1;
    p.slope1 = 0.0;
    p.sigma_e2 = sigma_e1;
    p.slope2 = 0.0;
    p.mu_h = mu_h;
    p.sigma_h = sigma_h;
    p.frak_b = Eigen::VectorXd::Ones(1);
    return p;
}

// brute-force likelihood: sum over all admissible state paths
double path_enumeration_loglik(const Eigen::MatrixXd& z, year_range years,
                               const regime_params& p) {
    const int t_count = static_cast<int>(z.cols());
    const auto chain = memory_transition_matrix(p.p12, p.p21);
    const Eigen::Vector3d pi = stationary_distribution(chain);
    std::vector<int> path(static_cast<std::size_t>(t_count), 0);
    long double total = 0.0L;
    const long n_paths = static_cast<long>(std::pow(3.0, t_count));
    for (long code = 0; code < n_paths; ++code) {
        long c = code;
        for (int t = 0; t < t_count; ++t) {
            path[static_cast<std::size_t>(t)] = static_cast<int>(c % 3);
            c /= 3;
        }
        long double prob = pi[path[0]];
        for (int t = 1; t < t_count; ++t)
            prob *= chain.transition(path[static_cast<std::size_t>(t - 1)],
                                     path[static_cast<std::size_t>(t)]);
        if (prob <= 0.0L) continue;
        long double dens = 0.0L;
        for (int t = 0; t < t_count; ++t)
            dens += emission_logdensity(z.col(t), path[static_cast<std::size_t>(t)], years.at(t), p);
        total += prob * std::exp(dens);
    }
    return static_cast<double>(std::log(total));
}

}  // namespace

TEST_CASE("sigma_e follows the epoch-split linear law") {
    regime_params p;
    p.group = {20, 59};
    p.epoch_year = 1970;
    p.sigma_e1 = 0.12750;
    p.slope1 = -0.00156;
    p.sigma_e2 = 0.18173;
    p.slope2 = -0.00342;
    p.frak_b = Eigen::VectorXd::Ones(p.group.count());

    CHECK(sigma_e(p, 20, 1950) == Approx(0.12750).margin(1e-12));
    CHECK(sigma_e(p, 30, 1950) == Approx(0.11190).margin(1e-12));

    regime_params q;
    q.group = {60, 85};
    q.epoch_year = 1970;
    q.sigma_e1 = 0.05823;
    q.slope1 = 0.00069;
    q.sigma_e2 = 0.03944;
    q.slope2 = -0.00048;
    CHECK(sigma_e(q, 60, 2000) == Approx(0.03944).margin(1e-12));

    // infeasible combination errors out
    regime_params bad = p;
    bad.sigma_e1 = 0.01;
    bad.slope1 = -0.01;
    CHECK_THROWS_AS(sigma_e(bad, 59, 1950), numerical_error);
    CHECK_FALSE(sigma_e_feasible(bad, {1900, 2000}));
}

TEST_CASE("memory transition matrix structure") {
    auto s = memory_transition_matrix(0.5, 0.5);
    Eigen::Matrix3d expected;
    expected << 0.5, 0.5, 0.0, 0.0, 0.0, 1.0, 0.5, 0.0, 0.5;
    CHECK((s.transition - expected).cwiseAbs().maxCoeff() == 0.0);

    SECTION("LVS nearly absorbing as p12 -> 0") {
        auto t = memory_transition_matrix(1e-12, 0.5);
        CHECK(t.transition(0, 0) == Approx(1.0).margin(1e-11));
        CHECK(t.transition(0, 2) == 0.0);
        CHECK(t.transition(1, 2) == 1.0);  // memory path intact
    }
    SECTION("row sums are one for random probabilities") {
        std::mt19937_64 rng(3);
        std::uniform_real_distribution<double> u(1e-6, 1.0 - 1e-6);
        for (int i = 0; i < 1000; ++i) {
            auto t = memory_transition_matrix(u(rng), u(rng));
            for (int r = 0; r < 3; ++r)
                CHECK(t.transition.row(r).sum() == Approx(1.0).margin(1e-15));
        }
    }
    SECTION("out-of-range probabilities rejected") {
        CHECK_THROWS_AS(memory_transition_matrix(0.0, 0.5), validation_error);
        CHECK_THROWS_AS(memory_transition_matrix(0.5, 1.0), validation_error);
    }
}

TEST_CASE("stationary distribution closed form") {
    auto s = memory_transition_matrix(0.5, 0.5);
    Eigen::Vector3d pi = stationary_distribution(s);
    CHECK(pi[0] == Approx(0.4).margin(1e-15));
    CHECK(pi[1] == Approx(0.2).margin(1e-15));
    CHECK(pi[2] == Approx(0.4).margin(1e-15));

    SECTION("values from the calibrated table") {
        auto t = memory_transition_matrix(0.04709, 0.34207);
        Eigen::Vector3d p = stationary_distribution(t);
        CHECK(p[0] == Approx(0.8441).margin(1e-3));
        CHECK(p[1] == Approx(0.03975).margin(5e-5));
        CHECK(p[2] == Approx(0.11620).margin(5e-5));
    }
    SECTION("matches the dominant left eigenvector by power iteration") {
        std::mt19937_64 rng(11);
        std::uniform_real_distribution<double> u(0.01, 0.99);
        for (int rep = 0; rep < 50; ++rep) {
            auto t = memory_transition_matrix(u(rng), u(rng));
            Eigen::RowVector3d v(1.0 / 3, 1.0 / 3, 1.0 / 3);
            for (int it = 0; it < 20000; ++it) v = v * t.transition;
            Eigen::Vector3d pi_cf = stationary_distribution(t);
            CHECK((v.transpose() - pi_cf).cwiseAbs().maxCoeff() < 1e-10);
            CHECK((t.transition.transpose() * pi_cf - pi_cf).cwiseAbs().maxCoeff() < 1e-12);
            CHECK(pi_cf.sum() == Approx(1.0).margin(1e-12));
        }
    }
}

TEST_CASE("emission log density hand values") {
    Eigen::VectorXd z0 = Eigen::VectorXd::Zero(1);

    auto lvs = one_dim_params(1.0, 0.0, 2.0);
    CHECK(emission_logdensity(z0, state_lvs, 1950, lvs) ==
          Approx(-0.5 * std::log(2.0 * M_PI)).margin(1e-12));

    // HVS with B=1, sigma_H=2, sigma_e=1: variance 5 at the origin
    CHECK(emission_logdensity(z0, state_hvs_enter, 1950, lvs) ==
          Approx(-0.5 * std::log(2.0 * M_PI * 5.0)).margin(1e-10));
}

TEST_CASE("rank-one emission equals the dense multivariate normal") {
    std::mt19937_64 rng(17);
    std::normal_distribution<double> g(0.0, 1.0);
    for (int dim : {2, 5, 13, 40}) {
        regime_params p;
        p.group = {20, 20 + dim - 1};
        p.epoch_year = 1970;
        p.sigma_e1 = 0.4;
        p.slope1 = 0.004;
        p.sigma_e2 = 0.2;
        p.slope2 = -0.002;
        p.mu_h = 0.3;
        p.sigma_h = 1.7;
        Eigen::VectorXd b(dim);
        for (int i = 0; i < dim; ++i) b[i] = g(rng);
        p.frak_b = b / b.norm();

        for (int year : {1950, 1990}) {
            Eigen::VectorXd s2(dim);
            for (int i = 0; i < dim; ++i) {
                const double s = sigma_e(p, p.group.at(i), year);
                s2[i] = s * s;
            }
            Eigen::MatrixXd cov =
                p.sigma_h * p.sigma_h * p.frak_b * p.frak_b.transpose();
            cov.diagonal() += s2;
            Eigen::VectorXd mean = p.frak_b * p.mu_h;

            for (int rep = 0; rep < 7; ++rep) {
                Eigen::VectorXd z(dim);
                for (int i = 0; i < dim; ++i) z[i] = g(rng);
                Eigen::LLT<Eigen::MatrixXd> llt(cov);
                const Eigen::VectorXd c = z - mean;
                double logdet = 0.0;
                for (int i = 0; i < dim; ++i) logdet += 2.0 * std::log(llt.matrixL()(i, i));
                const double dense =
                    -0.5 * (dim * std::log(2.0 * M_PI) + logdet + c.dot(llt.solve(c)));
                const double fast = emission_logdensity(z, state_hvs_stay, year, p);
                CHECK(fast == Approx(dense).margin(1e-10));
            }
        }
    }
}

TEST_CASE("filter equals path enumeration for short series") {
    std::mt19937_64 rng(23);
    std::uniform_real_distribution<double> u(0.05, 0.9);
    std::normal_distribution<double> g(0.0, 1.0);
    double worst = 0.0;
    for (int rep = 0; rep < 100; ++rep) {
        const int dim = 1 + static_cast<int>(rng() % 3);
        const int t_count = 3 + static_cast<int>(rng() % 4);  // 3..6
        regime_params p;
        p.group = {30, 30 + dim - 1};
        p.epoch_year = 1970;
        p.p12 = u(rng);
        p.p21 = u(rng);
        p.sigma_e1 = 0.2 + 0.5 * u(rng);
        p.slope1 = 0.001 * g(rng);
        p.sigma_e2 = 0.2 + 0.5 * u(rng);
        p.slope2 = 0.001 * g(rng);
        p.mu_h = 0.3 * g(rng);
        p.sigma_h = 0.5 + u(rng);
        Eigen::VectorXd b(dim);
        for (int i = 0; i < dim; ++i) b[i] = g(rng);
        p.frak_b = b / b.norm();

        Eigen::MatrixXd z(dim, t_count);
        for (int i = 0; i < dim; ++i)
            for (int t = 0; t < t_count; ++t) z(i, t) = 0.5 * g(rng);
        // span the epoch boundary
        year_range years{1968, 1968 + t_count - 1};

        const double ll_filter = filter_loglik(z, years, p).loglik;
        const double ll_paths = path_enumeration_loglik(z, years, p);
        worst = std::max(worst, std::abs(ll_filter - ll_paths));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("filter probabilities behave") {
    regime_params p = one_dim_params(0.5, 0.1, 2.0);
    p.p12 = 1e-12;
    p.p21 = 0.5;
    const int t_count = 20;
    Eigen::MatrixXd z(1, t_count);
    std::mt19937_64 rng(31);
    std::normal_distribution<double> g(0.0, 0.4);
    for (int t = 0; t < t_count; ++t) z(0, t) = g(rng);
    year_range years{1980, 1980 + t_count - 1};

    auto out = filter_loglik(z, years, p);
    double expected = 0.0;
    for (int t = 0; t < t_count; ++t) {
        CHECK(out.filtered.row(t).sum() == Approx(1.0).margin(1e-12));
        CHECK(out.filtered(t, 0) > 1.0 - 1e-6);
        expected += emission_logdensity(z.col(t), state_lvs, years.at(t), p);
    }
    CHECK(out.loglik == Approx(expected).margin(1e-5));
}

TEST_CASE("nu weights scale per-year contributions linearly") {
    regime_params p = one_dim_params(0.5, 0.0, 1.5);
    p.p12 = 0.2;
    p.p21 = 0.4;
    const int t_count = 12;
    Eigen::MatrixXd z(1, t_count);
    std::mt19937_64 rng(37);
    std::normal_distribution<double> g(0.0, 0.7);
    for (int t = 0; t < t_count; ++t) z(0, t) = g(rng);
    year_range years{1990, 1990 + t_count - 1};

    const int star = 5;
    auto weights = [&](double w) {
        Eigen::VectorXd nu = Eigen::VectorXd::Ones(t_count);
        nu[star] = w;
        return nu;
    };
    const double l0 = filter_loglik(z, years, p, weights(0.0)).loglik;
    const double l1 = filter_loglik(z, years, p, weights(1.0)).loglik;
    const double l2 = filter_loglik(z, years, p, weights(2.0)).loglik;
    CHECK(l2 - l1 == Approx(l1 - l0).margin(1e-10));

    // zero weight drops the term but the filter still propagates: the value
    // equals the sum of the retained per-year log densities
    auto full = filter_loglik(z, years, p);
    double retained = 0.0;
    for (int t = 0; t < t_count; ++t)
        if (t != star) retained += full.log_density[t];
    CHECK(l0 == Approx(retained).margin(1e-12));
}

TEST_CASE("likelihood invariances") {
    std::mt19937_64 rng(41);
    std::normal_distribution<double> g(0.0, 1.0);
    const int dim = 6, t_count = 15;
    regime_params p;
    p.group = {40, 45};
    p.epoch_year = 1970;
    p.p12 = 0.1;
    p.p21 = 0.3;
    p.sigma_e1 = 0.5;
    p.slope1 = 0.0;  // constant in age so permutations stay in the family
    p.sigma_e2 = 0.3;
    p.slope2 = 0.0;
    p.mu_h = 0.2;
    p.sigma_h = 1.2;
    Eigen::VectorXd b(dim);
    for (int i = 0; i < dim; ++i) b[i] = g(rng);
    p.frak_b = b / b.norm();

    Eigen::MatrixXd z(dim, t_count);
    for (int i = 0; i < dim; ++i)
        for (int t = 0; t < t_count; ++t) z(i, t) = 0.6 * g(rng);
    year_range years{1965, 1965 + t_count - 1};
    const double base = filter_loglik(z, years, p).loglik;

    SECTION("sign flip of (frak_b, mu_h)") {
        regime_params q = p;
        q.frak_b = -p.frak_b;
        q.mu_h = -p.mu_h;
        CHECK(filter_loglik(z, years, q).loglik == Approx(base).margin(1e-10));
    }
    SECTION("age relabeling with permuted loadings") {
        std::vector<int> perm{3, 1, 5, 0, 4, 2};
        Eigen::MatrixXd zp(dim, t_count);
        regime_params q = p;
        for (int i = 0; i < dim; ++i) {
            zp.row(i) = z.row(perm[static_cast<std::size_t>(i)]);
            q.frak_b[i] = p.frak_b[perm[static_cast<std::size_t>(i)]];
        }
        CHECK(filter_loglik(zp, years, q).loglik == Approx(base).margin(1e-10));
    }
}

TEST_CASE("compute_residuals identities") {
    age_range ages{20, 27};
    year_range years{2000, 2019};
    auto truth = testutil::make_truth(ages, years, 63);
    auto expo = testutil::exposures_grid(ages, years);
    Eigen::MatrixXd deaths = expo.array() * truth.eta().array().exp();
    auto active = testutil::all_active(years.count());
    auto common = fit_common_trend(deaths, expo, ages, years, active);

    baseline_params bp;
    bp.common = common;
    bp.anchor_common = truth.anchor;
    bp.anchor_country = truth.anchor;
    bp.deviation = fit_country_deviation(deaths, expo, ages, years, common, truth.anchor, "AGG",
                                         active);

    Eigen::MatrixXd rates = crude_death_rates(deaths, expo);

    SECTION("residuals vanish when rates match the model") {
        auto rp = compute_residuals(rates, bp);
        CHECK(rp.z.cwiseAbs().maxCoeff() < 1e-6);
        CHECK(rp.years.lo == years.lo + 1);
    }

    SECTION("one-cell perturbation by factor e moves paired residuals") {
        Eigen::MatrixXd rates2 = rates;
        const int xi = 3, tj = 10;
        rates2(xi, tj) *= std::exp(1.0);
        auto r1 = compute_residuals(rates, bp);
        auto r2 = compute_residuals(rates2, bp);
        CHECK(r2.z(xi, tj - 1) - r1.z(xi, tj - 1) == Approx(1.0).margin(1e-12));
        CHECK(r2.z(xi, tj) - r1.z(xi, tj) == Approx(-1.0).margin(1e-12));
    }

    SECTION("zero crude rate is rejected with the cell named") {
        Eigen::MatrixXd rates3 = rates;
        rates3(2, 5) = 0.0;
        CHECK_THROWS_WITH(compute_residuals(rates3, bp),
                          Catch::Matchers::ContainsSubstring("age 22") &&
                              Catch::Matchers::ContainsSubstring("2005"));
    }

    SECTION("default age groups partition the range") {
        auto rp = compute_residuals(rates, bp);
        REQUIRE(rp.age_groups.size() == 1);  // 20-27 holds no 59/60 boundary
        CHECK(rp.age_groups[0] == ages);
    }
}
