#include "mortshock/pipeline.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <fstream>
#include <sstream>

using namespace mortshock;
using Catch::Approx;

namespace {

std::string read_file(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::set<std::string> all_stages() {
    std::set<std::string> s;
    for (const auto& st : stage_order()) s.insert(st);
    return s;
}

pipeline_context make_context(const testutil::pipeline_fixture& fx, std::ostream& log) {
    pipeline_context ctx;
    ctx.cfg = load_config(fx.config_path.string());
    ctx.threads = 1;
    ctx.log = &log;
    return ctx;
}

}  // namespace

TEST_CASE("config round trip is the identity") {
    auto fx = testutil::make_pipeline_fixture("cfg_roundtrip");
    auto cfg = load_config(fx.config_path.string());
    const json j1 = to_json(cfg);
    const pipeline_config cfg2 = parse_config(j1);
    const json j2 = to_json(cfg2);
    CHECK(j1 == j2);
    CHECK(config_digest(cfg) == config_digest(cfg2));

    SECTION("unknown keys are rejected") {
        json bad = j1;
        bad["daat"] = 1;
        CHECK_THROWS_AS(parse_config(bad), validation_error);
    }
    SECTION("nu weight expansion") {
        std::map<std::string, double> w{{"1914-1916", 0.0}, {"1920", 0.5}};
        const Eigen::VectorXd nu = expand_nu_weights(w, {1913, 1921});
        CHECK(nu[0] == 1.0);
        CHECK(nu[1] == 0.0);
        CHECK(nu[3] == 0.0);
        CHECK(nu[4] == 1.0);
        CHECK(nu[7] == 0.5);
    }
}

TEST_CASE("full pipeline on the synthetic fixture") {
    auto fx = testutil::make_pipeline_fixture("pipeline_full", 1000);
    std::ostringstream log;
    auto ctx = make_context(fx, log);

    run_pipeline(ctx, all_stages());

    SECTION("detected outliers contain the injected shock years") {
        const auto years = artifacts::read_outlier_years(ctx.outliers_dir());
        for (int y : fx.shock_years) CHECK(years.count(y) == 1);
    }

    SECTION("rebaseline satisfies the identifiability constraints") {
        const auto p = artifacts::read_baseline(ctx.rebaseline_dir(), "rebaseline");
        for (int f = 0; f < 2; ++f) {
            CHECK(std::abs(p.common.b[static_cast<std::size_t>(f)].squaredNorm() - 1.0) < 1e-8);
            CHECK(std::abs(p.common.l[static_cast<std::size_t>(f)][0]) == 0.0);
            CHECK(std::abs(p.common.l[static_cast<std::size_t>(f)][39]) < 1e-8);
        }
        CHECK(std::abs(p.common.b[0].dot(p.common.b[1])) < 1e-8);
        CHECK(std::abs(first_differences(p.common.l[0]).dot(first_differences(p.common.l[1]))) <
              1e-8);
    }

    SECTION("scenario store round trips") {
        const auto set = artifacts::read_scenarios(ctx.scenarios_file());
        CHECK(set.n_paths() == 1000);
        CHECK(set.ages == fx.ages);
        CHECK(set.horizon.lo == 2022);
        CHECK(set.horizon.hi == 2061);
        for (int p = 0; p < 5; ++p) {
            CHECK(set.mu[static_cast<std::size_t>(p)].allFinite());
            CHECK((set.mu[static_cast<std::size_t>(p)].array() > 0.0).all());
        }
        // q = 1 - exp(-mu) in (0,1)
        CHECK(set.q(0, 0, 0) > 0.0);
        CHECK(set.q(0, 0, 0) < 1.0);
    }

    SECTION("scr report has one row per contract") {
        const csv::table t = csv::read_file(ctx.scr_file().string());
        REQUIRE(t.rows.size() == 2);
        CHECK(t.rows[0][0] == "annuity");
        CHECK(t.rows[1][0] == "term");
        const double bel_ann = std::stod(t.rows[0][2]);
        const double scr_std = std::stod(t.rows[0][3]);
        CHECK(bel_ann > 0.0);
        CHECK(scr_std > 0.0);
    }

    SECTION("stage reruns are byte-identical") {
        const std::string quant1 = read_file(ctx.quantiles_file());
        const std::string scen1 = read_file(ctx.scenarios_file());
        const std::string manifest1 = read_file(ctx.out() / "project_manifest.json");
        run_pipeline(ctx, {"project"});
        CHECK(read_file(ctx.quantiles_file()) == quant1);
        CHECK(read_file(ctx.scenarios_file()) == scen1);
        CHECK(read_file(ctx.out() / "project_manifest.json") == manifest1);
    }
}

TEST_CASE("missing upstream artifacts name the stage to run first") {
    auto fx = testutil::make_pipeline_fixture("pipeline_missing");
    std::ostringstream log;
    auto ctx = make_context(fx, log);
    CHECK_THROWS_WITH(run_pipeline(ctx, {"baseline"}),
                      Catch::Matchers::ContainsSubstring("ingest"));
    run_pipeline(ctx, {"ingest"});
    CHECK_THROWS_WITH(run_pipeline(ctx, {"outliers"}),
                      Catch::Matchers::ContainsSubstring("baseline"));
    CHECK_THROWS_WITH(run_pipeline(ctx, {"scr"}), Catch::Matchers::ContainsSubstring("run stage"));
}

TEST_CASE("ingest stage alone writes the panel artifact") {
    auto fx = testutil::make_pipeline_fixture("pipeline_ingest");
    std::ostringstream log;
    auto ctx = make_context(fx, log);
    run_pipeline(ctx, {"ingest"});
    const auto panel = artifacts::read_panel(ctx.panel_dir());
    CHECK(panel.ages == fx.ages);
    CHECK(panel.years == fx.years);
    // the late-entry country is excluded before 1992
    const auto t0 = read_file(ctx.panel_dir() / "panel.json");
    CHECK(t0.find("CC") != std::string::npos);
}

TEST_CASE("scenario export formats") {
    auto fx = testutil::make_pipeline_fixture("pipeline_export", 50);
    std::ostringstream log;
    auto ctx = make_context(fx, log);
    run_pipeline(ctx, {"ingest", "baseline", "outliers", "rebaseline", "regime", "dynamics",
                       "project"});

    const auto csv_out = fx.dir / "scen.csv";
    export_scenarios(ctx.scenarios_file().string(), "csv", csv_out.string());
    const csv::table t = csv::read_file(csv_out.string());
    CHECK(t.header.size() == 2 + 50);
    CHECK(t.rows.size() == static_cast<std::size_t>(fx.ages.count() * 40));

    const auto q_out = fx.dir / "scen_q.csv";
    export_scenarios(ctx.scenarios_file().string(), "quantile-summary", q_out.string());
    const csv::table q = csv::read_file(q_out.string());
    CHECK(q.header == std::vector<std::string>{"age", "year", "q0.005", "q0.05", "q0.5", "q0.95",
                                               "q0.995"});

    SECTION("quantiles match an independent percentile routine") {
        const auto set = artifacts::read_scenarios(ctx.scenarios_file());
        // independent: nth_element on a copy, ceiling order statistic
        std::vector<double> v;
        for (int p = 0; p < set.n_paths(); ++p) v.push_back(set.q(p, 0, 0));
        std::sort(v.begin(), v.end());
        const std::size_t rank_med =
            static_cast<std::size_t>(std::ceil(0.5 * double(v.size())));
        CHECK(std::stod(q.rows[0][4]) == Approx(v[rank_med - 1]).margin(1e-15));
        const std::size_t rank_high =
            static_cast<std::size_t>(std::ceil(0.995 * double(v.size())));
        CHECK(std::stod(q.rows[0][6]) == Approx(v[rank_high - 1]).margin(1e-15));
    }

    SECTION("unknown format rejected") {
        CHECK_THROWS_AS(export_scenarios(ctx.scenarios_file().string(), "parquet", "x"),
                        validation_error);
    }

    SECTION("empty scenario set rejected") {
        scenario_set empty;
        empty.ages = fx.ages;
        empty.anchor_year = 2021;
        empty.horizon = {2022, 2061};
        empty.anchor_mu = Eigen::VectorXd::Constant(fx.ages.count(), 0.01);
        const auto p = fx.dir / "empty.bin";
        artifacts::write_scenarios(p, empty);
        CHECK_THROWS_AS(export_scenarios(p.string(), "csv", (fx.dir / "e.csv").string()),
                        validation_error);
    }
}

#ifdef MORTSHOCK_CLI_PATH
TEST_CASE("command line interface") {
    auto fx = testutil::make_pipeline_fixture("pipeline_cli");
    const std::string cli = MORTSHOCK_CLI_PATH;

    SECTION("full run exits 0 and export works") {
        const int rc = std::system(
            (cli + " run --config " + fx.config_path.string() + " > /dev/null 2>&1").c_str());
        CHECK(rc == 0);
        auto cfg = load_config(fx.config_path.string());
        const auto scen = std::filesystem::path(cfg.output_dir) / "scenarios.bin";
        CHECK(std::filesystem::exists(scen));
        const int rc2 = std::system(
            (cli + " export --input " + scen.string() + " --format quantile-summary > /dev/null")
                .c_str());
        CHECK(rc2 == 0);
        CHECK(std::filesystem::exists(scen.string() + ".quantiles.csv"));
    }

    SECTION("validation failures exit 1") {
        const int rc = std::system((cli + " run --config /nonexistent.json 2> /dev/null").c_str());
        CHECK(WEXITSTATUS(rc) == 1);
        const int rc2 = std::system(
            (cli + " run --config " + fx.config_path.string() + " --stages scr 2> /dev/null")
                .c_str());
        CHECK(WEXITSTATUS(rc2) == 1);
    }
}
#endif
