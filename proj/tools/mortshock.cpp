// Command line front end: runs pipeline stages from a JSON configuration and
// exports scenario stores. Exit codes: 0 ok, 1 validation failure, 2
// numerical failure.

#include "mortshock/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <set>
#include <sstream>
#include <string>

namespace {

int env_threads() {
    const char* v = std::getenv("MORTSHOCK_THREADS");
    if (!v) return 1;
    const int n = std::atoi(v);
    return n > 0 ? n : 1;
}

std::set<std::string> parse_stage_list(const std::string& arg) {
    if (arg.empty() || arg == "all") {
        std::set<std::string> all;
        for (const auto& s : mortshock::stage_order()) all.insert(s);
        return all;
    }
    std::set<std::string> stages;
    std::stringstream ss(arg);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (!item.empty()) stages.insert(item);
    }
    return stages;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multi-population mortality model with a catastrophe shock regime"};
    app.require_subcommand(1);

    std::string config_path;
    std::string stage_arg = "all";
    auto* run = app.add_subcommand("run", "run pipeline stages from a config file");
    run->add_option("--config", config_path, "JSON configuration file")->required();
    run->add_option("--stages", stage_arg,
                    "comma-separated stage list (ingest,baseline,outliers,rebaseline,regime,"
                    "dynamics,project,scr) or 'all'");

    std::string input_path, format = "quantile-summary", output_path;
    auto* exp = app.add_subcommand("export", "export a scenario store");
    exp->add_option("--input", input_path, "scenario store (scenarios.bin)")->required();
    exp->add_option("--format", format, "csv | quantile-summary");
    exp->add_option("--output", output_path, "output file (default: derived from input)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            mortshock::pipeline_context ctx;
            ctx.cfg = mortshock::load_config(config_path);
            ctx.threads = env_threads();
            mortshock::run_pipeline(ctx, parse_stage_list(stage_arg));
        } else if (exp->parsed()) {
            if (output_path.empty())
                output_path =
                    input_path + (format == "csv" ? ".csv" : ".quantiles.csv");
            mortshock::export_scenarios(input_path, format, output_path);
            std::cout << "wrote " << output_path << "\n";
        }
    } catch (const mortshock::validation_error& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const mortshock::numerical_error& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
