#include <cstdio>
#include <cstdlib>
#include <string>

#include <CLI11.hpp>

#include "ecotta/errors.hpp"
#include "ecotta/runner.hpp"

namespace {

using ecotta::cli::RunConfig;

// Seed precedence: ECOTTA_SEED env < config file < --key flags.
RunConfig build_config(const std::string& config_path,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig cfg;
    if (const char* env = std::getenv("ECOTTA_SEED")) ecotta::cli::apply_key(cfg, "seed", env);
    if (!config_path.empty()) cfg = ecotta::cli::parse_config_file(config_path, std::move(cfg));
    for (const auto& [k, v] : overrides) ecotta::cli::apply_key(cfg, k, v);
    cfg.validate();
    return cfg;
}

void add_override_options(CLI::App* cmd, std::vector<std::pair<std::string, std::string>>& overrides) {
    for (const auto& key : ecotta::cli::config_keys()) {
        const std::string name = std::string("--") + key.key;
        const std::string desc = std::string("[") + key.section + "] override";
        cmd->add_option_function<std::string>(
            name, [&overrides, k = std::string(key.key)](const std::string& v) { overrides.emplace_back(k, v); },
            desc);
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"ecotta: memory-efficient continual test-time adaptation benchmark"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::pair<std::string, std::string>> overrides;

    auto* warmup = app.add_subcommand("warmup", "pretrain source model, warm up meta networks, save checkpoint");
    auto* run = app.add_subcommand("run", "run an adaptation scenario against a checkpoint");
    auto* memreport = app.add_subcommand("memreport", "emit the analytic memory report CSV");
    auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the clean source test split");
    for (auto* cmd : {warmup, run, memreport, eval}) {
        cmd->add_option("--config", config_path, "config file (key = value with [section] headers)");
        add_override_options(cmd, overrides);
    }

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = build_config(config_path, overrides);
        std::printf("config:\n%s\n", ecotta::cli::config_echo_json(cfg).c_str());
        if (warmup->parsed()) {
            cfg.scenario = ecotta::cli::Scenario::Warmup;
            ecotta::cli::run_warmup(cfg);
            std::printf("checkpoint written to %s\n", cfg.checkpoint.c_str());
        } else if (run->parsed()) {
            if (cfg.scenario == ecotta::cli::Scenario::Warmup ||
                cfg.scenario == ecotta::cli::Scenario::Memreport) {
                ecotta::cli::run(cfg);
            } else {
                auto res = ecotta::cli::run_scenario(cfg);
                std::printf("mean_error %.6f\nresults: %s\nsummary: %s\n", res.mean_error,
                            res.results_csv.c_str(), res.summary_json.c_str());
            }
        } else if (memreport->parsed()) {
            ecotta::cli::run_memreport(cfg);
            std::printf("memreport written under %s\n", cfg.out_dir.c_str());
        } else if (eval->parsed()) {
            ecotta::cli::run_eval(cfg);
        }
    } catch (const ecotta::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const ecotta::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const ecotta::FormatError& e) {
        std::fprintf(stderr, "format error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
