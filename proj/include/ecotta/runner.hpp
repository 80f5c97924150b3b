#pragma once

#include <string>

#include "ecotta/config.hpp"

namespace ecotta::cli {

// Seed namespaces shared by warm-up and adaptation runs, so a checkpoint and
// the streams that exercise it come from the same synthetic source domain.
inline constexpr std::uint64_t kTagSourceTrain = 0x73726374;
inline constexpr std::uint64_t kTagSourceTest = 0x73726373;
inline constexpr std::uint64_t kTagTargetPool = 0x74676574;

struct ScenarioResult {
    std::string results_csv;
    std::string summary_json;
    double mean_error = 0.0;
};

// scenario = warmup: pretrain the source model, attach and warm up the meta
// networks, save the checkpoint.
void run_warmup(const RunConfig& cfg);

// Adaptation scenarios (continual / long_term / gradual / forgetting /
// small_batch): stream batches, adapt per cfg.method, write results.csv and
// summary.json under cfg.out_dir.
ScenarioResult run_scenario(const RunConfig& cfg);

void run_memreport(const RunConfig& cfg);

// Clean-source evaluation of a checkpoint; prints a small JSON object.
void run_eval(const RunConfig& cfg);

// Dispatch on cfg.scenario (CLI `run` subcommand).
int run(const RunConfig& cfg);

}  // namespace ecotta::cli
