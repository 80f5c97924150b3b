#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecotta/adapt.hpp"
#include "ecotta/net.hpp"
#include "ecotta/stream.hpp"

namespace ecotta::cli {

enum class Scenario { Warmup, Continual, LongTerm, Gradual, Forgetting, Memreport, SmallBatch };
enum class Method { Source, BnStats, Tent, EcoTta };

const char* to_string(Scenario s);
const char* to_string(Method m);
Scenario scenario_from_string(const std::string& s);
Method method_from_string(const std::string& s);

struct RunConfig {
    // [run]
    Scenario scenario = Scenario::Continual;
    Method method = Method::EcoTta;
    std::uint64_t seed = 0;
    std::string out_dir = ".";
    std::string checkpoint = "warmup.ecotta";
    int classes = 10;
    int k = 4;
    net::MetaVariant variant = net::MetaVariant::Ours;
    int kernel = 3;

    // [adapt]
    adapt::AdaptConfig adapt;

    // [stream]
    std::vector<stream::Corruption> kinds = stream::all_corruptions();
    int severity = 5;
    int batches_per_segment = 50;
    int rounds = 30;
    std::int64_t n_source_train = 2048;
    std::int64_t n_source_test = 1024;
    std::int64_t n_target_pool = 2048;
    int pretrain_epochs = 10;
    float pretrain_lr = 5e-2f;

    void validate() const;
};

// One registry backs the config file, the CLI flags and the summary echo.
struct ConfigKey {
    const char* section;
    const char* key;
    void (*apply)(RunConfig&, const std::string& value);  // throws ConfigError on bad values
    std::string (*echo)(const RunConfig&);
};

const std::vector<ConfigKey>& config_keys();

// Line-oriented `key = value` with optional [section] headers. Unknown keys
// and malformed values are rejected with their line number. `base` carries
// lower-precedence values (defaults, then the ECOTTA_SEED env var).
RunConfig parse_config(const std::string& text, RunConfig base = RunConfig{});
RunConfig parse_config_file(const std::string& path, RunConfig base = RunConfig{});

// Flag-style single-key override (same key space as the file).
void apply_key(RunConfig& cfg, const std::string& key, const std::string& value);

// Every effective parameter as a flat JSON object.
std::string config_echo_json(const RunConfig& cfg);

}  // namespace ecotta::cli
