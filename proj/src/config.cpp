#include "ecotta/config.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ecotta/errors.hpp"

namespace ecotta::cli {

const char* to_string(Scenario s) {
    switch (s) {
        case Scenario::Warmup: return "warmup";
        case Scenario::Continual: return "continual";
        case Scenario::LongTerm: return "long_term";
        case Scenario::Gradual: return "gradual";
        case Scenario::Forgetting: return "forgetting";
        case Scenario::Memreport: return "memreport";
        case Scenario::SmallBatch: return "small_batch";
    }
    return "?";
}

const char* to_string(Method m) {
    switch (m) {
        case Method::Source: return "source";
        case Method::BnStats: return "bnstats";
        case Method::Tent: return "tent";
        case Method::EcoTta: return "ecotta";
    }
    return "?";
}

Scenario scenario_from_string(const std::string& s) {
    for (Scenario v : {Scenario::Warmup, Scenario::Continual, Scenario::LongTerm, Scenario::Gradual,
                       Scenario::Forgetting, Scenario::Memreport, Scenario::SmallBatch})
        if (s == to_string(v)) return v;
    throw ConfigError("unknown scenario '" + s + "'");
}

Method method_from_string(const std::string& s) {
    for (Method v : {Method::Source, Method::BnStats, Method::Tent, Method::EcoTta})
        if (s == to_string(v)) return v;
    throw ConfigError("unknown method '" + s + "'");
}

namespace {

std::int64_t parse_int(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    std::int64_t out = 0;
    try {
        out = std::stoll(v, &pos);
    } catch (...) {
        throw ConfigError("invalid integer for '" + key + "': '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("invalid integer for '" + key + "': '" + v + "'");
    return out;
}

double parse_float(const std::string& key, const std::string& v) {
    std::size_t pos = 0;
    double out = 0;
    try {
        out = std::stod(v, &pos);
    } catch (...) {
        throw ConfigError("invalid number for '" + key + "': '" + v + "'");
    }
    if (pos != v.size()) throw ConfigError("invalid number for '" + key + "': '" + v + "'");
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%g", v);
    return buf;
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        // [run]
        {"run", "scenario",
         [](RunConfig& c, const std::string& v) { c.scenario = scenario_from_string(v); },
         [](const RunConfig& c) { return std::string(to_string(c.scenario)); }},
        {"run", "method", [](RunConfig& c, const std::string& v) { c.method = method_from_string(v); },
         [](const RunConfig& c) { return std::string(to_string(c.method)); }},
        {"run", "seed",
         [](RunConfig& c, const std::string& v) {
             c.seed = static_cast<std::uint64_t>(parse_int("seed", v));
         },
         [](const RunConfig& c) { return std::to_string(c.seed); }},
        {"run", "out_dir", [](RunConfig& c, const std::string& v) { c.out_dir = v; },
         [](const RunConfig& c) { return c.out_dir; }},
        {"run", "checkpoint", [](RunConfig& c, const std::string& v) { c.checkpoint = v; },
         [](const RunConfig& c) { return c.checkpoint; }},
        {"run", "classes",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("classes", v);
             if (n < 2 || n > 16) throw ConfigError("classes must be in [2,16]");
             c.classes = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.classes); }},
        {"run", "k",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("k", v);
             if (n < 1 || n > 8) throw ConfigError("k must be in [1,8]");
             c.k = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.k); }},
        {"run", "variant",
         [](RunConfig& c, const std::string& v) { c.variant = net::meta_variant_from_string(v); },
         [](const RunConfig& c) { return std::string(net::to_string(c.variant)); }},
        {"run", "kernel",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("kernel", v);
             if (n != 1 && n != 3) throw ConfigError("kernel must be 1 or 3");
             c.kernel = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.kernel); }},

        // [adapt]
        {"adapt", "lambda",
         [](RunConfig& c, const std::string& v) {
             const double x = parse_float("lambda", v);
             if (x < 0) throw ConfigError("lambda must be >= 0");
             c.adapt.lambda = static_cast<float>(x);
         },
         [](const RunConfig& c) { return fmt(c.adapt.lambda); }},
        {"adapt", "warmup_lr",
         [](RunConfig& c, const std::string& v) {
             c.adapt.warmup_lr = static_cast<float>(parse_float("warmup_lr", v));
         },
         [](const RunConfig& c) { return fmt(c.adapt.warmup_lr); }},
        {"adapt", "tta_lr",
         [](RunConfig& c, const std::string& v) {
             c.adapt.tta_lr = static_cast<float>(parse_float("tta_lr", v));
         },
         [](const RunConfig& c) { return fmt(c.adapt.tta_lr); }},
        {"adapt", "warmup_epochs",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("warmup_epochs", v);
             if (n < 0) throw ConfigError("warmup_epochs must be >= 0");
             c.adapt.warmup_epochs = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.adapt.warmup_epochs); }},
        {"adapt", "h0_factor",
         [](RunConfig& c, const std::string& v) {
             const double x = parse_float("h0_factor", v);
             if (!(x > 0 && x <= 1)) throw ConfigError("h0_factor must be in (0,1]");
             c.adapt.h0_factor = static_cast<float>(x);
         },
         [](const RunConfig& c) { return fmt(c.adapt.h0_factor); }},
        {"adapt", "loss_variant",
         [](RunConfig& c, const std::string& v) { c.adapt.loss_variant = adapt::loss_variant_from_string(v); },
         [](const RunConfig& c) { return std::string(adapt::to_string(c.adapt.loss_variant)); }},
        {"adapt", "lambda_m1",
         [](RunConfig& c, const std::string& v) {
             c.adapt.lambda_m1 = static_cast<float>(parse_float("lambda_m1", v));
         },
         [](const RunConfig& c) { return fmt(c.adapt.lambda_m1); }},
        {"adapt", "lambda_m2",
         [](RunConfig& c, const std::string& v) {
             c.adapt.lambda_m2 = static_cast<float>(parse_float("lambda_m2", v));
         },
         [](const RunConfig& c) { return fmt(c.adapt.lambda_m2); }},
        {"adapt", "sdr_flavor",
         [](RunConfig& c, const std::string& v) { c.adapt.sdr_flavor = adapt::sdr_flavor_from_string(v); },
         [](const RunConfig& c) { return std::string(adapt::to_string(c.adapt.sdr_flavor)); }},
        {"adapt", "adaptbn_n",
         [](RunConfig& c, const std::string& v) {
             if (v == "none") {
                 c.adapt.adaptbn_n.reset();
                 return;
             }
             const auto n = parse_int("adaptbn_n", v);
             if (n < 0) throw ConfigError("adaptbn_n must be >= 0");
             c.adapt.adaptbn_n = static_cast<int>(n);
         },
         [](const RunConfig& c) {
             return c.adapt.adaptbn_n ? std::to_string(*c.adapt.adaptbn_n) : std::string("none");
         }},
        {"adapt", "batch_size",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("batch_size", v);
             if (n < 1) throw ConfigError("batch_size must be >= 1");
             c.adapt.batch_size = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.adapt.batch_size); }},

        // [stream]
        {"stream", "kinds",
         [](RunConfig& c, const std::string& v) {
             std::vector<stream::Corruption> kinds;
             std::stringstream ss(v);
             std::string item;
             while (std::getline(ss, item, ','))
                 if (!item.empty()) kinds.push_back(stream::corruption_from_string(item));
             if (kinds.empty()) throw ConfigError("kinds must name at least one corruption");
             c.kinds = std::move(kinds);
         },
         [](const RunConfig& c) {
             std::string s;
             for (std::size_t i = 0; i < c.kinds.size(); ++i)
                 s += std::string(i ? "," : "") + stream::to_string(c.kinds[i]);
             return s;
         }},
        {"stream", "severity",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("severity", v);
             if (n < 0 || n > 5) throw ConfigError("severity must be in [0,5]");
             c.severity = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.severity); }},
        {"stream", "batches_per_segment",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("batches_per_segment", v);
             if (n < 1) throw ConfigError("batches_per_segment must be >= 1");
             c.batches_per_segment = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.batches_per_segment); }},
        {"stream", "rounds",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("rounds", v);
             if (n < 1) throw ConfigError("rounds must be >= 1");
             c.rounds = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.rounds); }},
        {"stream", "n_source_train",
         [](RunConfig& c, const std::string& v) { c.n_source_train = parse_int("n_source_train", v); },
         [](const RunConfig& c) { return std::to_string(c.n_source_train); }},
        {"stream", "n_source_test",
         [](RunConfig& c, const std::string& v) { c.n_source_test = parse_int("n_source_test", v); },
         [](const RunConfig& c) { return std::to_string(c.n_source_test); }},
        {"stream", "n_target_pool",
         [](RunConfig& c, const std::string& v) { c.n_target_pool = parse_int("n_target_pool", v); },
         [](const RunConfig& c) { return std::to_string(c.n_target_pool); }},
        {"stream", "pretrain_epochs",
         [](RunConfig& c, const std::string& v) {
             const auto n = parse_int("pretrain_epochs", v);
             if (n < 0) throw ConfigError("pretrain_epochs must be >= 0");
             c.pretrain_epochs = static_cast<int>(n);
         },
         [](const RunConfig& c) { return std::to_string(c.pretrain_epochs); }},
        {"stream", "pretrain_lr",
         [](RunConfig& c, const std::string& v) {
             c.pretrain_lr = static_cast<float>(parse_float("pretrain_lr", v));
         },
         [](const RunConfig& c) { return fmt(c.pretrain_lr); }},
    };
    return keys;
}

void RunConfig::validate() const {
    adapt.validate();
    if (n_source_train < 2 || n_source_test < 1 || n_target_pool < 1)
        throw ConfigError("dataset sizes must be positive");
}

void apply_key(RunConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : config_keys())
        if (key == k.key) {
            k.apply(cfg, value);
            return;
        }
    throw ConfigError("unknown key '" + key + "'");
}

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace

RunConfig parse_config(const std::string& text, RunConfig base) {
    RunConfig cfg = std::move(base);
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::string section;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']')
                throw ConfigError("line " + std::to_string(lineno) + ": malformed section header");
            section = trim(t.substr(1, t.size() - 2));
            if (section != "run" && section != "adapt" && section != "stream")
                throw ConfigError("line " + std::to_string(lineno) + ": unknown section '" + section + "'");
            continue;
        }
        const auto eq = t.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
        const std::string key = trim(t.substr(0, eq));
        const std::string value = trim(t.substr(eq + 1));
        try {
            apply_key(cfg, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    cfg.validate();
    return cfg;
}

RunConfig parse_config_file(const std::string& path, RunConfig base) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), std::move(base));
}

std::string config_echo_json(const RunConfig& cfg) {
    nlohmann::ordered_json j;
    for (const auto& k : config_keys()) j[std::string(k.section) + "." + k.key] = k.echo(cfg);
    return j.dump(2);
}

}  // namespace ecotta::cli
