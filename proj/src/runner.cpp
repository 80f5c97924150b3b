#include "ecotta/runner.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "ecotta/checkpoint.hpp"
#include "ecotta/errors.hpp"
#include "ecotta/memledger.hpp"

namespace ecotta::cli {

namespace fs = std::filesystem;

namespace {

stream::Dataset source_train_set(const RunConfig& cfg) {
    return stream::gen_source(detail::splitmix64(cfg.seed ^ kTagSourceTrain), cfg.n_source_train,
                              cfg.classes);
}

stream::Dataset source_test_set(const RunConfig& cfg) {
    return stream::gen_source(detail::splitmix64(cfg.seed ^ kTagSourceTest), cfg.n_source_test,
                              cfg.classes);
}

stream::Dataset target_pool_set(const RunConfig& cfg) {
    return stream::gen_source(detail::splitmix64(cfg.seed ^ kTagTargetPool), cfg.n_target_pool,
                              cfg.classes);
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << content;
}

double batch_error(const TensorF& logits, const std::vector<std::int64_t>& labels) {
    auto pred = argmax_rows(logits);
    std::int64_t wrong = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
        if (pred[i] != labels[i]) ++wrong;
    return static_cast<double>(wrong) / static_cast<double>(labels.size());
}

std::size_t model_param_bytes(net::EcoModel& eco) {
    std::size_t n = 0;
    for (auto& p : eco.base.parameters()) n += static_cast<std::size_t>(p.numel());
    for (auto& p : eco.meta_parameters()) n += static_cast<std::size_t>(p.numel());
    return n * sizeof(float);
}

}  // namespace

//==========================================================================
// warmup
//==========================================================================

void run_warmup(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    auto train = source_train_set(cfg);
    auto test = source_test_set(cfg);

    auto model = net::build_mini_encoder(cfg.seed, cfg.classes);
    adapt::pretrain_source(model, train, cfg.pretrain_epochs, cfg.pretrain_lr, cfg.adapt.batch_size,
                           cfg.seed);
    const double source_err = adapt::evaluate(model, test);

    auto plan = net::plan_partition(model.spec, cfg.k);
    auto eco = net::attach_meta(std::move(model), plan, cfg.variant, cfg.kernel);
    adapt::calibrate_identity(eco, train, cfg.adapt.batch_size);
    adapt::warmup(eco, train, cfg.adapt, cfg.seed);
    const double warm_err = adapt::evaluate(eco, test);

    ckpt::save_checkpoint(eco, cfg.checkpoint);

    nlohmann::ordered_json j;
    j["source_clean_error"] = source_err;
    j["warmup_clean_error"] = warm_err;
    j["checkpoint"] = cfg.checkpoint;
    j["seed"] = cfg.seed;
    j["config"] = nlohmann::ordered_json::parse(config_echo_json(cfg));
    write_file((fs::path(cfg.out_dir) / "warmup_summary.json").string(), j.dump(2) + "\n");
}

//==========================================================================
// adaptation scenarios
//==========================================================================

ScenarioResult run_scenario(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);

    if (!fs::exists(cfg.checkpoint))
        throw DataError("checkpoint '" + cfg.checkpoint +
                        "' not found; create it first with: ecotta warmup --checkpoint " +
                        cfg.checkpoint);
    auto eco = ckpt::load_checkpoint(cfg.checkpoint);
    if (eco.base.spec.classes != cfg.classes)
        throw ConfigError("checkpoint was built for " + std::to_string(eco.base.spec.classes) +
                          " classes, config says " + std::to_string(cfg.classes));

    auto clean_test = source_test_set(cfg);
    auto target_pool = target_pool_set(cfg);

    adapt::AdaptConfig acfg = cfg.adapt;
    stream::ScheduleMode mode = stream::ScheduleMode::Continual;
    bool probe_each_segment = false;
    switch (cfg.scenario) {
        case Scenario::Continual: break;
        case Scenario::LongTerm: mode = stream::ScheduleMode::LongTerm; break;
        case Scenario::Gradual: mode = stream::ScheduleMode::Gradual; break;
        case Scenario::Forgetting: probe_each_segment = true; break;
        case Scenario::SmallBatch: acfg.batch_size = 1; break;
        default: throw ConfigError("run_scenario: scenario must be an adaptation scenario");
    }
    auto schedule = stream::make_schedule(mode, cfg.kinds, cfg.severity, cfg.batches_per_segment,
                                          cfg.rounds);
    stream::StreamIterator it(schedule, target_pool, acfg.batch_size, cfg.seed);

    if (cfg.method == Method::Tent) eco.base.set_bn_affine_trainable();

    auto probe = [&]() -> double {
        switch (cfg.method) {
            case Method::EcoTta: return adapt::clean_probe(eco, clean_test);
            default: return adapt::clean_probe(eco.base, clean_test);
        }
    };
    const double warmup_clean_error = probe();

    struct SegmentAccum {
        double err = 0, ent = 0, reg = 0, kept = 0;
        std::size_t act = 0;
        int batches = 0;
    };
    std::vector<SegmentAccum> acc(schedule.segments.size());
    std::vector<double> clean_errors(schedule.segments.size(), -1.0);

    const float tent_h0 = std::numeric_limits<float>::infinity();
    std::size_t peak_act = 0;
    int prev_segment = 0;
    while (auto b = it.next()) {
        // clean probes are side-effect free, so interleaving them leaves the
        // adaptation trajectory unchanged
        if (probe_each_segment && b->segment_index != prev_segment) {
            clean_errors[static_cast<std::size_t>(prev_segment)] = probe();
            prev_segment = b->segment_index;
        }
        TensorF logits;
        adapt::StepMetrics m;
        switch (cfg.method) {
            case Method::Source:
                logits = net::forward_source(eco.base, b->images);
                break;
            case Method::BnStats:
                logits = adapt::baseline_bnstats(eco.base, b->images);
                break;
            case Method::Tent: {
                auto r = adapt::baseline_tent_step(eco.base, b->images, acfg.tta_lr, tent_h0);
                logits = r.logits;
                m = r.metrics;
                break;
            }
            case Method::EcoTta: {
                auto r = adapt::tta_step(eco, b->images, acfg);
                logits = r.logits;
                m = r.metrics;
                break;
            }
        }
        auto& a = acc[static_cast<std::size_t>(b->segment_index)];
        a.err += batch_error(logits, b->labels);
        a.ent += m.ent;
        a.reg += m.reg.empty() ? 0.0 : static_cast<double>(m.reg_sum()) / static_cast<double>(m.reg.size());
        a.kept += static_cast<double>(m.n_kept);
        a.act = std::max(a.act, m.act_bytes);
        peak_act = std::max(peak_act, m.act_bytes);
        ++a.batches;
    }
    if (probe_each_segment) clean_errors[static_cast<std::size_t>(prev_segment)] = probe();

    // results.csv
    std::string csv = "segment_index,corruption,severity,method,error,ent_loss,mean_R,n_kept,act_bytes,"
                      "clean_error\n";
    double mean_error = 0;
    char line[320];
    for (std::size_t s = 0; s < schedule.segments.size(); ++s) {
        const auto& seg = schedule.segments[s];
        const auto& a = acc[s];
        const int n = std::max(a.batches, 1);
        const double err = a.err / n;
        mean_error += err;
        std::string clean = probe_each_segment
                                ? (std::snprintf(line, sizeof(line), "%.6f", clean_errors[s]), std::string(line))
                                : std::string();
        std::snprintf(line, sizeof(line), "%zu,%s,%d,%s,%.6f,%.6f,%.6f,%.2f,%zu,%s\n", s,
                      stream::to_string(seg.kind), seg.severity, to_string(cfg.method), err, a.ent / n,
                      a.reg / n, a.kept / n, a.act, clean.c_str());
        csv += line;
    }
    mean_error /= static_cast<double>(schedule.segments.size());

    ScenarioResult out;
    out.mean_error = mean_error;
    out.results_csv = (fs::path(cfg.out_dir) / "results.csv").string();
    out.summary_json = (fs::path(cfg.out_dir) / "summary.json").string();
    write_file(out.results_csv, csv);

    nlohmann::ordered_json j;
    j["mean_error"] = mean_error;
    j["warmup_clean_error"] = warmup_clean_error;
    if (probe_each_segment) j["final_clean_error"] = clean_errors.back();
    j["peak_memory_bytes"] = model_param_bytes(eco) + peak_act;
    j["peak_activation_bytes"] = peak_act;
    j["segments"] = schedule.segments.size();
    j["seed"] = cfg.seed;
    j["config"] = nlohmann::ordered_json::parse(config_echo_json(cfg));
    write_file(out.summary_json, j.dump(2) + "\n");
    return out;
}

void run_memreport(const RunConfig& cfg) {
    fs::create_directories(cfg.out_dir);
    write_file((fs::path(cfg.out_dir) / "memreport.csv").string(),
               mem::memory_report_csv(cfg.adapt.batch_size));
}

void run_eval(const RunConfig& cfg) {
    if (!fs::exists(cfg.checkpoint))
        throw DataError("checkpoint '" + cfg.checkpoint +
                        "' not found; create it first with: ecotta warmup --checkpoint " +
                        cfg.checkpoint);
    auto eco = ckpt::load_checkpoint(cfg.checkpoint);
    auto test = source_test_set(cfg);
    nlohmann::ordered_json j;
    j["source_clean_error"] = adapt::evaluate(eco.base, test);
    j["eco_clean_error"] = adapt::evaluate(eco, test);
    j["seed"] = cfg.seed;
    std::printf("%s\n", j.dump(2).c_str());
}

int run(const RunConfig& cfg) {
    switch (cfg.scenario) {
        case Scenario::Warmup: run_warmup(cfg); return 0;
        case Scenario::Memreport: run_memreport(cfg); return 0;
        default: run_scenario(cfg); return 0;
    }
}

}  // namespace ecotta::cli
