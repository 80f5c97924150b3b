#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ecotta/net.hpp"

namespace ecotta::mem {

enum class PolicyKind { Frozen, BnOnly, Eco, Full };

struct MemoryPolicy {
    PolicyKind kind = PolicyKind::Frozen;
    int k = 4;  // Eco only

    static MemoryPolicy frozen() { return {PolicyKind::Frozen, 0}; }
    static MemoryPolicy bn_only() { return {PolicyKind::BnOnly, 0}; }
    static MemoryPolicy eco(int k) { return {PolicyKind::Eco, k}; }
    static MemoryPolicy full() { return {PolicyKind::Full, 0}; }
    std::string name() const;
};

struct LayerDesc {
    enum class Kind { Conv, Bn, Linear };
    Kind kind;
    std::string name;
    std::int64_t input_numel_per_sample = 0;  // what a trainable layer must retain
    std::int64_t param_count = 0;
};

// Expanded layer graph for a residual-encoder description: shapes propagate
// from (input_res, in_channels) through every weight-bearing layer.
struct ArchSpec {
    net::EncoderSpec encoder;
    std::vector<LayerDesc> layers;                            // base network, in order
    std::vector<std::pair<std::int64_t, std::int64_t>> bounds;  // (channels, numel/sample) at block
                                                                // boundaries; bounds[0] = stem output
};

ArchSpec describe(const net::EncoderSpec& spec);

// Meta-network overlay for policy eco(K): the layers a meta group adds and
// their retained inputs (part input for the conv, part output for both BN).
std::vector<LayerDesc> eco_overlay(const ArchSpec& arch, const net::PartitionPlan& plan, int kernel);

// Default meta-conv kernel used by the overlays (matches the runnable model
// for "mini"; narrow backbones take 3, the wide bottleneck preset takes 1).
int default_meta_kernel(const net::EncoderSpec& spec);

struct MemoryReport {
    std::size_t param_bytes = 0;
    std::size_t act_bytes = 0;
    double param_mb = 0, act_mb = 0, total_mb = 0;  // MB = 2^20 bytes
};

// Core accounting: every listed layer stores its input for the weight
// gradient (the caller passes the trainable subset as `retained`).
MemoryReport tally(const std::vector<LayerDesc>& all_params, const std::vector<LayerDesc>& retained,
                   int batch, int bytes_per_elt = 4);

MemoryReport arch_memory(const net::EncoderSpec& spec, const MemoryPolicy& policy, int batch,
                         int bytes_per_elt = 4);

// Byte-exact cross-check of the analytic model against the executed ledger
// on the instantiable mini encoder.
bool runtime_ledger_agreement(const MemoryPolicy& policy, int batch, std::uint64_t seed = 7,
                              std::size_t* runtime_out = nullptr, std::size_t* analytic_out = nullptr);

// CSV report (arch, policy, batch, param_MB, act_MB, total_MB) over all
// presets and policies.
std::string memory_report_csv(int batch);

}  // namespace ecotta::mem
