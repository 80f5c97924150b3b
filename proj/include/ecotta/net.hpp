#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ecotta/ops.hpp"
#include "ecotta/rng.hpp"
#include "ecotta/tensor.hpp"

namespace ecotta::net {

//==========================================================================
// layers
//==========================================================================

struct Conv2dLayer {
    TensorF w;  // [out, in, k, k], bias-free
    std::int64_t in_ch = 0, out_ch = 0, k = 3, stride = 1, padding = 1;

    static Conv2dLayer make(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k,
                            std::int64_t stride, Rng& rng);
    TensorF forward(const TensorF& x) const { return conv2d(x, w, stride, padding); }
    Conv2dLayer clone() const;
};

struct BatchNormLayer {
    TensorF gamma, beta;
    Buffer<float> running_mean, running_var;
    float eps = 1e-5f;
    float momentum = 0.1f;

    static BatchNormLayer make(std::int64_t ch);
    // gamma chosen so the eval-mode fused scale is exactly 1: the layer maps
    // x to x bitwise until training moves it.
    static BatchNormLayer make_identity(std::int64_t ch);
    // gamma = 0: the layer outputs exactly beta (= 0) in every mode.
    static BatchNormLayer make_zero(std::int64_t ch);

    TensorF forward(const TensorF& x, const BnMode& mode) {
        return batchnorm(x, gamma, beta, running_mean, running_var, mode, eps, momentum);
    }
    BatchNormLayer clone() const;
};

struct LinearLayer {
    TensorF w, b;
    static LinearLayer make(std::int64_t in, std::int64_t out, Rng& rng);
    TensorF forward(const TensorF& x) const { return linear(x, w, b); }
    LinearLayer clone() const;
};

//==========================================================================
// encoder description
//==========================================================================

enum class BlockKind { BasicPostact, BasicPreact, Bottleneck };

struct StageSpec {
    int blocks;
    int channels;
    int stride;  // stride of the first block in the stage
};

// Abstract residual-encoder description. The mini spec is instantiated as a
// runnable network; the full-scale presets exist for the analytic memory
// model only.
struct EncoderSpec {
    std::string name;
    int in_channels = 3;
    int stem_channels = 16;
    std::vector<StageSpec> stages;
    int classes = 10;
    BlockKind block_kind = BlockKind::BasicPostact;
    int input_resolution = 32;
    int bottleneck_expansion = 4;  // Bottleneck only

    int total_blocks() const {
        int n = 0;
        for (const auto& s : stages) n += s.blocks;
        return n;
    }
    int classifier_width() const {
        int w = stages.empty() ? stem_channels : stages.back().channels;
        return block_kind == BlockKind::Bottleneck ? w * bottleneck_expansion : w;
    }

    static EncoderSpec mini(int classes);
    static EncoderSpec wrn40_2();
    static EncoderSpec wrn28(int width);
    static EncoderSpec resnet50();
};

//==========================================================================
// partition planning
//==========================================================================

struct PartitionPlan {
    int k = 1;
    std::vector<int> blocks_per_part;
};

// Returns the published plan for the known full-scale architectures and a
// shallow-dense split (non-decreasing block counts, remainder pushed toward
// the deep parts) for everything else.
PartitionPlan plan_partition(const EncoderSpec& spec, int k);

//==========================================================================
// runnable mini encoder
//==========================================================================

struct ResidualBlock {
    Conv2dLayer conv1;
    BatchNormLayer bn1;
    Conv2dLayer conv2;
    BatchNormLayer bn2;
    std::optional<Conv2dLayer> proj;
    std::optional<BatchNormLayer> proj_bn;
    std::int64_t in_ch = 0, out_ch = 0, stride = 1;

    TensorF forward(const TensorF& x, const BnMode& mode);
    ResidualBlock clone() const;
};

struct MiniEncoder {
    EncoderSpec spec;
    Conv2dLayer stem;
    BatchNormLayer stem_bn;
    std::vector<ResidualBlock> blocks;
    LinearLayer fc;

    TensorF forward(const TensorF& batch, const BnMode& mode);
    std::vector<TensorF> parameters();
    std::vector<TensorF> bn_affine_parameters();
    void set_trainable(bool trainable);
    void set_bn_affine_trainable();
    std::int64_t parameter_count();
    std::vector<BatchNormLayer*> bn_layers();
    MiniEncoder clone() const;
};

MiniEncoder build_mini_encoder(std::uint64_t seed, int classes);

// Frozen inference: eval-mode BN, no graph, no ledger entries.
TensorF forward_source(MiniEncoder& model, const TensorF& batch);

//==========================================================================
// meta networks
//==========================================================================

enum class MetaVariant { Ours, NoBn, NoConv, NoResidual, OutputFedConv };

const char* to_string(MetaVariant v);
MetaVariant meta_variant_from_string(const std::string& s);

// Conv -> BN -> ReLU, zero-initialized through its BN for variants that keep
// the residual path, so adaptation starts at the source function.
struct MetaConvBlock {
    Conv2dLayer conv;
    BatchNormLayer bn;
    TensorF forward(const TensorF& x, const BnMode& mode) { return relu(bn.forward(conv.forward(x), mode)); }
};

struct MetaGroup {
    MetaVariant variant = MetaVariant::Ours;
    std::optional<BatchNormLayer> bn_out;       // BN applied to the frozen part's output
    std::optional<MetaConvBlock> conv_block;    // block applied to the part's input
    std::int64_t in_ch = 0, out_ch = 0, stride = 1;

    // part_out = x_k, part_in = the feature the frozen part consumed.
    TensorF forward(const TensorF& part_out, const TensorF& part_in, const BnMode& mode);
    std::vector<TensorF> parameters();
    std::vector<BatchNormLayer*> bn_layers();
    MetaGroup clone() const;
};

struct EcoModel {
    MiniEncoder base;  // frozen, classifier included
    PartitionPlan plan;
    std::vector<int> part_begin;  // block index where each part starts
    std::vector<MetaGroup> groups;
    int kernel = 3;
    MetaVariant variant = MetaVariant::Ours;

    std::vector<TensorF> meta_parameters();
    std::vector<TensorF> frozen_parameters() { return base.parameters(); }
    std::vector<BatchNormLayer*> meta_bn_layers();
    EcoModel clone() const;
};

EcoModel attach_meta(MiniEncoder&& model, const PartitionPlan& plan, MetaVariant variant, int kernel);

struct NetMode {
    BnMode base = BnMode::eval();
    BnMode meta = BnMode::eval();

    static NetMode eval() { return {BnMode::eval(), BnMode::eval()}; }
    // Warm-up: frozen parts keep their source statistics, meta BN trains.
    static NetMode warmup() { return {BnMode::eval(), BnMode::train()}; }
    // Test-time adaptation: every BN normalizes with batch statistics
    // (running stats neither consulted nor updated).
    static NetMode tta() { return {BnMode::batch_stats(), BnMode::batch_stats()}; }
    static NetMode tta_adaptbn(int n) { return {BnMode::adaptbn(n), BnMode::adaptbn(n)}; }
};

struct EcoForward {
    TensorF logits;
    std::vector<std::pair<TensorF, TensorF>> pairs;  // (x_k, x~_k) per group
    std::vector<TensorF> part_inputs;                // x~_{k-1} fed to part k
};

EcoForward forward_eco(EcoModel& eco, const TensorF& batch, const NetMode& mode);

}  // namespace ecotta::net
