#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <vector>

#include "ecotta/net.hpp"
#include "ecotta/stream.hpp"

namespace ecotta::adapt {

enum class LossVariant { EntMin, EntMinMeanMax, Filtered };  // L1 / L2 / L3
enum class SdrFlavor { L1, Mse };

const char* to_string(LossVariant v);
LossVariant loss_variant_from_string(const std::string& s);
const char* to_string(SdrFlavor f);
SdrFlavor sdr_flavor_from_string(const std::string& s);

struct AdaptConfig {
    float lambda = 0.5f;
    float warmup_lr = 5e-2f;
    float tta_lr = 5e-3f;
    int warmup_epochs = 10;
    float h0_factor = 0.4f;
    LossVariant loss_variant = LossVariant::Filtered;
    float lambda_m1 = 0.2f;
    float lambda_m2 = 0.25f;
    SdrFlavor sdr_flavor = SdrFlavor::L1;
    std::optional<int> adaptbn_n;  // statistic mixing disabled unless set
    int batch_size = 64;

    void validate() const;
};

struct StepMetrics {
    float total = 0.0f;
    float ent = 0.0f;
    std::vector<float> reg;  // R_1..R_K
    std::int64_t n_kept = 0;
    float batch_error = -1.0f;  // filled by the caller holding the labels
    std::size_t act_bytes = 0;

    float reg_sum() const {
        float s = 0;
        for (float r : reg) s += r;
        return s;
    }
};

struct StepResult {
    StepMetrics metrics;
    TensorF logits;  // predictions made before the update
};

// H0 = h0_factor * ln(classes)
float entropy_threshold(float h0_factor, int classes);

//==========================================================================
// losses
//==========================================================================

// L3: mean over the full batch of 1[H < h0] * H.
FilteredLoss<float> entropy_filter_loss(const TensorF& logits, float h0);
// L1: mean per-sample entropy.
TensorF loss_entmin(const TensorF& logits);
// L2: m1 * L1 - m2 * H(mean softmax).
TensorF loss_entmin_meanmax(const TensorF& logits, float lambda_m1, float lambda_m2);
// R_k: mean |x~ - x| or mean (x~ - x)^2; x is a constant target.
TensorF sdr_loss(const TensorF& xt, const TensorF& x, SdrFlavor flavor);

struct ChannelStats {
    Buffer<float> mean;
    Buffer<float> var;
};

// AdaptBN statistic mixing with pseudo-count n against batch size b.
ChannelStats adaptbn_stats(const ChannelStats& source, const ChannelStats& batch, int n, std::int64_t b);

//==========================================================================
// training engines
//==========================================================================

// Supervised training of the whole encoder on source data; this is what
// produces the "pretrained model" the adaptation methods start from.
void pretrain_source(net::MiniEncoder& model, const stream::Dataset& train, int epochs, float lr,
                     int batch_size, std::uint64_t seed);

// Warm-start initialization of the meta BN layers: running statistics are
// measured on source data through the frozen network, and the affine is set
// to absorb them, so the groups start as an exact identity in eval mode and
// a near-identity under batch statistics.
void calibrate_identity(net::EcoModel& eco, const stream::Dataset& source, int batch_size = 64,
                        std::int64_t max_samples = 512);

// Supervised warm-up of the meta networks on source data with stochastic
// transforms (channel jitter p=0.4, 3x3 gaussian blur p=0.2, grayscale
// p=0.1). The original network stays frozen.
void warmup(net::EcoModel& eco, const stream::Dataset& source, const AdaptConfig& cfg,
            std::uint64_t seed);

// Applies the warm-up transform pipeline to a batch in place (exposed for
// tests).
void warmup_transforms(TensorF& images, Rng& rng);

// One adaptation step: forward, adaptation loss per cfg.loss_variant,
// per-group self-distilled regularization with gradient scoped to that
// group, single optimizer step on the meta parameters.
StepResult tta_step(net::EcoModel& eco, const TensorF& images, const AdaptConfig& cfg);

//==========================================================================
// baselines
//==========================================================================

// Inference with batch statistics in every BN layer; no updates.
TensorF baseline_bnstats(net::MiniEncoder& model, const TensorF& images);

// Continual-TENT-style step: entropy loss into BN affine parameters only.
// A non-finite h0 disables filtering (plain entropy). The model must have
// been set to BN-affine-only training (set_bn_affine_trainable).
StepResult baseline_tent_step(net::MiniEncoder& model, const TensorF& images, float lr, float h0);

//==========================================================================
// evaluation
//==========================================================================

double evaluate(const std::function<TensorF(const TensorF&)>& logits_fn, const stream::Dataset& ds,
                std::int64_t batch_size = 256);
double evaluate(net::MiniEncoder& model, const stream::Dataset& ds);
double evaluate(net::EcoModel& eco, const stream::Dataset& ds);

// Clean-source probe between stream segments: inference mode, updates
// nothing, leaves the adaptation trajectory untouched.
double clean_probe(net::EcoModel& eco, const stream::Dataset& clean_test);
double clean_probe(net::MiniEncoder& model, const stream::Dataset& clean_test);

}  // namespace ecotta::adapt
