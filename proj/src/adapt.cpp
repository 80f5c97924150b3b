#include "ecotta/adapt.hpp"

#include <cmath>
#include <limits>

#include "ecotta/errors.hpp"

namespace ecotta::adapt {

const char* to_string(LossVariant v) {
    switch (v) {
        case LossVariant::EntMin: return "L1";
        case LossVariant::EntMinMeanMax: return "L2";
        case LossVariant::Filtered: return "L3";
    }
    return "?";
}

LossVariant loss_variant_from_string(const std::string& s) {
    if (s == "L1") return LossVariant::EntMin;
    if (s == "L2") return LossVariant::EntMinMeanMax;
    if (s == "L3") return LossVariant::Filtered;
    throw ConfigError("unknown loss variant '" + s + "' (expected L1, L2 or L3)");
}

const char* to_string(SdrFlavor f) { return f == SdrFlavor::L1 ? "L1" : "MSE"; }

SdrFlavor sdr_flavor_from_string(const std::string& s) {
    if (s == "L1") return SdrFlavor::L1;
    if (s == "MSE") return SdrFlavor::Mse;
    throw ConfigError("unknown sdr flavor '" + s + "' (expected L1 or MSE)");
}

void AdaptConfig::validate() const {
    if (lambda < 0.0f) throw ConfigError("adapt: lambda must be >= 0");
    if (!(h0_factor > 0.0f && h0_factor <= 1.0f)) throw ConfigError("adapt: h0_factor must be in (0,1]");
    if (adaptbn_n && *adaptbn_n < 0) throw ConfigError("adapt: adaptbn_n must be >= 0");
    if (batch_size < 1) throw ConfigError("adapt: batch_size must be >= 1");
    if (warmup_epochs < 0) throw ConfigError("adapt: warmup_epochs must be >= 0");
}

float entropy_threshold(float h0_factor, int classes) {
    return h0_factor * std::log(static_cast<float>(classes));
}

//==========================================================================
// losses
//==========================================================================

FilteredLoss<float> entropy_filter_loss(const TensorF& logits, float h0) {
    return entropy_filtered_mean(logits, h0);
}

TensorF loss_entmin(const TensorF& logits) { return mean_elems(entropy(logits)); }

TensorF loss_entmin_meanmax(const TensorF& logits, float lambda_m1, float lambda_m2) {
    TensorF l1 = scale(mean_elems(entropy(logits)), lambda_m1);
    TensorF neg = scale(batch_mean_softmax_entropy(logits), -lambda_m2);
    return residual_add(l1, neg);
}

TensorF sdr_loss(const TensorF& xt, const TensorF& x, SdrFlavor flavor) {
    return flavor == SdrFlavor::L1 ? l1_loss(xt, x) : mse_loss(xt, x);
}

ChannelStats adaptbn_stats(const ChannelStats& source, const ChannelStats& batch, int n,
                           std::int64_t b) {
    ChannelStats out;
    mix_statistics(source.mean, source.var, batch.mean, batch.var, static_cast<std::int64_t>(n), b,
                   out.mean, out.var);
    return out;
}

//==========================================================================
// warm-up
//==========================================================================

namespace {

void blur3_inplace(float* plane, std::int64_t h, std::int64_t w, float sigma) {
    const float k1 = std::exp(-0.5f / (sigma * sigma));
    const float norm = 1.0f + 2.0f * k1;
    const float c0 = 1.0f / norm, c1 = k1 / norm;
    std::vector<float> tmp(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) {
            const std::int64_t xl = x > 0 ? x - 1 : 0, xr = x < w - 1 ? x + 1 : w - 1;
            tmp[static_cast<std::size_t>(y * w + x)] =
                c1 * plane[y * w + xl] + c0 * plane[y * w + x] + c1 * plane[y * w + xr];
        }
    for (std::int64_t y = 0; y < h; ++y) {
        const std::int64_t yu = y > 0 ? y - 1 : 0, yd = y < h - 1 ? y + 1 : h - 1;
        for (std::int64_t x = 0; x < w; ++x)
            plane[y * w + x] = c1 * tmp[static_cast<std::size_t>(yu * w + x)] +
                               c0 * tmp[static_cast<std::size_t>(y * w + x)] +
                               c1 * tmp[static_cast<std::size_t>(yd * w + x)];
    }
}

}  // namespace

void warmup_transforms(TensorF& images, Rng& rng) {
    const std::int64_t n = images.dim(0), ch = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::int64_t plane = h * w;
    for (std::int64_t i = 0; i < n; ++i) {
        float* img = images.data().data() + i * ch * plane;
        if (rng.bernoulli(0.4)) {  // channel jitter
            for (std::int64_t c = 0; c < ch; ++c) {
                const float gain = static_cast<float>(rng.uniform(0.6, 1.4));
                float* pl = img + c * plane;
                for (std::int64_t p = 0; p < plane; ++p)
                    pl[p] = std::min(1.0f, std::max(0.0f, pl[p] * gain));
            }
        }
        if (rng.bernoulli(0.2)) {  // 3x3 gaussian blur
            const float sigma = static_cast<float>(rng.uniform(0.1, 2.0));
            for (std::int64_t c = 0; c < ch; ++c) blur3_inplace(img + c * plane, h, w, sigma);
        }
        if (rng.bernoulli(0.1)) {  // grayscale = channel average
            for (std::int64_t p = 0; p < plane; ++p) {
                float m = 0;
                for (std::int64_t c = 0; c < ch; ++c) m += img[c * plane + p];
                m /= static_cast<float>(ch);
                for (std::int64_t c = 0; c < ch; ++c) img[c * plane + p] = m;
            }
        }
    }
}

namespace {

// Re-estimates BN running statistics at the final parameters. Training's
// exponential averages trail the weights they were recorded under; one
// forward-only pass with cumulative averaging (momentum 1/t) replaces them
// with the exact mean of the pass's batch statistics.
void settle_bn_stats(const std::function<void(const TensorF&)>& forward_train,
                     const std::vector<net::BatchNormLayer*>& bns, const stream::Dataset& data,
                     int batch_size) {
    NoGradGuard ng;
    std::vector<std::int64_t> order(static_cast<std::size_t>(data.size()));
    for (std::int64_t i = 0; i < data.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    int t = 0;
    for (std::int64_t off = 0; off + 1 < data.size(); off += batch_size) {
        ++t;
        for (auto* bn : bns) bn->momentum = 1.0f / static_cast<float>(t);
        const std::int64_t count = std::min<std::int64_t>(batch_size, data.size() - off);
        forward_train(stream::gather_images(data, order, off, count));
    }
    for (auto* bn : bns) bn->momentum = 0.1f;
}

}  // namespace

void pretrain_source(net::MiniEncoder& model, const stream::Dataset& train, int epochs, float lr,
                     int batch_size, std::uint64_t seed) {
    if (train.size() == 0) throw DataError("pretrain_source: empty dataset");
    auto params = model.parameters();
    Rng rng = Rng::derive(seed, {0x70726574});  // "pret"
    for (int epoch = 0; epoch < epochs; ++epoch) {
        auto order = rng.permutation(train.size());
        for (std::int64_t off = 0; off + 1 < train.size(); off += batch_size) {
            const std::int64_t count = std::min<std::int64_t>(batch_size, train.size() - off);
            TensorF images = stream::gather_images(train, order, off, count);
            auto labels = stream::gather_labels(train, order, off, count);
            ledger().begin_pass();
            TensorF logits = model.forward(images, BnMode::train());
            TensorF loss = cross_entropy(logits, labels);
            backward(loss);
            sgd_step(params, lr);
            zero_grad(params);
        }
    }
    if (epochs > 0)
        settle_bn_stats([&](const TensorF& x) { (void)model.forward(x, BnMode::train()); },
                        model.bn_layers(), train, batch_size);
}

void calibrate_identity(net::EcoModel& eco, const stream::Dataset& source, int batch_size,
                        std::int64_t max_samples) {
    if (source.size() == 0) throw DataError("calibrate_identity: empty source dataset");
    NoGradGuard ng;
    const int k = eco.plan.k;
    std::vector<Buffer<double>> sum(static_cast<std::size_t>(k)), sumsq(static_cast<std::size_t>(k));
    std::vector<std::int64_t> count(static_cast<std::size_t>(k), 0);

    const std::int64_t n = std::min<std::int64_t>(source.size(), max_samples);
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (std::int64_t off = 0; off < n; off += batch_size) {
        const std::int64_t cnt = std::min<std::int64_t>(batch_size, n - off);
        auto fwd = net::forward_eco(eco, stream::gather_images(source, order, off, cnt),
                                    net::NetMode::eval());
        for (int g = 0; g < k; ++g) {
            const auto& x = fwd.pairs[static_cast<std::size_t>(g)].first;
            const std::int64_t ch = x.dim(1), plane = x.dim(2) * x.dim(3);
            auto& s = sum[static_cast<std::size_t>(g)];
            auto& ss = sumsq[static_cast<std::size_t>(g)];
            if (s.size() == 0) {
                s = Buffer<double>::Zero(ch);
                ss = Buffer<double>::Zero(ch);
            }
            for (std::int64_t b = 0; b < cnt; ++b)
                for (std::int64_t c = 0; c < ch; ++c) {
                    auto seg = Eigen::Map<const Buffer<float>>(x.data().data() + (b * ch + c) * plane,
                                                               plane);
                    s[c] += static_cast<double>(seg.sum());
                    ss[c] += static_cast<double>(seg.square().sum());
                }
            count[static_cast<std::size_t>(g)] += cnt * plane;
        }
    }

    for (int g = 0; g < k; ++g) {
        auto& group = eco.groups[static_cast<std::size_t>(g)];
        if (!group.bn_out) continue;
        auto& bn = *group.bn_out;
        const std::int64_t ch = bn.gamma.numel();
        const double cnt = static_cast<double>(count[static_cast<std::size_t>(g)]);
        for (std::int64_t c = 0; c < ch; ++c) {
            const double mean = sum[static_cast<std::size_t>(g)][c] / cnt;
            const double var =
                std::max(0.0, sumsq[static_cast<std::size_t>(g)][c] / cnt - mean * mean);
            bn.running_mean[c] = static_cast<float>(mean);
            bn.running_var[c] = static_cast<float>(var);
            // same expression the eval path divides by: the fused scale is
            // exactly 1 and the shift exactly 0
            bn.gamma.data()[c] = std::sqrt(bn.running_var[c] + bn.eps);
            bn.beta.data()[c] = bn.running_mean[c];
        }
    }
}

void warmup(net::EcoModel& eco, const stream::Dataset& source, const AdaptConfig& cfg,
            std::uint64_t seed) {
    cfg.validate();
    if (source.size() == 0) throw DataError("warmup: empty source dataset");
    auto params = eco.meta_parameters();
    Rng rng = Rng::derive(seed, {0x7761726d});  // "warm"

    for (int epoch = 0; epoch < cfg.warmup_epochs; ++epoch) {
        auto order = rng.permutation(source.size());
        for (std::int64_t off = 0; off + 1 < source.size(); off += cfg.batch_size) {
            const std::int64_t count = std::min<std::int64_t>(cfg.batch_size, source.size() - off);
            TensorF images = stream::gather_images(source, order, off, count);
            auto labels = stream::gather_labels(source, order, off, count);
            warmup_transforms(images, rng);
            auto fwd = net::forward_eco(eco, images, net::NetMode::warmup());
            TensorF loss = cross_entropy(fwd.logits, labels);
            backward(loss);
            sgd_step(params, cfg.warmup_lr);
            zero_grad(params);
        }
    }
    // settle the meta BN statistics on untransformed source data
    if (cfg.warmup_epochs > 0)
        settle_bn_stats(
            [&](const TensorF& x) { (void)net::forward_eco(eco, x, net::NetMode::warmup()); },
            eco.meta_bn_layers(), source, cfg.batch_size);
}

//==========================================================================
// tta step
//==========================================================================

StepResult tta_step(net::EcoModel& eco, const TensorF& images, const AdaptConfig& cfg) {
    cfg.validate();
    const net::NetMode mode =
        cfg.adaptbn_n ? net::NetMode::tta_adaptbn(*cfg.adaptbn_n) : net::NetMode::tta();
    auto fwd = net::forward_eco(eco, images, mode);
    const int classes = static_cast<int>(fwd.logits.dim(1));
    const std::int64_t batch = images.dim(0);

    StepResult res;
    res.logits = fwd.logits;

    TensorF ent_loss;
    std::int64_t kept = batch;
    switch (cfg.loss_variant) {
        case LossVariant::Filtered: {
            auto fl = entropy_filter_loss(fwd.logits, entropy_threshold(cfg.h0_factor, classes));
            ent_loss = fl.loss;
            kept = fl.n_kept;
            break;
        }
        case LossVariant::EntMin:
            ent_loss = loss_entmin(fwd.logits);
            break;
        case LossVariant::EntMinMeanMax:
            ent_loss = loss_entmin_meanmax(fwd.logits, cfg.lambda_m1, cfg.lambda_m2);
            break;
    }

    TensorF total = ent_loss;
    const int k = eco.plan.k;
    res.metrics.reg.resize(static_cast<std::size_t>(k));
    if (cfg.lambda > 0.0f) {
        // Rebuild each meta group on detached copies of its inputs: R_k's
        // gradient reaches theta_k and nothing else, while the values match
        // the main chain bit for bit.
        for (int g = 0; g < k; ++g) {
            TensorF x_k = fwd.pairs[static_cast<std::size_t>(g)].first.detach();
            TensorF part_in = fwd.part_inputs[static_cast<std::size_t>(g)].detach();
            TensorF xt_reg = eco.groups[static_cast<std::size_t>(g)].forward(x_k, part_in, mode.meta);
            TensorF r = sdr_loss(xt_reg, x_k, cfg.sdr_flavor);
            res.metrics.reg[static_cast<std::size_t>(g)] = r.item();
            total = residual_add(total, scale(r, cfg.lambda));
        }
    } else {
        NoGradGuard ng;
        for (int g = 0; g < k; ++g) {
            TensorF r = sdr_loss(fwd.pairs[static_cast<std::size_t>(g)].second,
                                 fwd.pairs[static_cast<std::size_t>(g)].first, cfg.sdr_flavor);
            res.metrics.reg[static_cast<std::size_t>(g)] = r.item();
        }
    }

    res.metrics.ent = ent_loss.item();
    res.metrics.total = total.item();
    res.metrics.n_kept = kept;
    res.metrics.act_bytes = ledger_bytes();

    auto params = eco.meta_parameters();
    backward(total);
    sgd_step(params, cfg.tta_lr);
    zero_grad(params);
    return res;
}

//==========================================================================
// baselines
//==========================================================================

TensorF baseline_bnstats(net::MiniEncoder& model, const TensorF& images) {
    NoGradGuard ng;
    ledger().begin_pass();
    return model.forward(images, BnMode::batch_stats());
}

StepResult baseline_tent_step(net::MiniEncoder& model, const TensorF& images, float lr, float h0) {
    ledger().begin_pass();
    TensorF logits = model.forward(images, BnMode::batch_stats());

    StepResult res;
    res.logits = logits;
    TensorF loss;
    if (std::isfinite(h0)) {
        auto fl = entropy_filter_loss(logits, h0);
        loss = fl.loss;
        res.metrics.n_kept = fl.n_kept;
    } else {
        loss = loss_entmin(logits);
        res.metrics.n_kept = images.dim(0);
    }
    res.metrics.ent = loss.item();
    res.metrics.total = res.metrics.ent;
    res.metrics.act_bytes = ledger_bytes();

    auto params = model.bn_affine_parameters();
    backward(loss);
    sgd_step(params, lr);
    zero_grad(params);
    return res;
}

//==========================================================================
// evaluation
//==========================================================================

double evaluate(const std::function<TensorF(const TensorF&)>& logits_fn, const stream::Dataset& ds,
                std::int64_t batch_size) {
    if (ds.size() == 0) throw DataError("evaluate: empty dataset");
    NoGradGuard ng;
    std::vector<std::int64_t> order(static_cast<std::size_t>(ds.size()));
    for (std::int64_t i = 0; i < ds.size(); ++i) order[static_cast<std::size_t>(i)] = i;
    std::int64_t wrong = 0;
    for (std::int64_t off = 0; off < ds.size(); off += batch_size) {
        const std::int64_t count = std::min<std::int64_t>(batch_size, ds.size() - off);
        TensorF images = stream::gather_images(ds, order, off, count);
        auto labels = stream::gather_labels(ds, order, off, count);
        auto pred = argmax_rows(logits_fn(images));
        for (std::int64_t i = 0; i < count; ++i)
            if (pred[static_cast<std::size_t>(i)] != labels[static_cast<std::size_t>(i)]) ++wrong;
    }
    return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

double evaluate(net::MiniEncoder& model, const stream::Dataset& ds) {
    return evaluate([&](const TensorF& x) { return model.forward(x, BnMode::eval()); }, ds);
}

double evaluate(net::EcoModel& eco, const stream::Dataset& ds) {
    return evaluate(
        [&](const TensorF& x) { return net::forward_eco(eco, x, net::NetMode::eval()).logits; }, ds);
}

double clean_probe(net::EcoModel& eco, const stream::Dataset& clean_test) {
    return evaluate(eco, clean_test);
}

double clean_probe(net::MiniEncoder& model, const stream::Dataset& clean_test) {
    return evaluate(model, clean_test);
}

}  // namespace ecotta::adapt
