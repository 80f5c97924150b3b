#include "ecotta/net.hpp"

#include <cmath>

#include "ecotta/errors.hpp"

namespace ecotta::net {

//==========================================================================
// layer construction
//==========================================================================

Conv2dLayer Conv2dLayer::make(std::int64_t in_ch, std::int64_t out_ch, std::int64_t k,
                              std::int64_t stride, Rng& rng) {
    Conv2dLayer l;
    l.in_ch = in_ch;
    l.out_ch = out_ch;
    l.k = k;
    l.stride = stride;
    l.padding = (k == 3) ? 1 : 0;
    l.w = TensorF::zeros({out_ch, in_ch, k, k});
    const double bound = std::sqrt(6.0 / static_cast<double>(in_ch * k * k));  // Kaiming uniform
    for (std::int64_t i = 0; i < l.w.numel(); ++i)
        l.w.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
    l.w.set_requires_grad(true);
    return l;
}

BatchNormLayer BatchNormLayer::make(std::int64_t ch) {
    BatchNormLayer l;
    l.gamma = TensorF::full({ch}, 1.0f).set_requires_grad(true);
    l.beta = TensorF::zeros({ch}).set_requires_grad(true);
    l.running_mean = Buffer<float>::Zero(ch);
    l.running_var = Buffer<float>::Ones(ch);
    return l;
}

BatchNormLayer BatchNormLayer::make_identity(std::int64_t ch) {
    BatchNormLayer l = make(ch);
    // Same expression the eval path divides by, so scale == 1.0f exactly.
    l.gamma.data().setConstant(std::sqrt(1.0f + l.eps));
    return l;
}

BatchNormLayer BatchNormLayer::make_zero(std::int64_t ch) {
    BatchNormLayer l = make(ch);
    l.gamma.data().setZero();
    return l;
}

LinearLayer LinearLayer::make(std::int64_t in, std::int64_t out, Rng& rng) {
    LinearLayer l;
    l.w = TensorF::zeros({in, out});
    l.b = TensorF::zeros({out});
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    for (std::int64_t i = 0; i < l.w.numel(); ++i)
        l.w.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
    for (std::int64_t i = 0; i < out; ++i) l.b.data()[i] = static_cast<float>(rng.uniform(-bound, bound));
    l.w.set_requires_grad(true);
    l.b.set_requires_grad(true);
    return l;
}

//==========================================================================
// encoder presets
//==========================================================================

EncoderSpec EncoderSpec::mini(int classes) {
    EncoderSpec s;
    s.name = "mini";
    s.stem_channels = 10;
    s.stages = {{2, 10, 1}, {3, 20, 2}, {3, 40, 2}};
    s.classes = classes;
    s.block_kind = BlockKind::BasicPostact;
    return s;
}

EncoderSpec EncoderSpec::wrn40_2() {
    EncoderSpec s;
    s.name = "wrn40";
    s.stem_channels = 16;
    s.stages = {{6, 32, 1}, {6, 64, 2}, {6, 128, 2}};
    s.classes = 10;
    s.block_kind = BlockKind::BasicPreact;
    return s;
}

EncoderSpec EncoderSpec::wrn28(int width) {
    EncoderSpec s;
    s.name = "wrn28";
    s.stem_channels = 16;
    s.stages = {{4, 16 * width, 1}, {4, 32 * width, 2}, {4, 64 * width, 2}};
    s.classes = 10;
    s.block_kind = BlockKind::BasicPreact;
    return s;
}

EncoderSpec EncoderSpec::resnet50() {
    EncoderSpec s;
    s.name = "resnet50";
    s.stem_channels = 64;
    s.stages = {{3, 64, 1}, {4, 128, 2}, {6, 256, 2}, {3, 512, 2}};
    s.classes = 10;
    s.block_kind = BlockKind::Bottleneck;
    return s;
}

//==========================================================================
// partition planning
//==========================================================================

namespace {

const std::vector<int>* published_plan(const std::string& name, int k) {
    static const std::vector<int> wrn40_k4 = {3, 3, 6, 6};
    static const std::vector<int> wrn40_k5 = {3, 3, 3, 3, 6};
    static const std::vector<int> wrn28_k4 = {2, 2, 4, 4};
    static const std::vector<int> wrn28_k5 = {2, 2, 2, 2, 4};
    static const std::vector<int> rn50_k4 = {3, 3, 5, 5};
    static const std::vector<int> rn50_k5 = {2, 2, 4, 4, 4};
    if (name == "wrn40" && k == 4) return &wrn40_k4;
    if (name == "wrn40" && k == 5) return &wrn40_k5;
    if (name == "wrn28" && k == 4) return &wrn28_k4;
    if (name == "wrn28" && k == 5) return &wrn28_k5;
    if (name == "resnet50" && k == 4) return &rn50_k4;
    if (name == "resnet50" && k == 5) return &rn50_k5;
    return nullptr;
}

}  // namespace

PartitionPlan plan_partition(const EncoderSpec& spec, int k) {
    const int total = spec.total_blocks();
    if (k < 1 || k > total)
        throw ConfigError("plan_partition: K=" + std::to_string(k) + " out of range for " +
                          std::to_string(total) + " blocks");
    PartitionPlan plan;
    plan.k = k;
    if (const auto* p = published_plan(spec.name, k)) {
        plan.blocks_per_part = *p;
        return plan;
    }
    // Shallow-dense: remainder blocks go to the deep parts.
    const int base = total / k, rem = total % k;
    plan.blocks_per_part.resize(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) plan.blocks_per_part[static_cast<std::size_t>(i)] = base + (i >= k - rem ? 1 : 0);
    return plan;
}

//==========================================================================
// mini encoder
//==========================================================================

TensorF ResidualBlock::forward(const TensorF& x, const BnMode& mode) {
    TensorF h = relu(bn1.forward(conv1.forward(x), mode));
    h = bn2.forward(conv2.forward(h), mode);
    TensorF shortcut = x;
    if (proj) shortcut = proj_bn->forward(proj->forward(x), mode);
    return relu(residual_add(h, shortcut));
}

MiniEncoder build_mini_encoder(std::uint64_t seed, int classes) {
    if (classes < 2) throw ConfigError("build_mini_encoder: classes must be >= 2");
    MiniEncoder m;
    m.spec = EncoderSpec::mini(classes);
    Rng rng = Rng::derive(seed, {0x6d696e69});  // "mini"

    m.stem = Conv2dLayer::make(m.spec.in_channels, m.spec.stem_channels, 3, 1, rng);
    m.stem_bn = BatchNormLayer::make(m.spec.stem_channels);

    std::int64_t in_ch = m.spec.stem_channels;
    for (const auto& stage : m.spec.stages) {
        for (int b = 0; b < stage.blocks; ++b) {
            ResidualBlock blk;
            blk.in_ch = in_ch;
            blk.out_ch = stage.channels;
            blk.stride = (b == 0) ? stage.stride : 1;
            blk.conv1 = Conv2dLayer::make(blk.in_ch, blk.out_ch, 3, blk.stride, rng);
            blk.bn1 = BatchNormLayer::make(blk.out_ch);
            blk.conv2 = Conv2dLayer::make(blk.out_ch, blk.out_ch, 3, 1, rng);
            blk.bn2 = BatchNormLayer::make(blk.out_ch);
            if (blk.stride != 1 || blk.in_ch != blk.out_ch) {
                blk.proj = Conv2dLayer::make(blk.in_ch, blk.out_ch, 1, blk.stride, rng);
                blk.proj_bn = BatchNormLayer::make(blk.out_ch);
            }
            m.blocks.push_back(std::move(blk));
            in_ch = stage.channels;
        }
    }
    m.fc = LinearLayer::make(m.spec.classifier_width(), classes, rng);
    return m;
}

TensorF MiniEncoder::forward(const TensorF& batch, const BnMode& mode) {
    TensorF h = relu(stem_bn.forward(stem.forward(batch), mode));
    for (auto& blk : blocks) h = blk.forward(h, mode);
    return fc.forward(global_avg_pool(h));
}

std::vector<TensorF> MiniEncoder::parameters() {
    std::vector<TensorF> ps = {stem.w, stem_bn.gamma, stem_bn.beta};
    for (auto& blk : blocks) {
        ps.push_back(blk.conv1.w);
        ps.push_back(blk.bn1.gamma);
        ps.push_back(blk.bn1.beta);
        ps.push_back(blk.conv2.w);
        ps.push_back(blk.bn2.gamma);
        ps.push_back(blk.bn2.beta);
        if (blk.proj) {
            ps.push_back(blk.proj->w);
            ps.push_back(blk.proj_bn->gamma);
            ps.push_back(blk.proj_bn->beta);
        }
    }
    ps.push_back(fc.w);
    ps.push_back(fc.b);
    return ps;
}

std::vector<TensorF> MiniEncoder::bn_affine_parameters() {
    std::vector<TensorF> ps = {stem_bn.gamma, stem_bn.beta};
    for (auto& blk : blocks) {
        ps.push_back(blk.bn1.gamma);
        ps.push_back(blk.bn1.beta);
        ps.push_back(blk.bn2.gamma);
        ps.push_back(blk.bn2.beta);
        if (blk.proj_bn) {
            ps.push_back(blk.proj_bn->gamma);
            ps.push_back(blk.proj_bn->beta);
        }
    }
    return ps;
}

void MiniEncoder::set_trainable(bool trainable) {
    for (auto& p : parameters()) p.set_requires_grad(trainable);
}

void MiniEncoder::set_bn_affine_trainable() {
    set_trainable(false);
    for (auto& p : bn_affine_parameters()) p.set_requires_grad(true);
}

std::vector<BatchNormLayer*> MiniEncoder::bn_layers() {
    std::vector<BatchNormLayer*> out = {&stem_bn};
    for (auto& blk : blocks) {
        out.push_back(&blk.bn1);
        out.push_back(&blk.bn2);
        if (blk.proj_bn) out.push_back(&*blk.proj_bn);
    }
    return out;
}

std::int64_t MiniEncoder::parameter_count() {
    std::int64_t n = 0;
    for (auto& p : parameters()) n += p.numel();
    return n;
}

TensorF forward_source(MiniEncoder& model, const TensorF& batch) {
    NoGradGuard ng;
    ledger().begin_pass();
    return model.forward(batch, BnMode::eval());
}

//==========================================================================
// deep copies
//==========================================================================

namespace {

TensorF deep_copy(const TensorF& t) {
    TensorF c = t.clone();
    c.set_requires_grad(t.requires_grad());
    return c;
}

}  // namespace

Conv2dLayer Conv2dLayer::clone() const {
    Conv2dLayer c = *this;
    c.w = deep_copy(w);
    return c;
}

BatchNormLayer BatchNormLayer::clone() const {
    BatchNormLayer c = *this;  // running buffers copy by value
    c.gamma = deep_copy(gamma);
    c.beta = deep_copy(beta);
    return c;
}

LinearLayer LinearLayer::clone() const {
    LinearLayer c;
    c.w = deep_copy(w);
    c.b = deep_copy(b);
    return c;
}

ResidualBlock ResidualBlock::clone() const {
    ResidualBlock c = *this;
    c.conv1 = conv1.clone();
    c.bn1 = bn1.clone();
    c.conv2 = conv2.clone();
    c.bn2 = bn2.clone();
    if (proj) c.proj = proj->clone();
    if (proj_bn) c.proj_bn = proj_bn->clone();
    return c;
}

MiniEncoder MiniEncoder::clone() const {
    MiniEncoder c;
    c.spec = spec;
    c.stem = stem.clone();
    c.stem_bn = stem_bn.clone();
    for (const auto& blk : blocks) c.blocks.push_back(blk.clone());
    c.fc = fc.clone();
    return c;
}

MetaGroup MetaGroup::clone() const {
    MetaGroup c = *this;
    if (bn_out) c.bn_out = bn_out->clone();
    if (conv_block) {
        c.conv_block->conv = conv_block->conv.clone();
        c.conv_block->bn = conv_block->bn.clone();
    }
    return c;
}

EcoModel EcoModel::clone() const {
    EcoModel c;
    c.base = base.clone();
    c.plan = plan;
    c.part_begin = part_begin;
    c.kernel = kernel;
    c.variant = variant;
    for (const auto& g : groups) c.groups.push_back(g.clone());
    return c;
}

//==========================================================================
// meta networks
//==========================================================================

const char* to_string(MetaVariant v) {
    switch (v) {
        case MetaVariant::Ours: return "ours";
        case MetaVariant::NoBn: return "no_bn";
        case MetaVariant::NoConv: return "no_conv";
        case MetaVariant::NoResidual: return "no_residual";
        case MetaVariant::OutputFedConv: return "output_fed_conv";
    }
    return "?";
}

MetaVariant meta_variant_from_string(const std::string& s) {
    if (s == "ours") return MetaVariant::Ours;
    if (s == "no_bn") return MetaVariant::NoBn;
    if (s == "no_conv") return MetaVariant::NoConv;
    if (s == "no_residual") return MetaVariant::NoResidual;
    if (s == "output_fed_conv") return MetaVariant::OutputFedConv;
    throw ConfigError("unknown meta variant '" + s + "'");
}

TensorF MetaGroup::forward(const TensorF& part_out, const TensorF& part_in, const BnMode& mode) {
    switch (variant) {
        case MetaVariant::Ours:
            return residual_add(bn_out->forward(part_out, mode), conv_block->forward(part_in, mode));
        case MetaVariant::NoBn:
            return residual_add(part_out, conv_block->forward(part_in, mode));
        case MetaVariant::NoConv:
            return bn_out->forward(part_out, mode);
        case MetaVariant::NoResidual:
            return conv_block->forward(part_in, mode);
        case MetaVariant::OutputFedConv:
            return residual_add(bn_out->forward(part_out, mode), conv_block->forward(part_out, mode));
    }
    throw ConfigError("meta group: bad variant");
}

std::vector<TensorF> MetaGroup::parameters() {
    std::vector<TensorF> ps;
    if (bn_out) {
        ps.push_back(bn_out->gamma);
        ps.push_back(bn_out->beta);
    }
    if (conv_block) {
        ps.push_back(conv_block->conv.w);
        ps.push_back(conv_block->bn.gamma);
        ps.push_back(conv_block->bn.beta);
    }
    return ps;
}

std::vector<BatchNormLayer*> MetaGroup::bn_layers() {
    std::vector<BatchNormLayer*> out;
    if (bn_out) out.push_back(&*bn_out);
    if (conv_block) out.push_back(&conv_block->bn);
    return out;
}

std::vector<BatchNormLayer*> EcoModel::meta_bn_layers() {
    std::vector<BatchNormLayer*> out;
    for (auto& g : groups)
        for (auto* bn : g.bn_layers()) out.push_back(bn);
    return out;
}

std::vector<TensorF> EcoModel::meta_parameters() {
    std::vector<TensorF> ps;
    for (auto& g : groups)
        for (auto& p : g.parameters()) ps.push_back(p);
    return ps;
}

EcoModel attach_meta(MiniEncoder&& model, const PartitionPlan& plan, MetaVariant variant, int kernel) {
    if (kernel != 1 && kernel != 3)
        throw ConfigError("attach_meta: kernel must be 1 or 3, got " + std::to_string(kernel));
    const int total = model.spec.total_blocks();
    int sum = 0;
    for (int b : plan.blocks_per_part) {
        if (b < 1) throw ConfigError("attach_meta: every part needs at least one block");
        sum += b;
    }
    if (sum != total || static_cast<int>(plan.blocks_per_part.size()) != plan.k)
        throw ConfigError("attach_meta: plan covers " + std::to_string(sum) + " blocks, model has " +
                          std::to_string(total));

    EcoModel eco;
    eco.base = std::move(model);
    eco.plan = plan;
    eco.kernel = kernel;
    eco.variant = variant;
    eco.base.set_trainable(false);

    Rng rng = Rng::derive(0x6d657461, {static_cast<std::uint64_t>(plan.k), static_cast<std::uint64_t>(kernel)});
    int begin = 0;
    for (int part = 0; part < plan.k; ++part) {
        const int count = plan.blocks_per_part[static_cast<std::size_t>(part)];
        eco.part_begin.push_back(begin);

        MetaGroup g;
        g.variant = variant;
        g.in_ch = eco.base.blocks[static_cast<std::size_t>(begin)].in_ch;
        g.out_ch = eco.base.blocks[static_cast<std::size_t>(begin + count - 1)].out_ch;
        g.stride = 1;
        for (int b = begin; b < begin + count; ++b)
            g.stride *= eco.base.blocks[static_cast<std::size_t>(b)].stride;

        const bool wants_bn = variant != MetaVariant::NoBn;
        const bool wants_conv = variant != MetaVariant::NoConv;
        if (wants_bn) g.bn_out = BatchNormLayer::make_identity(g.out_ch);
        if (wants_conv) {
            MetaConvBlock cb;
            if (variant == MetaVariant::OutputFedConv) {
                cb.conv = Conv2dLayer::make(g.out_ch, g.out_ch, kernel, 1, rng);
            } else {
                cb.conv = Conv2dLayer::make(g.in_ch, g.out_ch, kernel, g.stride, rng);
            }
            // Zero output through the block BN keeps the source function at
            // the start; no_residual has no identity path to preserve.
            cb.bn = (variant == MetaVariant::NoResidual) ? BatchNormLayer::make(g.out_ch)
                                                         : BatchNormLayer::make_zero(g.out_ch);
            g.conv_block = std::move(cb);
        }
        for (auto& p : g.parameters()) p.set_requires_grad(true);
        eco.groups.push_back(std::move(g));
        begin += count;
    }
    return eco;
}

EcoForward forward_eco(EcoModel& eco, const TensorF& batch, const NetMode& mode) {
    ledger().begin_pass();
    EcoForward out;
    TensorF h = relu(eco.base.stem_bn.forward(eco.base.stem.forward(batch), mode.base));
    for (int part = 0; part < eco.plan.k; ++part) {
        const int begin = eco.part_begin[static_cast<std::size_t>(part)];
        const int count = eco.plan.blocks_per_part[static_cast<std::size_t>(part)];
        out.part_inputs.push_back(h);
        TensorF x = h;
        for (int b = begin; b < begin + count; ++b)
            x = eco.base.blocks[static_cast<std::size_t>(b)].forward(x, mode.base);
        TensorF xt = eco.groups[static_cast<std::size_t>(part)].forward(x, h, mode.meta);
        out.pairs.emplace_back(x, xt);
        h = xt;
    }
    out.logits = eco.base.fc.forward(global_avg_pool(h));
    return out;
}

}  // namespace ecotta::net
