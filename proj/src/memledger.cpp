#include "ecotta/memledger.hpp"

#include <sstream>

#include "ecotta/errors.hpp"

namespace ecotta::mem {

std::string MemoryPolicy::name() const {
    switch (kind) {
        case PolicyKind::Frozen: return "frozen";
        case PolicyKind::BnOnly: return "bn_only";
        case PolicyKind::Eco: return "eco" + std::to_string(k);
        case PolicyKind::Full: return "full";
    }
    return "?";
}

namespace {

using net::BlockKind;

void push_conv(ArchSpec& a, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
               std::int64_t k, std::int64_t res_in) {
    a.layers.push_back({LayerDesc::Kind::Conv, name, in_ch * res_in * res_in, k * k * in_ch * out_ch});
}

void push_bn(ArchSpec& a, const std::string& name, std::int64_t ch, std::int64_t res) {
    a.layers.push_back({LayerDesc::Kind::Bn, name, ch * res * res, 2 * ch});
}

}  // namespace

ArchSpec describe(const net::EncoderSpec& spec) {
    ArchSpec a;
    a.encoder = spec;
    std::int64_t res = spec.input_resolution;
    std::int64_t ch = spec.stem_channels;

    push_conv(a, "stem.conv", spec.in_channels, ch, 3, res);
    if (spec.block_kind != BlockKind::BasicPreact) push_bn(a, "stem.bn", ch, res);
    a.bounds.emplace_back(ch, ch * res * res);

    int bi = 0;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
        const auto& stage = spec.stages[s];
        for (int b = 0; b < stage.blocks; ++b, ++bi) {
            const std::int64_t stride = (b == 0) ? stage.stride : 1;
            const std::int64_t out_res = res / stride;
            const std::string p = "block" + std::to_string(bi) + ".";
            const std::int64_t out_ch = (spec.block_kind == BlockKind::Bottleneck)
                                            ? stage.channels * spec.bottleneck_expansion
                                            : stage.channels;
            const bool projected = stride != 1 || ch != out_ch;
            switch (spec.block_kind) {
                case BlockKind::BasicPostact:
                    push_conv(a, p + "conv1", ch, out_ch, 3, res);
                    push_bn(a, p + "bn1", out_ch, out_res);
                    push_conv(a, p + "conv2", out_ch, out_ch, 3, out_res);
                    push_bn(a, p + "bn2", out_ch, out_res);
                    if (projected) {
                        push_conv(a, p + "proj", ch, out_ch, 1, res);
                        push_bn(a, p + "proj_bn", out_ch, out_res);
                    }
                    break;
                case BlockKind::BasicPreact:
                    push_bn(a, p + "bn1", ch, res);
                    push_conv(a, p + "conv1", ch, out_ch, 3, res);
                    push_bn(a, p + "bn2", out_ch, out_res);
                    push_conv(a, p + "conv2", out_ch, out_ch, 3, out_res);
                    if (projected) push_conv(a, p + "proj", ch, out_ch, 1, res);  // no BN in WRN shortcut
                    break;
                case BlockKind::Bottleneck: {
                    const std::int64_t width = stage.channels;
                    push_conv(a, p + "conv1", ch, width, 1, res);
                    push_bn(a, p + "bn1", width, res);
                    push_conv(a, p + "conv2", width, width, 3, res);
                    push_bn(a, p + "bn2", width, out_res);
                    push_conv(a, p + "conv3", width, out_ch, 1, out_res);
                    push_bn(a, p + "bn3", out_ch, out_res);
                    if (projected) {
                        push_conv(a, p + "proj", ch, out_ch, 1, res);
                        push_bn(a, p + "proj_bn", out_ch, out_res);
                    }
                    break;
                }
            }
            ch = out_ch;
            res = out_res;
            a.bounds.emplace_back(ch, ch * res * res);
        }
    }
    if (spec.block_kind == BlockKind::BasicPreact) push_bn(a, "final_bn", ch, res);
    a.layers.push_back({LayerDesc::Kind::Linear, "fc", ch,
                        ch * spec.classes + spec.classes});
    return a;
}

int default_meta_kernel(const net::EncoderSpec& spec) {
    return spec.block_kind == BlockKind::Bottleneck ? 1 : 3;
}

std::vector<LayerDesc> eco_overlay(const ArchSpec& arch, const net::PartitionPlan& plan, int kernel) {
    std::vector<LayerDesc> overlay;
    int begin = 0;
    for (int part = 0; part < plan.k; ++part) {
        const int count = plan.blocks_per_part[static_cast<std::size_t>(part)];
        const auto [in_ch, in_numel] = arch.bounds[static_cast<std::size_t>(begin)];
        const auto [out_ch, out_numel] = arch.bounds[static_cast<std::size_t>(begin + count)];
        const std::string p = "meta" + std::to_string(part) + ".";
        overlay.push_back({LayerDesc::Kind::Bn, p + "bn_out", out_numel, 2 * out_ch});
        overlay.push_back(
            {LayerDesc::Kind::Conv, p + "conv", in_numel, kernel * kernel * in_ch * out_ch});
        overlay.push_back({LayerDesc::Kind::Bn, p + "conv_bn", out_numel, 2 * out_ch});
        begin += count;
    }
    return overlay;
}

MemoryReport tally(const std::vector<LayerDesc>& all_params, const std::vector<LayerDesc>& retained,
                   int batch, int bytes_per_elt) {
    if (batch < 1) throw ConfigError("tally: batch must be >= 1");
    std::int64_t param_elems = 0, act_elems_per_sample = 0;
    for (const auto& l : all_params) param_elems += l.param_count;
    for (const auto& l : retained) act_elems_per_sample += l.input_numel_per_sample;

    MemoryReport r;
    r.param_bytes = static_cast<std::size_t>(param_elems) * static_cast<std::size_t>(bytes_per_elt);
    r.act_bytes = static_cast<std::size_t>(act_elems_per_sample) * static_cast<std::size_t>(batch) *
                  static_cast<std::size_t>(bytes_per_elt);
    const double mb = 1024.0 * 1024.0;
    r.param_mb = static_cast<double>(r.param_bytes) / mb;
    r.act_mb = static_cast<double>(r.act_bytes) / mb;
    r.total_mb = r.param_mb + r.act_mb;
    return r;
}

MemoryReport arch_memory(const net::EncoderSpec& spec, const MemoryPolicy& policy, int batch,
                         int bytes_per_elt) {
    ArchSpec arch = describe(spec);

    std::vector<LayerDesc> params = arch.layers;
    std::vector<LayerDesc> retained;
    switch (policy.kind) {
        case PolicyKind::Frozen:
            break;
        case PolicyKind::BnOnly:
            for (const auto& l : arch.layers)
                if (l.kind == LayerDesc::Kind::Bn) retained.push_back(l);
            break;
        case PolicyKind::Full:
            retained = arch.layers;
            break;
        case PolicyKind::Eco: {
            auto plan = net::plan_partition(spec, policy.k);
            auto overlay = eco_overlay(arch, plan, default_meta_kernel(spec));
            for (const auto& l : overlay) {
                params.push_back(l);
                retained.push_back(l);
            }
            break;
        }
    }
    return tally(params, retained, batch, bytes_per_elt);
}

bool runtime_ledger_agreement(const MemoryPolicy& policy, int batch, std::uint64_t seed,
                              std::size_t* runtime_out, std::size_t* analytic_out) {
    const auto spec = net::EncoderSpec::mini(10);
    const auto analytic = arch_memory(spec, policy, batch);

    TensorF images = TensorF::zeros({batch, 3, 32, 32});
    Rng rng = Rng::derive(seed, {0x696d6773});
    for (std::int64_t i = 0; i < images.numel(); ++i)
        images.data()[i] = static_cast<float>(rng.uniform());

    std::size_t runtime = 0;
    if (policy.kind == PolicyKind::Eco) {
        auto model = net::build_mini_encoder(seed, 10);
        auto eco = net::attach_meta(std::move(model), net::plan_partition(spec, policy.k),
                                    net::MetaVariant::Ours, default_meta_kernel(spec));
        (void)net::forward_eco(eco, images, net::NetMode::tta());
        runtime = ledger_bytes();
    } else {
        auto model = net::build_mini_encoder(seed, 10);
        switch (policy.kind) {
            case PolicyKind::Frozen: model.set_trainable(false); break;
            case PolicyKind::BnOnly: model.set_bn_affine_trainable(); break;
            case PolicyKind::Full: model.set_trainable(true); break;
            default: break;
        }
        ledger().begin_pass();
        (void)model.forward(images, BnMode::batch_stats());
        runtime = ledger_bytes();
    }
    if (runtime_out) *runtime_out = runtime;
    if (analytic_out) *analytic_out = analytic.act_bytes;
    return runtime == analytic.act_bytes;
}

std::string memory_report_csv(int batch) {
    std::ostringstream os;
    os << "arch,policy,batch,param_MB,act_MB,total_MB\n";
    const net::EncoderSpec presets[] = {net::EncoderSpec::mini(10), net::EncoderSpec::wrn40_2(),
                                        net::EncoderSpec::wrn28(10), net::EncoderSpec::resnet50()};
    const MemoryPolicy policies[] = {MemoryPolicy::frozen(), MemoryPolicy::bn_only(),
                                     MemoryPolicy::eco(4), MemoryPolicy::eco(5), MemoryPolicy::full()};
    char line[256];
    for (const auto& spec : presets)
        for (const auto& policy : policies) {
            auto r = arch_memory(spec, policy, batch);
            std::snprintf(line, sizeof(line), "%s,%s,%d,%.3f,%.3f,%.3f\n", spec.name.c_str(),
                          policy.name().c_str(), batch, r.param_mb, r.act_mb, r.total_mb);
            os << line;
        }
    return os.str();
}

}  // namespace ecotta::mem
