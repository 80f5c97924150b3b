#include "ecotta/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <utility>
#include <vector>

#include "ecotta/errors.hpp"

namespace ecotta::ckpt {

namespace {

constexpr char kMagic[7] = {'E', 'C', 'O', 'T', 'T', 'A', '1'};
constexpr std::uint32_t kVersion = 1;

struct Item {
    std::string name;
    Shape shape;
    Buffer<float>* buf;
};

void add_bn(std::vector<Item>& items, const std::string& prefix, net::BatchNormLayer& bn) {
    const std::int64_t ch = bn.gamma.numel();
    items.push_back({prefix + ".gamma", {ch}, &bn.gamma.data()});
    items.push_back({prefix + ".beta", {ch}, &bn.beta.data()});
    items.push_back({prefix + ".rmean", {ch}, &bn.running_mean});
    items.push_back({prefix + ".rvar", {ch}, &bn.running_var});
}

std::vector<Item> enumerate(net::EcoModel& eco) {
    std::vector<Item> items;
    auto& base = eco.base;
    items.push_back({"base.stem.w", base.stem.w.shape(), &base.stem.w.data()});
    add_bn(items, "base.stem_bn", base.stem_bn);
    for (std::size_t i = 0; i < base.blocks.size(); ++i) {
        auto& blk = base.blocks[i];
        const std::string p = "base.block" + std::to_string(i);
        items.push_back({p + ".conv1.w", blk.conv1.w.shape(), &blk.conv1.w.data()});
        add_bn(items, p + ".bn1", blk.bn1);
        items.push_back({p + ".conv2.w", blk.conv2.w.shape(), &blk.conv2.w.data()});
        add_bn(items, p + ".bn2", blk.bn2);
        if (blk.proj) {
            items.push_back({p + ".proj.w", blk.proj->w.shape(), &blk.proj->w.data()});
            add_bn(items, p + ".proj_bn", *blk.proj_bn);
        }
    }
    items.push_back({"base.fc.w", base.fc.w.shape(), &base.fc.w.data()});
    items.push_back({"base.fc.b", base.fc.b.shape(), &base.fc.b.data()});
    for (std::size_t g = 0; g < eco.groups.size(); ++g) {
        auto& grp = eco.groups[g];
        const std::string p = "meta" + std::to_string(g);
        if (grp.bn_out) add_bn(items, p + ".bn_out", *grp.bn_out);
        if (grp.conv_block) {
            items.push_back({p + ".conv.w", grp.conv_block->conv.w.shape(), &grp.conv_block->conv.w.data()});
            add_bn(items, p + ".conv_bn", grp.conv_block->bn);
        }
    }
    return items;
}

}  // namespace

void save_checkpoint(net::EcoModel& eco, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_checkpoint: cannot open '" + path + "'");

    auto items = enumerate(eco);
    f.write(kMagic, sizeof(kMagic));
    auto w32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto w64 = [&](std::uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); };
    w32(kVersion);
    w32(static_cast<std::uint32_t>(eco.base.spec.classes));
    w32(static_cast<std::uint32_t>(eco.plan.k));
    w32(static_cast<std::uint32_t>(eco.variant));
    w32(static_cast<std::uint32_t>(eco.kernel));
    for (int b : eco.plan.blocks_per_part) w32(static_cast<std::uint32_t>(b));

    w32(static_cast<std::uint32_t>(items.size()));
    std::uint64_t offset = 0;
    for (const auto& it : items) {
        w32(static_cast<std::uint32_t>(it.name.size()));
        f.write(it.name.data(), static_cast<std::streamsize>(it.name.size()));
        w32(static_cast<std::uint32_t>(it.shape.size()));
        for (auto d : it.shape) w64(static_cast<std::uint64_t>(d));
        w64(offset);
        offset += static_cast<std::uint64_t>(it.buf->size()) * sizeof(float);
    }
    w64(offset);  // payload byte count
    for (const auto& it : items)
        f.write(reinterpret_cast<const char*>(it.buf->data()),
                static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(it.buf->size())));
    if (!f) throw DataError("save_checkpoint: write failed for '" + path + "'");
}

net::EcoModel load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_checkpoint: cannot open '" + path + "'");

    std::size_t off = 0;
    auto read_bytes = [&](void* dst, std::size_t n) {
        f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(f.gcount()) != n)
            throw FormatError("load_checkpoint: truncated file '" + path + "'", off);
        off += n;
    };
    auto r32 = [&] {
        std::uint32_t v;
        read_bytes(&v, 4);
        return v;
    };
    auto r64 = [&] {
        std::uint64_t v;
        read_bytes(&v, 8);
        return v;
    };

    char magic[7];
    read_bytes(magic, 7);
    if (std::memcmp(magic, kMagic, 7) != 0) throw FormatError("load_checkpoint: bad magic", 0);
    const std::uint32_t version = r32();
    if (version != kVersion)
        throw FormatError("load_checkpoint: unsupported version " + std::to_string(version), off - 4);

    const auto classes = static_cast<int>(r32());
    const auto k = static_cast<int>(r32());
    const auto variant = static_cast<net::MetaVariant>(r32());
    const auto kernel = static_cast<int>(r32());
    net::PartitionPlan plan;
    plan.k = k;
    for (int i = 0; i < k; ++i) plan.blocks_per_part.push_back(static_cast<int>(r32()));

    struct EntryHdr {
        std::string name;
        Shape shape;
        std::uint64_t offset;
        std::int64_t count;
    };
    const std::uint32_t n_entries = r32();
    std::vector<EntryHdr> entries;
    for (std::uint32_t i = 0; i < n_entries; ++i) {
        EntryHdr e;
        const std::uint32_t len = r32();
        e.name.resize(len);
        read_bytes(e.name.data(), len);
        const std::uint32_t ndim = r32();
        std::int64_t count = 1;
        for (std::uint32_t d = 0; d < ndim; ++d) {
            e.shape.push_back(static_cast<std::int64_t>(r64()));
            count *= e.shape.back();
        }
        e.count = count;
        e.offset = r64();
        entries.push_back(std::move(e));
    }
    const std::uint64_t payload_bytes = r64();
    std::vector<char> payload(payload_bytes);
    read_bytes(payload.data(), payload_bytes);

    auto model = net::build_mini_encoder(0, classes);
    auto eco = net::attach_meta(std::move(model), plan, variant, kernel);
    auto items = enumerate(eco);
    if (items.size() != entries.size())
        throw FormatError("load_checkpoint: entry count " + std::to_string(entries.size()) +
                              " does not match model (" + std::to_string(items.size()) + ")",
                          off);
    for (std::size_t i = 0; i < items.size(); ++i) {
        const auto& e = entries[i];
        auto& it = items[i];
        if (e.name != it.name || e.count != it.buf->size())
            throw FormatError("load_checkpoint: unexpected entry '" + e.name + "'", off);
        if (e.offset + static_cast<std::uint64_t>(e.count) * sizeof(float) > payload_bytes)
            throw FormatError("load_checkpoint: entry '" + e.name + "' overruns payload", off);
        std::memcpy(it.buf->data(), payload.data() + e.offset,
                    sizeof(float) * static_cast<std::size_t>(e.count));
    }
    return eco;
}

}  // namespace ecotta::ckpt
