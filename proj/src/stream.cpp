#include "ecotta/stream.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "ecotta/errors.hpp"

namespace ecotta::stream {

namespace {

constexpr std::int64_t kRes = 32;
constexpr std::int64_t kChannels = 3;
constexpr std::int64_t kImageNumel = kChannels * kRes * kRes;

constexpr std::uint64_t kTagPatterns = 0x70617474;
constexpr std::uint64_t kTagSamples = 0x73616d70;
constexpr std::uint64_t kTagCorrupt = 0x636f7272;
constexpr std::uint64_t kTagOrder = 0x6f726465;

inline float clamp01(float v) { return v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v); }

}  // namespace

//==========================================================================
// source generation
//==========================================================================

Dataset gen_source(std::uint64_t seed, std::int64_t n, int classes) {
    if (classes < 2 || classes > 16) throw ConfigError("gen_source: classes must be in [2,16]");
    if (n < 1) throw ConfigError("gen_source: n must be positive");

    // Per-class textures: a low-frequency random field per channel plus an
    // oriented grating whose angle identifies the class. Stored as tables;
    // samples apply toroidal shifts, amplitude jitter and a random grating
    // phase (via the sin/cos decomposition), then pixel noise.
    Rng pat_rng = Rng::derive(seed, {kTagPatterns});
    std::vector<std::vector<float>> lowfreq(static_cast<std::size_t>(classes) * kChannels);
    std::vector<std::vector<float>> grat_sin(static_cast<std::size_t>(classes)),
        grat_cos(static_cast<std::size_t>(classes));

    for (int c = 0; c < classes; ++c) {
        for (std::int64_t ch = 0; ch < kChannels; ++ch) {
            auto& tab = lowfreq[static_cast<std::size_t>(c) * kChannels + static_cast<std::size_t>(ch)];
            tab.assign(kRes * kRes, 0.0f);
            double fx[3], fy[3], ph[3], amp[3], amp_sum = 0;
            for (int j = 0; j < 3; ++j) {
                fx[j] = pat_rng.uniform(0.3, 1.5);
                fy[j] = pat_rng.uniform(0.3, 1.5);
                ph[j] = pat_rng.uniform(0.0, 2.0 * std::numbers::pi);
                amp[j] = pat_rng.uniform(0.5, 1.0);
                amp_sum += amp[j];
            }
            for (std::int64_t y = 0; y < kRes; ++y)
                for (std::int64_t x = 0; x < kRes; ++x) {
                    double v = 0;
                    for (int j = 0; j < 3; ++j)
                        v += amp[j] * std::sin(2.0 * std::numbers::pi *
                                                   (fx[j] * static_cast<double>(x) +
                                                    fy[j] * static_cast<double>(y)) /
                                                   static_cast<double>(kRes) +
                                               ph[j]);
                    tab[static_cast<std::size_t>(y * kRes + x)] = static_cast<float>(v / amp_sum);
                }
        }
        const double theta = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
        const double freq = 4.0;
        auto& gs = grat_sin[static_cast<std::size_t>(c)];
        auto& gc = grat_cos[static_cast<std::size_t>(c)];
        gs.assign(kRes * kRes, 0.0f);
        gc.assign(kRes * kRes, 0.0f);
        for (std::int64_t y = 0; y < kRes; ++y)
            for (std::int64_t x = 0; x < kRes; ++x) {
                const double u = 2.0 * std::numbers::pi * freq *
                                 (std::cos(theta) * static_cast<double>(x) +
                                  std::sin(theta) * static_cast<double>(y)) /
                                 static_cast<double>(kRes);
                gs[static_cast<std::size_t>(y * kRes + x)] = static_cast<float>(std::sin(u));
                gc[static_cast<std::size_t>(y * kRes + x)] = static_cast<float>(std::cos(u));
            }
    }

    Dataset ds;
    ds.classes = classes;
    ds.images = TensorF::zeros({n, kChannels, kRes, kRes});
    ds.labels.resize(static_cast<std::size_t>(n));

    Rng rng = Rng::derive(seed, {kTagSamples});
    for (std::int64_t i = 0; i < n; ++i) {
        const int c = static_cast<int>(i % classes);  // balanced labels
        ds.labels[static_cast<std::size_t>(i)] = c;
        const auto dx = static_cast<std::int64_t>(rng.uniform_index(kRes));
        const auto dy = static_cast<std::int64_t>(rng.uniform_index(kRes));
        const float amp_low = static_cast<float>(rng.uniform(0.25, 0.35));
        const float amp_grat = static_cast<float>(rng.uniform(0.15, 0.25));
        const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
        const float cph = static_cast<float>(std::cos(phase)), sph = static_cast<float>(std::sin(phase));

        float* img = ds.images.data().data() + i * kImageNumel;
        const float* gs = grat_sin[static_cast<std::size_t>(c)].data();
        const float* gc = grat_cos[static_cast<std::size_t>(c)].data();
        for (std::int64_t ch = 0; ch < kChannels; ++ch) {
            const float* low =
                lowfreq[static_cast<std::size_t>(c) * kChannels + static_cast<std::size_t>(ch)].data();
            float* plane = img + ch * kRes * kRes;
            for (std::int64_t y = 0; y < kRes; ++y)
                for (std::int64_t x = 0; x < kRes; ++x) {
                    const std::int64_t sy = (y + dy) % kRes, sx = (x + dx) % kRes;
                    // sin(u + phase) from the stored sin/cos tables
                    const float g = gs[y * kRes + x] * cph + gc[y * kRes + x] * sph;
                    float v = 0.5f + amp_low * low[sy * kRes + sx] + amp_grat * g +
                              static_cast<float>(rng.normal(0.0, 0.05));
                    plane[y * kRes + x] = clamp01(v);
                }
        }
    }
    return ds;
}

TensorF gather_images(const Dataset& ds, const std::vector<std::int64_t>& order, std::int64_t offset,
                      std::int64_t count) {
    TensorF out = TensorF::zeros({count, kChannels, kRes, kRes});
    const auto n = static_cast<std::int64_t>(order.size());
    for (std::int64_t i = 0; i < count; ++i) {
        const std::int64_t src = order[static_cast<std::size_t>((offset + i) % n)];
        std::memcpy(out.data().data() + i * kImageNumel, ds.images.data().data() + src * kImageNumel,
                    sizeof(float) * kImageNumel);
    }
    return out;
}

std::vector<std::int64_t> gather_labels(const Dataset& ds, const std::vector<std::int64_t>& order,
                                        std::int64_t offset, std::int64_t count) {
    std::vector<std::int64_t> out(static_cast<std::size_t>(count));
    const auto n = static_cast<std::int64_t>(order.size());
    for (std::int64_t i = 0; i < count; ++i)
        out[static_cast<std::size_t>(i)] =
            ds.labels[static_cast<std::size_t>(order[static_cast<std::size_t>((offset + i) % n)])];
    return out;
}

//==========================================================================
// container io
//==========================================================================

namespace {
constexpr char kMagic[7] = {'E', 'C', 'O', 'S', 'E', 'T', '1'};
}

void save_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("save_dataset: cannot open '" + path + "'");
    f.write(kMagic, sizeof(kMagic));
    const std::uint32_t classes = static_cast<std::uint32_t>(ds.classes);
    const std::uint64_t n = static_cast<std::uint64_t>(ds.size());
    const std::uint32_t c = kChannels, h = kRes, w = kRes;
    f.write(reinterpret_cast<const char*>(&classes), 4);
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(reinterpret_cast<const char*>(&c), 4);
    f.write(reinterpret_cast<const char*>(&h), 4);
    f.write(reinterpret_cast<const char*>(&w), 4);
    f.write(reinterpret_cast<const char*>(ds.images.data().data()),
            static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(ds.images.numel())));
    for (auto lbl : ds.labels) {
        const std::int32_t v = static_cast<std::int32_t>(lbl);
        f.write(reinterpret_cast<const char*>(&v), 4);
    }
    if (!f) throw DataError("save_dataset: write failed for '" + path + "'");
}

Dataset load_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_dataset: cannot open '" + path + "'");
    std::size_t off = 0;
    auto read_bytes = [&](void* dst, std::size_t bytes) {
        f.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(bytes));
        if (static_cast<std::size_t>(f.gcount()) != bytes)
            throw FormatError("load_dataset: truncated file '" + path + "'", off);
        off += bytes;
    };
    char magic[7];
    read_bytes(magic, 7);
    if (std::memcmp(magic, kMagic, 7) != 0) throw FormatError("load_dataset: bad magic", 0);
    std::uint32_t classes = 0, c = 0, h = 0, w = 0;
    std::uint64_t n = 0;
    read_bytes(&classes, 4);
    read_bytes(&n, 8);
    read_bytes(&c, 4);
    read_bytes(&h, 4);
    read_bytes(&w, 4);
    if (c != kChannels || h != kRes || w != kRes)
        throw FormatError("load_dataset: unexpected dims " + std::to_string(c) + "x" + std::to_string(h) +
                              "x" + std::to_string(w),
                          off);
    Dataset ds;
    ds.classes = static_cast<int>(classes);
    ds.images = TensorF::zeros({static_cast<std::int64_t>(n), kChannels, kRes, kRes});
    read_bytes(ds.images.data().data(), sizeof(float) * static_cast<std::size_t>(ds.images.numel()));
    ds.labels.resize(static_cast<std::size_t>(n));
    for (auto& lbl : ds.labels) {
        std::int32_t v = 0;
        read_bytes(&v, 4);
        lbl = v;
    }
    return ds;
}

//==========================================================================
// corruptions
//==========================================================================

const char* to_string(Corruption c) {
    switch (c) {
        case Corruption::GaussianNoise: return "gaussian_noise";
        case Corruption::ShotNoise: return "shot_noise";
        case Corruption::ImpulseNoise: return "impulse_noise";
        case Corruption::DefocusBlur: return "defocus_blur";
        case Corruption::Contrast: return "contrast";
        case Corruption::Brightness: return "brightness";
        case Corruption::Pixelate: return "pixelate";
        case Corruption::Quantize: return "quantize";
    }
    return "?";
}

Corruption corruption_from_string(const std::string& s) {
    for (Corruption c : all_corruptions())
        if (s == to_string(c)) return c;
    throw ConfigError("unknown corruption kind '" + s + "'");
}

std::vector<Corruption> all_corruptions() {
    return {Corruption::GaussianNoise, Corruption::ShotNoise,  Corruption::ImpulseNoise,
            Corruption::DefocusBlur,   Corruption::Contrast,   Corruption::Brightness,
            Corruption::Pixelate,      Corruption::Quantize};
}

namespace {

// Severity parameter tables (index 0 = severity 1).
constexpr std::array<float, 5> kGaussianSigma = {0.04f, 0.08f, 0.12f, 0.18f, 0.26f};
constexpr std::array<float, 5> kShotLambda = {60.0f, 25.0f, 12.0f, 6.0f, 3.0f};
constexpr std::array<float, 5> kImpulseProb = {0.01f, 0.03f, 0.06f, 0.10f, 0.17f};
constexpr std::array<float, 5> kBlurSigma = {0.5f, 0.8f, 1.2f, 1.8f, 2.5f};
constexpr std::array<float, 5> kContrastScale = {0.75f, 0.55f, 0.40f, 0.30f, 0.20f};
constexpr std::array<float, 5> kBrightnessShift = {0.08f, 0.14f, 0.20f, 0.28f, 0.38f};
constexpr std::array<float, 5> kPixelateFactor = {0.70f, 0.55f, 0.45f, 0.35f, 0.25f};
constexpr std::array<int, 5> kQuantizeLevels = {24, 16, 10, 7, 5};

void gaussian_blur(float* pixels, std::int64_t ch, std::int64_t h, std::int64_t w, float sigma) {
    const std::int64_t radius = std::max<std::int64_t>(1, static_cast<std::int64_t>(std::ceil(2.0f * sigma)));
    std::vector<float> kern(static_cast<std::size_t>(2 * radius + 1));
    float sum = 0;
    for (std::int64_t i = -radius; i <= radius; ++i) {
        const float v = std::exp(-0.5f * static_cast<float>(i * i) / (sigma * sigma));
        kern[static_cast<std::size_t>(i + radius)] = v;
        sum += v;
    }
    for (auto& v : kern) v /= sum;

    std::vector<float> tmp(static_cast<std::size_t>(h * w));
    for (std::int64_t c = 0; c < ch; ++c) {
        float* plane = pixels + c * h * w;
        // horizontal, replicate border
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                float acc = 0;
                for (std::int64_t i = -radius; i <= radius; ++i) {
                    const std::int64_t sx = std::clamp<std::int64_t>(x + i, 0, w - 1);
                    acc += kern[static_cast<std::size_t>(i + radius)] * plane[y * w + sx];
                }
                tmp[static_cast<std::size_t>(y * w + x)] = acc;
            }
        // vertical
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                float acc = 0;
                for (std::int64_t i = -radius; i <= radius; ++i) {
                    const std::int64_t sy = std::clamp<std::int64_t>(y + i, 0, h - 1);
                    acc += kern[static_cast<std::size_t>(i + radius)] * tmp[static_cast<std::size_t>(sy * w + x)];
                }
                plane[y * w + x] = acc;
            }
    }
}

}  // namespace

void corrupt_image(float* px, std::int64_t ch, std::int64_t h, std::int64_t w, Corruption kind,
                   int severity, Rng& rng) {
    if (severity == 0) return;  // identity hook
    if (severity < 0 || severity > 5) throw ConfigError("corrupt: severity must be in [0,5]");
    const std::size_t s = static_cast<std::size_t>(severity - 1);
    const std::int64_t plane = h * w, total = ch * plane;

    switch (kind) {
        case Corruption::GaussianNoise: {
            const float sigma = kGaussianSigma[s];
            for (std::int64_t i = 0; i < total; ++i)
                px[i] = clamp01(px[i] + sigma * static_cast<float>(rng.normal()));
            break;
        }
        case Corruption::ShotNoise: {
            // Gaussian approximation of scaled Poisson counts.
            const float lambda = kShotLambda[s];
            for (std::int64_t i = 0; i < total; ++i) {
                const float v = std::max(px[i], 0.0f);
                px[i] = clamp01(px[i] + std::sqrt(v / lambda) * static_cast<float>(rng.normal()));
            }
            break;
        }
        case Corruption::ImpulseNoise: {
            const float p = kImpulseProb[s];
            for (std::int64_t xy = 0; xy < plane; ++xy)
                if (rng.uniform() < p) {
                    const float v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
                    for (std::int64_t c = 0; c < ch; ++c) px[c * plane + xy] = v;
                }
            break;
        }
        case Corruption::DefocusBlur: {
            gaussian_blur(px, ch, h, w, kBlurSigma[s]);
            for (std::int64_t i = 0; i < total; ++i) px[i] = clamp01(px[i]);
            break;
        }
        case Corruption::Contrast: {
            const float c = kContrastScale[s];
            for (std::int64_t c_i = 0; c_i < ch; ++c_i) {
                float* pl = px + c_i * plane;
                float mu = 0;
                for (std::int64_t i = 0; i < plane; ++i) mu += pl[i];
                mu /= static_cast<float>(plane);
                for (std::int64_t i = 0; i < plane; ++i) pl[i] = clamp01(mu + c * (pl[i] - mu));
            }
            break;
        }
        case Corruption::Brightness: {
            const float b = kBrightnessShift[s];
            for (std::int64_t i = 0; i < total; ++i) px[i] = clamp01(px[i] + b);
            break;
        }
        case Corruption::Pixelate: {
            const auto m = std::max<std::int64_t>(
                2, static_cast<std::int64_t>(std::lround(static_cast<double>(w) * kPixelateFactor[s])));
            std::vector<float> small(static_cast<std::size_t>(m * m));
            for (std::int64_t c = 0; c < ch; ++c) {
                float* pl = px + c * plane;
                for (std::int64_t y = 0; y < m; ++y)
                    for (std::int64_t x = 0; x < m; ++x)
                        small[static_cast<std::size_t>(y * m + x)] =
                            pl[(y * h / m) * w + (x * w / m)];  // nearest down
                for (std::int64_t y = 0; y < h; ++y)
                    for (std::int64_t x = 0; x < w; ++x)
                        pl[y * w + x] = small[static_cast<std::size_t>((y * m / h) * m + (x * m / w))];
            }
            break;
        }
        case Corruption::Quantize: {
            const float levels = static_cast<float>(kQuantizeLevels[s] - 1);
            for (std::int64_t i = 0; i < total; ++i)
                px[i] = clamp01(std::round(px[i] * levels) / levels);
            break;
        }
    }
}

TensorF corrupt_batch(const TensorF& images, Corruption kind, int severity, std::uint64_t seed,
                      std::int64_t first_image_tag) {
    TensorF out = images.clone();
    const std::int64_t n = images.dim(0);
    for (std::int64_t i = 0; i < n; ++i) {
        Rng rng = Rng::derive(seed, {kTagCorrupt, static_cast<std::uint64_t>(first_image_tag + i)});
        corrupt_image(out.data().data() + i * kImageNumel, kChannels, kRes, kRes, kind, severity, rng);
    }
    return out;
}

//==========================================================================
// schedules
//==========================================================================

StreamSchedule make_schedule(ScheduleMode mode, const std::vector<Corruption>& kinds, int severity,
                             int batches_per_segment, int rounds) {
    if (kinds.empty()) throw ConfigError("make_schedule: need at least one corruption kind");
    if (severity < 0 || severity > 5) throw ConfigError("make_schedule: severity must be in [0,5]");
    if (batches_per_segment < 1) throw ConfigError("make_schedule: batches_per_segment must be >= 1");
    StreamSchedule sched;
    sched.mode = mode;
    switch (mode) {
        case ScheduleMode::Continual:
            for (Corruption k : kinds) sched.segments.push_back({k, severity, batches_per_segment});
            break;
        case ScheduleMode::LongTerm: {
            if (rounds < 1) throw ConfigError("make_schedule: rounds must be >= 1");
            sched.rounds = rounds;
            for (int r = 0; r < rounds; ++r)
                for (Corruption k : kinds) sched.segments.push_back({k, severity, batches_per_segment});
            break;
        }
        case ScheduleMode::Gradual: {
            static const int chain[] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
            for (Corruption k : kinds)
                for (int sv : chain) sched.segments.push_back({k, sv, batches_per_segment});
            break;
        }
    }
    return sched;
}

StreamIterator::StreamIterator(const StreamSchedule& schedule, const Dataset& target_pool,
                               std::int64_t batch_size, std::uint64_t seed)
    : schedule_(schedule), pool_(&target_pool), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1) throw ConfigError("stream: batch_size must be >= 1");
    if (pool_->size() == 0) throw DataError("stream: empty target pool");
}

std::optional<Batch> StreamIterator::next() {
    while (segment_ < schedule_.segments.size() &&
           batch_in_segment_ >= schedule_.segments[segment_].n_batches) {
        ++segment_;
        batch_in_segment_ = 0;
    }
    if (segment_ >= schedule_.segments.size()) return std::nullopt;
    const Segment& seg = schedule_.segments[segment_];

    if (batch_in_segment_ == 0) {
        Rng rng = Rng::derive(seed_, {kTagOrder, static_cast<std::uint64_t>(segment_)});
        order_ = rng.permutation(pool_->size());
    }

    Batch b;
    b.segment_index = static_cast<int>(segment_);
    const std::int64_t offset = static_cast<std::int64_t>(batch_in_segment_) * batch_size_;
    TensorF clean = gather_images(*pool_, order_, offset, batch_size_);
    b.labels = gather_labels(*pool_, order_, offset, batch_size_);
    b.images = corrupt_batch(clean, seg.kind, seg.severity, seed_, emitted_);
    emitted_ += batch_size_;
    ++batch_in_segment_;
    return b;
}

}  // namespace ecotta::stream
