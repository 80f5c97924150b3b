#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ecotta/adapt.hpp"
#include "ecotta/net.hpp"
#include "ecotta/stream.hpp"

using namespace ecotta;
using namespace ecotta::stream;

namespace {

bool bitwise_equal(const Buffer<float>& a, const Buffer<float>& b) {
    if (a.size() != b.size()) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

}  // namespace

//==========================================================================
// source generation
//==========================================================================

TEST_CASE("gen_source: deterministic, balanced, clamped") {
    auto a = gen_source(9, 200, 10);
    auto b = gen_source(9, 200, 10);
    CHECK(bitwise_equal(a.images.data(), b.images.data()));
    CHECK(a.labels == b.labels);

    std::vector<int> counts(10, 0);
    for (auto lbl : a.labels) ++counts[static_cast<std::size_t>(lbl)];
    for (int c : counts) CHECK(c == 20);

    CHECK(a.images.data().minCoeff() >= 0.0f);
    CHECK(a.images.data().maxCoeff() <= 1.0f);

    CHECK_THROWS_AS(gen_source(9, 10, 1), ConfigError);
    CHECK_THROWS_AS(gen_source(9, 10, 17), ConfigError);
}

TEST_CASE("gen_source: the benchmark is learnable (10 epochs to < 10% error)") {
    auto train = gen_source(1, 2048, 10);
    auto test = gen_source(2, 1024, 10);
    auto model = net::build_mini_encoder(1, 10);
    adapt::pretrain_source(model, train, 10, 0.05f, 64, 1);
    const double err = adapt::evaluate(model, test);
    MESSAGE("source test error after 10 epochs: ", err);
    CHECK(err < 0.10);
}

//==========================================================================
// corruptions
//==========================================================================

TEST_CASE("corrupt: severity 0 is the identity for every kind") {
    auto ds = gen_source(11, 8, 10);
    for (Corruption kind : all_corruptions()) {
        CAPTURE(to_string(kind));
        auto out = corrupt_batch(ds.images, kind, 0, 77, 0);
        CHECK(bitwise_equal(out.data(), ds.images.data()));
    }
}

TEST_CASE("corrupt: contrast follows out = mu + c (x - mu) per channel") {
    auto ds = gen_source(13, 1, 10);
    const int severity = 2;
    const float c = 0.55f;  // severity-2 table entry
    auto out = corrupt_batch(ds.images, Corruption::Contrast, severity, 3, 0);
    for (std::int64_t ch = 0; ch < 3; ++ch) {
        const float* in_pl = ds.images.data().data() + ch * 1024;
        const float* out_pl = out.data().data() + ch * 1024;
        float mu = 0;
        for (int i = 0; i < 1024; ++i) mu += in_pl[i];
        mu /= 1024.0f;
        for (int i = 0; i < 1024; ++i) {
            const float expect = std::clamp(mu + c * (in_pl[i] - mu), 0.0f, 1.0f);
            CHECK(out_pl[i] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("corrupt: gaussian severity 3 puts ~0.12 std on a constant image") {
    // 4 images x 3072 pixels > 1e4 samples
    auto imgs = TensorF::full({4, 3, 32, 32}, 0.5f);
    auto out = corrupt_batch(imgs, Corruption::GaussianNoise, 3, 1234, 0);
    double sum = 0, sumsq = 0;
    const auto n = static_cast<double>(out.numel());
    for (std::int64_t i = 0; i < out.numel(); ++i) {
        const double d = out.data()[i] - 0.5;
        sum += d;
        sumsq += d * d;
    }
    const double std_dev = std::sqrt(sumsq / n - (sum / n) * (sum / n));
    CHECK(std_dev == doctest::Approx(0.12).epsilon(0.05));
}

TEST_CASE("corrupt: deterministic per (seed, image tag), unknown kind rejected") {
    auto ds = gen_source(15, 4, 10);
    auto a = corrupt_batch(ds.images, Corruption::ShotNoise, 4, 99, 10);
    auto b = corrupt_batch(ds.images, Corruption::ShotNoise, 4, 99, 10);
    CHECK(bitwise_equal(a.data(), b.data()));
    auto c = corrupt_batch(ds.images, Corruption::ShotNoise, 4, 99, 11);
    CHECK(!bitwise_equal(a.data(), c.data()));

    CHECK_THROWS_AS(corruption_from_string("fog"), ConfigError);
    Rng rng(1);
    CHECK_THROWS_AS(corrupt_image(ds.images.data().data(), 3, 32, 32, Corruption::Contrast, 6, rng),
                    ConfigError);
}

TEST_CASE("severity monotonicity: frozen-source error never improves with severity") {
    static auto train = gen_source(21, 1024, 10);
    static auto test = gen_source(22, 512, 10);
    auto model = net::build_mini_encoder(21, 10);
    adapt::pretrain_source(model, train, 4, 0.05f, 64, 21);

    for (Corruption kind : {Corruption::GaussianNoise, Corruption::ShotNoise, Corruption::DefocusBlur}) {
        CAPTURE(to_string(kind));
        double prev = -1.0;
        for (int severity : {1, 3, 5}) {
            Dataset corrupted;
            corrupted.classes = test.classes;
            corrupted.labels = test.labels;
            corrupted.images = corrupt_batch(test.images, kind, severity, 4242, 0);
            const double err = adapt::evaluate(model, corrupted);
            CHECK(err >= prev);
            prev = err;
        }
    }
}

//==========================================================================
// schedules and iteration
//==========================================================================

TEST_CASE("make_schedule: continual, long-term, gradual layouts") {
    const std::vector<Corruption> kinds = all_corruptions();

    auto cont = make_schedule(ScheduleMode::Continual, kinds, 5, 10, 1);
    CHECK(cont.segments.size() == 8);
    for (const auto& s : cont.segments) CHECK(s.severity == 5);

    auto lt = make_schedule(ScheduleMode::LongTerm, kinds, 5, 10, 100);
    CHECK(lt.segments.size() == 800);
    for (std::size_t i = 0; i < lt.segments.size(); ++i)
        CHECK(lt.segments[i].kind == kinds[i % kinds.size()]);

    auto grad = make_schedule(ScheduleMode::Gradual, {Corruption::Contrast}, 5, 10, 1);
    REQUIRE(grad.segments.size() == 9);
    const int expect[] = {1, 2, 3, 4, 5, 4, 3, 2, 1};
    for (int i = 0; i < 9; ++i) CHECK(grad.segments[static_cast<std::size_t>(i)].severity == expect[i]);

    CHECK_THROWS_AS(make_schedule(ScheduleMode::Continual, {}, 5, 10, 1), ConfigError);
}

TEST_CASE("stream iterator: exact batch count and bitwise determinism") {
    auto pool = gen_source(31, 64, 10);

    auto one = make_schedule(ScheduleMode::Continual, {Corruption::Brightness}, 3, 1, 1);
    StreamIterator it(one, pool, 16, 5);
    auto b = it.next();
    REQUIRE(b.has_value());
    CHECK(b->images.dim(0) == 16);
    CHECK(!it.next().has_value());

    auto sched = make_schedule(ScheduleMode::Continual, {Corruption::Contrast, Corruption::Pixelate},
                               4, 3, 1);
    auto run = [&] {
        StreamIterator s(sched, pool, 16, 5);
        std::vector<Buffer<float>> batches;
        while (auto nb = s.next()) batches.push_back(nb->images.data());
        return batches;
    };
    auto r1 = run(), r2 = run();
    REQUIRE(r1.size() == 6);
    REQUIRE(r2.size() == 6);
    for (std::size_t i = 0; i < r1.size(); ++i) CHECK(bitwise_equal(r1[i], r2[i]));
}

TEST_CASE("clean_probe: interleaved probes leave the trajectory bitwise unchanged") {
    auto train = gen_source(41, 512, 10);
    auto test = gen_source(42, 256, 10);
    auto model = net::build_mini_encoder(41, 10);
    adapt::pretrain_source(model, train, 2, 0.05f, 64, 41);

    auto make_eco = [&] {
        auto eco = net::attach_meta(model.clone(), net::plan_partition(net::EncoderSpec::mini(10), 4),
                                    net::MetaVariant::Ours, 3);
        adapt::calibrate_identity(eco, train);
        return eco;
    };
    auto pool = gen_source(43, 128, 10);
    auto sched = make_schedule(ScheduleMode::Continual, {Corruption::GaussianNoise}, 4, 6, 1);
    adapt::AdaptConfig cfg;
    cfg.batch_size = 16;

    auto final_params = [&](bool probe) {
        auto eco = make_eco();
        StreamIterator it(sched, pool, 16, 77);
        while (auto b = it.next()) {
            if (probe) (void)adapt::clean_probe(eco, test);
            (void)adapt::tta_step(eco, b->images, cfg);
        }
        std::vector<Buffer<float>> out;
        for (auto& p : eco.meta_parameters()) out.push_back(p.data());
        return out;
    };
    auto with_probe = final_params(true);
    auto without = final_params(false);
    REQUIRE(with_probe.size() == without.size());
    for (std::size_t i = 0; i < with_probe.size(); ++i)
        CHECK(bitwise_equal(with_probe[i], without[i]));
}

//==========================================================================
// container io
//==========================================================================

TEST_CASE("dataset container: roundtrip is bitwise, corruption is caught") {
    namespace fs = std::filesystem;
    const auto path = (fs::temp_directory_path() / "ecoset_test.bin").string();

    auto ds = gen_source(51, 32, 10);
    save_dataset(ds, path);
    auto back = load_dataset(path);
    CHECK(back.classes == ds.classes);
    CHECK(back.labels == ds.labels);
    CHECK(bitwise_equal(back.images.data(), ds.images.data()));

    // truncated file -> format error with offset, no partial dataset
    {
        std::error_code ec;
        const auto full = fs::file_size(path, ec);
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes(static_cast<std::size_t>(full) / 2);
        in.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        std::ofstream out(path + ".trunc", std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    }
    CHECK_THROWS_AS(load_dataset(path + ".trunc"), FormatError);

    {
        std::ofstream bad(path + ".magic", std::ios::binary);
        bad.write("NOTASET1 garbage", 16);
    }
    CHECK_THROWS_AS(load_dataset(path + ".magic"), FormatError);

    fs::remove(path);
    fs::remove(path + ".trunc");
    fs::remove(path + ".magic");
}
