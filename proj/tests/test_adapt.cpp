#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ecotta/adapt.hpp"
#include "ecotta/net.hpp"
#include "ecotta/stream.hpp"

using namespace ecotta;

namespace {

// Shared fixture: a small pretrained source model plus data splits, built
// once and deep-copied into each test.
struct Fixture {
    stream::Dataset train;
    stream::Dataset test;
    net::MiniEncoder model;
    double source_error = 1.0;
};

Fixture& fixture() {
    static Fixture f = [] {
        Fixture x;
        x.train = stream::gen_source(1234, 1024, 10);
        x.test = stream::gen_source(5678, 512, 10);
        x.model = net::build_mini_encoder(7, 10);
        adapt::pretrain_source(x.model, x.train, 4, 0.05f, 64, 7);
        x.source_error = adapt::evaluate(x.model, x.test);
        return x;
    }();
    return f;
}

net::EcoModel fresh_eco(net::MetaVariant variant = net::MetaVariant::Ours, int k = 4) {
    auto eco = net::attach_meta(fixture().model.clone(),
                                net::plan_partition(net::EncoderSpec::mini(10), k), variant, 3);
    adapt::calibrate_identity(eco, fixture().train);
    return eco;
}

TensorF random_batch(std::int64_t n, std::uint64_t seed) {
    Rng rng(seed);
    auto t = TensorF::zeros({n, 3, 32, 32});
    for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = static_cast<float>(rng.uniform());
    return t;
}

TensorF target_batch(std::int64_t n, std::uint64_t seed, stream::Corruption kind, int severity) {
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto clean = stream::gather_images(fixture().test, order, 0, n);
    return stream::corrupt_batch(clean, kind, severity, seed, 0);
}

bool bitwise_equal(const Buffer<float>& a, const Buffer<float>& b) {
    if (a.size() != b.size()) return false;
    for (std::int64_t i = 0; i < a.size(); ++i)
        if (a[i] != b[i]) return false;
    return true;
}

std::vector<Buffer<float>> snapshot(std::vector<TensorF> params) {
    std::vector<Buffer<float>> out;
    for (auto& p : params) out.push_back(p.data());
    return out;
}

// Logits (a, 0, ..., 0) over C classes whose softmax entropy is `target`,
// solved by bisection (monotone decreasing in a for a >= 0).
float logit_for_entropy(double target, int classes) {
    auto ent = [&](double a) {
        const double z = std::exp(a) + (classes - 1);
        const double p0 = std::exp(a) / z, pr = 1.0 / z;
        double h = -p0 * std::log(p0);
        h -= (classes - 1) * pr * std::log(pr);
        return h;
    };
    double lo = 0.0, hi = 50.0;
    for (int i = 0; i < 200; ++i) {
        const double mid = 0.5 * (lo + hi);
        (ent(mid) > target ? lo : hi) = mid;
    }
    return static_cast<float>(0.5 * (lo + hi));
}

}  // namespace

//==========================================================================
// losses
//==========================================================================

TEST_CASE("entropy threshold: H0 = 0.4 ln C") {
    CHECK(adapt::entropy_threshold(0.4f, 10) == doctest::Approx(0.921034).epsilon(1e-6));
}

TEST_CASE("entropy_filter_loss: mean over the full batch, strict threshold") {
    // two samples with entropies 0.5 and 2.0, C = 10
    auto z = TensorF::zeros({2, 10});
    z.data()[0] = logit_for_entropy(0.5, 10);
    z.data()[10] = logit_for_entropy(2.0, 10);
    const float h0 = adapt::entropy_threshold(0.4f, 10);  // ~0.921
    auto fl = adapt::entropy_filter_loss(z, h0);
    CHECK(fl.n_kept == 1);
    CHECK(fl.loss.item() == doctest::Approx(0.25).epsilon(1e-3));  // (0.5 + 0) / 2
}

TEST_CASE("entropy_filter_loss: fully filtered batch moves nothing at any lr") {
    Rng rng(3);
    auto x = TensorF::zeros({4, 6});
    for (std::int64_t i = 0; i < x.numel(); ++i) x.data()[i] = static_cast<float>(rng.uniform(-1, 1));
    auto w = TensorF::zeros({6, 10}).set_requires_grad(true);  // zero weights -> uniform logits
    auto b = TensorF::zeros({10}).set_requires_grad(true);
    for (float lr : {1e-3f, 1.0f, 1e3f}) {
        auto logits = linear(x, w, b);
        auto fl = adapt::entropy_filter_loss(logits, adapt::entropy_threshold(0.4f, 10));
        CHECK(fl.n_kept == 0);
        CHECK(fl.loss.item() == 0.0f);
        backward(fl.loss);
        sgd_step(std::vector<TensorF>{w, b}, lr);
        for (std::int64_t i = 0; i < w.numel(); ++i) CHECK(w.data()[i] == 0.0f);
        for (std::int64_t i = 0; i < b.numel(); ++i) CHECK(b.data()[i] == 0.0f);
        zero_grad(std::vector<TensorF>{w, b});
    }
}

TEST_CASE("entropy filter hard gate: nudging a filtered sample changes no gradient") {
    auto z = TensorF::zeros({2, 10});
    z.data()[0] = logit_for_entropy(0.5, 10);
    z.data()[10] = logit_for_entropy(2.0, 10);  // filtered
    const float h0 = adapt::entropy_threshold(0.4f, 10);

    auto grad_of = [&](float nudge) {
        auto zz = z.clone();
        zz.data()[10] += nudge;
        zz.set_requires_grad(true);
        auto fl = adapt::entropy_filter_loss(zz, h0);
        backward(fl.loss);
        return zz.grad();
    };
    auto g0 = grad_of(0.0f), g1 = grad_of(1e-3f);
    // the kept sample's gradient is identical; the filtered sample's is zero
    for (std::int64_t i = 0; i < 10; ++i) CHECK(g0[i] == g1[i]);
    for (std::int64_t i = 10; i < 20; ++i) {
        CHECK(g0[i] == 0.0f);
        CHECK(g1[i] == 0.0f);
    }
}

TEST_CASE("L1 and L2 adaptation losses on uniform logits") {
    auto uniform = TensorF::zeros({4, 10});
    CHECK(adapt::loss_entmin(uniform).item() == doctest::Approx(std::log(10.0)).epsilon(1e-6));
    CHECK(adapt::loss_entmin_meanmax(uniform, 0.2f, 0.25f).item() ==
          doctest::Approx(-0.05 * std::log(10.0)).epsilon(1e-5));  // 0.2 ln10 - 0.25 ln10

    // one-hot confident batch: both terms collapse to ~0
    auto hot = TensorF::zeros({3, 10});
    for (int i = 0; i < 3; ++i) hot.data()[i * 10 + 2] = 80.0f;
    CHECK(adapt::loss_entmin(hot).item() == doctest::Approx(0.0).epsilon(1e-5));
    CHECK(batch_mean_softmax_entropy(hot).item() == doctest::Approx(0.0).epsilon(1e-5));
}

TEST_CASE("sdr_loss: frozen examples and shape checks") {
    auto xt = TensorF::from({2}, {1.0f, 2.0f});
    auto x = TensorF::from({2}, {1.5f, 2.5f});
    CHECK(adapt::sdr_loss(xt, x, adapt::SdrFlavor::L1).item() == doctest::Approx(0.5));
    CHECK(adapt::sdr_loss(xt, x, adapt::SdrFlavor::Mse).item() == doctest::Approx(0.25));
    CHECK(adapt::sdr_loss(x, x, adapt::SdrFlavor::L1).item() == 0.0f);
    CHECK(adapt::sdr_loss(x, x, adapt::SdrFlavor::Mse).item() == 0.0f);
    CHECK_THROWS_AS(adapt::sdr_loss(xt, TensorF::zeros({3}), adapt::SdrFlavor::L1), DimensionError);
}

TEST_CASE("sdr_loss: no gradient reaches the target") {
    auto xt = TensorF::from({2}, {1.0f, 2.0f}).set_requires_grad(true);
    auto x = TensorF::from({2}, {1.5f, 2.5f}).set_requires_grad(true);
    auto r = adapt::sdr_loss(xt, x, adapt::SdrFlavor::L1);
    backward(r);
    CHECK(xt.has_grad());
    CHECK(!x.has_grad());
}

TEST_CASE("adaptbn_stats: convex mixing in both moments") {
    adapt::ChannelStats src, batch;
    src.mean = Buffer<float>::Zero(1);
    src.var = Buffer<float>::Constant(1, 4.0f);
    batch.mean = Buffer<float>::Constant(1, 9.0f);
    batch.var = Buffer<float>::Constant(1, 1.0f);

    auto m = adapt::adaptbn_stats(src, batch, 8, 1);
    CHECK(m.mean[0] == doctest::Approx(1.0));  // (8*0 + 1*9)/9
    CHECK(m.var[0] == doctest::Approx((8.0 * 4.0 + 1.0 * 1.0) / 9.0));

    auto only_batch = adapt::adaptbn_stats(src, batch, 0, 4);
    CHECK(only_batch.mean[0] == 9.0f);
    CHECK(only_batch.var[0] == 1.0f);

    auto mostly_src = adapt::adaptbn_stats(src, batch, 1 << 20, 1);
    CHECK(mostly_src.mean[0] == doctest::Approx(0.0).epsilon(1e-4));

    CHECK_THROWS_AS(adapt::adaptbn_stats(src, batch, 0, 0), ConfigError);
}

//==========================================================================
// tta_step
//==========================================================================

TEST_CASE("tta_step: metrics identity and recomputation oracle") {
    auto eco = fresh_eco();
    adapt::AdaptConfig cfg;
    auto batch = target_batch(32, 17, stream::Corruption::GaussianNoise, 3);

    // snapshot pre-step parameters
    auto params = eco.meta_parameters();
    auto before = snapshot(params);

    auto res = adapt::tta_step(eco, batch, cfg);
    const auto& m = res.metrics;

    // total = ent + lambda * sum(R) as recorded
    CHECK(m.total == doctest::Approx(m.ent + cfg.lambda * m.reg_sum()).epsilon(1e-6));
    CHECK(m.act_bytes > 0);

    // independent recomputation on the pre-step parameters
    auto eco2 = fresh_eco();
    auto params2 = eco2.meta_parameters();
    for (std::size_t i = 0; i < params2.size(); ++i) params2[i].data() = before[i];
    {
        NoGradGuard ng;
        auto fwd = net::forward_eco(eco2, batch, net::NetMode::tta());
        auto fl = adapt::entropy_filter_loss(fwd.logits, adapt::entropy_threshold(cfg.h0_factor, 10));
        float total = fl.loss.item();
        for (int g = 0; g < 4; ++g)
            total += cfg.lambda *
                     adapt::sdr_loss(fwd.pairs[g].second, fwd.pairs[g].first, cfg.sdr_flavor).item();
        CHECK(m.total == doctest::Approx(total).epsilon(1e-6));
    }
}

TEST_CASE("tta_step: gradient scoping - R_k touches only its own group") {
    auto eco = fresh_eco();
    const net::NetMode mode = net::NetMode::tta();
    for (int rep = 0; rep < 3; ++rep) {
        auto batch = target_batch(16, 100 + rep, stream::Corruption::Contrast, 4);
        for (int k = 0; k < 4; ++k) {
            auto params = eco.meta_parameters();
            zero_grad(params);
            auto fwd = net::forward_eco(eco, batch, mode);
            auto x_k = fwd.pairs[k].first.detach();
            auto part_in = fwd.part_inputs[k].detach();
            auto xt_reg = eco.groups[k].forward(x_k, part_in, mode.meta);
            auto r = adapt::sdr_loss(xt_reg, x_k, adapt::SdrFlavor::L1);
            backward(scale(r, 0.5f));

            for (int g = 0; g < 4; ++g) {
                bool any_nonzero = false;
                for (auto& p : eco.groups[g].parameters()) {
                    if (p.has_grad() && p.grad().abs().sum() > 0.0f) any_nonzero = true;
                    if (g != k && p.has_grad())
                        CHECK(p.grad().abs().maxCoeff() == 0.0f);  // exact zero off-group
                }
                if (g == k) CHECK(any_nonzero);
            }
            zero_grad(params);
        }
    }
}

TEST_CASE("tta_step: all filtered and lambda=0 leaves every parameter unchanged") {
    auto eco = fresh_eco();
    adapt::AdaptConfig cfg;
    cfg.lambda = 0.0f;
    // pure uniform noise drives the warmless model to high entropy; verify
    // and shrink contrast toward the per-channel mean until all are filtered
    auto batch = random_batch(16, 23);
    const float h0 = adapt::entropy_threshold(cfg.h0_factor, 10);
    for (int tries = 0; tries < 20; ++tries) {
        NoGradGuard ng;
        auto fwd = net::forward_eco(eco, batch, net::NetMode::tta());
        auto ent = entropy(fwd.logits);
        if (ent.data().minCoeff() >= h0) break;
        for (std::int64_t i = 0; i < batch.numel(); ++i)
            batch.data()[i] = 0.5f + 0.5f * (batch.data()[i] - 0.5f);
    }
    {
        NoGradGuard ng;
        auto fwd = net::forward_eco(eco, batch, net::NetMode::tta());
        REQUIRE(entropy(fwd.logits).data().minCoeff() >= h0);
    }

    auto params = eco.meta_parameters();
    auto before = snapshot(params);
    auto res = adapt::tta_step(eco, batch, cfg);
    CHECK(res.metrics.n_kept == 0);
    auto after = snapshot(params);
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
}

TEST_CASE("tta_step: batch of one adapts with and without statistic mixing") {
    auto batch = target_batch(1, 29, stream::Corruption::Brightness, 5);
    {
        auto eco = fresh_eco();
        adapt::AdaptConfig cfg;
        cfg.adaptbn_n = 8;
        CHECK_NOTHROW((void)adapt::tta_step(eco, batch, cfg));
    }
    {
        auto eco = fresh_eco();
        adapt::AdaptConfig cfg;  // 4-d features pool statistics over H,W
        CHECK_NOTHROW((void)adapt::tta_step(eco, batch, cfg));
    }
}

TEST_CASE("regularization pull: with the adaptation loss off, mean R_k never increases") {
    auto eco = fresh_eco();
    // nudge the meta nets off the identity so R starts positive
    Rng rng(31);
    for (auto& p : eco.meta_parameters())
        for (std::int64_t i = 0; i < p.numel(); ++i)
            p.data()[i] += static_cast<float>(rng.uniform(-0.05, 0.05));

    auto batch = target_batch(32, 37, stream::Corruption::DefocusBlur, 3);
    auto params = eco.meta_parameters();
    const net::NetMode mode = net::NetMode::tta();

    double prev = -1.0;
    for (int step = 0; step < 50; ++step) {
        auto fwd = net::forward_eco(eco, batch, mode);
        TensorF total;
        double mean_r = 0;
        for (int k = 0; k < 4; ++k) {
            auto x_k = fwd.pairs[k].first.detach();
            auto part_in = fwd.part_inputs[k].detach();
            auto r = adapt::sdr_loss(eco.groups[k].forward(x_k, part_in, mode.meta), x_k,
                                     adapt::SdrFlavor::L1);
            mean_r += r.item() / 4.0;
            total = total.defined() ? residual_add(total, scale(r, 0.5f)) : scale(r, 0.5f);
        }
        if (step > 0) CHECK(mean_r <= prev + 1e-6);
        prev = mean_r;
        backward(total);
        sgd_step(params, 5e-3f);
        zero_grad(params);
    }
    CHECK(prev >= 0.0);
}

//==========================================================================
// warm-up
//==========================================================================

TEST_CASE("warmup: zero epochs is the identity start") {
    auto eco = fresh_eco();
    auto before = snapshot(eco.meta_parameters());
    adapt::AdaptConfig cfg;
    cfg.warmup_epochs = 0;
    adapt::warmup(eco, fixture().train, cfg, 3);
    auto after = snapshot(eco.meta_parameters());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
}

TEST_CASE("warmup: improves or holds source error, never touches the original weights") {
    auto eco = fresh_eco();
    auto frozen_before = snapshot(eco.base.parameters());

    adapt::AdaptConfig cfg;
    cfg.warmup_epochs = 3;
    adapt::warmup(eco, fixture().train, cfg, 3);

    auto frozen_after = snapshot(eco.base.parameters());
    for (std::size_t i = 0; i < frozen_before.size(); ++i)
        CHECK(bitwise_equal(frozen_before[i], frozen_after[i]));

    const double warm_err = adapt::evaluate(eco, fixture().test);
    CHECK(warm_err <= fixture().source_error + 0.01);
}

TEST_CASE("warmup: rejects an empty dataset") {
    auto eco = fresh_eco();
    stream::Dataset empty;
    empty.classes = 10;
    adapt::AdaptConfig cfg;
    CHECK_THROWS_AS(adapt::warmup(eco, empty, cfg, 1), DataError);
}

//==========================================================================
// baselines and evaluation
//==========================================================================

TEST_CASE("baseline_bnstats: close to source logits on a large source batch") {
    auto model = fixture().model.clone();
    const std::int64_t n = fixture().train.size();
    std::vector<std::int64_t> order(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
    auto big = stream::gather_images(fixture().train, order, 0, n);
    auto src = net::forward_source(model, big);
    auto bns = adapt::baseline_bnstats(model, big);
    CHECK(ledger_bytes() == 0);
    double max_diff = 0;
    for (std::int64_t i = 0; i < src.numel(); ++i)
        max_diff = std::max(max_diff, std::abs(static_cast<double>(src.data()[i] - bns.data()[i])));
    CHECK(max_diff < 0.1);  // batch stats ~ running stats on the source domain
}

TEST_CASE("baseline_tent_step: lr 0 freezes, ledger exceeds the eco ledger") {
    auto model = fixture().model.clone();
    model.set_bn_affine_trainable();
    auto batch = target_batch(16, 41, stream::Corruption::Pixelate, 4);

    auto before = snapshot(model.parameters());
    (void)adapt::baseline_tent_step(model, batch, 0.0f, std::numeric_limits<float>::infinity());
    auto after = snapshot(model.parameters());
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(bitwise_equal(before[i], after[i]));
    const std::size_t tent_bytes = ledger_bytes();

    auto eco = fresh_eco();
    (void)adapt::tta_step(eco, batch, adapt::AdaptConfig{});
    CHECK(tent_bytes > ledger_bytes());
}

TEST_CASE("evaluate: oracle, constant predictor, argmax-count oracle") {
    // a perfect predictor on its own labels
    auto ds = stream::gen_source(77, 100, 10);
    auto perfect = [&](const TensorF& images) {
        // recover labels by index: images come in dataset order here
        static std::int64_t cursor = 0;
        auto logits = TensorF::zeros({images.dim(0), 10});
        for (std::int64_t i = 0; i < images.dim(0); ++i)
            logits.data()[i * 10 + ds.labels[static_cast<std::size_t>(cursor + i)]] = 10.0f;
        cursor += images.dim(0);
        return logits;
    };
    CHECK(adapt::evaluate(perfect, ds) == 0.0);

    // constant prediction on a balanced 10-class set -> 0.9
    auto constant = [](const TensorF& images) {
        auto logits = TensorF::zeros({images.dim(0), 10});
        for (std::int64_t i = 0; i < images.dim(0); ++i) logits.data()[i * 10 + 3] = 5.0f;
        return logits;
    };
    CHECK(adapt::evaluate(constant, ds) == doctest::Approx(0.9));

    // frozen fixture model vs an independently scripted argmax count
    auto model = fixture().model.clone();
    stream::Dataset small;
    small.classes = 10;
    std::vector<std::int64_t> order(100);
    for (int i = 0; i < 100; ++i) order[i] = i;
    small.images = stream::gather_images(fixture().test, order, 0, 100);
    small.labels = stream::gather_labels(fixture().test, order, 0, 100);

    const double reported = adapt::evaluate(model, small);
    std::int64_t wrong = 0;
    {
        NoGradGuard ng;
        auto logits = model.forward(small.images, BnMode::eval());
        for (std::int64_t i = 0; i < 100; ++i) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < 10; ++c)
                if (logits.data()[i * 10 + c] > logits.data()[i * 10 + best]) best = c;
            if (best != small.labels[static_cast<std::size_t>(i)]) ++wrong;
        }
    }
    CHECK(reported == doctest::Approx(static_cast<double>(wrong) / 100.0));

    stream::Dataset empty;
    CHECK_THROWS_AS(adapt::evaluate(model, empty), DataError);
}

TEST_CASE("clean_probe: no side effects, probing twice matches") {
    auto eco = fresh_eco();
    const double e1 = adapt::clean_probe(eco, fixture().test);
    const double e2 = adapt::clean_probe(eco, fixture().test);
    CHECK(e1 == e2);
}

TEST_CASE("calibrated identity start: eco equals source bitwise, eval error unchanged") {
    auto eco = fresh_eco();
    auto batch = target_batch(8, 71, stream::Corruption::GaussianNoise, 0);  // severity 0 = clean
    auto src = net::forward_source(eco.base, batch);
    auto fwd = net::forward_eco(eco, batch, net::NetMode::eval());
    CHECK(bitwise_equal(fwd.logits.data(), src.data()));
    CHECK(adapt::evaluate(eco, fixture().test) == fixture().source_error);
}
