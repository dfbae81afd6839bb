#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "gradcheck.hpp"
#include "mmld/ops.hpp"
#include "mmld/toygen.hpp"

using namespace mmld;
using namespace mmld::toygen;

namespace {

Tensorf random_latent(const ToyGenConfig& c, Rng& rng) {
    Tensorf x(Shape{static_cast<std::size_t>(c.k), static_cast<std::size_t>(c.d)});
    for (auto& v : x.data()) v = static_cast<float>(rng.normal());
    return x;
}

}  // namespace

TEST_CASE("decode is deterministic and centered") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg), g2(cfg);
    Rng rng(1);
    auto x = random_latent(cfg, rng);
    CHECK(g.decode(x).to_array() == g2.decode(x).to_array());

    auto mid = g.decode(Tensorf(Shape{8, 32})).to_array();
    for (int j = 0; j < kNumParams; ++j) CHECK(mid[j] == doctest::Approx(0.5 * (g.param_lo()[j] + g.param_hi()[j])));

    CHECK_THROWS_AS(g.decode(Tensorf(Shape{8, 31})), ShapeError);
}

TEST_CASE("decode is Lipschitz") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    // Bound: max range * max sigmoid slope (1/4) * largest column norm of W_g.
    const auto& w = g.decode_matrix();
    double bound = 0;
    for (int j = 0; j < kNumParams; ++j) {
        double col = 0;
        for (std::size_t r = 0; r < cfg.latent_size(); ++r) col += std::pow(w[r * kNumParams + j], 2);
        bound = std::max(bound, 0.25 * std::sqrt(col) * (g.param_hi()[j] - g.param_lo()[j]));
    }
    Rng rng(2);
    for (int i = 0; i < 100; ++i) {
        auto a = random_latent(cfg, rng);
        auto b = a;
        double dn = 0;
        for (auto& v : b.data()) {
            float dv = static_cast<float>(rng.normal() * 1e-3);
            v += dv;
            dn += double(dv) * dv;
        }
        auto pa = g.decode(a).to_array(), pb = g.decode(b).to_array();
        for (int j = 0; j < kNumParams; ++j) CHECK(std::abs(pa[j] - pb[j]) <= bound * std::sqrt(dn) * 1.01 + 1e-9);
    }
}

TEST_CASE("render ranges and glasses agreement") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    Rng rng(3);
    int with_glasses = 0;
    for (int i = 0; i < 200; ++i) {
        auto p = g.decode(random_latent(cfg, rng));
        auto r = g.render(p, sample_view(rng), RenderMode::Hard);
        for (auto l : r.seg) CHECK(l < kNumClasses);
        for (auto v : r.rgb) CHECK((v >= 0.0f && v <= 1.0f));
        const bool has4 = std::count(r.seg.begin(), r.seg.end(), kGlasses) > 0;
        CHECK(has4 == (g.attributes(p)[kGlassesAttr] > 0.5f));
        with_glasses += has4;
    }
    CHECK(with_glasses > 40);
    CHECK(with_glasses < 160);

    auto p = g.decode(random_latent(cfg, rng));
    p.glasses = 0.0;
    p.hat = 0.0;
    auto r = g.render(p, ViewParams{}, RenderMode::Hard);
    CHECK(std::count(r.seg.begin(), r.seg.end(), kGlasses) == 0);
}

TEST_CASE("soft render converges to hard render") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    Rng rng(4);
    double worst = 0;
    for (int i = 0; i < 20; ++i) {
        auto p = g.decode(random_latent(cfg, rng));
        auto v = sample_view(rng);
        auto h = g.render(p, v, RenderMode::Hard);
        auto s = g.render(p, v, RenderMode::Soft, 0.1);
        double diff = 0;
        for (std::size_t j = 0; j < h.rgb.size(); ++j) diff += std::abs(h.rgb[j] - s.rgb[j]);
        worst = std::max(worst, diff / h.rgb.size());
    }
    CHECK(worst < 0.02);
}

TEST_CASE("soft render var matches plain soft render") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    Rng rng(5);
    auto x = random_latent(cfg, rng);
    auto p = g.decode(x);
    ViewParams v = sample_view(rng);
    auto plain = g.render(p, v, RenderMode::Soft, 0.5);
    Tape<double> t(false);
    auto img = g.render_soft_var(g.decode_var(t.input(x.cast<double>(), false)), v, 0.5);
    const std::size_t hw = 64 * 64;
    for (std::size_t i = 0; i < hw; i += 37)
        for (std::size_t c = 0; c < 3; ++c) CHECK(img.value()[c * hw + i] == doctest::Approx(plain.rgb[i * 3 + c]).epsilon(1e-5));
}

TEST_CASE("soft render is differentiable w.r.t. the latent") {
    ToyGenConfig cfg;
    cfg.k = 2;
    cfg.d = 4;
    cfg.image_size = 24;
    ToyGenerator g(cfg);
    Rng rng(6);
    ViewParams v = sample_view(rng);
    auto x = gradcheck::random_tensor({2, 4}, rng);
    auto r = gradcheck::check(
        [&](Tape<double>&, const std::vector<Var<double>>& in) { return ops::mean(g.render_soft_var(g.decode_var(in[0]), v, 0.5)); },
        {x}, 1e-3);
    INFO(r.where);
    CHECK(r.ok);
    // per-parameter check through a weighted functional
    Tensord w(Shape{3, 24, 24});
    for (auto& e : w.data()) e = rng.normal();
    auto p = g.decode(x.cast<float>()).to_array();
    Tensord pt(Shape{15});
    for (int j = 0; j < 15; ++j) pt[j] = p[j];
    auto r2 = gradcheck::check(
        [&](Tape<double>&, const std::vector<Var<double>>& in) { return ops::sum(ops::mul_const(g.render_soft_var(in[0], v, 0.5), w)); },
        {pt}, 1e-3, 1e-5);
    INFO(r2.where);
    CHECK(r2.ok);
}

TEST_CASE("attributes") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    ShapeParams p = g.decode(Tensorf(Shape{8, 32}));
    p.glasses = 0.9;
    p.hair = {1.0, 1.0, 0.0};
    auto a = g.attributes(p);
    CHECK(a.size() == 8);
    CHECK(a[kGlassesAttr] == doctest::Approx(0.9));
    CHECK(a[kBlondeHair] == doctest::Approx(1.0));

    // Latent zero: every parameter at its midpoint, so attributes follow in closed form.
    auto a0 = g.attributes(g.decode(Tensorf(Shape{8, 32})));
    const double skin = 0.65, hair = 0.5;
    CHECK(a0[kBlondeHair] == doctest::Approx(1.0 - std::sqrt(0.25 + 0.25 + 0.25) / std::sqrt(3.0)));
    CHECK(a0[kDarkHair] == doctest::Approx(1.0 - hair));
    CHECK(a0[kGlassesAttr] == doctest::Approx(0.5));
    CHECK(a0[kPaleSkin] == doctest::Approx(skin));
    CHECK(a0[kLongHair] == doctest::Approx(0.5));
    CHECK(a0[kBigEyes] == doctest::Approx(0.5));
    CHECK(a0[kWideFace] == doctest::Approx(0.5));
    CHECK(a0[kHat] == doctest::Approx(0.5));

    Rng rng(7);
    for (int i = 0; i < 50; ++i)
        for (float v : g.attributes(g.decode(random_latent(cfg, rng)))) CHECK((v >= 0.0f && v <= 1.0f));

    ToyGenConfig wide = cfg;
    wide.n_attr = 21;
    auto a21 = ToyGenerator(wide).attributes(p);
    CHECK(a21.size() == 21);
    for (int i = 8; i < 21; ++i) CHECK(a21[i] == 0.0f);
}

TEST_CASE("view sampling follows the camera distribution") {
    Rng rng(8);
    int wide = 0;
    for (int i = 0; i < 10000; ++i) {
        auto v = sample_view(rng);
        CHECK(v.fov >= 18.0);
        CHECK(v.fov <= 25.0);
        CHECK(std::abs(v.yaw) <= 0.15);
        CHECK(std::abs(v.pitch) <= 0.15);
        CHECK(v.roll == 0.0);
        CHECK(v.radius == 2.7);
        wide += v.fov >= 22.0;
    }
    CHECK(std::abs(wide / 10000.0 - 0.70) <= 0.03);
}

TEST_CASE("dataset records are keyed and consistent") {
    ToyGenConfig cfg;
    ToyGenerator g(cfg);
    auto a = g.make_record(42, 7), b = g.make_record(42, 7);
    CHECK(a.latent == b.latent);
    CHECK(a.image == b.image);
    CHECK(a.seg == b.seg);
    CHECK(a.attrs == b.attrs);
    auto ds = g.build_dataset(1, 42);
    CHECK(ds.size() == 1);
    CHECK(ds[0].attrs == g.attributes(g.decode(ds[0].latent)));
    CHECK(ds[0].image.size() == 64u * 64u * 3u);
    CHECK_THROWS(g.build_dataset(0, 42));

    double sum = 0, sq = 0;
    const int n = 10000;
    std::vector<double> mean(cfg.latent_size()), m2(cfg.latent_size());
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(42, static_cast<std::uint64_t>(i)));
        // Same draw order as make_record: the latent comes first.
        for (std::size_t j = 0; j < cfg.latent_size(); ++j) {
            double v = static_cast<float>(rng.normal());
            mean[j] += v;
            m2[j] += v * v;
        }
    }
    CHECK(g.make_record(42, 3).latent[5] == static_cast<float>(Rng(derive_seed(42, 3)).normal() * 0 + [] {
              Rng r(derive_seed(42, 3));
              for (int j = 0; j < 5; ++j) r.normal();
              return r.normal();
          }()));
    for (std::size_t j = 0; j < cfg.latent_size(); ++j) {
        double mu = mean[j] / n, sd = std::sqrt(m2[j] / n - mu * mu);
        sum += mu;
        sq += sd;
        CHECK(std::abs(mu) < 0.05);
        CHECK(sd >= 0.95);
        CHECK(sd <= 1.05);
    }
}

TEST_CASE("frozen trailing dims are zero and ignored") {
    ToyGenConfig cfg;
    cfg.frozen_dims = 4;
    ToyGenerator g(cfg);
    auto rec = g.make_record(1, 0);
    for (std::size_t r = 0; r < 8; ++r)
        for (std::size_t c = 28; c < 32; ++c) CHECK(rec.latent[r * 32 + c] == 0.0f);
    auto x = rec.latent;
    x[31] = 5.0f;
    CHECK(g.decode(x).to_array() == g.decode(rec.latent).to_array());
}

TEST_CASE("min-max normalization") {
    Rng rng(9);
    std::vector<Tensorf> xs;
    for (int i = 0; i < 50; ++i) {
        Tensorf x(Shape{2, 3});
        for (auto& v : x.data()) v = static_cast<float>(rng.normal());
        x[5] = 2.0f;  // degenerate coordinate
        xs.push_back(x);
    }
    auto s = fit_normalization(xs);
    auto lo = normalize(s.min, s), hi = normalize(s.max, s);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(lo[i] == doctest::Approx(-1.0));
        CHECK(hi[i] == doctest::Approx(1.0));
    }
    for (const auto& x : xs) {
        auto n = normalize(x, s);
        CHECK(n[5] == 0.0f);
        auto back = denormalize(n, s);
        for (std::size_t i = 0; i < 6; ++i) CHECK(std::abs(back[i] - x[i]) < 1e-6);
    }
    CHECK_THROWS(fit_normalization({}));
}
