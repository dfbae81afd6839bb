#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "gradcheck.hpp"
#include "mmld/conditioning.hpp"

using namespace mmld;
using namespace mmld::cond;

namespace {

AttributeCondition random_attrs(int n, Rng& rng) {
    AttributeCondition a;
    for (int i = 0; i < n; ++i) {
        a.values.push_back(static_cast<float>(rng.uniform()));
        a.mask.push_back(0);
    }
    return a;
}

VisualCondition random_visual(int size, Rng& rng) {
    std::vector<float> rgb(static_cast<std::size_t>(size * size * 3));
    std::vector<std::uint8_t> seg(static_cast<std::size_t>(size * size));
    for (auto& v : rgb) v = static_cast<float>(rng.uniform());
    for (auto& s : seg) s = static_cast<std::uint8_t>(rng.integer(0, 5));
    return full_visual(rgb, seg, size);
}

}  // namespace

TEST_CASE("attribute encoder shapes and masking") {
    EncoderConfig cfg;
    cfg.n_attr = 21;
    ParamStore<float> ps;
    Rng rng(1);
    AttributeEncoder<float> enc(ps, cfg, rng);
    auto a = random_attrs(21, rng);
    Tape<float> t(false);
    auto y = enc(t, {&a});
    CHECK(y.shape() == Shape{1, 21, 64});

    auto m1 = make_null(21, 64).first, m2 = m1;
    for (auto& v : m2.values) v = static_cast<float>(rng.uniform());
    CHECK(enc(t, {&m1}).value() == enc(t, {&m2}).value());

    auto b = random_attrs(8, rng);
    CHECK_THROWS_AS(enc(t, {&b}), ShapeError);
}

TEST_CASE("attribute sinusoidal code") {
    CHECK(quantize_level(0.0f, 256) == 0);
    CHECK(quantize_level(1.0f, 256) == 255);
    auto c0 = attribute_code(0.0f, 256, 64), c1 = attribute_code(1.0f, 256, 64);
    double dist = 0;
    for (std::size_t i = 0; i < 64; ++i) dist += (c0[i] - c1[i]) * (c0[i] - c1[i]);
    CHECK(std::sqrt(dist) > 0.0);
    // level 255 at frequency index 0: sin(255), cos(255)
    CHECK(c1[0] == doctest::Approx(std::sin(255.0)));
    CHECK(c1[1] == doctest::Approx(std::cos(255.0)));
    CHECK(c0[0] == 0.0);
    CHECK(c0[1] == 1.0);
}

TEST_CASE("visual encoder") {
    EncoderConfig cfg;
    ParamStore<float> ps;
    Rng rng(2);
    VisualEncoder<float> enc(ps, cfg, rng);
    CHECK(cfg.n_vis_tokens() == 64);
    auto v = random_visual(64, rng);
    Tape<float> t(false);
    auto y = enc(t, {&v});
    CHECK(y.shape() == Shape{1, 64, 64});

    auto n1 = make_null(8, 64).second, n2 = random_visual(64, rng);
    std::fill(n2.rgb_valid.begin(), n2.rgb_valid.end(), 0);
    std::fill(n2.seg_valid.begin(), n2.seg_valid.end(), 0);
    CHECK(enc(t, {&n1}).value() == enc(t, {&n2}).value());

    auto a = random_visual(64, rng), b = a;
    MaskingPolicy p;
    paint_brush_strokes(a.rgb_valid, 64, p, rng);
    a.seg_valid = a.rgb_valid;
    b.rgb_valid = a.rgb_valid;
    b.seg_valid = a.seg_valid;
    for (std::size_t i = 0; i < a.seg.size(); ++i)
        if (!a.rgb_valid[i]) {
            b.rgb[i * 3] = 1.0f - a.rgb[i * 3];
            b.seg[i] = static_cast<std::uint8_t>((a.seg[i] + 1) % 6);
        }
    CHECK(enc(t, {&a}).value() == enc(t, {&b}).value());

    auto small = random_visual(32, rng);
    CHECK_THROWS_AS(enc(t, {&small}), ShapeError);
}

TEST_CASE("masking statistics") {
    toygen::ToyGenerator g(toygen::ToyGenConfig{});
    auto rec = g.make_record(5, 0);
    MaskingPolicy p;
    Rng rng(3);
    int na = 0, nr = 0, ns = 0, all3 = 0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) {
        auto m = apply_masking(rec, 64, p, rng);
        na += m.attrs_masked;
        nr += m.rgb_masked;
        ns += m.seg_masked;
        all3 += m.attrs_masked && m.rgb_masked && m.seg_masked;
        CHECK(m.attrs.all_masked() == m.attrs_masked);
    }
    CHECK(std::abs(na / double(n) - 0.9) <= 0.02);
    CHECK(std::abs(nr / double(n) - 0.9) <= 0.02);
    CHECK(std::abs(ns / double(n) - 0.9) <= 0.02);
    CHECK(std::abs(all3 / double(n) - 0.729) <= 0.01);
}

TEST_CASE("class drop and disabled policy") {
    toygen::ToyGenerator g(toygen::ToyGenConfig{});
    auto rec = g.make_record(5, 1);
    MaskingPolicy p;
    p.p_class_drop = 1.0;
    Rng rng(4);
    int seen = 0;
    for (int i = 0; i < 200; ++i) {
        auto m = apply_masking(rec, 64, p, rng);
        if (m.dropped_class != toygen::kHair) continue;
        ++seen;
        for (std::size_t j = 0; j < rec.seg.size(); ++j)
            if (rec.seg[j] == toygen::kHair) {
                CHECK(m.visual.rgb_valid[j] == 0);
                CHECK(m.visual.seg_valid[j] == 0);
            }
    }
    CHECK(seen > 0);

    MaskingPolicy off;
    off.p_modality_mask = 0.0;
    off.p_class_drop = 0.0;
    auto m = apply_masking(rec, 64, off, rng);
    CHECK_FALSE(m.attrs.all_masked());
    CHECK(m.attrs.values == rec.attrs);
    for (std::size_t j = 0; j < rec.seg.size(); ++j) {
        CHECK(m.visual.rgb_valid[j] == 1);
        CHECK(m.visual.seg_valid[j] == 1);
        CHECK(m.visual.seg[j] == rec.seg[j]);
    }
}

TEST_CASE("condition drop rate") {
    MaskingPolicy p;
    Rng rng(5);
    int da = 0, dv = 0;
    const int n = 10000;
    auto base = make_null(8, 8);
    for (int i = 0; i < n; ++i) {
        auto a = full_attributes(std::vector<float>(8, 0.5f));
        auto v = base.second;
        auto d = apply_condition_drop(a, v, p, rng);
        da += d.attrs;
        dv += d.visual;
        CHECK(a.all_masked() == d.attrs);
    }
    CHECK(std::abs(da / double(n) - 0.2) <= 0.02);
    CHECK(std::abs(dv / double(n) - 0.2) <= 0.02);
}

TEST_CASE("assemble condition") {
    Rng rng(6);
    Tape<float> t(false);
    auto ca = t.input(Tensorf(Shape{2, 21, 16}, 1.0f), false), cv = t.input(Tensorf(Shape{2, 64, 16}, 2.0f), false);
    auto c = assemble_condition(ca, cv, 0.5, rng, true);
    CHECK(c.shape() == Shape{2, 85, 16});
    for (std::size_t b = 0; b < 2; ++b)
        for (std::size_t n = 0; n < 85; ++n) CHECK(c.value()[(b * 85 + n) * 16] == (n < 21 ? 1.0f : 2.0f));
    auto z = assemble_condition(ca, cv, 1.0, rng, false);
    for (float v : z.value().data()) CHECK(v == 0.0f);
    CHECK_THROWS_AS(assemble_condition(ca, t.input(Tensorf(Shape{2, 64, 8}), false), 0.0, rng, true), ShapeError);
}

TEST_CASE("encoders are differentiable end to end") {
    EncoderConfig cfg;
    cfg.n_attr = 3;
    cfg.d_cond = 4;
    cfg.image_size = 8;
    cfg.vis_channels = {2, 3};
    Rng rng(7);
    ParamStore<double> ps;
    AttributeEncoder<double> ae(ps, cfg, rng);
    VisualEncoder<double> ve(ps, cfg, rng);
    gradcheck::jitter(ps, rng);
    auto a = random_attrs(3, rng);
    a.mask[1] = 1;
    auto v = random_visual(8, rng);
    v.rgb_valid[3] = 0;

    Rng wr(11);
    Tensord w(Shape{1, 3 + 4, 4});
    for (auto& e : w.data()) e = wr.normal();
    auto r = gradcheck::check_params(ps, [&](Tape<double>& t) {
        auto y = ops::concat<double>({ae(t, {&a}), ve(t, {&v})}, 1);
        return ops::sum(ops::mul_const(y, w));
    });
    INFO(r.where);
    CHECK(r.ok);
}
