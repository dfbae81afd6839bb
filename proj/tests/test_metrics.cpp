#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "mmld/metrics.hpp"

using namespace mmld;
using namespace mmld::metrics;

namespace {

std::vector<float> pattern(int size, int mx, int my, int mc, int mod) {
    std::vector<float> v(static_cast<std::size_t>(size * size * 3));
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x)
            for (int c = 0; c < 3; ++c)
                v[static_cast<std::size_t>((y * size + x) * 3 + c)] =
                    static_cast<float>((x * mx + y * my + c * mc) % mod) / static_cast<float>(mod - 1);
    return v;
}

baseline::PredictorConfig tiny_predictors(int size) {
    baseline::PredictorConfig c;
    c.image_size = size;
    c.feature_dim = 8;
    c.seg_width = 4;
    return c;
}

}  // namespace

TEST_CASE("psnr") {
    std::vector<float> a(4 * 4 * 3, 0.5f);
    CHECK(psnr(a, a, 3) == kPsnrCap);

    auto b = a;
    for (auto& v : b) v += 0.1f;
    CHECK(psnr(a, b, 3) == doctest::Approx(20.0).epsilon(1e-5));

    // Half the pixels off by 0.5: MSE 0.125.
    auto h = a;
    for (std::size_t p = 0; p < 8; ++p)
        for (int c = 0; c < 3; ++c) h[p * 3 + static_cast<std::size_t>(c)] = 0.0f;
    CHECK(psnr(a, h, 3) == doctest::Approx(10.0 * std::log10(8.0)).epsilon(1e-6));

    std::vector<std::uint8_t> mask(16, 0);
    for (std::size_t p = 8; p < 16; ++p) mask[p] = 1;
    CHECK(psnr(a, h, 3, mask) == kPsnrCap);
    CHECK_THROWS_AS(psnr(a, h, 3, std::vector<std::uint8_t>(16, 0)), std::invalid_argument);
    CHECK_THROWS_AS(psnr(a, std::vector<float>(3), 3), ShapeError);
}

TEST_CASE("ssim") {
    const auto a = pattern(16, 7, 13, 5, 17);
    const auto b = pattern(16, 3, 5, 11, 19);
    CHECK(ssim(a, a, 16, 3) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(ssim(a, b, 16, 3) == doctest::Approx(0.01405374664798).epsilon(1e-9));

    std::vector<std::uint8_t> rows(256, 0);
    for (int y = 5; y <= 7; ++y)
        for (int x = 0; x < 16; ++x) rows[static_cast<std::size_t>(y * 16 + x)] = 1;
    CHECK(ssim(a, b, 16, 3, rows) == doctest::Approx(0.017732567852597).epsilon(1e-9));

    auto neg = a;
    for (auto& v : neg) v = 1.0f - v;
    CHECK(ssim(a, neg, 16, 3) < 0.5);

    // Constant images: only the luminance term survives.
    const std::vector<float> c1(16 * 16 * 3, 0.2f), c2(16 * 16 * 3, 0.4f);
    CHECK(ssim(c1, c2, 16, 3) == doctest::Approx(0.8000999500249876).epsilon(1e-6));

    CHECK(ssim(a, b, 16, 3) == doctest::Approx(ssim(b, a, 16, 3)).epsilon(1e-12));
    CHECK_THROWS_AS(ssim(std::vector<float>(300), std::vector<float>(300), 10, 3), std::invalid_argument);
    std::vector<std::uint8_t> border(256, 0);
    border[0] = 1;
    CHECK_THROWS_AS(ssim(a, b, 16, 3, border), std::invalid_argument);
}

TEST_CASE("miou") {
    std::vector<std::uint8_t> p{0, 1, 2, 3, 4, 5, 0, 1};
    CHECK(miou(p, p) == doctest::Approx(1.0));

    std::vector<std::uint8_t> z(8, 0), o(8, 1);
    CHECK(miou(z, o) == doctest::Approx(0.0));

    // Class 0 on both halves of the prediction, target splits 0 / 1.
    std::vector<std::uint8_t> t{0, 0, 0, 0, 1, 1, 1, 1};
    CHECK(miou(z, t) == doctest::Approx((0.5 + 0.0) / 2));
    CHECK(miou(z, t, {}, {0}) == doctest::Approx(0.5));
    CHECK_THROWS_AS(miou(z, z, {}, {3}), std::invalid_argument);
    CHECK_THROWS_AS(miou(z, z, {}, {9}), std::out_of_range);

    std::vector<std::uint8_t> m{1, 1, 1, 1, 0, 0, 0, 0};
    CHECK(miou(z, t, m) == doctest::Approx(1.0));
    CHECK_THROWS_AS(miou(z, t, std::vector<std::uint8_t>(8, 0)), std::invalid_argument);
    CHECK_THROWS_AS(miou(std::vector<std::uint8_t>(8, 7), t), std::out_of_range);
}

TEST_CASE("attribute error") {
    std::vector<float> t{0.2f, 0.8f, 0.5f};
    CHECK(attr_error(t, t) == 0.0);
    CHECK(attr_error(t, {0.6f, 0.4f, 0.9f}) == doctest::Approx(0.4).epsilon(1e-6));
    CHECK(attr_error(t, {0.5f, 0.0f, 0.8f}, {0, 1, 0}) == doctest::Approx(0.3).epsilon(1e-6));
    CHECK_THROWS_AS(attr_error(t, t, {1, 1, 1}), std::invalid_argument);
}

TEST_CASE("frechet distance") {
    GaussianStats a{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
    GaussianStats b{Eigen::VectorXd::Ones(1), Eigen::MatrixXd::Constant(1, 1, 4.0)};
    CHECK(frechet_distance(a, b) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(frechet_distance(a, a) <= 1e-8);

    GaussianStats p, q;
    p.mean = Eigen::Vector2d(0.1, -0.2);
    q.mean = Eigen::Vector2d(0.4, 0.3);
    p.cov = (Eigen::Matrix2d() << 2, 0.5, 0.5, 1).finished();
    q.cov = (Eigen::Matrix2d() << 1, -0.3, -0.3, 3).finished();
    CHECK(frechet_distance(p, q) == doctest::Approx(1.269311854967773).epsilon(1e-10));
    CHECK(frechet_distance(p, q) == doctest::Approx(frechet_distance(q, p)).epsilon(1e-10));

    auto r = p;
    r.mean = q.mean;
    r.cov = p.cov;
    auto s = p;
    CHECK(frechet_distance(s, r) == doctest::Approx((p.mean - q.mean).squaredNorm()).epsilon(1e-10));

    GaussianStats bad{Eigen::VectorXd::Zero(2), (Eigen::Matrix2d() << 1, 2, 2, 1).finished()};
    CHECK_THROWS_AS(frechet_distance(bad, p), NumericError);
    GaussianStats one{Eigen::VectorXd::Zero(1), Eigen::MatrixXd::Identity(1, 1)};
    CHECK_THROWS_AS(frechet_distance(one, p), ShapeError);

    // Sample statistics of identical sets.
    std::vector<std::vector<float>> f{{1, 2}, {0, 1}, {3, -1}, {2, 2}};
    CHECK(frechet_distance(gaussian_stats(f), gaussian_stats(f)) <= 1e-8);
    const auto st = gaussian_stats(f);
    CHECK(st.mean(0) == doctest::Approx(1.5));
    CHECK(st.cov(0, 0) == doctest::Approx(5.0 / 3.0));
    CHECK_THROWS_AS(gaussian_stats({{1, 2}}), std::invalid_argument);
}

TEST_CASE("feature similarities") {
    CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_similarity({1, 2}, {2, 4}) == doctest::Approx(1.0));
    CHECK(l2_distance({0, 0}, {3, 4}) == doctest::Approx(5.0));
    CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 1}), NumericError);

    const baseline::Predictors<float> p(tiny_predictors(16), 5);
    const auto a = pattern(16, 7, 13, 5, 17);
    const auto b = pattern(16, 3, 5, 11, 19);
    CHECK(id_similarity(p, a, a) == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(id_similarity(p, a, b) == doctest::Approx(id_similarity(p, b, a)).epsilon(1e-9));
    CHECK(featdist(p, a, a) == doctest::Approx(0.0).epsilon(1e-6));
    CHECK(featdist(p, a, b) > 0.0);
}

TEST_CASE("task regimes") {
    CHECK(parse_task("face-rgb") == Task::FaceRgbHairSegHairAttr);
    CHECK(parse_task(task_name(Task::HalfRgbHalfSeg)) == Task::HalfRgbHalfSeg);
    CHECK_THROWS_AS(parse_task("nope"), std::invalid_argument);

    toygen::ToyGenConfig g;
    g.k = 8;
    g.d = 8;
    g.image_size = 32;
    const toygen::ToyGenerator gen(g);
    const auto rec = gen.make_record(3, 0);

    const auto half = task_conditions(Task::HalfRgbHalfSeg, rec, g.n_attr, 32);
    CHECK(half.attrs.all_masked());
    for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x) {
            const auto i = static_cast<std::size_t>(y * 32 + x);
            CHECK(half.visual.rgb_valid[i] == (x < 16 ? 1 : 0));
            CHECK(half.visual.seg_valid[i] == (x < 16 ? 0 : 1));
        }

    const auto face = task_conditions(Task::FaceRgbHairSegHairAttr, rec, g.n_attr, 32);
    for (std::size_t i = 0; i < rec.seg.size(); ++i) {
        const auto l = rec.seg[i];
        CHECK(face.visual.rgb_valid[i] == (l == toygen::kSkin || l == toygen::kEyes || l == toygen::kGlasses));
        CHECK(face.visual.seg_valid[i] == (l == toygen::kHair));
    }
    for (int j = 0; j < g.n_attr; ++j) {
        const auto s = static_cast<std::size_t>(j);
        CHECK(face.attrs.mask[s] == (j == toygen::kBlondeHair ? 0 : 1));
    }
    CHECK(face.attrs.values[toygen::kBlondeHair] == rec.attrs[toygen::kBlondeHair]);
}

TEST_CASE("evaluation suite reports") {
    toygen::ToyGenConfig g;
    g.k = 8;
    g.d = 8;
    g.image_size = 16;
    g.seed = 11;
    auto mc = diffusion::ModelConfig::make(g, 16, 16);
    mc.net.heads = 2;
    mc.net.groups = 4;
    mc.enc.vis_channels = {8, 8, 16};
    const toygen::ToyGenerator gen(g);
    const auto data = gen.build_dataset(64, 2);
    std::vector<Tensorf> lat;
    for (const auto& r : data) lat.push_back(r.latent);
    const auto norm = toygen::fit_normalization(lat);
    diffusion::DiffusionModel model(mc, 1);
    model.norm = norm;
    const baseline::Predictors<float> preds(tiny_predictors(16), 3);
    baseline::Inverter inv(gen, norm, &preds);
    inv.set_mean_latent(baseline::mean_normalized_latent(data, norm));

    for (const auto task : {Task::FaceRgbHairSegHairAttr, Task::HalfRgbHalfSeg}) {
        EvalSetup setup;
        setup.task = task;
        setup.count = 3;
        setup.seed = 9;
        setup.sample.ddim_steps = 4;
        setup.baseline.iterations = 5;
        const auto pair = eval_suite(model, inv, preds, setup);

        for (const auto* r : {&pair.diffusion, &pair.baseline}) {
            CHECK(r->count == 3);
            CHECK(r->config_hash == pair.diffusion.config_hash);
            CHECK(r->seconds_per_sample > 0);
            CHECK(r->per_sample.count("attr_l1") == (task == Task::FaceRgbHairSegHairAttr ? 1u : 0u));
            for (const auto& name : {"psnr", "ssim", "miou", "id", "featdist"}) REQUIRE(r->per_sample.count(name) == 1);
            for (const auto& [name, v] : r->per_sample) {
                REQUIRE(v.size() == 3);
                CHECK(r->means.at(name) == doctest::Approx(std::accumulate(v.begin(), v.end(), 0.0) / 3.0));
            }
            const auto j = r->to_json();
            CHECK(j["means"]["psnr"].get<double>() == doctest::Approx(r->means.at("psnr")));
            const auto csv = r->to_csv();
            CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
        }
        const auto again = eval_suite(model, inv, preds, setup);
        CHECK(again.diffusion.per_sample.at("psnr") == pair.diffusion.per_sample.at("psnr"));
        CHECK(again.baseline.per_sample.at("miou") == pair.baseline.per_sample.at("miou"));
    }
}
