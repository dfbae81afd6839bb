// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--only 1,7,12] [--cache DIR]
//
// Criteria 7-12 share one desk-scale training run and one predictor training
// run. With --cache the trained checkpoint, its log and the predictors are
// stored in DIR and reused by later invocations.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <set>
#include <sstream>

#include <unistd.h>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "mmld/io.hpp"
#include "mmld/metrics.hpp"
#include "mmld/ops.hpp"

using namespace mmld;
namespace O = mmld::ops;
namespace fs = std::filesystem;
using diffusion::Conditions;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void note(const std::string& s) {
    std::cout << "  .. " << s << std::endl;
}

Tensorf randn(Shape s, Rng& rng) {
    Tensorf t(std::move(s));
    for (auto& v : t.data()) v = static_cast<float>(rng.normal());
    return t;
}

double max_abs_diff(const Tensorf& a, const Tensorf& b) {
    if (a.shape() != b.shape()) return INFINITY;
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
}

double mean(const std::vector<double>& v) {
    return v.empty() ? NAN : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

Conditions full_conditions(const toygen::DatasetRecord& r, int size) {
    return Conditions{cond::full_attributes(r.attrs), cond::full_visual(r, size)};
}

std::vector<Tensorf> latents_of(const std::vector<toygen::DatasetRecord>& recs) {
    std::vector<Tensorf> out;
    for (const auto& r : recs) out.push_back(r.latent);
    return out;
}

diffusion::ModelConfig tiny_config() {
    toygen::ToyGenConfig g;
    g.k = 8;
    g.d = 8;
    g.image_size = 32;
    auto c = diffusion::ModelConfig::make(g, 16, 16);
    c.net.heads = 2;
    c.net.groups = 4;
    c.enc.vis_channels = {8, 8, 16};
    return c;
}

// --- 1: gradients ---------------------------------------------------------------

Var<double> probe(Var<double> y) {
    Rng rng(99);
    Tensord w(y.shape());
    for (auto& v : w.data()) v = rng.normal();
    return O::sum(O::mul_const(y, w));
}

Outcome gradients() {
    using gradcheck::random_tensor;
    using L = gradcheck::LossFn;
    Rng rng(11);
    struct Case {
        std::string name;
        L f;
        std::vector<Tensord> in;
    };
    const auto a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
    Tensord cs({4}, std::vector<double>{1.0, 2.0, -1.0, 0.5}), co({4}, std::vector<double>{0.1, 0.2, 0.3, 0.4});
    Tensord w({3, 4});
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = i % 3 == 0 ? 0.0 : 1.0;
    const std::vector<int> labels{0, 1, 2, 1, 2, 2, 0, 1};
    const auto x3 = random_tensor({2, 3, 4}, rng), x3b = random_tensor({2, 2, 4}, rng);
    const auto s23 = random_tensor({2, 3}, rng), o23 = random_tensor({2, 3}, rng);

    std::vector<Case> cases{
        {"add", [](auto&, const auto& v) { return probe(O::add(v[0], v[1])); }, {a, b}},
        {"sub", [](auto&, const auto& v) { return probe(O::sub(v[0], v[1])); }, {a, b}},
        {"mul", [](auto&, const auto& v) { return probe(O::mul(v[0], v[1])); }, {a, b}},
        {"add_const", [&](auto&, const auto& v) { return probe(O::add_const(v[0], b)); }, {a}},
        {"mul_const", [&](auto&, const auto& v) { return probe(O::mul_const(v[0], b)); }, {a}},
        {"scale", [](auto&, const auto& v) { return probe(O::scale(v[0], -1.7)); }, {a}},
        {"affine_const", [&](auto&, const auto& v) { return probe(O::affine_const(v[0], cs, co)); }, {a}},
        {"relu", [](auto&, const auto& v) { return probe(O::relu(v[0])); }, {a}},
        {"silu", [](auto&, const auto& v) { return probe(O::silu(v[0])); }, {a}},
        {"gelu", [](auto&, const auto& v) { return probe(O::gelu(v[0])); }, {a}},
        {"sigmoid", [](auto&, const auto& v) { return probe(O::sigmoid(v[0])); }, {a}},
        {"softmax", [](auto&, const auto& v) { return probe(O::softmax(v[0])); }, {a}},
        {"softmax axis 0", [](auto&, const auto& v) { return probe(O::softmax(v[0], 0)); }, {a}},
        {"dropout", [](auto&, const auto& v) {
             Rng r(5);
             return probe(O::dropout(v[0], 0.3, r, false));
         }, {a}},
        {"sum", [](auto&, const auto& v) { return O::sum(O::mul(v[0], v[0])); }, {a}},
        {"mean", [](auto&, const auto& v) { return O::mean(O::mul(v[0], v[0])); }, {a}},
        {"sum_squares", [](auto&, const auto& v) { return O::sum_squares(v[0]); }, {a}},
        {"mse", [](auto&, const auto& v) { return O::mse(v[0], v[1]); }, {a, b}},
        {"weighted_mse", [&](auto&, const auto& v) { return O::weighted_mse(v[0], v[1], w); }, {a, b}},
        {"cross_entropy", [&](auto&, const auto& v) { return O::cross_entropy(v[0], labels); }, {random_tensor({2, 3, 4}, rng)}},
        {"linear", [](auto&, const auto& v) { return probe(O::linear(v[0], v[1], std::optional<Var<double>>(v[2]))); },
         {x3, random_tensor({4, 3}, rng), random_tensor({3}, rng)}},
        {"matmul", [](auto&, const auto& v) { return probe(O::matmul(v[0], v[1])); }, {random_tensor({3, 5}, rng), random_tensor({5, 2}, rng)}},
        {"conv1d", [](auto&, const auto& v) { return probe(O::conv1d(v[0], v[1], std::optional<Var<double>>(v[2]), 1)); },
         {random_tensor({2, 3, 6}, rng), random_tensor({4, 3, 3}, rng), random_tensor({4}, rng)}},
        {"conv1d stride 2", [](auto&, const auto& v) { return probe(O::conv1d(v[0], v[1], std::optional<Var<double>>(v[2]), 1, 2)); },
         {random_tensor({2, 3, 6}, rng), random_tensor({4, 3, 3}, rng), random_tensor({4}, rng)}},
        {"conv2d", [](auto&, const auto& v) { return probe(O::conv2d(v[0], v[1], std::optional<Var<double>>(v[2]), 1)); },
         {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}},
        {"conv2d stride 2", [](auto&, const auto& v) { return probe(O::conv2d(v[0], v[1], std::optional<Var<double>>(v[2]), 1, 2)); },
         {random_tensor({2, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)}},
        {"group_norm", [](auto&, const auto& v) { return probe(O::group_norm(v[0], 2, v[1], v[2])); },
         {random_tensor({2, 4, 3}, rng), random_tensor({4}, rng), random_tensor({4}, rng)}},
        {"layer_norm", [](auto&, const auto& v) { return probe(O::layer_norm(v[0], v[1], v[2])); },
         {random_tensor({3, 5}, rng), random_tensor({5}, rng), random_tensor({5}, rng)}},
        {"attention", [](auto&, const auto& v) { return probe(O::attention(v[0], v[1], v[2])); },
         {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5, 6}, rng)}},
        {"attention 2 heads", [](auto&, const auto& v) { return probe(O::attention(v[0], v[1], v[2], 2)); },
         {random_tensor({2, 3, 4}, rng), random_tensor({2, 5, 4}, rng), random_tensor({2, 5, 6}, rng)}},
        {"scale_shift", [](auto&, const auto& v) { return probe(O::scale_shift(v[0], v[1], v[2])); }, {x3, s23, o23}},
        {"transpose_last2", [](auto&, const auto& v) { return probe(O::transpose_last2(v[0])); }, {x3}},
        {"reshape", [](auto&, const auto& v) { return probe(O::reshape(v[0], {6, 4})); }, {x3}},
        {"concat", [](auto&, const auto& v) { return probe(O::concat<double>({v[0], v[1]}, 1)); }, {x3, x3b}},
        {"slice", [](auto&, const auto& v) { return probe(O::slice(v[0], 2, 1, 2)); }, {x3}},
        {"pad_end", [](auto&, const auto& v) { return probe(O::pad_end(v[0], -1, 3)); }, {x3}},
        {"upsample_nearest", [](auto&, const auto& v) { return probe(O::upsample_nearest(v[0], 2)); }, {x3}},
        {"broadcast_batch", [](auto&, const auto& v) { return probe(O::broadcast_batch(v[0], 3)); }, {s23}},
    };

    double worst = 0;
    std::vector<std::string> bad;
    for (const auto& c : cases) {
        const auto r = gradcheck::check(c.f, c.in, 1e-4);
        worst = std::max(worst, r.worst_rel);
        if (!r.ok) bad.push_back(c.name + " (" + r.where + ")");
    }

    // Micro denoiser, every parameter and both inputs.
    unet::UNetConfig mc;
    mc.base_channels = 4;
    mc.groups = 1;
    mc.heads = 1;
    mc.d_cond = 4;
    mc.k = 8;
    mc.d = 2;
    mc.timesteps = 50;
    ParamStore<double> ps;
    Rng nr(17);
    unet::UNet<double> net(ps, mc, nr);
    gradcheck::jitter(ps, nr, 0.05);
    const auto z = random_tensor({2, 8, 2}, nr), cnd = random_tensor({2, 3, 4}, nr);
    const auto rp = gradcheck::check_params(
        ps, [&](Tape<double>& t) { return O::mean(O::sum_squares(net(t, t.constant(z), {1, 37}, t.constant(cnd)))); }, 1e-3, 1e-5);
    const auto ri = gradcheck::check([&](Tape<double>& t, const auto& v) { return O::sum_squares(net(t, v[0], {4, 20}, v[1])); },
                                     {z, cnd}, 1e-3, 1e-5);
    if (!rp.ok) bad.push_back("denoiser parameters (" + rp.where + ")");
    if (!ri.ok) bad.push_back("denoiser inputs (" + ri.where + ")");

    std::string d = fmt("%zu primitive checks, worst rel err %.2e; micro denoiser %zu params, worst rel err %.2e / %.2e", cases.size(), worst,
                        ps.count_scalars(), rp.worst_rel, ri.worst_rel);
    for (const auto& b2 : bad) d += "; FAILED " + b2;
    return {bad.empty(), d};
}

// --- 2-4: schedule, parameterization, guidance -----------------------------------

Outcome schedule() {
    const auto s = diffusion::cosine_schedule(1000, 0.008, 0.999);
    bool mono = true;
    for (int t = 1; t <= 1000; ++t) mono = mono && s.ab(t) < s.ab(t - 1);
    // Independent long-double evaluation of cos^2(((t/T + s)/(1 + s)) pi/2) / cos^2((s/(1 + s)) pi/2).
    auto f = [](long double t) {
        const long double pi = 3.141592653589793238462643383279502884L, sv = 0.008L;
        const long double c = std::cos((t / 1000.0L + sv) / (1.0L + sv) * pi / 2), c0 = std::cos(sv / (1.0L + sv) * pi / 2);
        return static_cast<double>(c * c / (c0 * c0));
    };
    const double mid = std::abs(s.ab(500) - f(500));
    const bool ok = mono && s.ab(1) >= 0.999 && s.ab(1000) <= 1e-3 && mid <= 1e-10;
    return {ok, fmt("monotone=%d ab(1)=%.6f ab(T)=%.3e |ab(500) - closed form|=%.1e", mono, s.ab(1), s.ab(1000), mid)};
}

Outcome vparam() {
    const auto s = diffusion::cosine_schedule();
    Rng rng(2);
    const auto x0 = randn({1000, 1, 4}, rng), eps = randn({1000, 1, 4}, rng);
    std::vector<int> ts(1000);
    for (auto& t : ts) t = rng.integer(1, 1000);
    const auto xt = diffusion::q_sample(x0, ts, eps, s);
    const auto v = diffusion::v_target(x0, eps, ts, s);
    const double ex = max_abs_diff(diffusion::x0_from_v(xt, v, ts, s), x0);
    const double ee = max_abs_diff(diffusion::eps_from_v(xt, v, ts, s), eps);
    return {ex <= 1e-5 && ee <= 1e-5, fmt("1000 draws: max x0 err %.2e, max eps err %.2e", ex, ee)};
}

Outcome guidance() {
    const auto cfg = tiny_config();
    toygen::ToyGenerator gen(cfg.gen);
    const auto recs = gen.build_dataset(8, 5);
    diffusion::DiffusionModel m(cfg, 9);
    m.norm = toygen::fit_normalization(latents_of(recs));
    std::vector<Conditions> conds;
    for (int i = 0; i < 4; ++i) conds.push_back(full_conditions(recs[static_cast<std::size_t>(i)], cfg.gen.image_size));
    std::vector<const Conditions*> ptrs;
    for (const auto& c : conds) ptrs.push_back(&c);
    const Conditions null = m.null_conditions();
    const std::vector<const Conditions*> nulls(4, &null);
    Rng rng(3);
    const auto z = randn({4, 8, 8}, rng);
    const std::vector<int> ts{1, 250, 600, 1000};
    const auto full = m.predict_v(z, ts, m.encode(ptrs));
    const auto uncond = m.predict_v(z, ts, m.encode(nulls));
    const double e1 = max_abs_diff(diffusion::cfg_noise(m, z, ts, ptrs, 1, 1), full);
    const double e0 = max_abs_diff(diffusion::cfg_noise(m, z, ts, ptrs, 0, 0), uncond);
    const double gap = max_abs_diff(full, uncond);
    return {e1 <= 1e-6 && e0 <= 1e-6 && gap > 0, fmt("|w=1 - conditional|=%.1e |w=0 - unconditional|=%.1e (branches differ by %.2f)", e1, e0, gap)};
}

// --- 5-6: determinism and sampling statistics --------------------------------------

Outcome determinism() {
    const auto cfg = tiny_config();
    toygen::ToyGenerator gen(cfg.gen);

    const auto d1 = gen.build_dataset(256, 17), d2 = gen.build_dataset(256, 17);
    const auto tmp = fs::temp_directory_path() / ("mmld_accept_" + std::to_string(::getpid()));
    fs::create_directories(tmp);
    io::write_dataset(tmp / "a.bin", cfg.gen, d1);
    io::write_dataset(tmp / "b.bin", cfg.gen, d2);
    const bool data_same = io::read_file(tmp / "a.bin") == io::read_file(tmp / "b.bin");
    fs::remove_all(tmp);

    diffusion::TrainConfig tc;
    tc.steps = 40;
    tc.batch = 8;
    tc.seed = 5;
    auto train_log = [&] {
        diffusion::DiffusionModel m(cfg, 1);
        diffusion::Trainer tr(m, d1, tc);
        std::string log;
        while (!tr.done()) log += diffusion::log_line(tr.step()) + "\n";
        return log;
    };
    const auto l1 = train_log(), l2 = train_log();

    diffusion::DiffusionModel m(cfg, 3);
    m.norm = toygen::fit_normalization(latents_of(d1));
    std::vector<Conditions> conds;
    for (int i = 0; i < 8; ++i) conds.push_back(full_conditions(d1[static_cast<std::size_t>(i)], cfg.gen.image_size));
    diffusion::SampleConfig sc;
    sc.ddim_steps = 50;
    sc.omega_v = 2;
    sc.omega_a = 3;
    sc.seed = 77;
    const auto s1 = diffusion::ddim_sample(m, conds, sc), s2 = diffusion::ddim_sample(m, conds, sc);
    bool samples_same = true;
    for (std::size_t i = 0; i < conds.size(); ++i) samples_same = samples_same && s1.normalized[i] == s2.normalized[i];

    return {data_same && l1 == l2 && samples_same,
            fmt("dataset files identical=%d, 40-step training logs identical=%d, 8 DDIM eta=0 samples identical=%d", data_same, l1 == l2,
                samples_same)};
}

Outcome distributions() {
    toygen::ToyGenerator g(toygen::ToyGenConfig{});
    const auto rec = g.make_record(5, 0);
    cond::MaskingPolicy p;
    Rng rng(3);
    const int n = 10000;
    int na = 0, nr = 0, ns = 0;
    for (int i = 0; i < n; ++i) {
        const auto m = cond::apply_masking(rec, 64, p, rng);
        na += m.attrs_masked;
        nr += m.rgb_masked;
        ns += m.seg_masked;
    }
    Rng vr(8);
    int wide = 0;
    for (int i = 0; i < n; ++i) wide += toygen::sample_view(vr).fov >= 22.0;
    const double ra = na / double(n), rr = nr / double(n), rs = ns / double(n), rw = wide / double(n);
    const bool ok = std::abs(ra - 0.9) <= 0.02 && std::abs(rr - 0.9) <= 0.02 && std::abs(rs - 0.9) <= 0.02 && std::abs(rw - 0.7) <= 0.03 &&
                    std::abs(1 - rw - 0.3) <= 0.03;
    return {ok, fmt("masking rates attrs %.4f rgb %.4f seg %.4f; wide/narrow FOV %.4f / %.4f", ra, rr, rs, rw, 1 - rw)};
}

// --- desk-scale shared state -----------------------------------------------------

struct Desk {
    toygen::ToyGenConfig gen_cfg;
    std::unique_ptr<toygen::ToyGenerator> gen;
    std::vector<toygen::DatasetRecord> train;
    std::vector<toygen::DatasetRecord> held;
    std::unique_ptr<diffusion::DiffusionModel> model;
    std::vector<double> losses;
    double train_seconds = 0;
    baseline::TrainedPredictors predictors;
    std::optional<fs::path> cache;

    int size() const { return gen_cfg.image_size; }
};

constexpr std::uint64_t kDataSeed = 7, kHeldSeed = 8, kModelSeed = 1, kTrainSeed = 3;

std::vector<double> ema(const std::vector<double>& xs, int n) {
    std::vector<double> out;
    const double a = 2.0 / (n + 1);
    double e = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        e = i == 0 ? xs[i] : e + a * (xs[i] - e);
        out.push_back(e);
    }
    return out;
}

void prepare_desk(Desk& d) {
    d.gen = std::make_unique<toygen::ToyGenerator>(d.gen_cfg);
    d.train = d.gen->build_dataset(4096, kDataSeed);
    d.held = d.gen->build_dataset(256, kHeldSeed);

    const auto mc = diffusion::ModelConfig::make(d.gen_cfg, 64, 64);
    diffusion::TrainConfig tc;
    tc.steps = 3000;
    tc.batch = 32;
    tc.seed = kTrainSeed;

    const auto ck_path = d.cache ? std::optional(*d.cache / "desk.ckpt") : std::nullopt;
    const auto log_path = d.cache ? std::optional(*d.cache / "desk.log") : std::nullopt;
    if (ck_path && fs::exists(*ck_path) && fs::exists(*log_path)) {
        auto ck = io::read_checkpoint(*ck_path);
        if (io::to_json(ck.config) == io::to_json(mc) && ck.step == tc.steps) {
            d.model = io::instantiate(ck);
            std::ifstream f(*log_path);
            for (std::string line; std::getline(f, line);) d.losses.push_back(std::stod(line.substr(line.find(',') + 1)));
            note("reusing cached desk model from " + ck_path->string());
        }
    }
    if (!d.model) {
        d.model = std::make_unique<diffusion::DiffusionModel>(mc, kModelSeed);
        diffusion::Trainer tr(*d.model, d.train, tc);
        std::string log;
        const auto t0 = std::chrono::steady_clock::now();
        while (!tr.done()) {
            const auto st = tr.step();
            d.losses.push_back(st.loss);
            log += diffusion::log_line(st) + "\n";
            if (st.step % 500 == 0) note(fmt("desk training step %ld loss %.4f (%.0f s)", st.step, st.loss, seconds_since(t0)));
        }
        d.train_seconds = seconds_since(t0);
        if (ck_path) {
            io::write_checkpoint(*ck_path, io::capture(*d.model, kModelSeed, tc.steps, &tc));
            io::write_text(*log_path, log);
        }
    }

    const auto pred_path = d.cache ? std::optional(*d.cache / "predictors.bin") : std::nullopt;
    if (pred_path && fs::exists(*pred_path)) {
        d.predictors = baseline::read_predictors(*pred_path);
    } else {
        const auto t0 = std::chrono::steady_clock::now();
        d.predictors = baseline::train_predictors(d.train, baseline::PredictorConfig{});
        note(fmt("predictors trained in %.0f s: held-out attribute MAE %.4f, pixel accuracy %.4f", seconds_since(t0),
                 d.predictors.heldout.attr_mae, d.predictors.heldout.pixel_accuracy));
        if (pred_path) baseline::write_predictors(*pred_path, *d.predictors.net, d.predictors.heldout);
    }
}

toygen::Render render(const Desk& d, const Tensorf& latent, const toygen::ViewParams& view) {
    return d.gen->render(d.gen->decode(latent), view, toygen::RenderMode::Hard);
}

std::vector<float> attrs(const Desk& d, const Tensorf& latent) { return d.gen->attributes(d.gen->decode(latent)); }

// --- 7: training --------------------------------------------------------------------

Outcome training(const Desk& d) {
    if (d.losses.size() < 3000) return {false, fmt("only %zu logged steps", d.losses.size())};
    const auto e = ema(d.losses, 100);
    const double e100 = e[99], e3000 = e[2999];
    std::string detail = fmt("EMA(100) at step 100 = %.4f, at step 3000 = %.4f, ratio %.3f (need <= 0.5)", e100, e3000, e3000 / e100);
    if (d.train_seconds > 0) detail += fmt("; trained in %.0f s", d.train_seconds);
    return {e3000 <= 0.5 * e100, detail};
}

// --- 8: conditional adherence --------------------------------------------------------

Outcome adherence(const Desk& d) {
    diffusion::SampleConfig sc;
    sc.seed = 801;
    sc.omega_a = 3;

    Conditions glasses = d.model->null_conditions();
    glasses.attrs.values[toygen::kGlassesAttr] = 1.0f;
    glasses.attrs.mask[toygen::kGlassesAttr] = 0;
    const auto cond = diffusion::ddim_sample(*d.model, std::vector<Conditions>(128, glasses), sc);
    const auto uncond = diffusion::ddim_sample(*d.model, std::vector<Conditions>(128, d.model->null_conditions()), sc);
    int hit_c = 0, hit_u = 0;
    std::size_t inside = 0, total = 0;
    for (std::size_t i = 0; i < 128; ++i) {
        hit_c += attrs(d, cond.latents[i])[toygen::kGlassesAttr] > 0.5f;
        hit_u += attrs(d, uncond.latents[i])[toygen::kGlassesAttr] > 0.5f;
        for (const auto* r : {&cond, &uncond})
            for (float v : r->normalized[i].data()) {
                inside += std::abs(v) <= 1.5f;
                ++total;
            }
    }
    const double rc = hit_c / 128.0, ru = hit_u / 128.0;

    // Hair-region segmentation conditioning, scored on the hair class.
    std::vector<const toygen::DatasetRecord*> refs;
    for (const auto& r : d.held)
        if (refs.size() < 64 && std::count(r.seg.begin(), r.seg.end(), toygen::kHair) > 0) refs.push_back(&r);
    std::vector<Conditions> hair;
    for (const auto* r : refs) {
        Conditions c = d.model->null_conditions();
        c.visual.seg = r->seg;
        for (std::size_t j = 0; j < r->seg.size(); ++j) c.visual.seg_valid[j] = r->seg[j] == toygen::kHair;
        hair.push_back(std::move(c));
    }
    diffusion::SampleConfig hs;
    hs.seed = 802;
    const auto hc = diffusion::ddim_sample(*d.model, hair, hs);
    const auto hu = diffusion::ddim_sample(*d.model, std::vector<Conditions>(hair.size(), d.model->null_conditions()), hs);
    std::vector<double> mc, mu;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        mc.push_back(metrics::miou(render(d, hc.latents[i], refs[i]->view).seg, refs[i]->seg, {}, {toygen::kHair}));
        mu.push_back(metrics::miou(render(d, hu.latents[i], refs[i]->view).seg, refs[i]->seg, {}, {toygen::kHair}));
    }
    const double gain = mean(mc) - mean(mu);
    const bool ok = rc >= 0.70 && rc - ru >= 0.20 && gain >= 0.10;
    return {ok, fmt("glasses>0.5: conditional %.1f%% vs unconditional %.1f%% (128 each); hair mIOU %.3f vs %.3f, gain %.3f (64 each); "
                    "%.2f%% of sampled coordinates in [-1.5, 1.5]",
                    100 * rc, 100 * ru, mean(mc), mean(mu), gain, 100.0 * inside / total)};
}

// --- 9-10: editing --------------------------------------------------------------------

struct EditSet {
    std::vector<const toygen::DatasetRecord*> refs;
    std::vector<Conditions> reference, masked_edit, valid_edit;
    std::vector<float> target;
    diffusion::SampleConfig sample;
    diffusion::SampleResult pure_reference;
};

EditSet edit_set(const Desk& d) {
    EditSet e;
    e.sample.seed = 901;
    for (std::size_t i = 0; i < 16; ++i) {
        const auto& r = d.held[100 + i];
        e.refs.push_back(&r);
        Conditions ref = full_conditions(r, d.size());
        const float target = r.attrs[toygen::kBlondeHair] < 0.5f ? 1.0f : 0.0f;
        Conditions valid = ref;
        valid.attrs.values[toygen::kBlondeHair] = target;
        Conditions masked = valid;
        for (std::size_t j = 0; j < r.seg.size(); ++j)
            if (r.seg[j] == toygen::kHair) masked.visual.rgb_valid[j] = 0;
        e.reference.push_back(std::move(ref));
        e.valid_edit.push_back(std::move(valid));
        e.masked_edit.push_back(std::move(masked));
        e.target.push_back(target);
    }
    e.pure_reference = diffusion::ddim_sample(*d.model, e.reference, e.sample);
    return e;
}

diffusion::SampleResult run_edit(const Desk& d, const EditSet& e, const std::vector<Conditions>& edit, int t_rec) {
    diffusion::EditPlan plan;
    plan.reference = e.reference;
    plan.edit = edit;
    plan.t_rec = t_rec;
    plan.sample = e.sample;
    return diffusion::edit(*d.model, plan);
}

Outcome editing_trend(const Desk& d, const EditSet& e, diffusion::SampleResult& at_half) {
    const int steps = e.sample.ddim_steps;
    const std::vector<int> t_recs{0, steps / 2, steps * 9 / 10};
    std::vector<double> sim, drift, target_err;
    for (int t_rec : t_recs) {
        const auto out = run_edit(d, e, e.masked_edit, t_rec);
        if (t_rec == steps / 2) at_half = out;
        std::vector<double> s, dr, te;
        for (std::size_t i = 0; i < e.refs.size(); ++i) {
            const auto& view = e.refs[i]->view;
            s.push_back(metrics::id_similarity(*d.predictors.net, render(d, out.latents[i], view).rgb,
                                               render(d, e.pure_reference.latents[i], view).rgb));
            const auto a = attrs(d, out.latents[i]), ar = attrs(d, e.pure_reference.latents[i]);
            std::vector<std::uint8_t> others(a.size(), 0);
            others[toygen::kBlondeHair] = 1;
            dr.push_back(metrics::attr_error(ar, a, others));
            te.push_back(std::abs(a[toygen::kBlondeHair] - e.target[i]));
        }
        sim.push_back(mean(s));
        drift.push_back(mean(dr));
        target_err.push_back(mean(te));
    }
    const bool ok = sim[0] <= sim[1] && sim[1] <= sim[2] && drift[0] >= drift[1] && drift[1] >= drift[2];
    return {ok, fmt("t_rec 0/%d/%d: ID similarity %.4f / %.4f / %.4f; non-edited attribute error %.4f / %.4f / %.4f "
                    "(edit-target error %.3f / %.3f / %.3f)",
                    t_recs[1], t_recs[2], sim[0], sim[1], sim[2], drift[0], drift[1], drift[2], target_err[0], target_err[1],
                    target_err[2])};
}

Outcome masking_for_editing(const Desk& d, const EditSet& e, const diffusion::SampleResult& masked) {
    const int t_rec = e.sample.ddim_steps / 2;
    const auto valid = run_edit(d, e, e.valid_edit, t_rec);
    std::vector<double> cv, cm;
    for (std::size_t i = 0; i < e.refs.size(); ++i) {
        const float base = attrs(d, e.pure_reference.latents[i])[toygen::kBlondeHair];
        cv.push_back(std::abs(attrs(d, valid.latents[i])[toygen::kBlondeHair] - base));
        cm.push_back(std::abs(attrs(d, masked.latents[i])[toygen::kBlondeHair] - base));
    }
    const double ratio = mean(cv) / mean(cm);
    return {ratio < 0.5, fmt("blonde_hair change with hair RGB valid %.4f vs masked %.4f, ratio %.3f (t_rec %d, 16 seeds)", mean(cv),
                             mean(cm), ratio, t_rec)};
}

// --- 11: Frechet ----------------------------------------------------------------------

Outcome frechet(const Desk& d) {
    metrics::GaussianStats a, b;
    a.mean = Eigen::VectorXd::Random(6);
    Eigen::MatrixXd m = Eigen::MatrixXd::Random(6, 6);
    a.cov = m * m.transpose() + Eigen::MatrixXd::Identity(6, 6);
    const double self = metrics::frechet_distance(a, a);

    metrics::GaussianStats p{Eigen::VectorXd::Constant(1, 0.3), Eigen::MatrixXd::Constant(1, 1, 4.0)};
    metrics::GaussianStats q{Eigen::VectorXd::Constant(1, -1.2), Eigen::MatrixXd::Constant(1, 1, 0.25)};
    const double oned = std::abs(metrics::frechet_distance(p, q) - (std::pow(0.3 + 1.2, 2) + std::pow(2.0 - 0.5, 2)));

    b = a;
    b.mean = a.mean + Eigen::VectorXd::Random(6);
    const double eqcov = std::abs(metrics::frechet_distance(a, b) - (a.mean - b.mean).squaredNorm());

    auto images = [&](const std::vector<toygen::DatasetRecord>& recs, std::size_t from, std::size_t to) {
        std::vector<std::vector<float>> out;
        for (std::size_t i = from; i < to; ++i) out.emplace_back(recs[i].image.begin(), recs[i].image.end());
        for (auto& img : out)
            for (auto& v : img) v /= 255.0f;
        return out;
    };
    const auto half_a = images(d.train, 0, 2048), half_b = images(d.train, 2048, 4096);

    diffusion::DiffusionModel untrained(d.model->config(), 1102);
    untrained.norm = d.model->norm;
    diffusion::SampleConfig sc;
    sc.ddim_steps = 10;
    sc.seed = 1103;
    const auto s = diffusion::ddim_sample(untrained, std::vector<Conditions>(512, untrained.null_conditions()), sc);
    std::vector<std::vector<float>> gen_images;
    for (std::size_t i = 0; i < s.latents.size(); ++i) gen_images.push_back(render(d, s.latents[i], d.train[i].view).rgb);

    const double halves = metrics::toy_frechet(*d.predictors.net, half_a, half_b);
    const double vs_untrained = metrics::toy_frechet(*d.predictors.net, half_a, gen_images);
    const bool ok = self <= 1e-8 && oned <= 1e-6 && eqcov <= 1e-6 && halves < vs_untrained;
    return {ok, fmt("self %.1e, 1-D closed-form err %.1e, equal-covariance err %.1e; toy-Frechet train halves %.4f vs untrained samples %.4f",
                    self, oned, eqcov, halves, vs_untrained)};
}

// --- 12: baseline -----------------------------------------------------------------------

Outcome baseline_check(const Desk& d) {
    baseline::Inverter inv(*d.gen, d.model->norm, d.predictors.net.get());
    inv.set_mean_latent(baseline::mean_normalized_latent(d.train, d.model->norm));

    // Zero weights reproduce plain inversion step for step.
    const auto& r0 = d.held[200];
    auto t0 = baseline::InversionTarget::from_conditions(cond::full_visual(r0, d.size()), cond::full_attributes(r0.attrs), r0.view);
    baseline::BaselineConfig zero;
    zero.lambda_attr = zero.lambda_seg = 0;
    zero.iterations = 100;
    zero.seed = 1201;
    const auto mcz = inv.multi_conditional_invert(t0, zero);
    const auto plain = inv.invert(t0.rgb, t0.rgb_valid, t0.view, zero);
    const bool same = mcz.losses == plain.losses && mcz.latent == plain.latent;

    // Reconstruction of 16 soft-rendered targets.
    double first = 0, best = 0, secs = 0;
    int individual = 0;
    for (std::size_t i = 0; i < 16; ++i) {
        const auto& r = d.held[208 + i];
        const auto img = d.gen->render(d.gen->decode(r.latent), r.view, toygen::RenderMode::Soft, 0.5);
        baseline::BaselineConfig bc;
        bc.seed = derive_seed(1202, i);
        const auto res = inv.invert(img.rgb, {}, r.view, bc);
        first += res.losses.front();
        best += res.best_loss;
        secs += res.seconds;
        individual += res.best_loss <= 0.1 * res.losses.front();
    }
    const double drop = 1.0 - best / first;

    // Per-sample wall clock of the conditional benchmark.
    metrics::EvalSetup es;
    es.count = 4;
    es.seed = 1203;
    const auto ev = metrics::eval_suite(*d.model, inv, *d.predictors.net, es);
    const double speed = ev.baseline.seconds_per_sample / ev.diffusion.seconds_per_sample;

    const bool ok = same && drop >= 0.90 && speed >= 10;
    return {ok, fmt("zero-weight trajectory identical=%d; 400-iteration loss drop %.1f%% summed over 16 targets (%d/16 individually >= 90%%); "
                    "diffusion %.3f s/sample vs baseline %.2f s/inversion: %.1fx (plain inversion %.2f s)",
                    same, 100 * drop, individual, ev.diffusion.seconds_per_sample, ev.baseline.seconds_per_sample, speed, secs / 16)};
}

// --- 13: full size ----------------------------------------------------------------------

Outcome full_size() {
    unet::UNetConfig cfg;
    cfg.base_channels = 512;
    cfg.channel_mults = {1, 2, 4};
    cfg.k = 73;
    cfg.d = 512;
    cfg.d_cond = 512;
    ParamStore<float> ps;
    Rng rng(1301);
    unet::UNet<float> net(ps, cfg, rng);
    const double n = static_cast<double>(ps.count_scalars());

    const auto z = randn({1, 73, 512}, rng), c = randn({1, 12, 512}, rng);
    const auto t0 = std::chrono::steady_clock::now();
    double loss = 0;
    bool finite = true, live = false;
    {
        Tape<float> tape;
        auto out = net(tape, tape.constant(z), {500}, tape.constant(c));
        finite = out.shape() == z.shape();
        auto l = O::mean(O::sum_squares(out));
        loss = l.value().item();
        tape.backward(l);
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
        finite = finite && ps[i].grad.all_finite();
        for (float g : ps[i].grad.data()) live = live || g != 0;
    }
    const double secs = seconds_since(t0);
    const bool ok = n >= 0.8 * 225e6 && n <= 1.2 * 225e6 && finite && live && std::isfinite(loss);
    return {ok, fmt("%.1fM parameters (band 180M-270M); forward+backward %.1f s, loss %.4g, gradients finite=%d", n / 1e6, secs, loss,
                    finite && live)};
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance checks"};
    std::string only, cache;
    app.add_option("--only", only, "comma-separated criterion numbers");
    app.add_option("--cache", cache, "directory for the trained desk model and predictors");
    CLI11_PARSE(app, argc, argv);

    std::set<int> selected;
    if (only.empty()) {
        for (int i = 1; i <= 13; ++i) selected.insert(i);
    } else {
        std::stringstream ss(only);
        for (std::string tok; std::getline(ss, tok, ',');) selected.insert(std::stoi(tok));
    }

    int failed = 0;
    auto report = [&](int id, const std::string& name, const std::function<Outcome()>& fn) {
        if (!selected.count(id)) return;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("error: ") + e.what()};
        }
        failed += !o.pass;
        std::cout << fmt("criterion %2d  %s  %-22s %s  [%.1f s]", id, o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(),
                         seconds_since(t0))
                  << std::endl;
    };

    report(1, "gradients", gradients);
    report(2, "noise schedule", schedule);
    report(3, "v round trips", vparam);
    report(4, "guidance identities", guidance);
    report(5, "determinism", determinism);
    report(6, "sampling statistics", distributions);

    const bool need_desk = std::any_of(selected.begin(), selected.end(), [](int i) { return i >= 7 && i <= 12; });
    Desk desk;
    if (need_desk) {
        if (!cache.empty()) {
            fs::create_directories(cache);
            desk.cache = fs::path(cache);
        }
        const auto t0 = std::chrono::steady_clock::now();
        try {
            prepare_desk(desk);
            note(fmt("desk model and predictors ready in %.0f s", seconds_since(t0)));
        } catch (const std::exception& e) {
            note(std::string("desk setup failed: ") + e.what());
        }
    }
    auto with_desk = [&](auto fn) {
        return [&, fn] {
            if (!desk.model || !desk.predictors.net) throw std::runtime_error("desk setup unavailable");
            return fn();
        };
    };
    report(7, "desk training", with_desk([&] { return training(desk); }));
    report(8, "conditional adherence", with_desk([&] { return adherence(desk); }));

    std::optional<EditSet> edits;
    diffusion::SampleResult masked_half;
    if (desk.model && (selected.count(9) || selected.count(10))) edits = edit_set(desk);
    report(9, "editing trend", with_desk([&] { return editing_trend(desk, *edits, masked_half); }));
    report(10, "masking for editing", with_desk([&] {
               if (masked_half.latents.empty()) masked_half = run_edit(desk, *edits, edits->masked_edit, edits->sample.ddim_steps / 2);
               return masking_for_editing(desk, *edits, masked_half);
           }));
    report(11, "frechet distance", with_desk([&] { return frechet(desk); }));
    report(12, "baseline", with_desk([&] { return baseline_check(desk); }));
    report(13, "full-size model", full_size);

    std::cout << (failed ? fmt("%d criterion(s) failed", failed) : std::string("all selected criteria passed")) << std::endl;
    return failed ? 1 : 0;
}
