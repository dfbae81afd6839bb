#include "mmld/metrics.hpp"

#include <chrono>
#include <cmath>
#include <functional>
#include <iomanip>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>

#include "mmld/io.hpp"

namespace mmld::metrics {

namespace {

std::size_t counted(const std::vector<std::uint8_t>& mask, std::size_t pixels) {
    if (mask.empty()) return pixels;
    if (mask.size() != pixels) throw ShapeError("metric mask size does not match the image");
    return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; }));
}

bool in_mask(const std::vector<std::uint8_t>& mask, std::size_t i) { return mask.empty() || mask[i] != 0; }

}  // namespace

double psnr(const std::vector<float>& a, const std::vector<float>& b, int channels, const std::vector<std::uint8_t>& mask) {
    if (a.size() != b.size()) throw ShapeError("psnr: image sizes differ");
    if (channels <= 0 || a.size() % static_cast<std::size_t>(channels) != 0) throw ShapeError("psnr: bad channel count");
    const std::size_t pixels = a.size() / static_cast<std::size_t>(channels);
    const std::size_t n = counted(mask, pixels);
    if (n == 0) throw std::invalid_argument("psnr: empty mask");
    double se = 0;
    for (std::size_t i = 0; i < pixels; ++i) {
        if (!in_mask(mask, i)) continue;
        for (int c = 0; c < channels; ++c) {
            const double d = static_cast<double>(a[i * channels + c]) - b[i * channels + c];
            se += d * d;
        }
    }
    const double mse = se / static_cast<double>(n * static_cast<std::size_t>(channels));
    if (mse == 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

double ssim(const std::vector<float>& a, const std::vector<float>& b, int size, int channels, const std::vector<std::uint8_t>& mask) {
    constexpr int kWin = 11;
    constexpr double kSigma = 1.5, C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    if (size < kWin) throw std::invalid_argument("ssim: image smaller than the 11x11 window");
    const auto S = static_cast<std::size_t>(size);
    if (channels <= 0 || a.size() != S * S * static_cast<std::size_t>(channels) || b.size() != a.size())
        throw ShapeError("ssim: image sizes differ or do not match size x size x channels");
    if (!mask.empty() && mask.size() != S * S) throw ShapeError("ssim: mask size does not match the image");

    std::array<double, kWin> g{};
    double gs = 0;
    for (int i = 0; i < kWin; ++i) gs += g[static_cast<std::size_t>(i)] = std::exp(-((i - 5) * (i - 5)) / (2 * kSigma * kSigma));
    for (auto& v : g) v /= gs;

    const std::size_t O = S - kWin + 1;  // valid-filter output size
    // Separable Gaussian filter of a plane, valid region only.
    auto filter = [&](const std::vector<double>& src) {
        std::vector<double> tmp(S * O), out(O * O);
        for (std::size_t y = 0; y < S; ++y)
            for (std::size_t x = 0; x < O; ++x) {
                double acc = 0;
                for (int k = 0; k < kWin; ++k) acc += g[static_cast<std::size_t>(k)] * src[y * S + x + static_cast<std::size_t>(k)];
                tmp[y * O + x] = acc;
            }
        for (std::size_t y = 0; y < O; ++y)
            for (std::size_t x = 0; x < O; ++x) {
                double acc = 0;
                for (int k = 0; k < kWin; ++k) acc += g[static_cast<std::size_t>(k)] * tmp[(y + static_cast<std::size_t>(k)) * O + x];
                out[y * O + x] = acc;
            }
        return out;
    };

    double total = 0;
    std::size_t windows = 0;
    for (int c = 0; c < channels; ++c) {
        std::vector<double> pa(S * S), pb(S * S), aa(S * S), bb(S * S), ab(S * S);
        for (std::size_t i = 0; i < S * S; ++i) {
            pa[i] = a[i * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
            pb[i] = b[i * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)];
            aa[i] = pa[i] * pa[i];
            bb[i] = pb[i] * pb[i];
            ab[i] = pa[i] * pb[i];
        }
        const auto ma = filter(pa), mb = filter(pb), saa = filter(aa), sbb = filter(bb), sab = filter(ab);
        for (std::size_t y = 0; y < O; ++y)
            for (std::size_t x = 0; x < O; ++x) {
                if (!mask.empty() && !mask[(y + 5) * S + x + 5]) continue;
                const std::size_t i = y * O + x;
                const double va = saa[i] - ma[i] * ma[i], vb = sbb[i] - mb[i] * mb[i], cov = sab[i] - ma[i] * mb[i];
                total += ((2 * ma[i] * mb[i] + C1) * (2 * cov + C2)) / ((ma[i] * ma[i] + mb[i] * mb[i] + C1) * (va + vb + C2));
                ++windows;
            }
    }
    if (windows == 0) throw std::invalid_argument("ssim: mask selects no complete window");
    return total / static_cast<double>(windows);
}

double miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target, const std::vector<std::uint8_t>& mask,
            const std::vector<int>& class_set) {
    constexpr int classes = toygen::kNumClasses;
    if (pred.size() != target.size()) throw ShapeError("miou: map sizes differ");
    std::vector<bool> wanted(classes, class_set.empty());
    for (int c : class_set) {
        if (c < 0 || c >= classes) throw std::out_of_range("miou: class outside the class set");
        wanted[static_cast<std::size_t>(c)] = true;
    }
    if (counted(mask, pred.size()) == 0) throw std::invalid_argument("miou: empty valid region");
    std::vector<std::size_t> inter(static_cast<std::size_t>(classes)), uni(static_cast<std::size_t>(classes));
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (!in_mask(mask, i)) continue;
        const auto p = pred[i], t = target[i];
        if (p >= classes || t >= classes) throw std::out_of_range("miou: label outside the class set");
        if (p == t) {
            ++inter[p];
            ++uni[p];
        } else {
            ++uni[p];
            ++uni[t];
        }
    }
    double sum = 0;
    int present = 0;
    for (std::size_t c = 0; c < uni.size(); ++c) {
        if (uni[c] == 0 || !wanted[c]) continue;
        sum += static_cast<double>(inter[c]) / static_cast<double>(uni[c]);
        ++present;
    }
    if (present == 0) throw std::invalid_argument("miou: no selected class occurs in the valid region");
    return sum / present;
}

double attr_error(const std::vector<float>& target, const std::vector<float>& measured, const std::vector<std::uint8_t>& mask) {
    if (target.size() != measured.size()) throw ShapeError("attr_error: attribute vectors differ in length");
    if (!mask.empty() && mask.size() != target.size()) throw ShapeError("attr_error: mask length mismatch");
    double sum = 0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < target.size(); ++i) {
        if (!mask.empty() && mask[i]) continue;
        sum += std::abs(static_cast<double>(target[i]) - measured[i]);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("attr_error: no conditioned attribute slots");
    return sum / static_cast<double>(n);
}

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size() || a.empty()) throw ShapeError("cosine_similarity: vectors differ in length");
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += static_cast<double>(a[i]) * b[i];
        aa += static_cast<double>(a[i]) * a[i];
        bb += static_cast<double>(b[i]) * b[i];
    }
    if (aa == 0 || bb == 0) throw NumericError("cosine_similarity: zero vector");
    return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double l2_distance(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) throw ShapeError("l2_distance: vectors differ in length");
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) s += std::pow(static_cast<double>(a[i]) - b[i], 2);
    return std::sqrt(s);
}

double id_similarity(const baseline::Predictors<float>& p, const std::vector<float>& image_a, const std::vector<float>& image_b) {
    const auto f = baseline::image_features(p, std::vector<std::vector<float>>{image_a, image_b});
    return cosine_similarity(f[0], f[1]);
}

double featdist(const baseline::Predictors<float>& p, const std::vector<float>& image_a, const std::vector<float>& image_b) {
    const auto f = baseline::image_features(p, std::vector<std::vector<float>>{image_a, image_b});
    return l2_distance(f[0], f[1]);
}

// --- Frechet ----------------------------------------------------------------------

void GaussianStats::validate() const {
    const auto n = mean.size();
    if (n == 0 || cov.rows() != n || cov.cols() != n) throw ShapeError("GaussianStats: mean/covariance dimensions disagree");
    if ((cov - cov.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw NumericError("GaussianStats: covariance is not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() < -1e-8) throw NumericError("GaussianStats: covariance is not positive semi-definite");
}

GaussianStats gaussian_stats(const std::vector<std::vector<float>>& features) {
    if (features.size() < 2) throw std::invalid_argument("gaussian_stats: need at least two feature vectors");
    const auto d = static_cast<Eigen::Index>(features[0].size());
    Eigen::MatrixXd x(static_cast<Eigen::Index>(features.size()), d);
    for (std::size_t i = 0; i < features.size(); ++i) {
        if (static_cast<Eigen::Index>(features[i].size()) != d) throw ShapeError("gaussian_stats: ragged feature vectors");
        for (Eigen::Index j = 0; j < d; ++j) x(static_cast<Eigen::Index>(i), j) = features[i][static_cast<std::size_t>(j)];
    }
    GaussianStats s;
    s.mean = x.colwise().mean().transpose();
    const Eigen::MatrixXd c = x.rowwise() - s.mean.transpose();
    s.cov = (c.transpose() * c) / static_cast<double>(features.size() - 1);
    s.cov = 0.5 * (s.cov + s.cov.transpose());
    return s;
}

namespace {

// Symmetric PSD square root; eigenvalues in [-1e-6, 0) are treated as zero.
Eigen::MatrixXd psd_sqrt(const Eigen::MatrixXd& m, const char* what) {
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()));
    Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() < -1e-6) throw NumericError(std::string("frechet_distance: ") + what + " is not positive semi-definite");
    ev = ev.cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const GaussianStats& a, const GaussianStats& b) {
    if (a.mean.size() != b.mean.size() || a.cov.rows() != b.cov.rows()) throw ShapeError("frechet_distance: dimension mismatch");
    a.validate();
    b.validate();
    const Eigen::MatrixXd r = psd_sqrt(a.cov, "first covariance");
    const Eigen::MatrixXd m = r * b.cov * r;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (m + m.transpose()), Eigen::EigenvaluesOnly);
    const Eigen::VectorXd ev = es.eigenvalues();
    if (ev.minCoeff() < -1e-6) throw NumericError("frechet_distance: covariance product is not positive semi-definite");
    const double tr_sqrt = ev.cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (a.mean - b.mean).squaredNorm() + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

double toy_frechet(const baseline::Predictors<float>& p, const std::vector<std::vector<float>>& images_a,
                   const std::vector<std::vector<float>>& images_b) {
    return frechet_distance(gaussian_stats(baseline::image_features(p, images_a)), gaussian_stats(baseline::image_features(p, images_b)));
}

// --- evaluation -----------------------------------------------------------------

Task parse_task(const std::string& name) {
    if (name == "face-rgb" || name == "face-rgb+hair-seg+hair-attr") return Task::FaceRgbHairSegHairAttr;
    if (name == "half-rgb" || name == "half-rgb+half-seg") return Task::HalfRgbHalfSeg;
    throw std::invalid_argument("unknown task '" + name + "' (expected face-rgb or half-rgb)");
}

std::string task_name(Task t) { return t == Task::FaceRgbHairSegHairAttr ? "face-rgb+hair-seg+hair-attr" : "half-rgb+half-seg"; }

diffusion::Conditions task_conditions(Task t, const toygen::DatasetRecord& rec, int n_attr, int size) {
    diffusion::Conditions c;
    c.visual = cond::full_visual(rec, size);
    const auto S = static_cast<std::size_t>(size);
    c.attrs = diffusion::null_conditions(n_attr, size).attrs;
    for (std::size_t y = 0; y < S; ++y)
        for (std::size_t x = 0; x < S; ++x) {
            const std::size_t i = y * S + x;
            if (t == Task::FaceRgbHairSegHairAttr) {
                const auto l = c.visual.seg[i];
                c.visual.rgb_valid[i] = l == toygen::kSkin || l == toygen::kEyes || l == toygen::kGlasses;
                c.visual.seg_valid[i] = l == toygen::kHair;
            } else {
                c.visual.rgb_valid[i] = x < S / 2;
                c.visual.seg_valid[i] = x >= S / 2;
            }
        }
    if (t == Task::FaceRgbHairSegHairAttr) {
        if (n_attr <= toygen::kBlondeHair) throw std::invalid_argument("task_conditions: no hair-colour attribute slot");
        c.attrs.values[toygen::kBlondeHair] = rec.attrs.at(toygen::kBlondeHair);
        c.attrs.mask[toygen::kBlondeHair] = 0;
    }
    return c;
}

void EvalReport::add(const std::string& metric, double value) {
    if (!per_sample.count(metric)) metric_names.push_back(metric);
    per_sample[metric].push_back(value);
}

void EvalReport::finalize() {
    means.clear();
    for (const auto& [name, v] : per_sample) {
        if (v.size() != count) throw std::logic_error("EvalReport: metric " + name + " has the wrong number of samples");
        means[name] = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    }
}

nlohmann::json EvalReport::to_json() const {
    nlohmann::json j{{"task", task}, {"method", method}, {"count", count}, {"config_hash", config_hash},
                     {"seconds_per_sample", seconds_per_sample}, {"means", means}, {"per_sample", per_sample},
                     {"metrics", metric_names}};
    j["notes"] = {{"attr_l1", "mean absolute attribute difference; lower is better"},
                  {"featdist", "L2 distance between predictor features; lower is better"},
                  {"id", "cosine of predictor features, identity proxy; higher is better"}};
    return j;
}

std::string EvalReport::to_csv() const {
    std::ostringstream os;
    os << std::setprecision(9) << "sample";
    for (const auto& m : metric_names) os << ',' << m;
    os << '\n';
    for (std::size_t i = 0; i < count; ++i) {
        os << i;
        for (const auto& m : metric_names) os << ',' << per_sample.at(m).at(i);
        os << '\n';
    }
    return os.str();
}

namespace {

std::string hash_hex(const std::string& s) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << std::hash<std::string>{}(s);
    return os.str();
}

void score(EvalReport& r, Task task, const toygen::ToyGenerator& gen, const baseline::Predictors<float>& predictors,
           const toygen::DatasetRecord& source, const diffusion::Conditions& c, const Tensorf& latent) {
    const auto params = gen.decode(latent);
    const auto out = gen.render(params, source.view, toygen::RenderMode::Hard);
    const auto& src_rgb = c.visual.rgb;
    const int S = gen.config().image_size;
    r.add("psnr", psnr(out.rgb, src_rgb, 3, c.visual.rgb_valid));
    r.add("ssim", ssim(out.rgb, src_rgb, S, 3, c.visual.rgb_valid));
    r.add("miou", miou(out.seg, source.seg, c.visual.seg_valid));
    if (task == Task::FaceRgbHairSegHairAttr) r.add("attr_l1", attr_error(c.attrs.values, gen.attributes(params), c.attrs.mask));
    const auto f = baseline::image_features(predictors, std::vector<std::vector<float>>{out.rgb, src_rgb});
    r.add("id", cosine_similarity(f[0], f[1]));
    r.add("featdist", l2_distance(f[0], f[1]));
}

}  // namespace

EvalPair eval_suite(const diffusion::DiffusionModel& model, const baseline::Inverter& inverter,
                    const baseline::Predictors<float>& predictors, const EvalSetup& setup) {
    if (setup.count == 0) throw std::invalid_argument("eval_suite: count must be positive");
    const auto& mc = model.config();
    const toygen::ToyGenerator gen(mc.gen);
    const auto sources = gen.build_dataset(setup.count, derive_seed(setup.seed, 0xe7a1));
    std::vector<diffusion::Conditions> conds;
    for (const auto& r : sources) conds.push_back(task_conditions(setup.task, r, mc.gen.n_attr, mc.gen.image_size));

    nlohmann::json hash_src{{"model", io::to_json(mc)}, {"task", task_name(setup.task)}, {"count", setup.count}, {"seed", setup.seed},
                            {"steps", setup.sample.ddim_steps}, {"eta", setup.sample.eta}, {"omega_v", setup.sample.omega_v},
                            {"omega_a", setup.sample.omega_a}, {"baseline_lr", setup.baseline.lr},
                            {"baseline_iterations", setup.baseline.iterations}, {"lambda_attr", setup.baseline.lambda_attr},
                            {"lambda_seg", setup.baseline.lambda_seg}};
    const std::string hash = hash_hex(hash_src.dump());

    EvalPair out;
    for (auto* r : {&out.diffusion, &out.baseline}) {
        r->task = task_name(setup.task);
        r->count = setup.count;
        r->config_hash = hash;
    }
    out.diffusion.method = "diffusion";
    out.baseline.method = "baseline";

    auto sc = setup.sample;
    sc.seed = derive_seed(setup.seed, 1);
    sc.noise_seed = derive_seed(setup.seed, 2);
    const auto t0 = std::chrono::steady_clock::now();
    const auto samples = diffusion::ddim_sample(model, conds, sc);
    out.diffusion.seconds_per_sample =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / static_cast<double>(setup.count);

    double baseline_seconds = 0;
    for (std::size_t i = 0; i < setup.count; ++i) {
        score(out.diffusion, setup.task, gen, predictors, sources[i], conds[i], samples.latents[i]);
        auto bc = setup.baseline;
        bc.seed = derive_seed(setup.seed, 3, i);
        const auto target = baseline::InversionTarget::from_conditions(conds[i].visual, conds[i].attrs, sources[i].view);
        const auto inv = inverter.multi_conditional_invert(target, bc);
        baseline_seconds += inv.seconds;
        score(out.baseline, setup.task, gen, predictors, sources[i], conds[i], inv.latent);
    }
    out.baseline.seconds_per_sample = baseline_seconds / static_cast<double>(setup.count);
    for (auto* r : {&out.diffusion, &out.baseline}) {
        r->add("seconds", r->seconds_per_sample);
        for (std::size_t i = 1; i < setup.count; ++i) r->per_sample["seconds"].push_back(r->seconds_per_sample);
        r->finalize();
    }
    return out;
}

}  // namespace mmld::metrics
