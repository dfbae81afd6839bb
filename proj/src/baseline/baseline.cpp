#include "mmld/baseline.hpp"

#include <chrono>
#include <cmath>
#include <sstream>

#include "mmld/io.hpp"

namespace mmld::baseline {

void PredictorConfig::validate() const {
    if (image_size < 8 || image_size % 8 != 0) throw std::invalid_argument("PredictorConfig: image_size must be a positive multiple of 8");
    if (n_attr <= 0 || feature_dim <= 0 || seg_width <= 0) throw std::invalid_argument("PredictorConfig: widths must be positive");
    if (steps <= 0 || batch <= 0) throw std::invalid_argument("PredictorConfig: steps and batch must be positive");
    if (!(lr > 0)) throw std::invalid_argument("PredictorConfig: lr must be positive");
    if (!(holdout_frac > 0 && holdout_frac < 0.5)) throw std::invalid_argument("PredictorConfig: holdout_frac must be in (0, 0.5)");
}

template <typename T>
Predictors<T>::Predictors(const PredictorConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    const std::size_t widths[] = {3, 16, 32, 32};
    for (int i = 0; i < 3; ++i)
        backbone_.emplace_back(ps_, "attr.conv" + std::to_string(i), widths[i], widths[i + 1], 3, rng, 2, std::sqrt(2.0));
    const std::size_t s8 = static_cast<std::size_t>(cfg_.image_size / 8);
    feat_ = nn::Linear<T>(ps_, "attr.feature", 32 * s8 * s8, static_cast<std::size_t>(cfg_.feature_dim), rng);
    head_ = nn::Linear<T>(ps_, "attr.head", static_cast<std::size_t>(cfg_.feature_dim), static_cast<std::size_t>(cfg_.n_attr), rng);
    const auto w = static_cast<std::size_t>(cfg_.seg_width);
    seg_.emplace_back(ps_, "seg.conv0", 3, w, 3, rng, 1, std::sqrt(2.0));
    seg_.emplace_back(ps_, "seg.conv1", w, w, 3, rng, 1, std::sqrt(2.0));
    seg_.emplace_back(ps_, "seg.out", w, static_cast<std::size_t>(toygen::kNumClasses), 1, rng);
}

template <typename T>
Var<T> Predictors<T>::features(Tape<T>& t, Var<T> image) const {
    const auto S = static_cast<std::size_t>(cfg_.image_size);
    if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != S || image.dim(3) != S)
        throw ShapeError("Predictors: expected images [B, 3, " + std::to_string(S) + ", " + std::to_string(S) + "], got " +
                         to_string(image.shape()));
    auto h = image;
    for (const auto& c : backbone_) h = ops::silu(c(t, h));
    h = ops::reshape(h, Shape{h.dim(0), h.value().size() / h.dim(0)});
    return feat_(t, h);
}

template <typename T>
Var<T> Predictors<T>::attributes(Tape<T>& t, Var<T> image) const {
    return ops::sigmoid(head_(t, ops::silu(features(t, image))));
}

template <typename T>
Var<T> Predictors<T>::seg_logits(Tape<T>& t, Var<T> image) const {
    const auto S = static_cast<std::size_t>(cfg_.image_size);
    if (image.rank() != 4 || image.dim(1) != 3 || image.dim(2) != S || image.dim(3) != S)
        throw ShapeError("Predictors: expected images [B, 3, S, S], got " + to_string(image.shape()));
    auto h = ops::silu(seg_[0](t, image));
    h = ops::silu(seg_[1](t, h));
    return seg_[2](t, h);
}

template class Predictors<float>;
template class Predictors<double>;

Tensorf image_tensor(const std::vector<float>& hwc, int size) {
    const auto n = static_cast<std::size_t>(size) * size;
    if (hwc.size() != 3 * n) throw ShapeError("image_tensor: expected [H, W, 3] data");
    Tensorf out(Shape{1, 3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < 3; ++c) out[c * n + i] = hwc[i * 3 + c];
    return out;
}

Tensorf image_batch(const std::vector<const toygen::DatasetRecord*>& records, int size) {
    const auto n = static_cast<std::size_t>(size) * size;
    Tensorf out(Shape{records.size(), 3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    for (std::size_t b = 0; b < records.size(); ++b) {
        const auto& img = records[b]->image;
        if (img.size() != 3 * n) throw ShapeError("image_batch: record image size mismatch");
        float* dst = out.raw() + b * 3 * n;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 3; ++c) dst[c * n + i] = static_cast<float>(img[i * 3 + c]) / 255.0f;
    }
    return out;
}

namespace {

struct Split {
    std::size_t train = 0;
};

Split split_of(std::size_t n, double holdout_frac) {
    const auto hold = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(n) * holdout_frac)));
    return Split{n - hold};
}

}  // namespace

PredictorMetrics evaluate_predictors(const Predictors<float>& p, const std::vector<toygen::DatasetRecord>& records) {
    if (records.empty()) throw std::invalid_argument("evaluate_predictors: no records");
    const int S = p.config().image_size;
    const std::size_t n = static_cast<std::size_t>(S) * S;
    const auto n_attr = static_cast<std::size_t>(p.config().n_attr);
    double abs_err = 0, correct = 0;
    for (std::size_t start = 0; start < records.size(); start += 32) {
        std::vector<const toygen::DatasetRecord*> batch;
        for (std::size_t i = start; i < std::min(records.size(), start + 32); ++i) batch.push_back(&records[i]);
        Tape<float> t(false);
        auto img = t.constant(image_batch(batch, S));
        const auto a = p.attributes(t, img).value();
        const auto logits = p.seg_logits(t, img).value();
        for (std::size_t b = 0; b < batch.size(); ++b) {
            if (batch[b]->attrs.size() != n_attr) throw ShapeError("evaluate_predictors: attribute count mismatch");
            for (std::size_t j = 0; j < n_attr; ++j) abs_err += std::abs(a[b * n_attr + j] - batch[b]->attrs[j]);
            const float* l = logits.raw() + b * toygen::kNumClasses * n;
            for (std::size_t i = 0; i < n; ++i) {
                int best = 0;
                for (int c = 1; c < toygen::kNumClasses; ++c)
                    if (l[static_cast<std::size_t>(c) * n + i] > l[static_cast<std::size_t>(best) * n + i]) best = c;
                correct += best == batch[b]->seg[i];
            }
        }
    }
    PredictorMetrics m;
    m.holdout = records.size();
    m.attr_mae = abs_err / static_cast<double>(records.size() * n_attr);
    m.pixel_accuracy = correct / static_cast<double>(records.size() * n);
    return m;
}

TrainedPredictors train_predictors(const std::vector<toygen::DatasetRecord>& records, const PredictorConfig& cfg) {
    cfg.validate();
    if (records.size() < 1000) throw std::invalid_argument("train_predictors: need at least 1000 records, got " + std::to_string(records.size()));
    const auto split = split_of(records.size(), cfg.holdout_frac);
    TrainedPredictors out;
    out.net = std::make_unique<Predictors<float>>(cfg, derive_seed(cfg.seed, 0));
    auto& net = *out.net;
    auto& ps = net.params();
    auto adam = adam_init(ps);
    LrSchedule sched{cfg.lr, cfg.steps, cfg.steps / 10, cfg.lr / 25};
    const int S = cfg.image_size;
    const std::size_t n = static_cast<std::size_t>(S) * S;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng rng(derive_seed(cfg.seed, 1, static_cast<std::uint64_t>(step)));
        std::vector<const toygen::DatasetRecord*> batch;
        Tensorf attrs(Shape{static_cast<std::size_t>(cfg.batch), static_cast<std::size_t>(cfg.n_attr)});
        std::vector<int> labels;
        labels.reserve(static_cast<std::size_t>(cfg.batch) * n);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& r = records[static_cast<std::size_t>(rng.integer(0, static_cast<int>(split.train) - 1))];
            if (r.attrs.size() != static_cast<std::size_t>(cfg.n_attr)) throw ShapeError("train_predictors: attribute count mismatch");
            batch.push_back(&r);
            for (int j = 0; j < cfg.n_attr; ++j)
                attrs[static_cast<std::size_t>(b * cfg.n_attr + j)] = r.attrs[static_cast<std::size_t>(j)];
            for (auto l : r.seg) labels.push_back(l);
        }
        Tape<float> t;
        auto img = t.constant(image_batch(batch, S));
        auto loss = ops::add(ops::mse(net.attributes(t, img), t.constant(attrs)), ops::cross_entropy(net.seg_logits(t, img), labels));
        ps.zero_grad();
        t.backward(loss);
        adam_step(ps, adam, onecycle_lr(step, sched));
    }
    const std::vector<toygen::DatasetRecord> held(records.begin() + static_cast<long>(split.train), records.end());
    out.heldout = evaluate_predictors(net, held);
    return out;
}

void write_predictors(const std::filesystem::path& path, const Predictors<float>& p, const PredictorMetrics& m) {
    const auto& c = p.config();
    io::TensorBlob b;
    b.meta = {{"kind", "predictors"},
              {"config",
               {{"image_size", c.image_size}, {"n_attr", c.n_attr}, {"feature_dim", c.feature_dim}, {"seg_width", c.seg_width},
                {"steps", c.steps}, {"batch", c.batch}, {"lr", c.lr}, {"holdout_frac", c.holdout_frac}, {"seed", c.seed}}},
              {"heldout", {{"attr_mae", m.attr_mae}, {"pixel_accuracy", m.pixel_accuracy}, {"count", m.holdout}}}};
    const auto& ps = p.params();
    for (std::size_t i = 0; i < ps.size(); ++i) b.tensors.push_back({ps[i].name, ps[i].value});
    io::write_file(path, io::encode_blob(b));
}

TrainedPredictors read_predictors(const std::filesystem::path& path) {
    const auto b = io::decode_blob(io::read_file(path));
    if (b.meta.value("kind", std::string()) != "predictors") throw io::FormatError(path.string() + " does not hold predictor weights");
    const auto& j = b.meta.at("config");
    PredictorConfig c;
    c.image_size = j.at("image_size");
    c.n_attr = j.at("n_attr");
    c.feature_dim = j.at("feature_dim");
    c.seg_width = j.at("seg_width");
    c.steps = j.at("steps");
    c.batch = j.at("batch");
    c.lr = j.at("lr");
    c.holdout_frac = j.at("holdout_frac");
    c.seed = j.at("seed");
    TrainedPredictors out;
    out.net = std::make_unique<Predictors<float>>(c, 0);
    auto& ps = out.net->params();
    if (ps.size() != b.tensors.size()) throw io::FormatError("predictor file has the wrong number of tensors");
    for (std::size_t i = 0; i < ps.size(); ++i) {
        if (b.tensors[i].name != ps[i].name || b.tensors[i].value.shape() != ps[i].value.shape())
            throw io::FormatError("predictor tensor " + b.tensors[i].name + " does not match the architecture");
        ps[i].value = b.tensors[i].value;
    }
    const auto& h = b.meta.at("heldout");
    out.heldout.attr_mae = h.at("attr_mae");
    out.heldout.pixel_accuracy = h.at("pixel_accuracy");
    out.heldout.holdout = h.at("count");
    return out;
}

std::vector<std::vector<float>> image_features(const Predictors<float>& p, const std::vector<std::vector<float>>& images) {
    const int S = p.config().image_size;
    std::vector<std::vector<float>> out;
    for (std::size_t start = 0; start < images.size(); start += 64) {
        const std::size_t count = std::min<std::size_t>(64, images.size() - start);
        const std::size_t n = static_cast<std::size_t>(S) * S * 3;
        Tensorf batch(Shape{count, 3, static_cast<std::size_t>(S), static_cast<std::size_t>(S)});
        for (std::size_t b = 0; b < count; ++b) {
            const auto one = image_tensor(images[start + b], S);
            std::copy(one.raw(), one.raw() + n, batch.raw() + b * n);
        }
        Tape<float> t(false);
        const auto f = p.features(t, t.constant(std::move(batch))).value();
        const std::size_t dim = f.dim(1);
        for (std::size_t b = 0; b < count; ++b) out.emplace_back(f.raw() + b * dim, f.raw() + (b + 1) * dim);
    }
    return out;
}

std::vector<float> image_features(const Predictors<float>& p, const std::vector<float>& hwc) {
    return image_features(p, std::vector<std::vector<float>>{hwc}).front();
}

// --- inversion ----------------------------------------------------------------

void BaselineConfig::validate() const {
    if (lambda_attr < 0 || lambda_seg < 0) throw std::invalid_argument("BaselineConfig: lambdas must be non-negative");
    if (!(lr > 0)) throw std::invalid_argument("BaselineConfig: lr must be positive");
    if (iterations <= 0) throw std::invalid_argument("BaselineConfig: iterations must be positive");
    if (!(tau > 0)) throw std::invalid_argument("BaselineConfig: tau must be positive");
    if (!(clamp > 0)) throw std::invalid_argument("BaselineConfig: clamp must be positive");
}

InversionTarget InversionTarget::from_conditions(const cond::VisualCondition& v, const cond::AttributeCondition& a,
                                                 const toygen::ViewParams& view) {
    InversionTarget t;
    t.view = view;
    if (v.rgb_any_valid()) {
        t.rgb = v.rgb;
        t.rgb_valid = v.rgb_valid;
    }
    if (v.seg_any_valid()) {
        t.seg = v.seg;
        t.seg_valid = v.seg_valid;
    }
    if (!a.all_masked()) {
        t.attrs = a.values;
        t.attr_mask = a.mask;
    }
    return t;
}

template <typename T>
Objective<T>::Objective(const toygen::ToyGenerator& g, const toygen::NormStats& norm, const Predictors<T>* p,
                        const InversionTarget& target, double la, double ls, double tau_)
    : gen(&g), predictors(p), lambda_attr(la), lambda_seg(ls), tau(tau_), view(target.view) {
    const auto& gc = g.config();
    const std::size_t L = gc.latent_size();
    if (norm.min.size() != L || norm.max.size() != L) throw ShapeError("Objective: normalization does not match the generator");
    scale = Tensor<T>(Shape{L});
    offset = Tensor<T>(Shape{L});
    for (std::size_t i = 0; i < L; ++i) {
        const double range = static_cast<double>(norm.max[i]) - norm.min[i];
        scale[i] = range < 1e-8 ? T(0) : static_cast<T>(0.5 * range);
        offset[i] = range < 1e-8 ? static_cast<T>(norm.min[i]) : static_cast<T>(norm.min[i] + 0.5 * range);
    }
    const auto S = static_cast<std::size_t>(gc.image_size);
    const std::size_t n = S * S;
    auto check_mask = [&](const std::vector<std::uint8_t>& m, const char* what) {
        if (!m.empty() && m.size() != n) throw ShapeError(std::string("Objective: ") + what + " mask must be [H, W]");
    };
    if (!target.rgb.empty()) {
        if (target.rgb.size() != 3 * n) throw ShapeError("Objective: rgb target must be [H, W, 3] at the generator size");
        check_mask(target.rgb_valid, "rgb");
        has_rgb = true;
        rgb = Tensor<T>(Shape{3, S, S});
        rgb_w = Tensor<T>(Shape{3, S, S});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t c = 0; c < 3; ++c) {
                rgb[c * n + i] = static_cast<T>(target.rgb[i * 3 + c]);
                rgb_w[c * n + i] = target.rgb_valid.empty() || target.rgb_valid[i] ? T(1) : T(0);
            }
    }
    if (la > 0 && !target.attrs.empty()) {
        if (!p) throw std::logic_error("Objective: attribute term needs predictors");
        const auto na = static_cast<std::size_t>(p->config().n_attr);
        if (target.attrs.size() != na) throw ShapeError("Objective: attribute target length mismatch");
        if (!target.attr_mask.empty() && target.attr_mask.size() != na) throw ShapeError("Objective: attribute mask length mismatch");
        has_attrs = true;
        attrs = Tensor<T>(Shape{1, na});
        attr_w = Tensor<T>(Shape{1, na});
        for (std::size_t j = 0; j < na; ++j) {
            attrs[j] = static_cast<T>(target.attrs[j]);
            attr_w[j] = target.attr_mask.empty() || !target.attr_mask[j] ? T(1) : T(0);
        }
    }
    if (ls > 0 && !target.seg.empty()) {
        if (!p) throw std::logic_error("Objective: segmentation term needs predictors");
        if (target.seg.size() != n) throw ShapeError("Objective: seg target must be [H, W] at the generator size");
        check_mask(target.seg_valid, "seg");
        has_seg = true;
        const auto C = static_cast<std::size_t>(toygen::kNumClasses);
        seg = Tensor<T>(Shape{1, C, S, S});
        seg_w = Tensor<T>(Shape{1, C, S, S});
        for (std::size_t i = 0; i < n; ++i) {
            if (target.seg[i] >= C) throw std::out_of_range("Objective: segmentation label out of range");
            seg[target.seg[i] * n + i] = T(1);
            const T w = target.seg_valid.empty() || target.seg_valid[i] ? T(1) : T(0);
            for (std::size_t c = 0; c < C; ++c) seg_w[c * n + i] = w;
        }
    }
    if (p && p->config().image_size != gc.image_size) throw ShapeError("Objective: predictor and generator image sizes differ");
}

template <typename T>
Var<T> Objective<T>::image(Tape<T>&, Var<T> z) const {
    const auto& gc = gen->config();
    auto flat = ops::reshape(z, Shape{gc.latent_size()});
    auto raw = ops::reshape(ops::affine_const(flat, scale, offset), Shape{static_cast<std::size_t>(gc.k), static_cast<std::size_t>(gc.d)});
    return gen->render_soft_var(gen->decode_var(raw), view, tau);
}

template <typename T>
Var<T> Objective<T>::operator()(Tape<T>& t, Var<T> z) const {
    const auto img = image(t, z);
    std::optional<Var<T>> loss;
    auto accumulate = [&](Var<T> term) { loss = loss ? ops::add(*loss, term) : term; };
    if (has_rgb) accumulate(ops::weighted_mse(img, t.constant(rgb), rgb_w));
    if (has_attrs || has_seg) {
        const auto S = static_cast<std::size_t>(gen->config().image_size);
        auto batch = ops::reshape(img, Shape{1, 3, S, S});
        if (has_attrs)
            accumulate(ops::scale(ops::weighted_mse(predictors->attributes(t, batch), t.constant(attrs), attr_w), static_cast<T>(lambda_attr)));
        if (has_seg) {
            auto prob = ops::softmax(predictors->seg_logits(t, batch), 1);
            accumulate(ops::scale(ops::weighted_mse(prob, t.constant(seg), seg_w), static_cast<T>(lambda_seg)));
        }
    }
    if (!loss) return ops::scale(ops::sum(z), T(0));
    return *loss;
}

template struct Objective<float>;
template struct Objective<double>;

Inverter::Inverter(const toygen::ToyGenerator& gen, toygen::NormStats norm, const Predictors<float>* predictors)
    : gen_(&gen), norm_(std::move(norm)), predictors_(predictors) {
    const Shape s{static_cast<std::size_t>(gen.config().k), static_cast<std::size_t>(gen.config().d)};
    if (norm_.min.shape() != s || norm_.max.shape() != s) throw ShapeError("Inverter: normalization does not match the generator");
    mean_ = Tensorf(s);
}

Tensorf Inverter::initial(const BaselineConfig& cfg) const {
    const Shape s = mean_.shape();
    if (!cfg.init_latent.empty()) {
        if (cfg.init_latent.shape() != s) throw ShapeError("Inverter: init_latent shape mismatch");
        return cfg.init_latent;
    }
    switch (cfg.init) {
        case InitMode::Zero:
            return Tensorf(s);
        case InitMode::Mean:
            return mean_;
        case InitMode::Random: {
            Rng rng(derive_seed(cfg.seed, 0x1417));
            Tensorf z(s);
            for (auto& v : z.data()) v = static_cast<float>(0.3 * rng.normal());
            return z;
        }
    }
    throw std::logic_error("Inverter: unknown init mode");
}

InversionResult Inverter::run(const InversionTarget& target, const BaselineConfig& cfg, double la, double ls) const {
    cfg.validate();
    const auto start = std::chrono::steady_clock::now();
    const Objective<float> obj(*gen_, norm_, predictors_, target, la, ls, cfg.tau);
    ParamStore<float> ps;
    auto& z = ps.add("z", initial(cfg));
    const auto lim = static_cast<float>(cfg.clamp);
    for (auto& v : z.value.data()) v = std::clamp(v, -lim, lim);
    auto adam = adam_init(ps);

    InversionResult res;
    res.best_loss = std::numeric_limits<double>::infinity();
    Tensorf best = z.value;
    for (int it = 0; it <= cfg.iterations; ++it) {
        Tape<float> t(it < cfg.iterations);
        Var<float> loss;
        try {
            loss = obj(t, t.param(z));
        } catch (const NumericError& e) {
            throw DivergenceError("inversion diverged at iteration " + std::to_string(it) + ": " + e.what());
        }
        const double l = loss.value().item();
        res.losses.push_back(l);
        if (l < res.best_loss) {
            res.best_loss = l;
            res.best_iteration = it;
            best = z.value;
        }
        // Oscillation near a tiny optimum is not divergence; losses are judged
        // against at least 1% of the starting objective.
        if (l > 10.0 * std::max(res.best_loss, 0.01 * res.losses.front()) + 1e-12) {
            std::ostringstream os;
            os << "inversion diverged at iteration " << it << ": loss " << l << " exceeds 10x the best " << res.best_loss
               << " (iteration " << res.best_iteration << "); try a smaller lr";
            throw DivergenceError(os.str());
        }
        if (it == cfg.iterations) break;
        ps.zero_grad();
        t.backward(loss);
        adam_step(ps, adam, cfg.lr);
        for (auto& v : z.value.data()) v = std::clamp(v, -lim, lim);
    }
    res.normalized = best;
    res.latent = toygen::denormalize(best, norm_);
    res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

InversionResult Inverter::invert(const std::vector<float>& rgb, const std::vector<std::uint8_t>& valid, const toygen::ViewParams& view,
                                 const BaselineConfig& cfg) const {
    if (rgb.empty()) throw std::invalid_argument("invert: empty target image");
    InversionTarget t;
    t.rgb = rgb;
    t.rgb_valid = valid;
    t.view = view;
    return run(t, cfg, 0.0, 0.0);
}

InversionResult Inverter::multi_conditional_invert(const InversionTarget& target, const BaselineConfig& cfg) const {
    auto any = [](const std::vector<std::uint8_t>& m, bool want) {
        if (m.empty()) return true;
        for (auto v : m)
            if ((v != 0) == want) return true;
        return false;
    };
    const bool rgb = !target.rgb.empty() && any(target.rgb_valid, true);
    const bool seg = !target.seg.empty() && any(target.seg_valid, true);
    const bool attrs = !target.attrs.empty() && any(target.attr_mask, false);
    if (!rgb && !seg && !attrs) throw std::invalid_argument("multi_conditional_invert: all conditions are null");
    if ((seg && cfg.lambda_seg > 0) || (attrs && cfg.lambda_attr > 0))
        if (!predictors_) throw std::logic_error("multi_conditional_invert: attribute and segmentation terms need trained predictors");
    return run(target, cfg, cfg.lambda_attr, cfg.lambda_seg);
}

Tensorf mean_normalized_latent(const std::vector<toygen::DatasetRecord>& records, const toygen::NormStats& norm) {
    if (records.empty()) throw std::invalid_argument("mean_normalized_latent: no records");
    Tensord acc(norm.min.shape());
    for (const auto& r : records) {
        const auto z = toygen::normalize(r.latent, norm);
        for (std::size_t i = 0; i < z.size(); ++i) acc[i] += z[i];
    }
    Tensorf out(norm.min.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(acc[i] / static_cast<double>(records.size()));
    return out;
}

}  // namespace mmld::baseline
