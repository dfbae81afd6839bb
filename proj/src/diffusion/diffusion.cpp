#include "mmld/diffusion.hpp"

#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace mmld::diffusion {

namespace {

void check_batch(const Tensorf& a, const Tensorf& b, const std::vector<int>& t, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    if (a.rank() < 1 || a.dim(0) != t.size())
        throw ShapeError(std::string(what) + ": need one timestep per leading index");
}

// out = ca(t) * a + cb(t) * b per sample.
template <typename Fa, typename Fb>
Tensorf per_sample_mix(const Tensorf& a, const Tensorf& b, const std::vector<int>& t, Fa ca, Fb cb) {
    Tensorf out(a.shape());
    const std::size_t per = a.size() / t.size();
    for (std::size_t i = 0; i < t.size(); ++i) {
        const float x = static_cast<float>(ca(t[i])), y = static_cast<float>(cb(t[i]));
        for (std::size_t j = 0; j < per; ++j) out[i * per + j] = x * a[i * per + j] + y * b[i * per + j];
    }
    return out;
}

Tensorf stack_batch(const std::vector<const Tensorf*>& xs) {
    Shape s = xs.front()->shape();
    std::size_t total = 0;
    for (const auto* x : xs) total += x->dim(0);
    s[0] = total;
    Tensorf out(s);
    std::size_t off = 0;
    for (const auto* x : xs) {
        std::copy(x->data().begin(), x->data().end(), out.raw() + off);
        off += x->size();
    }
    return out;
}

Tensorf slice_batch(const Tensorf& x, std::size_t start, std::size_t count) {
    Shape s = x.shape();
    const std::size_t per = x.size() / s[0];
    s[0] = count;
    Tensorf out(s);
    std::copy(x.raw() + start * per, x.raw() + (start + count) * per, out.raw());
    return out;
}

Tensorf stack_latents(const std::vector<Tensorf>& xs, const std::vector<std::size_t>& idx) {
    const Shape& s = xs.at(idx.front()).shape();
    Tensorf out(Shape{idx.size(), s[0], s[1]});
    const std::size_t per = xs[idx.front()].size();
    for (std::size_t i = 0; i < idx.size(); ++i) std::copy(xs[idx[i]].data().begin(), xs[idx[i]].data().end(), out.raw() + i * per);
    return out;
}

// Condition tokens for the three guidance branches (null/null, visual/null,
// visual/attrs), each [B, N, d_cond].
struct GuidanceTokens {
    Tensorf branch[3];
};

GuidanceTokens encode_guidance(const DiffusionModel& m, const std::vector<const Conditions*>& conds) {
    const Conditions null = m.null_conditions();
    std::vector<const cond::AttributeCondition*> attrs;
    std::vector<const cond::VisualCondition*> visual;
    for (int b = 0; b < 3; ++b)
        for (const auto* c : conds) {
            attrs.push_back(b == 2 ? &c->attrs : &null.attrs);
            visual.push_back(b == 0 ? &null.visual : &c->visual);
        }
    Tape<float> tape(false);
    Rng unused(0);
    const Tensorf all = m.encode(tape, attrs, visual, unused, true).value();
    GuidanceTokens g;
    for (std::size_t b = 0; b < 3; ++b) g.branch[b] = slice_batch(all, b * conds.size(), conds.size());
    return g;
}

// Evaluates only the branches with a non-zero guidance coefficient, in one
// batched network call, and combines them.
Tensorf guided_v(const DiffusionModel& m, const Tensorf& z, const std::vector<int>& steps, const GuidanceTokens& g,
                 double omega_v, double omega_a) {
    const double coef[3] = {1.0 - omega_v, omega_v - omega_a, omega_a};
    std::vector<std::size_t> live;
    for (std::size_t b = 0; b < 3; ++b)
        if (coef[b] != 0.0) live.push_back(b);
    Tensorf out(z.shape());
    if (live.empty()) return out;
    std::vector<const Tensorf*> zs, cs;
    std::vector<int> ts;
    for (auto b : live) {
        zs.push_back(&z);
        cs.push_back(&g.branch[b]);
        ts.insert(ts.end(), steps.begin(), steps.end());
    }
    const Tensorf v = m.predict_v(stack_batch(zs), ts, stack_batch(cs));
    for (std::size_t i = 0; i < live.size(); ++i) {
        const float c = static_cast<float>(coef[live[i]]);
        const float* src = v.raw() + i * z.size();
        for (std::size_t j = 0; j < z.size(); ++j) out[j] += c * src[j];
    }
    return out;
}

std::vector<const Conditions*> pointers(const std::vector<Conditions>& c, std::size_t start, std::size_t count) {
    std::vector<const Conditions*> out;
    for (std::size_t i = start; i < start + count; ++i) out.push_back(&c[i]);
    return out;
}

SampleResult run_trajectories(const DiffusionModel& m, const std::vector<Conditions>& first,
                              const std::vector<Conditions>& second, int switch_at, const SampleConfig& cfg) {
    const auto& sched = m.schedule();
    cfg.validate(sched.T);
    if (second.empty()) throw std::invalid_argument("sampling: no conditions given");
    if (first.size() != second.size()) throw std::invalid_argument("sampling: reference and edit condition counts differ");
    if (m.norm.min.empty()) throw std::logic_error("sampling: model has no normalization statistics (untrained checkpoint?)");
    const bool same = &first == &second;
    const auto ts = ddim_timesteps(sched.T, cfg.ddim_steps);
    const std::size_t k = static_cast<std::size_t>(m.config().gen.k), d = static_cast<std::size_t>(m.config().gen.d);
    const std::size_t per = k * d;

    SampleResult res;
    for (std::size_t start = 0; start < second.size(); start += static_cast<std::size_t>(cfg.max_batch)) {
        const std::size_t B = std::min(static_cast<std::size_t>(cfg.max_batch), second.size() - start);
        Tensorf z(Shape{B, k, d});
        for (std::size_t i = 0; i < B; ++i) {
            Rng r(derive_seed(cfg.seed, start + i));
            for (std::size_t j = 0; j < per; ++j) z[i * per + j] = static_cast<float>(r.normal());
        }
        const GuidanceTokens g2 = encode_guidance(m, pointers(second, start, B));
        const GuidanceTokens g1 = same || switch_at == 0 ? g2 : encode_guidance(m, pointers(first, start, B));

        for (std::size_t j = 0; j < ts.size(); ++j) {
            const int t = ts[j], t_prev = j + 1 < ts.size() ? ts[j + 1] : 0;
            const std::vector<int> steps(B, t);
            const Tensorf v = guided_v(m, z, steps, static_cast<int>(j) < switch_at ? g1 : g2, cfg.omega_v, cfg.omega_a);
            const double ab = sched.ab(t), abp = sched.ab(t_prev);
            const double sa = std::sqrt(ab), sb = std::sqrt(1.0 - ab);
            const double sigma = cfg.eta * std::sqrt((1.0 - abp) / (1.0 - ab)) * std::sqrt(std::max(0.0, 1.0 - ab / abp));
            const double dir = std::sqrt(std::max(0.0, 1.0 - abp - sigma * sigma));
            for (std::size_t i = 0; i < B; ++i) {
                std::optional<Rng> noise;
                if (sigma > 0) noise.emplace(derive_seed(cfg.noise_seed, start + i, j + 1));
                for (std::size_t q = 0; q < per; ++q) {
                    const std::size_t o = i * per + q;
                    const double x0 = sa * z[o] - sb * v[o];
                    const double eps = sb * z[o] + sa * v[o];
                    double next = std::sqrt(abp) * x0 + dir * eps;
                    if (noise) next += sigma * noise->normal();
                    z[o] = static_cast<float>(next);
                }
            }
        }
        for (std::size_t i = 0; i < B; ++i) {
            Tensorf x(Shape{k, d});
            std::copy(z.raw() + i * per, z.raw() + (i + 1) * per, x.raw());
            if (!x.all_finite()) throw NumericError("sampling produced non-finite latents");
            res.latents.push_back(toygen::denormalize(x, m.norm));
            res.normalized.push_back(std::move(x));
        }
    }
    return res;
}

}  // namespace

// --- schedule ---------------------------------------------------------------
double NoiseSchedule::ab(int t) const {
    if (t < 0 || t > T) throw std::out_of_range("timestep " + std::to_string(t) + " outside [0, " + std::to_string(T) + "]");
    return t == 0 ? 1.0 : alpha_bar[static_cast<std::size_t>(t - 1)];
}
double NoiseSchedule::sqrt_ab(int t) const { return std::sqrt(ab(t)); }
double NoiseSchedule::sqrt_one_minus_ab(int t) const { return std::sqrt(1.0 - ab(t)); }

double cosine_alpha_bar(double t, int T, double s) {
    auto f = [&](double x) {
        const double c = std::cos(((x / T + s) / (1.0 + s)) * std::numbers::pi / 2.0);
        return c * c;
    };
    return f(t) / f(0.0);
}

NoiseSchedule cosine_schedule(int T, double s, double beta_clip) {
    if (T < 2) throw std::invalid_argument("cosine_schedule: T must be at least 2");
    if (!(s > 0)) throw std::invalid_argument("cosine_schedule: offset s must be positive");
    if (!(beta_clip > 0 && beta_clip <= 1)) throw std::invalid_argument("cosine_schedule: beta_clip must be in (0, 1]");
    NoiseSchedule n;
    n.T = T;
    n.s = s;
    n.beta_clip = beta_clip;
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double b = 1.0 - cosine_alpha_bar(t, T, s) / cosine_alpha_bar(t - 1, T, s);
        b = std::clamp(b, 1e-8, beta_clip);
        prod *= 1.0 - b;
        n.beta.push_back(b);
        n.alpha_bar.push_back(prod);
    }
    return n;
}

Tensorf q_sample(const Tensorf& x0, const std::vector<int>& t, const Tensorf& eps, const NoiseSchedule& s) {
    check_batch(x0, eps, t, "q_sample");
    return per_sample_mix(x0, eps, t, [&](int i) { return s.sqrt_ab(i); }, [&](int i) { return s.sqrt_one_minus_ab(i); });
}

Tensorf v_target(const Tensorf& x0, const Tensorf& eps, const std::vector<int>& t, const NoiseSchedule& s) {
    check_batch(x0, eps, t, "v_target");
    return per_sample_mix(eps, x0, t, [&](int i) { return s.sqrt_ab(i); }, [&](int i) { return -s.sqrt_one_minus_ab(i); });
}

Tensorf x0_from_v(const Tensorf& xt, const Tensorf& v, const std::vector<int>& t, const NoiseSchedule& s) {
    check_batch(xt, v, t, "x0_from_v");
    return per_sample_mix(xt, v, t, [&](int i) { return s.sqrt_ab(i); }, [&](int i) { return -s.sqrt_one_minus_ab(i); });
}

Tensorf eps_from_v(const Tensorf& xt, const Tensorf& v, const std::vector<int>& t, const NoiseSchedule& s) {
    check_batch(xt, v, t, "eps_from_v");
    return per_sample_mix(xt, v, t, [&](int i) { return s.sqrt_one_minus_ab(i); }, [&](int i) { return s.sqrt_ab(i); });
}

// --- model ------------------------------------------------------------------
ModelConfig ModelConfig::make(const toygen::ToyGenConfig& gen, int base_channels, int d_cond) {
    ModelConfig c;
    c.gen = gen;
    c.enc.n_attr = gen.n_attr;
    c.enc.image_size = gen.image_size;
    c.enc.d_cond = d_cond;
    c.net.base_channels = base_channels;
    c.net.d_cond = d_cond;
    c.net.k = gen.k;
    c.net.d = gen.d;
    c.net.timesteps = c.timesteps;
    return c;
}

void ModelConfig::validate() const {
    gen.validate();
    enc.validate();
    net.validate();
    if (enc.n_attr != gen.n_attr || enc.image_size != gen.image_size)
        throw std::invalid_argument("model config: encoder does not match the generator");
    if (net.k != gen.k || net.d != gen.d) throw std::invalid_argument("model config: denoiser latent shape does not match the generator");
    if (net.d_cond != enc.d_cond) throw std::invalid_argument("model config: condition width mismatch");
    if (net.timesteps != timesteps) throw std::invalid_argument("model config: denoiser and schedule disagree on T");
}

Conditions null_conditions(int n_attr, int image_size) {
    auto [a, v] = cond::make_null(n_attr, image_size);
    return Conditions{std::move(a), std::move(v)};
}

DiffusionModel::DiffusionModel(const ModelConfig& cfg, std::uint64_t init_seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(init_seed);
    attr_enc_ = cond::AttributeEncoder<float>(params_, cfg_.enc, rng);
    vis_enc_ = cond::VisualEncoder<float>(params_, cfg_.enc, rng);
    unet_ = unet::UNet<float>(params_, cfg_.net, rng);
    schedule_ = cosine_schedule(cfg_.timesteps, cfg_.schedule_s, cfg_.beta_clip);
}

Var<float> DiffusionModel::encode(Tape<float>& t, const std::vector<const cond::AttributeCondition*>& attrs,
                                  const std::vector<const cond::VisualCondition*>& visual, Rng& rng, bool inference) const {
    if (attrs.size() != visual.size()) throw std::invalid_argument("encode: attribute and visual batch sizes differ");
    return cond::assemble_condition(attr_enc_(t, attrs), vis_enc_(t, visual), cfg_.enc.dropout, rng, inference);
}

Tensorf DiffusionModel::encode(const std::vector<const Conditions*>& conds) const {
    std::vector<const cond::AttributeCondition*> a;
    std::vector<const cond::VisualCondition*> v;
    for (const auto* c : conds) {
        a.push_back(&c->attrs);
        v.push_back(&c->visual);
    }
    Tape<float> t(false);
    Rng unused(0);
    return encode(t, a, v, unused, true).value();
}

Var<float> DiffusionModel::forward(Tape<float>& t, Var<float> z_t, const std::vector<int>& steps, Var<float> cond) const {
    std::vector<int> idx(steps.size());
    for (std::size_t i = 0; i < steps.size(); ++i) {
        if (steps[i] < 1 || steps[i] > cfg_.timesteps)
            throw std::out_of_range("timestep " + std::to_string(steps[i]) + " outside [1, " + std::to_string(cfg_.timesteps) + "]");
        idx[i] = steps[i] - 1;
    }
    return unet_(t, z_t, idx, cond);
}

Tensorf DiffusionModel::predict_v(const Tensorf& z_t, const std::vector<int>& steps, const Tensorf& cond) const {
    Tape<float> t(false);
    Tensorf out = forward(t, t.constant(z_t), steps, t.constant(cond)).value();
    if (cfg_.prediction == Prediction::V) return out;
    // v = (sqrt(ab) x_t - x0) / sqrt(1 - ab)
    const std::size_t per = z_t.size() / steps.size();
    for (std::size_t i = 0; i < steps.size(); ++i) {
        const double a = schedule_.sqrt_ab(steps[i]), b = schedule_.sqrt_one_minus_ab(steps[i]);
        for (std::size_t j = 0; j < per; ++j) {
            const std::size_t o = i * per + j;
            out[o] = static_cast<float>((a * z_t[o] - out[o]) / b);
        }
    }
    return out;
}

// --- training ---------------------------------------------------------------
void TrainConfig::validate() const {
    if (steps <= 0 || batch <= 0) throw std::invalid_argument("train config: steps and batch must be positive");
    if (!(max_lr > 0)) throw std::invalid_argument("train config: max_lr must be positive");
    if (!(warmup_frac >= 0 && warmup_frac < 1)) throw std::invalid_argument("train config: warmup_frac must be in [0, 1)");
    if (!(div_factor >= 1)) throw std::invalid_argument("train config: div_factor must be at least 1");
    masking.validate();
}

LrSchedule TrainConfig::lr_schedule() const {
    LrSchedule s;
    s.max_lr = max_lr;
    s.total_steps = steps;
    s.warmup_steps = std::min(steps - 1, static_cast<long>(std::llround(warmup_frac * static_cast<double>(steps))));
    s.floor_lr = max_lr / div_factor;
    return s;
}

std::string log_line(const StepStats& s) {
    std::ostringstream os;
    os.precision(9);
    os << s.step << ',' << s.loss << ',' << s.lr;
    return os.str();
}

Trainer::Trainer(DiffusionModel& model, const std::vector<toygen::DatasetRecord>& records, const TrainConfig& cfg)
    : model_(model), records_(records), cfg_(cfg) {
    cfg_.validate();
    if (records_.size() < 2) throw std::invalid_argument("trainer: need at least two records");
    std::vector<Tensorf> raw;
    raw.reserve(records_.size());
    for (const auto& r : records_) raw.push_back(r.latent);
    model_.norm = toygen::fit_normalization(raw);
    for (const auto& r : raw) normalized_.push_back(toygen::normalize(r, model_.norm));
    adam_ = adam_init(model_.params());
}

void Trainer::restore(AdamState<float> adam, long completed) {
    if (completed < 0 || completed > cfg_.steps) throw std::out_of_range("trainer: resume step outside the schedule");
    if (adam.m.size() != model_.params().size()) throw std::invalid_argument("trainer: optimizer state does not match the model");
    adam_ = std::move(adam);
    step_ = completed;
}

StepStats Trainer::step() {
    if (done()) throw std::logic_error("trainer: all steps already completed");
    const auto& mc = model_.config();
    const int size = mc.gen.image_size;
    const auto B = static_cast<std::size_t>(cfg_.batch);
    Rng rng(derive_seed(cfg_.seed, static_cast<std::uint64_t>(step_)));

    std::vector<std::size_t> idx(B);
    std::vector<cond::MaskedConditions> conds(B);
    std::vector<int> ts(B);
    for (std::size_t b = 0; b < B; ++b) {
        idx[b] = static_cast<std::size_t>(rng.integer(0, static_cast<int>(records_.size()) - 1));
        conds[b] = cond::apply_masking(records_[idx[b]], size, cfg_.masking, rng);
        cond::apply_condition_drop(conds[b].attrs, conds[b].visual, cfg_.masking, rng);
        ts[b] = rng.integer(1, mc.timesteps);
    }
    const Tensorf x0 = stack_latents(normalized_, idx);
    Tensorf eps(x0.shape());
    for (auto& e : eps.data()) e = static_cast<float>(rng.normal());
    const auto& sched = model_.schedule();
    const Tensorf xt = q_sample(x0, ts, eps, sched);
    const Tensorf target = mc.prediction == Prediction::V ? v_target(x0, eps, ts, sched) : x0;

    std::vector<const cond::AttributeCondition*> a;
    std::vector<const cond::VisualCondition*> v;
    for (const auto& c : conds) {
        a.push_back(&c.attrs);
        v.push_back(&c.visual);
    }
    auto& params = model_.params();
    params.zero_grad();
    double loss = 0;
    try {
        Tape<float> tape;
        auto cond = model_.encode(tape, a, v, rng, false);
        auto pred = model_.forward(tape, tape.constant(xt), ts, cond);
        auto l = ops::mse(pred, tape.constant(target));
        loss = l.value()[0];
        tape.backward(l);
    } catch (const NumericError& e) {
        throw NumericError("training diverged at step " + std::to_string(step_ + 1) + ": " + e.what());
    }
    if (!std::isfinite(loss)) throw NumericError("training diverged at step " + std::to_string(step_ + 1) + ": loss is not finite");
    const double lr = onecycle_lr(step_, cfg_.lr_schedule());
    adam_step(params, adam_, lr);
    ++step_;
    return StepStats{step_, loss, lr};
}

double Trainer::target_energy(int batches, std::uint64_t seed) const {
    Rng rng(seed);
    double sum = 0;
    std::size_t n = 0;
    for (int i = 0; i < batches; ++i) {
        std::vector<std::size_t> idx;
        std::vector<int> ts;
        for (int b = 0; b < cfg_.batch; ++b) {
            idx.push_back(static_cast<std::size_t>(rng.integer(0, static_cast<int>(records_.size()) - 1)));
            ts.push_back(rng.integer(1, model_.config().timesteps));
        }
        const Tensorf x0 = stack_latents(normalized_, idx);
        Tensorf eps(x0.shape());
        for (auto& e : eps.data()) e = static_cast<float>(rng.normal());
        const Tensorf v = v_target(x0, eps, ts, model_.schedule());
        for (float x : v.data()) sum += static_cast<double>(x) * x;
        n += v.size();
    }
    return sum / static_cast<double>(n);
}

// --- sampling ---------------------------------------------------------------
void SampleConfig::validate(int T) const {
    if (ddim_steps < 1 || ddim_steps > T) throw std::invalid_argument("sample config: ddim_steps must be in [1, T]");
    if (!(eta >= 0 && eta <= 1)) throw std::invalid_argument("sample config: eta must be in [0, 1]");
    if (!(omega_v >= 0 && omega_a >= 0)) throw std::invalid_argument("sample config: guidance weights must be non-negative");
    if (max_batch < 1) throw std::invalid_argument("sample config: max_batch must be positive");
}

std::vector<int> ddim_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("ddim_timesteps: steps must be in [1, T]");
    if (steps == 1) return {T};
    std::vector<int> out;
    for (int j = steps - 1; j >= 0; --j)
        out.push_back(1 + static_cast<int>(std::llround(static_cast<double>(j) * (T - 1) / (steps - 1))));
    return out;
}

Tensorf combine_guidance(const Tensorf& v00, const Tensorf& vv0, const Tensorf& vva, double omega_v, double omega_a) {
    if (v00.shape() != vv0.shape() || v00.shape() != vva.shape()) throw ShapeError("combine_guidance: shape mismatch");
    Tensorf out(v00.shape());
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<float>(v00[i] + omega_v * (vv0[i] - v00[i]) + omega_a * (vva[i] - vv0[i]));
    return out;
}

Tensorf cfg_noise(const DiffusionModel& m, const Tensorf& z_t, const std::vector<int>& steps,
                  const std::vector<const Conditions*>& conds, double omega_v, double omega_a) {
    if (!(omega_v >= 0 && omega_a >= 0)) throw std::invalid_argument("cfg_noise: guidance weights must be non-negative");
    if (z_t.rank() != 3 || z_t.dim(0) != conds.size()) throw ShapeError("cfg_noise: one condition set per latent required");
    return guided_v(m, z_t, steps, encode_guidance(m, conds), omega_v, omega_a);
}

SampleResult ddim_sample(const DiffusionModel& m, const std::vector<Conditions>& conds, const SampleConfig& cfg) {
    return run_trajectories(m, conds, conds, cfg.ddim_steps, cfg);
}

SampleResult edit(const DiffusionModel& m, const EditPlan& plan) {
    if (plan.t_rec < 0 || plan.t_rec > plan.sample.ddim_steps)
        throw std::invalid_argument("edit: t_rec " + std::to_string(plan.t_rec) + " outside [0, " + std::to_string(plan.sample.ddim_steps) + "]");
    return run_trajectories(m, plan.reference, plan.edit, plan.t_rec, plan.sample);
}

}  // namespace mmld::diffusion
