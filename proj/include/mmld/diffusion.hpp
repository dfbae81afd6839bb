#pragma once

// Cosine-schedule latent diffusion with v-prediction, dual-weight classifier-free
// guidance, DDIM sampling and two-stage (reconstruct, then edit) trajectories.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "mmld/conditioning.hpp"
#include "mmld/optim.hpp"
#include "mmld/toygen.hpp"
#include "mmld/unet.hpp"

namespace mmld::diffusion {

// Timesteps are 1-based: t in [1, T]; alpha_bar(0) = 1.
struct NoiseSchedule {
    int T = 0;
    double s = 0.008;
    double beta_clip = 0.999;
    std::vector<double> beta;       // beta[t-1]
    std::vector<double> alpha_bar;  // alpha_bar[t-1]

    double ab(int t) const;
    double sqrt_ab(int t) const;
    double sqrt_one_minus_ab(int t) const;
};

// Closed form f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) pi/2).
double cosine_alpha_bar(double t, int T, double s);
NoiseSchedule cosine_schedule(int T = 1000, double s = 0.008, double beta_clip = 0.999);

// Per-sample forward process and v-space conversions over [B, ...] tensors,
// one timestep per leading index.
Tensorf q_sample(const Tensorf& x0, const std::vector<int>& t, const Tensorf& eps, const NoiseSchedule& s);
Tensorf v_target(const Tensorf& x0, const Tensorf& eps, const std::vector<int>& t, const NoiseSchedule& s);
Tensorf x0_from_v(const Tensorf& xt, const Tensorf& v, const std::vector<int>& t, const NoiseSchedule& s);
Tensorf eps_from_v(const Tensorf& xt, const Tensorf& v, const std::vector<int>& t, const NoiseSchedule& s);

enum class Prediction { V, X0 };

struct ModelConfig {
    toygen::ToyGenConfig gen;
    cond::EncoderConfig enc;
    unet::UNetConfig net;
    int timesteps = 1000;
    double schedule_s = 0.008;
    double beta_clip = 0.999;
    Prediction prediction = Prediction::V;

    // Keeps encoder and UNet dimensions consistent with the generator.
    static ModelConfig make(const toygen::ToyGenConfig& gen, int base_channels = 64, int d_cond = 64);
    void validate() const;
};

struct Conditions {
    cond::AttributeCondition attrs;
    cond::VisualCondition visual;
};

Conditions null_conditions(int n_attr, int image_size);

// Denoiser plus both condition encoders, sharing one parameter store.
class DiffusionModel {
public:
    DiffusionModel(const ModelConfig& cfg, std::uint64_t init_seed);
    DiffusionModel(const DiffusionModel&) = delete;
    DiffusionModel& operator=(const DiffusionModel&) = delete;

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return schedule_; }
    ParamStore<float>& params() { return params_; }
    const ParamStore<float>& params() const { return params_; }

    toygen::NormStats norm;

    Conditions null_conditions() const { return diffusion::null_conditions(cfg_.gen.n_attr, cfg_.gen.image_size); }

    // [B, n_attr + n_vis, d_cond]
    Var<float> encode(Tape<float>& t, const std::vector<const cond::AttributeCondition*>& attrs,
                      const std::vector<const cond::VisualCondition*>& visual, Rng& rng, bool inference) const;
    Tensorf encode(const std::vector<const Conditions*>& conds) const;

    // Raw network output (v or x0 depending on the prediction mode); t in [1, T].
    Var<float> forward(Tape<float>& t, Var<float> z_t, const std::vector<int>& steps, Var<float> cond) const;
    // Network output converted to v-space.
    Tensorf predict_v(const Tensorf& z_t, const std::vector<int>& steps, const Tensorf& cond) const;

private:
    ModelConfig cfg_;
    ParamStore<float> params_;
    cond::AttributeEncoder<float> attr_enc_;
    cond::VisualEncoder<float> vis_enc_;
    unet::UNet<float> unet_;
    NoiseSchedule schedule_;
};

struct TrainConfig {
    long steps = 3000;
    int batch = 32;
    double max_lr = 1e-4;
    double warmup_frac = 0.3;
    double div_factor = 25.0;  // initial and final lr = max_lr / div_factor
    cond::MaskingPolicy masking;
    std::uint64_t seed = 0;

    void validate() const;
    LrSchedule lr_schedule() const;
};

struct StepStats {
    long step = 0;  // 1-based index of the completed step
    double loss = 0;
    double lr = 0;
};

// Formats one `step,loss,lr` metrics line (no newline).
std::string log_line(const StepStats& s);

class Trainer {
public:
    // `records` must outlive the trainer. Fits normalization stats into the model.
    Trainer(DiffusionModel& model, const std::vector<toygen::DatasetRecord>& records, const TrainConfig& cfg);

    StepStats step();
    long completed_steps() const { return step_; }
    bool done() const { return step_ >= cfg_.steps; }

    const AdamState<float>& adam() const { return adam_; }
    // Restores optimizer state and the step counter for resumption.
    void restore(AdamState<float> adam, long completed);

    // Mean of the v-target energy on a few batches; the scale of an untrained loss.
    double target_energy(int batches, std::uint64_t seed) const;

private:
    DiffusionModel& model_;
    const std::vector<toygen::DatasetRecord>& records_;
    std::vector<Tensorf> normalized_;
    TrainConfig cfg_;
    AdamState<float> adam_;
    long step_ = 0;
};

struct SampleConfig {
    int ddim_steps = 100;
    double eta = 0.0;
    double omega_v = 1.0;
    double omega_a = 1.0;
    std::uint64_t seed = 0;        // initial noise z_T
    std::uint64_t noise_seed = 0;  // per-step noise when eta > 0
    int max_batch = 64;

    void validate(int T) const;
};

// Uniformly spaced DDIM timesteps in [1, T], descending, ending at t = 1
// (a single step uses t = T).
std::vector<int> ddim_timesteps(int T, int steps);

// Classifier-free guidance in v-space:
// v00 + wv (vv0 - v00) + wa (vva - vv0).
Tensorf combine_guidance(const Tensorf& v00, const Tensorf& vv0, const Tensorf& vva, double omega_v, double omega_a);

// Guided v estimate for z_t [B, k, d] under per-sample conditions.
Tensorf cfg_noise(const DiffusionModel& m, const Tensorf& z_t, const std::vector<int>& steps,
                  const std::vector<const Conditions*>& conds, double omega_v, double omega_a);

struct SampleResult {
    std::vector<Tensorf> normalized;  // [k, d] each
    std::vector<Tensorf> latents;     // denormalized
};

// One trajectory per entry of `conds`; sample i uses z_T from (seed, i).
SampleResult ddim_sample(const DiffusionModel& m, const std::vector<Conditions>& conds, const SampleConfig& cfg);

struct EditPlan {
    std::vector<Conditions> reference;  // used for the first t_rec (noisiest) steps
    std::vector<Conditions> edit;       // used for the remaining steps
    int t_rec = 0;
    SampleConfig sample;
};

SampleResult edit(const DiffusionModel& m, const EditPlan& plan);

}  // namespace mmld::diffusion
