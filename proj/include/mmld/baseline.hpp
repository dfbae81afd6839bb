#pragma once

// Optimization-based inversion baseline: small image predictors (attributes,
// segmentation) plus gradient descent on a latent through the soft renderer.

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "mmld/conditioning.hpp"
#include "mmld/nn.hpp"
#include "mmld/optim.hpp"
#include "mmld/toygen.hpp"

namespace mmld::baseline {

struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct PredictorConfig {
    int image_size = 64;
    int n_attr = 8;
    int feature_dim = 32;
    int seg_width = 16;
    int steps = 2000;
    int batch = 16;
    double lr = 3e-3;
    double holdout_frac = 0.1;
    std::uint64_t seed = 1;

    void validate() const;
};

// Attribute regressor (strided conv backbone, feature layer, sigmoid head) and
// a fully convolutional segmentation classifier. Images are [B, 3, S, S] in [0, 1].
template <typename T>
class Predictors {
public:
    Predictors(const PredictorConfig& cfg, std::uint64_t init_seed);
    Predictors(const Predictors&) = delete;
    Predictors& operator=(const Predictors&) = delete;

    const PredictorConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return ps_; }
    const ParamStore<T>& params() const { return ps_; }

    Var<T> features(Tape<T>& t, Var<T> image) const;     // [B, feature_dim]
    Var<T> attributes(Tape<T>& t, Var<T> image) const;   // [B, n_attr]
    Var<T> seg_logits(Tape<T>& t, Var<T> image) const;   // [B, classes, S, S]

private:
    PredictorConfig cfg_;
    ParamStore<T> ps_;
    std::vector<nn::Conv2d<T>> backbone_;
    nn::Linear<T> feat_, head_;
    std::vector<nn::Conv2d<T>> seg_;
};

struct PredictorMetrics {
    double attr_mae = 0;
    double pixel_accuracy = 0;
    std::size_t holdout = 0;
};

struct TrainedPredictors {
    std::unique_ptr<Predictors<float>> net;
    PredictorMetrics heldout;
};

// Images of records as a [B, 3, S, S] batch.
Tensorf image_batch(const std::vector<const toygen::DatasetRecord*>& records, int size);
Tensorf image_tensor(const std::vector<float>& hwc, int size);

TrainedPredictors train_predictors(const std::vector<toygen::DatasetRecord>& records, const PredictorConfig& cfg);
PredictorMetrics evaluate_predictors(const Predictors<float>& p, const std::vector<toygen::DatasetRecord>& records);

void write_predictors(const std::filesystem::path& path, const Predictors<float>& p, const PredictorMetrics& m);
TrainedPredictors read_predictors(const std::filesystem::path& path);

// Embedding of [H, W, 3] images under the attribute regressor's feature layer.
std::vector<float> image_features(const Predictors<float>& p, const std::vector<float>& hwc);
std::vector<std::vector<float>> image_features(const Predictors<float>& p, const std::vector<std::vector<float>>& images);

enum class InitMode { Zero, Mean, Random };

struct BaselineConfig {
    double lambda_attr = 1.0;
    double lambda_seg = 1.0;
    double lr = 0.05;
    int iterations = 400;
    InitMode init = InitMode::Mean;
    std::uint64_t seed = 0;
    double tau = 0.5;
    double clamp = 3.0;  // bound on normalized latent coordinates
    Tensorf init_latent;  // normalized; overrides `init` when set

    void validate() const;
};

// Targets of the objective. Empty rgb / seg / attrs disable that term.
struct InversionTarget {
    std::vector<float> rgb;               // [H, W, 3]
    std::vector<std::uint8_t> rgb_valid;  // [H, W]; empty means all valid
    std::vector<std::uint8_t> seg;
    std::vector<std::uint8_t> seg_valid;
    std::vector<float> attrs;
    std::vector<std::uint8_t> attr_mask;  // 1 = masked slot
    toygen::ViewParams view;

    static InversionTarget from_conditions(const cond::VisualCondition& v, const cond::AttributeCondition& a,
                                           const toygen::ViewParams& view);
};

// Objective over a normalized latent; T = double serves derivative checks.
template <typename T>
struct Objective {
    const toygen::ToyGenerator* gen = nullptr;
    const Predictors<T>* predictors = nullptr;
    Tensor<T> scale, offset;  // normalized -> raw latent
    double lambda_attr = 0, lambda_seg = 0, tau = 0.5;
    toygen::ViewParams view;
    Tensor<T> rgb, rgb_w;    // [3, S, S]
    Tensor<T> attrs, attr_w; // [1, n_attr]
    Tensor<T> seg, seg_w;    // [1, C, S, S] one-hot
    bool has_rgb = false, has_attrs = false, has_seg = false;

    Objective(const toygen::ToyGenerator& g, const toygen::NormStats& norm, const Predictors<T>* p,
              const InversionTarget& target, double lambda_attr, double lambda_seg, double tau);

    Var<T> image(Tape<T>& t, Var<T> z) const;  // [3, S, S]
    Var<T> operator()(Tape<T>& t, Var<T> z) const;
};

struct InversionResult {
    Tensorf latent;       // raw, best-so-far
    Tensorf normalized;
    double best_loss = 0;
    int best_iteration = 0;
    std::vector<double> losses;  // objective at each iteration, before the update
    double seconds = 0;
};

class Inverter {
public:
    Inverter(const toygen::ToyGenerator& gen, toygen::NormStats norm, const Predictors<float>* predictors = nullptr);
    // Mean of normalized dataset latents, used by InitMode::Mean.
    void set_mean_latent(Tensorf normalized_mean) { mean_ = std::move(normalized_mean); }
    const Tensorf& mean_latent() const { return mean_; }

    // Reconstruction only, optionally under a pixel validity mask.
    InversionResult invert(const std::vector<float>& rgb, const std::vector<std::uint8_t>& valid, const toygen::ViewParams& view,
                           const BaselineConfig& cfg) const;
    InversionResult multi_conditional_invert(const InversionTarget& target, const BaselineConfig& cfg) const;

private:
    InversionResult run(const InversionTarget& target, const BaselineConfig& cfg, double lambda_attr, double lambda_seg) const;
    Tensorf initial(const BaselineConfig& cfg) const;

    const toygen::ToyGenerator* gen_;
    toygen::NormStats norm_;
    const Predictors<float>* predictors_;
    Tensorf mean_;
};

Tensorf mean_normalized_latent(const std::vector<toygen::DatasetRecord>& records, const toygen::NormStats& norm);

}  // namespace mmld::baseline
