#pragma once

// Image, segmentation and attribute metrics, Gaussian feature statistics with
// the Frechet distance, and the two benchmark evaluation regimes.

#include <map>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"
#include "mmld/baseline.hpp"
#include "mmld/diffusion.hpp"

namespace mmld::metrics {

inline constexpr double kPsnrCap = 99.0;

// Images are row-major [H, W, C] in [0, 1]; masks are [H, W] with nonzero = counted.
// An empty mask selects every pixel.
double psnr(const std::vector<float>& a, const std::vector<float>& b, int channels, const std::vector<std::uint8_t>& mask = {});
// Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), unit dynamic range.
// With a mask, the SSIM map is averaged over windows centred on counted pixels.
double ssim(const std::vector<float>& a, const std::vector<float>& b, int size, int channels,
            const std::vector<std::uint8_t>& mask = {});
// Mean IoU over classes present in either map inside the mask, restricted to
// `class_set` when it is non-empty.
double miou(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& target, const std::vector<std::uint8_t>& mask = {},
            const std::vector<int>& class_set = {});
// Mean absolute difference over unmasked slots (mask: 1 = masked). Lower is better.
double attr_error(const std::vector<float>& target, const std::vector<float>& measured, const std::vector<std::uint8_t>& mask = {});

double cosine_similarity(const std::vector<float>& a, const std::vector<float>& b);
double l2_distance(const std::vector<float>& a, const std::vector<float>& b);
// Identity proxy: cosine of the attribute regressor's feature embeddings.
double id_similarity(const baseline::Predictors<float>& p, const std::vector<float>& image_a, const std::vector<float>& image_b);
// Feature-space L2 distance between two images.
double featdist(const baseline::Predictors<float>& p, const std::vector<float>& image_a, const std::vector<float>& image_b);

struct GaussianStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;

    void validate() const;
};

GaussianStats gaussian_stats(const std::vector<std::vector<float>>& features);
double frechet_distance(const GaussianStats& a, const GaussianStats& b);
// Frechet distance between predictor-feature statistics of two image sets.
double toy_frechet(const baseline::Predictors<float>& p, const std::vector<std::vector<float>>& images_a,
                   const std::vector<std::vector<float>>& images_b);

// --- evaluation regimes ---------------------------------------------------------

enum class Task {
    FaceRgbHairSegHairAttr,  // face-region RGB, hair-region seg, one hair-colour attribute
    HalfRgbHalfSeg,          // left-half RGB, right-half seg, no attributes
};

Task parse_task(const std::string& name);
std::string task_name(Task t);

// Conditions of one evaluation sample built from a ground-truth record.
diffusion::Conditions task_conditions(Task t, const toygen::DatasetRecord& rec, int n_attr, int size);

struct EvalReport {
    std::string task;
    std::string method;
    std::size_t count = 0;
    std::string config_hash;
    double seconds_per_sample = 0;
    std::vector<std::string> metric_names;
    std::map<std::string, std::vector<double>> per_sample;
    std::map<std::string, double> means;

    void add(const std::string& metric, double value);
    void finalize();  // recomputes means from per-sample values
    nlohmann::json to_json() const;
    std::string to_csv() const;
};

struct EvalSetup {
    Task task = Task::FaceRgbHairSegHairAttr;
    std::size_t count = 16;
    std::uint64_t seed = 0;
    diffusion::SampleConfig sample;
    baseline::BaselineConfig baseline;
};

struct EvalPair {
    EvalReport diffusion;
    EvalReport baseline;
};

// Draws `count` ground-truth scenes from a generator dataset seeded by setup.seed,
// conditions both methods on the task regime and scores their outputs.
EvalPair eval_suite(const diffusion::DiffusionModel& model, const baseline::Inverter& inverter,
                    const baseline::Predictors<float>& predictors, const EvalSetup& setup);

}  // namespace mmld::metrics
