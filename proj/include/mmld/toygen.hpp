#pragma once

// Procedural stand-in for a frozen latent->image generator. A latent [k, d]
// decodes to 15 scene parameters which are rasterized into an RGB image, a
// segmentation map and a ground-truth attribute vector.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "mmld/autodiff.hpp"
#include "mmld/rng.hpp"
#include "mmld/tensor.hpp"

namespace mmld::toygen {

constexpr int kNumParams = 15;
constexpr int kNumClasses = 6;
constexpr int kNumToyAttributes = 8;

enum SegClass : std::uint8_t { kBackground = 0, kSkin = 1, kHair = 2, kEyes = 3, kGlasses = 4, kClothing = 5 };

// Attribute slot indices of the built-in attributes.
enum Attr : int { kBlondeHair = 0, kDarkHair, kGlassesAttr, kPaleSkin, kLongHair, kBigEyes, kWideFace, kHat };

std::vector<std::string> attribute_names(int n_attr);
const std::vector<std::string>& class_names();
const std::array<std::array<std::uint8_t, 3>, kNumClasses>& class_palette();

struct ToyGenConfig {
    int k = 8;
    int d = 32;
    int image_size = 64;
    int n_attr = 8;
    std::uint64_t seed = 1234;
    // Trailing latent dims per row that are always zero (padded style codes).
    int frozen_dims = 0;

    void validate() const;
    std::size_t latent_size() const { return static_cast<std::size_t>(k) * static_cast<std::size_t>(d); }
};

struct ShapeParams {
    double cx = 0, cy = 0;        // face center, px
    double rx = 0, ry = 0;        // face radii, px
    std::array<double, 3> skin{};  // RGB
    std::array<double, 3> hair{};  // RGB
    double hair_length = 0;        // px
    double eye_size = 0;           // px
    double glasses = 0;            // intensity
    double hat = 0;                // intensity
    double clothing_height = 0;    // px

    std::array<double, kNumParams> to_array() const;
    static ShapeParams from_array(const std::array<double, kNumParams>& a);
};

struct ViewParams {
    double fov = 21.5;  // degrees
    double yaw = 0.0;   // radians
    double pitch = 0.0;
    double roll = 0.0;
    double radius = 2.7;
};

enum class RenderMode { Hard, Soft };

struct Render {
    int size = 0;
    std::vector<float> rgb;           // [H, W, 3] in [0, 1]
    std::vector<std::uint8_t> seg;    // [H, W] labels
};

struct DatasetRecord {
    Tensorf latent;                     // [k, d], raw (unnormalized)
    std::vector<std::uint8_t> image;    // [H, W, 3]
    std::vector<std::uint8_t> seg;      // [H, W]
    std::vector<float> attrs;           // [n_attr]
    ViewParams view;
};

ViewParams sample_view(Rng& rng);

class ToyGenerator {
public:
    explicit ToyGenerator(ToyGenConfig cfg);

    const ToyGenConfig& config() const { return cfg_; }

    ShapeParams decode(const Tensorf& latent) const;
    // Differentiable decode: latent [k, d] -> parameter vector [15].
    template <typename T>
    Var<T> decode_var(Var<T> latent) const;

    Render render(const ShapeParams& p, const ViewParams& view, RenderMode mode, double tau = 0.5) const;
    // Differentiable soft render: parameter vector [15] -> image [3, S, S].
    template <typename T>
    Var<T> render_soft_var(Var<T> params, const ViewParams& view, double tau = 0.5) const;

    std::vector<float> attributes(const ShapeParams& p) const;

    DatasetRecord make_record(std::uint64_t seed, std::uint64_t index) const;
    std::vector<DatasetRecord> build_dataset(std::size_t count, std::uint64_t seed) const;

    // Parameter ranges: params = lo + (hi - lo) * sigmoid(W_g * flatten(latent)).
    const std::array<double, kNumParams>& param_lo() const { return lo_; }
    const std::array<double, kNumParams>& param_hi() const { return hi_; }
    const Tensord& decode_matrix() const { return wg_; }

private:
    ToyGenConfig cfg_;
    Tensord wg_;   // [k*d, 15]
    Tensorf wgf_;
    std::array<double, kNumParams> lo_{}, hi_{};
};

// [H, W, 3] u8 -> [3, H, W] in [0, 1]
Tensorf image_to_chw(const std::vector<std::uint8_t>& hwc, int size);
Tensorf image_to_chw(const std::vector<float>& hwc, int size);
std::vector<std::uint8_t> chw_to_image(const Tensorf& chw);
std::vector<std::uint8_t> quantize(const std::vector<float>& v);

struct NormStats {
    Tensorf min;
    Tensorf max;
};

NormStats fit_normalization(const std::vector<Tensorf>& latents);
Tensorf normalize(const Tensorf& latent, const NormStats& s);
Tensorf denormalize(const Tensorf& latent, const NormStats& s);

}  // namespace mmld::toygen
