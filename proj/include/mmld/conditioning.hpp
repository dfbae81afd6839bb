#pragma once

#include <cstdint>
#include <vector>

#include "mmld/nn.hpp"
#include "mmld/toygen.hpp"

namespace mmld::cond {

constexpr float kMaskFill = -1.0f;

struct AttributeCondition {
    std::vector<float> values;
    std::vector<std::uint8_t> mask;  // 1 = masked slot

    bool all_masked() const;
};

struct VisualCondition {
    int size = 0;
    std::vector<float> rgb;                // [H, W, 3] in [0, 1]
    std::vector<std::uint8_t> seg;         // [H, W]
    std::vector<std::uint8_t> rgb_valid;   // [H, W]
    std::vector<std::uint8_t> seg_valid;   // [H, W]

    bool rgb_any_valid() const;
    bool seg_any_valid() const;
};

struct MaskingPolicy {
    double p_modality_mask = 0.9;
    int strokes_min = 1, strokes_max = 4;
    int radius_min = 2, radius_max = 8;
    int length_min = 10, length_max = 40;
    double p_class_drop = 0.3;
    double p_condition_drop = 0.2;

    void validate() const;
};

struct MaskedConditions {
    AttributeCondition attrs;
    VisualCondition visual;
    bool attrs_masked = false;
    bool rgb_masked = false;
    bool seg_masked = false;
    int dropped_class = -1;
};

AttributeCondition full_attributes(const std::vector<float>& values);
VisualCondition full_visual(const toygen::DatasetRecord& rec, int size);
VisualCondition full_visual(const std::vector<float>& rgb, const std::vector<std::uint8_t>& seg, int size);

std::pair<AttributeCondition, VisualCondition> make_null(int n_attr, int size);

// Marks a brush-stroke union (random walks of discs) in `valid` as invalid.
void paint_brush_strokes(std::vector<std::uint8_t>& valid, int size, const MaskingPolicy& p, Rng& rng);

MaskedConditions apply_masking(const toygen::DatasetRecord& rec, int size, const MaskingPolicy& p, Rng& rng);

struct CfgDrop {
    bool attrs = false;
    bool visual = false;
};
// Replaces each of c_a and c_v by its null with probability p_condition_drop.
CfgDrop apply_condition_drop(AttributeCondition& a, VisualCondition& v, const MaskingPolicy& p, Rng& rng);

struct EncoderConfig {
    int n_attr = 8;
    int d_cond = 64;
    int image_size = 64;
    std::vector<int> vis_channels{16, 32, 64};
    int attr_levels = 256;
    double dropout = 0.1;

    int n_vis_tokens() const;
    void validate() const;
};

// Sinusoidal code of an attribute quantized to `levels` levels.
std::vector<double> attribute_code(float value, int levels, int dim);
int quantize_level(float value, int levels);

template <typename T>
class AttributeEncoder {
public:
    AttributeEncoder() = default;
    AttributeEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng);
    // [B, n_attr, d_cond]
    Var<T> operator()(Tape<T>& t, const std::vector<const AttributeCondition*>& batch) const;

private:
    EncoderConfig cfg_;
    Parameter<T>* mask_token_ = nullptr;  // [n_attr, d]
    Parameter<T>* pos_ = nullptr;         // [n_attr, d]
    std::vector<nn::Linear<T>> mlp_;
};

template <typename T>
class VisualEncoder {
public:
    VisualEncoder() = default;
    VisualEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng);
    // [B, n_vis_tokens, d_cond]
    Var<T> operator()(Tape<T>& t, const std::vector<const VisualCondition*>& batch) const;
    // 4-channel input raster [B, 4, S, S] with invalid pixels filled.
    Tensor<T> input_tensor(const std::vector<const VisualCondition*>& batch) const;

private:
    EncoderConfig cfg_;
    std::vector<nn::Conv2d<T>> convs_;
    std::vector<nn::Linear<T>> mlp_;
    Parameter<T>* pos_ = nullptr;
};

// Dropout on each token set (training only), then concatenation along tokens.
template <typename T>
Var<T> assemble_condition(Var<T> c_a, Var<T> c_v, double dropout_rate, Rng& rng, bool inference);

}  // namespace mmld::cond
