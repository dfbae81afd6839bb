#include "mmld/conditioning.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>
#include <stdexcept>

namespace mmld::cond {

bool AttributeCondition::all_masked() const {
    return std::all_of(mask.begin(), mask.end(), [](std::uint8_t m) { return m != 0; });
}

bool VisualCondition::rgb_any_valid() const {
    return std::any_of(rgb_valid.begin(), rgb_valid.end(), [](std::uint8_t m) { return m != 0; });
}

bool VisualCondition::seg_any_valid() const {
    return std::any_of(seg_valid.begin(), seg_valid.end(), [](std::uint8_t m) { return m != 0; });
}

void MaskingPolicy::validate() const {
    for (double p : {p_modality_mask, p_class_drop, p_condition_drop})
        if (p < 0.0 || p > 1.0) throw std::invalid_argument("masking policy probabilities must lie in [0, 1]");
    if (strokes_min < 0 || strokes_max < strokes_min || radius_min < 0 || radius_max < radius_min || length_min < 0 ||
        length_max < length_min)
        throw std::invalid_argument("masking policy ranges are invalid");
}

AttributeCondition full_attributes(const std::vector<float>& values) {
    return AttributeCondition{values, std::vector<std::uint8_t>(values.size(), 0)};
}

VisualCondition full_visual(const std::vector<float>& rgb, const std::vector<std::uint8_t>& seg, int size) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    if (rgb.size() != hw * 3 || seg.size() != hw) throw ShapeError("visual condition raster size mismatch");
    VisualCondition v;
    v.size = size;
    v.rgb = rgb;
    v.seg = seg;
    v.rgb_valid.assign(hw, 1);
    v.seg_valid.assign(hw, 1);
    return v;
}

VisualCondition full_visual(const toygen::DatasetRecord& rec, int size) {
    std::vector<float> rgb(rec.image.size());
    for (std::size_t i = 0; i < rgb.size(); ++i) rgb[i] = rec.image[i] / 255.0f;
    return full_visual(rgb, rec.seg, size);
}

std::pair<AttributeCondition, VisualCondition> make_null(int n_attr, int size) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    AttributeCondition a{std::vector<float>(static_cast<std::size_t>(n_attr), 0.0f),
                         std::vector<std::uint8_t>(static_cast<std::size_t>(n_attr), 1)};
    VisualCondition v;
    v.size = size;
    v.rgb.assign(hw * 3, 0.0f);
    v.seg.assign(hw, 0);
    v.rgb_valid.assign(hw, 0);
    v.seg_valid.assign(hw, 0);
    return {a, v};
}

void paint_brush_strokes(std::vector<std::uint8_t>& valid, int size, const MaskingPolicy& p, Rng& rng) {
    const int strokes = rng.integer(p.strokes_min, p.strokes_max);
    for (int s = 0; s < strokes; ++s) {
        const double r = rng.uniform(p.radius_min, p.radius_max);
        const int steps = rng.integer(p.length_min, p.length_max);
        double x = rng.uniform(0.0, size), y = rng.uniform(0.0, size);
        for (int k = 0; k <= steps; ++k) {
            const int x0 = std::max(0, static_cast<int>(std::floor(x - r))), x1 = std::min(size - 1, static_cast<int>(std::ceil(x + r)));
            const int y0 = std::max(0, static_cast<int>(std::floor(y - r))), y1 = std::min(size - 1, static_cast<int>(std::ceil(y + r)));
            for (int py = y0; py <= y1; ++py)
                for (int px = x0; px <= x1; ++px) {
                    const double dx = px + 0.5 - x, dy = py + 0.5 - y;
                    if (dx * dx + dy * dy <= r * r) valid[static_cast<std::size_t>(py) * size + px] = 0;
                }
            const double a = rng.uniform(0.0, 2 * std::numbers::pi);
            x = std::clamp(x + std::cos(a), 0.0, static_cast<double>(size));
            y = std::clamp(y + std::sin(a), 0.0, static_cast<double>(size));
        }
    }
}

MaskedConditions apply_masking(const toygen::DatasetRecord& rec, int size, const MaskingPolicy& p, Rng& rng) {
    p.validate();
    MaskedConditions out;
    out.attrs = full_attributes(rec.attrs);
    out.visual = full_visual(rec, size);

    out.attrs_masked = rng.bernoulli(p.p_modality_mask);
    out.rgb_masked = rng.bernoulli(p.p_modality_mask);
    out.seg_masked = rng.bernoulli(p.p_modality_mask);
    if (out.attrs_masked) std::fill(out.attrs.mask.begin(), out.attrs.mask.end(), 1);
    if (out.rgb_masked) paint_brush_strokes(out.visual.rgb_valid, size, p, rng);
    if (out.seg_masked) paint_brush_strokes(out.visual.seg_valid, size, p, rng);

    if ((out.rgb_masked || out.seg_masked) && rng.bernoulli(p.p_class_drop)) {
        std::set<int> present(rec.seg.begin(), rec.seg.end());
        std::vector<int> classes(present.begin(), present.end());
        out.dropped_class = classes[static_cast<std::size_t>(rng.integer(0, static_cast<int>(classes.size()) - 1))];
        for (std::size_t i = 0; i < rec.seg.size(); ++i)
            if (rec.seg[i] == out.dropped_class) {
                out.visual.rgb_valid[i] = 0;
                out.visual.seg_valid[i] = 0;
            }
    }
    return out;
}

CfgDrop apply_condition_drop(AttributeCondition& a, VisualCondition& v, const MaskingPolicy& p, Rng& rng) {
    CfgDrop d;
    d.attrs = rng.bernoulli(p.p_condition_drop);
    d.visual = rng.bernoulli(p.p_condition_drop);
    if (d.attrs) std::fill(a.mask.begin(), a.mask.end(), 1);
    if (d.visual) {
        std::fill(v.rgb_valid.begin(), v.rgb_valid.end(), 0);
        std::fill(v.seg_valid.begin(), v.seg_valid.end(), 0);
    }
    return d;
}

int EncoderConfig::n_vis_tokens() const {
    int s = image_size;
    for (std::size_t i = 0; i < vis_channels.size(); ++i) s = (s - 1) / 2 + 1;
    return s * s;
}

void EncoderConfig::validate() const {
    if (n_attr <= 0 || d_cond <= 0 || image_size <= 0 || attr_levels < 2) throw std::invalid_argument("encoder config: invalid sizes");
    if (d_cond % 2 != 0) throw std::invalid_argument("encoder config: d_cond must be even");
    if (vis_channels.empty()) throw std::invalid_argument("encoder config: visual backbone needs at least one stage");
    if (dropout < 0.0 || dropout > 1.0) throw std::invalid_argument("encoder config: dropout must be in [0, 1]");
}

int quantize_level(float value, int levels) {
    const double v = std::clamp(static_cast<double>(value), 0.0, 1.0);
    return static_cast<int>(std::lround(v * (levels - 1)));
}

std::vector<double> attribute_code(float value, int levels, int dim) {
    const double q = quantize_level(value, levels);
    std::vector<double> code(static_cast<std::size_t>(dim));
    for (int i = 0; i < dim / 2; ++i) {
        const double freq = std::pow(10000.0, -2.0 * i / dim);
        code[static_cast<std::size_t>(2 * i)] = std::sin(q * freq);
        code[static_cast<std::size_t>(2 * i + 1)] = std::cos(q * freq);
    }
    return code;
}

template <typename T>
AttributeEncoder<T>::AttributeEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto n = static_cast<std::size_t>(cfg.n_attr), d = static_cast<std::size_t>(cfg.d_cond);
    mask_token_ = &ps.add_normal("attr_enc.mask_token", {n, d}, 1.0, rng);
    pos_ = &ps.add_normal("attr_enc.pos", {n, d}, 0.1, rng);
    for (int l = 0; l < 5; ++l)
        mlp_.emplace_back(ps, "attr_enc.mlp" + std::to_string(l), d, d, rng, l < 4 ? std::sqrt(2.0) : 1.0);
}

template <typename T>
Var<T> AttributeEncoder<T>::operator()(Tape<T>& t, const std::vector<const AttributeCondition*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("attribute encoder: empty batch");
    const auto n = static_cast<std::size_t>(cfg_.n_attr), d = static_cast<std::size_t>(cfg_.d_cond), B = batch.size();
    Tensor<T> codes(Shape{B, n, d}), masked(Shape{B, n, d});
    for (std::size_t b = 0; b < B; ++b) {
        const auto& a = *batch[b];
        if (a.values.size() != n || a.mask.size() != n)
            throw ShapeError("attribute encoder: expected " + std::to_string(n) + " attributes, got " + std::to_string(a.values.size()));
        for (std::size_t s = 0; s < n; ++s) {
            T* row_m = masked.raw() + (b * n + s) * d;
            if (a.mask[s]) {
                std::fill(row_m, row_m + d, T(1));
                continue;
            }
            auto code = attribute_code(a.values[s], cfg_.attr_levels, cfg_.d_cond);
            for (std::size_t j = 0; j < d; ++j) codes[(b * n + s) * d + j] = static_cast<T>(code[j]);
        }
    }
    auto tok = ops::mul_const(ops::broadcast_batch(t.param(*mask_token_), B), masked);
    auto h = ops::add(ops::add_const(tok, codes), ops::broadcast_batch(t.param(*pos_), B));
    for (std::size_t l = 0; l < mlp_.size(); ++l) {
        h = mlp_[l](t, h);
        if (l + 1 < mlp_.size()) h = ops::relu(h);
    }
    return h;
}

template <typename T>
VisualEncoder<T>::VisualEncoder(ParamStore<T>& ps, const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    std::size_t cin = 4;
    for (std::size_t i = 0; i < cfg.vis_channels.size(); ++i) {
        const auto c = static_cast<std::size_t>(cfg.vis_channels[i]);
        convs_.emplace_back(ps, "vis_enc.conv" + std::to_string(i), cin, c, 3, rng, 2, std::sqrt(2.0));
        cin = c;
    }
    const auto d = static_cast<std::size_t>(cfg.d_cond);
    mlp_.emplace_back(ps, "vis_enc.mlp0", cin, d, rng, std::sqrt(2.0));
    mlp_.emplace_back(ps, "vis_enc.mlp1", d, d, rng, std::sqrt(2.0));
    mlp_.emplace_back(ps, "vis_enc.mlp2", d, d, rng);
    pos_ = &ps.add_normal("vis_enc.pos", {static_cast<std::size_t>(cfg.n_vis_tokens()), d}, 0.1, rng);
}

template <typename T>
Tensor<T> VisualEncoder<T>::input_tensor(const std::vector<const VisualCondition*>& batch) const {
    const auto s = static_cast<std::size_t>(cfg_.image_size), hw = s * s, B = batch.size();
    Tensor<T> x(Shape{B, 4, s, s});
    for (std::size_t b = 0; b < B; ++b) {
        const auto& v = *batch[b];
        if (v.size != cfg_.image_size || v.rgb.size() != hw * 3 || v.seg.size() != hw || v.rgb_valid.size() != hw ||
            v.seg_valid.size() != hw)
            throw ShapeError("visual encoder: condition resolution does not match " + std::to_string(s));
        T* base = x.raw() + b * 4 * hw;
        for (std::size_t i = 0; i < hw; ++i) {
            for (std::size_t c = 0; c < 3; ++c) base[c * hw + i] = v.rgb_valid[i] ? static_cast<T>(v.rgb[i * 3 + c]) : T(kMaskFill);
            base[3 * hw + i] = v.seg_valid[i] ? static_cast<T>(v.seg[i] / double(toygen::kNumClasses - 1)) : T(kMaskFill);
        }
    }
    return x;
}

template <typename T>
Var<T> VisualEncoder<T>::operator()(Tape<T>& t, const std::vector<const VisualCondition*>& batch) const {
    if (batch.empty()) throw std::invalid_argument("visual encoder: empty batch");
    auto h = t.constant(input_tensor(batch));
    for (const auto& c : convs_) h = ops::relu(c(t, h));
    const std::size_t B = batch.size(), C = h.dim(1), N = h.dim(2) * h.dim(3);
    h = ops::transpose_last2(ops::reshape(h, Shape{B, C, N}));
    for (std::size_t l = 0; l < mlp_.size(); ++l) {
        h = mlp_[l](t, h);
        if (l + 1 < mlp_.size()) h = ops::relu(h);
    }
    return ops::add(h, ops::broadcast_batch(t.param(*pos_), B));
}

template <typename T>
Var<T> assemble_condition(Var<T> c_a, Var<T> c_v, double dropout_rate, Rng& rng, bool inference) {
    if (c_a.rank() != 3 || c_v.rank() != 3 || c_a.dim(0) != c_v.dim(0) || c_a.dim(2) != c_v.dim(2))
        throw ShapeError("assemble_condition: token sets must be [B, N, d_cond] with matching B and d_cond");
    auto a = ops::dropout(c_a, dropout_rate, rng, inference);
    auto v = ops::dropout(c_v, dropout_rate, rng, inference);
    return ops::concat<T>({a, v}, 1);
}

template class AttributeEncoder<float>;
template class AttributeEncoder<double>;
template class VisualEncoder<float>;
template class VisualEncoder<double>;
template Var<float> assemble_condition(Var<float>, Var<float>, double, Rng&, bool);
template Var<double> assemble_condition(Var<double>, Var<double>, double, Rng&, bool);

}  // namespace mmld::cond
