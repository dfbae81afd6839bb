#include "mmld/toygen.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <Eigen/Core>
#include <unsupported/Eigen/AutoDiff>

#include "mmld/gemm.hpp"
#include "mmld/ops.hpp"

namespace mmld::toygen {
namespace {

using Grad = Eigen::Matrix<double, kNumParams, 1>;
using Dual = Eigen::AutoDiffScalar<Grad>;

constexpr double kDecodeGain = 1.8;
constexpr double kGateSharpness = 2.0;  // glasses/hat gate slope, in units of 1/tau

constexpr std::array<double, 3> kBackgroundColor{0.90, 0.92, 0.95};
constexpr std::array<double, 3> kClothingColor{0.20, 0.35, 0.65};
constexpr std::array<double, 3> kEyeColor{0.08, 0.08, 0.12};
constexpr std::array<double, 3> kGlassesColor{0.10, 0.55, 0.30};
constexpr std::array<double, 3> kHatColor{0.80, 0.20, 0.20};

inline double val(double x) { return x; }
inline double val(const Dual& x) { return x.value(); }

template <typename S>
S sigm(const S& x) {
    using std::exp;
    if (val(x) >= 0) return S(1) / (S(1) + exp(-x));
    S e = exp(x);
    return e / (S(1) + e);
}

template <typename S>
struct Params {
    S cx, cy, rx, ry;
    std::array<S, 3> skin, hair;
    S hair_length, eye_size, glasses, hat, clothing_height;

    explicit Params(const std::array<S, kNumParams>& a)
        : cx(a[0]), cy(a[1]), rx(a[2]), ry(a[3]), skin{a[4], a[5], a[6]}, hair{a[7], a[8], a[9]}, hair_length(a[10]),
          eye_size(a[11]), glasses(a[12]), hat(a[13]), clothing_height(a[14]) {}
};

// Membership of a point given a signed distance (positive inside).
template <typename S>
struct Membership {
    bool hard;
    double tau;
    S operator()(const S& sd) const { return hard ? S(val(sd) > 0 ? 1.0 : 0.0) : sigm<S>(sd / tau); }
};

template <typename S>
S ellipse_sd(double x, double y, const S& cx, const S& cy, const S& rx, const S& ry) {
    S dx = (x - cx) / rx, dy = (y - cy) / ry;
    S q = dx * dx + dy * dy;
    S rmin = val(rx) < val(ry) ? rx : ry;
    return (S(1) - q) * rmin * 0.5;
}

template <typename S>
S circle_sd(double x, double y, const S& cx, const S& cy, const S& r) {
    S dx = x - cx, dy = y - cy;
    return (r * r - dx * dx - dy * dy) / (r * 2.0);
}

template <typename S>
S band_sd(double v, const S& center, const S& half) {
    S d = v - center;
    return (half * half - d * d) / (half * 2.0);
}

template <typename S>
S union2(const S& a, const S& b) {
    return S(1) - (S(1) - a) * (S(1) - b);
}

template <typename S>
struct PixelOut {
    std::array<S, 3> rgb;
    std::uint8_t label;
};

// Evaluates the scene at scene-space point (x, y) and composites layers in
// paint order.
template <typename S>
PixelOut<S> shade(const Params<S>& p, double x, double y, double size, bool hard, double tau) {
    Membership<S> mem{hard, tau};
    PixelOut<S> out;
    for (int c = 0; c < 3; ++c) out.rgb[c] = S(kBackgroundColor[c]);
    out.label = kBackground;

    auto paint = [&](const S& m, const std::array<S, 3>& color, std::uint8_t label) {
        if (hard) {
            if (val(m) > 0.5) {
                out.rgb = color;
                out.label = label;
            }
            return;
        }
        for (int c = 0; c < 3; ++c) {
            S blended = out.rgb[c] + m * (color[c] - out.rgb[c]);
            out.rgb[c] = blended;
        }
        if (val(m) > 0.5) out.label = label;
    };
    auto fixed = [](const std::array<double, 3>& c) { return std::array<S, 3>{S(c[0]), S(c[1]), S(c[2])}; };
    auto gate = [&](const S& intensity) {
        return hard ? S(val(intensity) > 0.5 ? 1.0 : 0.0) : sigm<S>((intensity - 0.5) * (kGateSharpness / tau));
    };

    // clothing: ellipse rising from the bottom edge
    paint(mem(ellipse_sd<S>(x, y, p.cx, S(size), S(0.40 * size), p.clothing_height)), fixed(kClothingColor), kClothing);

    // hair: fixed top, bottom extends with hair length
    const S hcy = p.cy - 0.04 * size + p.hair_length * 0.5;
    const S hry = p.ry + 0.04 * size + p.hair_length * 0.5;
    paint(mem(ellipse_sd<S>(x, y, p.cx, hcy, p.rx + 0.06 * size, hry)), p.hair, kHair);

    paint(mem(ellipse_sd<S>(x, y, p.cx, p.cy, p.rx, p.ry)), p.skin, kSkin);

    const S ey = p.cy - p.ry * 0.1;
    const S exl = p.cx - p.rx * 0.42, exr = p.cx + p.rx * 0.42;
    paint(union2<S>(mem(circle_sd<S>(x, y, exl, ey, p.eye_size)), mem(circle_sd<S>(x, y, exr, ey, p.eye_size))),
          fixed(kEyeColor), kEyes);

    // glasses: two rings and a bridge
    const S r_in = p.eye_size + 0.012 * size, r_out = r_in + 0.035 * size;
    auto ring = [&](const S& ex) -> S {
        return mem(circle_sd<S>(x, y, ex, ey, r_out)) * (S(1) - mem(circle_sd<S>(x, y, ex, ey, r_in)));
    };
    const S bridge = mem(band_sd<S>(y, ey, S(0.015 * size))) * mem(band_sd<S>(x, p.cx, p.rx * 0.42));
    const S lenses = union2<S>(union2<S>(ring(exl), ring(exr)), bridge);
    paint(lenses * gate(p.glasses), fixed(kGlassesColor), kGlasses);

    // hat: top cap of an enlarged head ellipse
    const S cap = mem(ellipse_sd<S>(x, y, p.cx, p.cy - 0.04 * size, p.rx + 0.09 * size, p.ry + 0.10 * size)) *
                  mem(p.cy - p.ry * 0.75 - y);
    paint(cap * gate(p.hat), fixed(kHatColor), kHair);
    return out;
}

struct ViewMap {
    double c, inv_scale, tx, ty;
    explicit ViewMap(const ViewParams& v, int size) {
        const double deg = std::numbers::pi / 180.0;
        const double scale = std::tan(21.5 * deg / 2) / std::tan(v.fov * deg / 2);
        c = size / 2.0;
        inv_scale = 1.0 / scale;
        tx = 0.5 * size * v.yaw;
        ty = 0.5 * size * v.pitch;
    }
    double sx(int px) const { return c + (px + 0.5 - c - tx) * inv_scale; }
    double sy(int py) const { return c + (py + 0.5 - c - ty) * inv_scale; }
};

double luminance(const std::array<double, 3>& c) { return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]; }

}  // namespace

std::vector<std::string> attribute_names(int n_attr) {
    static const std::vector<std::string> base{"blonde_hair", "dark_hair", "glasses",   "pale_skin",
                                               "long_hair",   "big_eyes",  "wide_face", "hat"};
    std::vector<std::string> out;
    for (int i = 0; i < n_attr; ++i) out.push_back(i < kNumToyAttributes ? base[i] : "unused_" + std::to_string(i));
    return out;
}

const std::vector<std::string>& class_names() {
    static const std::vector<std::string> n{"background", "skin", "hair", "eyes", "glasses", "clothing"};
    return n;
}

const std::array<std::array<std::uint8_t, 3>, kNumClasses>& class_palette() {
    static const std::array<std::array<std::uint8_t, 3>, kNumClasses> p{{
        {0, 0, 0}, {230, 180, 150}, {120, 70, 20}, {40, 40, 200}, {20, 200, 80}, {60, 90, 170}}};
    return p;
}

void ToyGenConfig::validate() const {
    if (k <= 0 || d <= 0 || image_size <= 0 || n_attr <= 0) throw std::invalid_argument("toygen: k, d, image_size, n_attr must be positive");
    if (frozen_dims < 0 || frozen_dims >= d) throw std::invalid_argument("toygen: frozen_dims must be in [0, d)");
}

std::array<double, kNumParams> ShapeParams::to_array() const {
    return {cx, cy, rx, ry, skin[0], skin[1], skin[2], hair[0], hair[1], hair[2], hair_length, eye_size, glasses, hat, clothing_height};
}

ShapeParams ShapeParams::from_array(const std::array<double, kNumParams>& a) {
    ShapeParams p;
    p.cx = a[0];
    p.cy = a[1];
    p.rx = a[2];
    p.ry = a[3];
    p.skin = {a[4], a[5], a[6]};
    p.hair = {a[7], a[8], a[9]};
    p.hair_length = a[10];
    p.eye_size = a[11];
    p.glasses = a[12];
    p.hat = a[13];
    p.clothing_height = a[14];
    return p;
}

ViewParams sample_view(Rng& rng) {
    ViewParams v;
    v.fov = rng.bernoulli(0.7) ? rng.uniform(22.0, 25.0) : rng.uniform(18.0, 22.0);
    v.yaw = rng.uniform(-0.15, 0.15);
    v.pitch = rng.uniform(-0.15, 0.15);
    v.roll = 0.0;
    v.radius = 2.7;
    return v;
}

ToyGenerator::ToyGenerator(ToyGenConfig cfg) : cfg_(cfg) {
    cfg_.validate();
    const double s = cfg_.image_size;
    // cx cy rx ry | skin rgb | hair rgb | hair_len eye glasses hat clothing
    lo_ = {0.44 * s, 0.42 * s, 0.16 * s, 0.20 * s, 0.3, 0.3, 0.3, 0.0, 0.0, 0.0, 0.0, 0.02 * s, 0.0, 0.0, 0.08 * s};
    hi_ = {0.56 * s, 0.54 * s, 0.25 * s, 0.29 * s, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.40 * s, 0.055 * s, 1.0, 1.0, 0.24 * s};

    const std::size_t n = cfg_.latent_size();
    const int live = cfg_.d - cfg_.frozen_dims;
    const double stddev = kDecodeGain / std::sqrt(static_cast<double>(cfg_.k) * live);
    wg_ = Tensord(Shape{n, static_cast<std::size_t>(kNumParams)});
    Rng rng(derive_seed(cfg_.seed, 0x746f7967656eULL));
    for (std::size_t r = 0; r < n; ++r) {
        const bool frozen = static_cast<int>(r % static_cast<std::size_t>(cfg_.d)) >= live;
        for (int j = 0; j < kNumParams; ++j) {
            const double w = rng.normal() * stddev;
            wg_[r * kNumParams + static_cast<std::size_t>(j)] = frozen ? 0.0 : w;
        }
    }
    wgf_ = wg_.cast<float>();
}

ShapeParams ToyGenerator::decode(const Tensorf& latent) const {
    if (latent.shape() != Shape{static_cast<std::size_t>(cfg_.k), static_cast<std::size_t>(cfg_.d)})
        throw ShapeError("decode: latent shape " + to_string(latent.shape()) + " does not match generator config");
    std::array<double, kNumParams> z{};
    for (std::size_t r = 0; r < latent.size(); ++r) {
        const double x = latent[r];
        for (int j = 0; j < kNumParams; ++j) z[j] += x * wg_[r * kNumParams + static_cast<std::size_t>(j)];
    }
    std::array<double, kNumParams> a{};
    for (int j = 0; j < kNumParams; ++j) a[j] = lo_[j] + (hi_[j] - lo_[j]) * sigm<double>(z[j]);
    return ShapeParams::from_array(a);
}

template <typename T>
Var<T> ToyGenerator::decode_var(Var<T> latent) const {
    if (latent.shape() != Shape{static_cast<std::size_t>(cfg_.k), static_cast<std::size_t>(cfg_.d)})
        throw ShapeError("decode_var: latent shape mismatch");
    auto& tape = *latent.tape;
    Tensor<T> w;
    if constexpr (std::is_same_v<T, float>)
        w = wgf_;
    else
        w = wg_.cast<T>();
    auto flat = ops::reshape(latent, Shape{1, cfg_.latent_size()});
    auto z = ops::sigmoid(ops::linear(flat, tape.constant(std::move(w))));
    Tensor<T> scale(Shape{static_cast<std::size_t>(kNumParams)}), offset(Shape{static_cast<std::size_t>(kNumParams)});
    for (int j = 0; j < kNumParams; ++j) {
        scale[static_cast<std::size_t>(j)] = static_cast<T>(hi_[j] - lo_[j]);
        offset[static_cast<std::size_t>(j)] = static_cast<T>(lo_[j]);
    }
    return ops::reshape(ops::affine_const(z, scale, offset), Shape{static_cast<std::size_t>(kNumParams)});
}

Render ToyGenerator::render(const ShapeParams& p, const ViewParams& view, RenderMode mode, double tau) const {
    if (mode == RenderMode::Soft && !(tau > 0)) throw std::invalid_argument("render: tau must be positive in soft mode");
    const int n = cfg_.image_size;
    const bool hard = mode == RenderMode::Hard;
    const Params<double> pp(p.to_array());
    const ViewMap vm(view, n);
    Render r;
    r.size = n;
    r.rgb.resize(static_cast<std::size_t>(n) * n * 3);
    r.seg.resize(static_cast<std::size_t>(n) * n);
    for (int py = 0; py < n; ++py)
        for (int px = 0; px < n; ++px) {
            auto o = shade<double>(pp, vm.sx(px), vm.sy(py), n, hard, tau);
            const std::size_t i = static_cast<std::size_t>(py) * n + px;
            for (int c = 0; c < 3; ++c) r.rgb[i * 3 + c] = static_cast<float>(std::clamp(o.rgb[c], 0.0, 1.0));
            r.seg[i] = o.label;
        }
    return r;
}

template <typename T>
Var<T> ToyGenerator::render_soft_var(Var<T> params, const ViewParams& view, double tau) const {
    if (!(tau > 0)) throw std::invalid_argument("render_soft_var: tau must be positive");
    if (params.shape() != Shape{static_cast<std::size_t>(kNumParams)}) throw ShapeError("render_soft_var: expected [15] params");
    const int n = cfg_.image_size;
    const std::size_t hw = static_cast<std::size_t>(n) * n;
    std::array<Dual, kNumParams> a;
    for (int j = 0; j < kNumParams; ++j) a[j] = Dual(static_cast<double>(params.value()[static_cast<std::size_t>(j)]), kNumParams, j);
    const Params<Dual> pp(a);
    const ViewMap vm(view, n);
    Tensor<T> img(Shape{3, static_cast<std::size_t>(n), static_cast<std::size_t>(n)});
    std::vector<double> jac(3 * hw * kNumParams);  // row = output entry (CHW)
    for (int py = 0; py < n; ++py)
        for (int px = 0; px < n; ++px) {
            auto o = shade<Dual>(pp, vm.sx(px), vm.sy(py), n, false, tau);
            const std::size_t i = static_cast<std::size_t>(py) * n + px;
            for (int c = 0; c < 3; ++c) {
                const std::size_t e = static_cast<std::size_t>(c) * hw + i;
                img[e] = static_cast<T>(o.rgb[c].value());
                const auto& d = o.rgb[c].derivatives();
                for (int j = 0; j < kNumParams; ++j) jac[e * kNumParams + static_cast<std::size_t>(j)] = d.size() ? d[j] : 0.0;
            }
        }
    const int ip = params.id;
    const std::size_t rows = 3 * hw;
    return params.tape->record(std::move(img), {params}, [ip, jac = std::move(jac), rows](Tape<T>& t, const Tensor<T>& g) {
        std::vector<double> gd(g.raw(), g.raw() + g.size());
        std::array<double, kNumParams> out{};
        gemm<double>(false, false, 1, kNumParams, static_cast<Eigen::Index>(rows), gd.data(), jac.data(), out.data(), false);
        auto& gp = t.grad_buffer(ip);
        for (int j = 0; j < kNumParams; ++j) gp[static_cast<std::size_t>(j)] += static_cast<T>(out[j]);
    });
}

std::vector<float> ToyGenerator::attributes(const ShapeParams& p) const {
    auto unit = [&](double v, int j) { return std::clamp((v - lo_[j]) / (hi_[j] - lo_[j]), 0.0, 1.0); };
    const double dy = std::sqrt(std::pow(p.hair[0] - 1.0, 2) + std::pow(p.hair[1] - 1.0, 2) + std::pow(p.hair[2], 2));
    const std::array<double, kNumToyAttributes> base{
        std::clamp(1.0 - dy / std::sqrt(3.0), 0.0, 1.0),
        std::clamp(1.0 - luminance(p.hair), 0.0, 1.0),
        std::clamp(p.glasses, 0.0, 1.0),
        std::clamp(luminance(p.skin), 0.0, 1.0),
        unit(p.hair_length, 10),
        unit(p.eye_size, 11),
        unit(p.rx, 2),
        std::clamp(p.hat, 0.0, 1.0)};
    std::vector<float> out(static_cast<std::size_t>(cfg_.n_attr), 0.0f);
    for (int i = 0; i < std::min(cfg_.n_attr, kNumToyAttributes); ++i) out[static_cast<std::size_t>(i)] = static_cast<float>(base[i]);
    return out;
}

DatasetRecord ToyGenerator::make_record(std::uint64_t seed, std::uint64_t index) const {
    Rng rng(derive_seed(seed, index));
    DatasetRecord rec;
    rec.latent = Tensorf(Shape{static_cast<std::size_t>(cfg_.k), static_cast<std::size_t>(cfg_.d)});
    const int live = cfg_.d - cfg_.frozen_dims;
    for (std::size_t i = 0; i < rec.latent.size(); ++i) {
        const float v = static_cast<float>(rng.normal());
        rec.latent[i] = static_cast<int>(i % static_cast<std::size_t>(cfg_.d)) < live ? v : 0.0f;
    }
    // Stored as f32 on disk; round now so a reloaded record re-renders identically.
    ViewParams v = sample_view(rng);
    rec.view.fov = static_cast<float>(v.fov);
    rec.view.yaw = static_cast<float>(v.yaw);
    rec.view.pitch = static_cast<float>(v.pitch);
    rec.view.roll = static_cast<float>(v.roll);
    rec.view.radius = static_cast<float>(v.radius);

    const ShapeParams p = decode(rec.latent);
    Render r = render(p, rec.view, RenderMode::Hard);
    rec.image = quantize(r.rgb);
    rec.seg = std::move(r.seg);
    rec.attrs = attributes(p);
    return rec;
}

std::vector<DatasetRecord> ToyGenerator::build_dataset(std::size_t count, std::uint64_t seed) const {
    if (count == 0) throw std::invalid_argument("build_dataset: count must be positive");
    std::vector<DatasetRecord> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) out.push_back(make_record(seed, i));
    return out;
}

std::vector<std::uint8_t> quantize(const std::vector<float>& v) {
    std::vector<std::uint8_t> out(v.size());
    for (std::size_t i = 0; i < v.size(); ++i)
        out[i] = static_cast<std::uint8_t>(std::lround(std::clamp(v[i], 0.0f, 1.0f) * 255.0f));
    return out;
}

Tensorf image_to_chw(const std::vector<std::uint8_t>& hwc, int size) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    if (hwc.size() != hw * 3) throw ShapeError("image_to_chw: raster size mismatch");
    Tensorf t(Shape{3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) t[c * hw + i] = hwc[i * 3 + c] / 255.0f;
    return t;
}

Tensorf image_to_chw(const std::vector<float>& hwc, int size) {
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    if (hwc.size() != hw * 3) throw ShapeError("image_to_chw: raster size mismatch");
    Tensorf t(Shape{3, static_cast<std::size_t>(size), static_cast<std::size_t>(size)});
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) t[c * hw + i] = hwc[i * 3 + c];
    return t;
}

std::vector<std::uint8_t> chw_to_image(const Tensorf& chw) {
    if (chw.rank() != 3 || chw.dim(0) != 3) throw ShapeError("chw_to_image: expected [3, H, W]");
    const std::size_t hw = chw.dim(1) * chw.dim(2);
    std::vector<float> hwc(hw * 3);
    for (std::size_t i = 0; i < hw; ++i)
        for (std::size_t c = 0; c < 3; ++c) hwc[i * 3 + c] = chw[c * hw + i];
    return quantize(hwc);
}

NormStats fit_normalization(const std::vector<Tensorf>& latents) {
    if (latents.size() < 2) throw std::invalid_argument("fit_normalization: need at least 2 latents");
    NormStats s{latents[0], latents[0]};
    for (const auto& x : latents) {
        if (x.shape() != s.min.shape()) throw ShapeError("fit_normalization: inconsistent latent shapes");
        for (std::size_t i = 0; i < x.size(); ++i) {
            s.min[i] = std::min(s.min[i], x[i]);
            s.max[i] = std::max(s.max[i], x[i]);
        }
    }
    return s;
}

Tensorf normalize(const Tensorf& latent, const NormStats& s) {
    if (latent.shape() != s.min.shape()) throw ShapeError("normalize: shape mismatch");
    Tensorf out(latent.shape());
    for (std::size_t i = 0; i < latent.size(); ++i) {
        const double range = static_cast<double>(s.max[i]) - s.min[i];
        out[i] = range < 1e-8 ? 0.0f : static_cast<float>(2.0 * (latent[i] - static_cast<double>(s.min[i])) / range - 1.0);
    }
    return out;
}

Tensorf denormalize(const Tensorf& latent, const NormStats& s) {
    if (latent.shape() != s.min.shape()) throw ShapeError("denormalize: shape mismatch");
    Tensorf out(latent.shape());
    for (std::size_t i = 0; i < latent.size(); ++i) {
        const double range = static_cast<double>(s.max[i]) - s.min[i];
        out[i] = range < 1e-8 ? s.min[i] : static_cast<float>((latent[i] + 1.0) * 0.5 * range + s.min[i]);
    }
    return out;
}

template Var<float> ToyGenerator::decode_var(Var<float>) const;
template Var<double> ToyGenerator::decode_var(Var<double>) const;
template Var<float> ToyGenerator::render_soft_var(Var<float>, const ViewParams&, double) const;
template Var<double> ToyGenerator::render_soft_var(Var<double>, const ViewParams&, double) const;

}  // namespace mmld::toygen
