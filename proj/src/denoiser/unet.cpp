#include "mmld/unet.hpp"

#include <cmath>
#include <stdexcept>

namespace mmld::unet {

int UNetConfig::padded_length() const {
    const int m = 1 << levels();
    return (k + m - 1) / m * m;
}

void UNetConfig::validate() const {
    if (base_channels <= 0 || d_cond <= 0 || heads <= 0 || groups <= 0 || k <= 0 || d <= 0 || timesteps <= 0)
        throw std::invalid_argument("unet config: sizes must be positive");
    if (channel_mults.empty()) throw std::invalid_argument("unet config: need at least one level");
    for (int m : channel_mults) {
        if (m <= 0) throw std::invalid_argument("unet config: channel multipliers must be positive");
        const int c = base_channels * m;
        if (c % groups != 0) throw std::invalid_argument("unet config: channels must be divisible by groups");
        if (c % heads != 0) throw std::invalid_argument("unet config: channels must be divisible by heads");
    }
    if (base_channels % 2 != 0) throw std::invalid_argument("unet config: base_channels must be even");
    if (res_kernel % 2 == 0 || io_kernel % 2 == 0) throw std::invalid_argument("unet config: kernels must be odd");
}

std::vector<double> timestep_sinusoid(int t, int dim) {
    std::vector<double> out(static_cast<std::size_t>(dim));
    const int half = dim / 2;
    for (int i = 0; i < half; ++i) {
        const double freq = std::exp(-std::log(10000.0) * i / half);
        out[static_cast<std::size_t>(2 * i)] = std::sin(t * freq);
        out[static_cast<std::size_t>(2 * i + 1)] = std::cos(t * freq);
    }
    return out;
}

template <typename T>
Var<T> modulate(Tape<T>& t, Var<T> h, Var<T> emb, const nn::Linear<T>& proj) {
    const std::size_t c = h.dim(h.rank() - 2);
    auto ss = proj(t, emb);
    if (ss.shape().back() != 2 * c) throw ShapeError("modulate: projection width does not match channels");
    const int ax = static_cast<int>(ss.rank()) - 1;
    return ops::scale_shift(h, ops::slice(ss, ax, 0, c), ops::slice(ss, ax, c, c));
}

template <typename T>
ResBlock<T>::ResBlock(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout_, const UNetConfig& cfg,
                      Rng& rng)
    : cout(cout_) {
    const auto k = static_cast<std::size_t>(cfg.res_kernel);
    conv1 = nn::Conv1d<T>(ps, name + ".conv1", cin, cout, k, rng);
    norm1 = nn::GroupNorm<T>(ps, name + ".norm1", cout, cfg.groups);
    emb_proj = nn::Linear<T>(ps, name + ".emb", static_cast<std::size_t>(cfg.time_embed_dim()), 2 * cout, rng, 0.1);
    conv2 = nn::Conv1d<T>(ps, name + ".conv2", cout, cout, k, rng);
    norm2 = nn::GroupNorm<T>(ps, name + ".norm2", cout, cfg.groups);
    skip = nn::Conv1d<T>(ps, name + ".skip", cin, cout, 1, rng);
}

template <typename T>
Var<T> ResBlock<T>::operator()(Tape<T>& t, Var<T> h, Var<T> emb) const {
    auto u = norm1(t, conv1(t, h));
    u = ops::silu(modulate(t, u, emb, emb_proj));
    u = ops::silu(norm2(t, conv2(t, u)));
    return ops::add(u, skip(t, h));
}

template <typename T>
AttentionBlock<T>::AttentionBlock(ParamStore<T>& ps, const std::string& name, std::size_t c, const UNetConfig& cfg, Rng& rng)
    : heads(cfg.heads) {
    const auto dc = static_cast<std::size_t>(cfg.d_cond);
    ln_self = nn::LayerNorm<T>(ps, name + ".ln_self", c);
    q = nn::Linear<T>(ps, name + ".self.q", c, c, rng);
    k = nn::Linear<T>(ps, name + ".self.k", c, c, rng);
    v = nn::Linear<T>(ps, name + ".self.v", c, c, rng);
    o = nn::Linear<T>(ps, name + ".self.o", c, c, rng);
    ln_ff = nn::LayerNorm<T>(ps, name + ".ln_ff", c);
    ff1 = nn::Linear<T>(ps, name + ".ff1", c, c, rng);
    ff2 = nn::Linear<T>(ps, name + ".ff2", c, c, rng);
    ln_cross = nn::LayerNorm<T>(ps, name + ".ln_cross", c);
    cq = nn::Linear<T>(ps, name + ".cross.q", c, c, rng);
    ck = nn::Linear<T>(ps, name + ".cross.k", dc, c, rng);
    cv = nn::Linear<T>(ps, name + ".cross.v", dc, c, rng);
    co = nn::Linear<T>(ps, name + ".cross.o", c, c, rng);
}

template <typename T>
Var<T> AttentionBlock<T>::operator()(Tape<T>& t, Var<T> h, Var<T> cond) const {
    auto x = ops::transpose_last2(h);  // [B, L, C]
    auto n = ln_self(t, x);
    x = ops::add(x, o(t, ops::attention(q(t, n), k(t, n), v(t, n), heads)));
    n = ln_ff(t, x);
    x = ops::add(x, ff2(t, ops::gelu(ff1(t, n))));
    n = ln_cross(t, x);
    x = ops::add(x, co(t, ops::attention(cq(t, n), ck(t, cond), cv(t, cond), heads)));
    return ops::transpose_last2(x);
}

template <typename T>
UNet<T>::UNet(ParamStore<T>& ps, const UNetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    const auto base = static_cast<std::size_t>(cfg.base_channels), te = static_cast<std::size_t>(cfg.time_embed_dim());
    const auto io = static_cast<std::size_t>(cfg.io_kernel);
    time1_ = nn::Linear<T>(ps, "time.l1", base, te, rng);
    time2_ = nn::Linear<T>(ps, "time.l2", te, te, rng);
    conv_in_ = nn::Conv1d<T>(ps, "conv_in", static_cast<std::size_t>(cfg.d), base, io, rng);

    const int L = cfg.levels();
    std::size_t cin = base;
    for (int i = 0; i < L; ++i) {
        const auto c = base * static_cast<std::size_t>(cfg.channel_mults[static_cast<std::size_t>(i)]);
        const std::string p = "down" + std::to_string(i);
        Level lv;
        lv.res[0] = ResBlock<T>(ps, p + ".res0", cin, c, cfg, rng);
        lv.res[1] = ResBlock<T>(ps, p + ".res1", c, c, cfg, rng);
        lv.attn = AttentionBlock<T>(ps, p + ".attn", c, cfg, rng);
        if (i + 1 < L) {
            lv.sampler = nn::Conv1d<T>(ps, p + ".downsample", c, c, io, rng, 2);
            lv.has_sampler = true;
        }
        down_.push_back(std::move(lv));
        cin = c;
    }
    std::size_t prev = cin;
    for (int i = L - 1; i >= 0; --i) {
        const auto c = base * static_cast<std::size_t>(cfg.channel_mults[static_cast<std::size_t>(i)]);
        const std::string p = "up" + std::to_string(i);
        Level lv;
        // The deepest level continues from its own output; shallower levels
        // upsample and concatenate the matching skip.
        const bool deepest = i == L - 1;
        if (!deepest) {
            lv.sampler = nn::Conv1d<T>(ps, p + ".upsample", prev, prev, io, rng);
            lv.has_sampler = true;
        }
        lv.res[0] = ResBlock<T>(ps, p + ".res0", deepest ? prev : prev + c, c, cfg, rng);
        lv.res[1] = ResBlock<T>(ps, p + ".res1", c, c, cfg, rng);
        lv.attn = AttentionBlock<T>(ps, p + ".attn", c, cfg, rng);
        up_.push_back(std::move(lv));
        prev = c;
    }
    norm_out_ = nn::GroupNorm<T>(ps, "norm_out", base, cfg.groups);
    conv_out_ = nn::Conv1d<T>(ps, "conv_out", base, static_cast<std::size_t>(cfg.d), io, rng, 1, 1.0 / std::sqrt(3.0));
}

template <typename T>
Var<T> UNet<T>::timestep_embed(Tape<T>& t, const std::vector<int>& steps) const {
    const auto base = static_cast<std::size_t>(cfg_.base_channels);
    Tensor<T> s(Shape{steps.size(), base});
    for (std::size_t b = 0; b < steps.size(); ++b) {
        if (steps[b] < 0 || steps[b] >= cfg_.timesteps)
            throw std::out_of_range("timestep " + std::to_string(steps[b]) + " outside [0, " + std::to_string(cfg_.timesteps) + ")");
        auto v = timestep_sinusoid(steps[b], cfg_.base_channels);
        for (std::size_t j = 0; j < base; ++j) s[b * base + j] = static_cast<T>(v[j]);
    }
    return time2_(t, ops::gelu(time1_(t, t.constant(std::move(s)))));
}

template <typename T>
Var<T> UNet<T>::operator()(Tape<T>& t, Var<T> z, const std::vector<int>& steps, Var<T> cond) const {
    const auto k = static_cast<std::size_t>(cfg_.k), d = static_cast<std::size_t>(cfg_.d);
    if (z.rank() != 3 || z.dim(1) != k || z.dim(2) != d)
        throw ShapeError("denoiser: expected latents [B, " + std::to_string(k) + ", " + std::to_string(d) + "], got " + to_string(z.shape()));
    const std::size_t B = z.dim(0);
    if (steps.size() != B) throw ShapeError("denoiser: one timestep per sample required");
    if (cond.rank() != 3 || cond.dim(0) != B || cond.dim(2) != static_cast<std::size_t>(cfg_.d_cond))
        throw ShapeError("denoiser: condition tokens must be [B, N, " + std::to_string(cfg_.d_cond) + "], got " + to_string(cond.shape()));
    if (!z.value().all_finite()) throw NumericError("denoiser: non-finite input");

    auto emb = timestep_embed(t, steps);
    const std::size_t padded = static_cast<std::size_t>(cfg_.padded_length());
    auto h = ops::pad_end(ops::transpose_last2(z), -1, padded - k);  // [B, d, Lp]
    h = conv_in_(t, h);

    std::vector<Var<T>> skips;
    for (const auto& lv : down_) {
        h = lv.res[0](t, h, emb);
        h = lv.res[1](t, h, emb);
        h = lv.attn(t, h, cond);
        skips.push_back(h);
        if (lv.has_sampler) h = lv.sampler(t, h);
    }
    for (std::size_t i = 0; i < up_.size(); ++i) {
        const auto& lv = up_[i];
        if (lv.has_sampler) {
            h = lv.sampler(t, ops::upsample_nearest(h, 2));
            h = ops::concat<T>({h, skips[skips.size() - 1 - i]}, 1);
        }
        h = lv.res[0](t, h, emb);
        h = lv.res[1](t, h, emb);
        h = lv.attn(t, h, cond);
    }
    h = conv_out_(t, ops::silu(norm_out_(t, h)));
    return ops::transpose_last2(ops::slice(h, -1, 0, k));
}

template Var<float> modulate(Tape<float>&, Var<float>, Var<float>, const nn::Linear<float>&);
template Var<double> modulate(Tape<double>&, Var<double>, Var<double>, const nn::Linear<double>&);
template struct ResBlock<float>;
template struct ResBlock<double>;
template struct AttentionBlock<float>;
template struct AttentionBlock<double>;
template class UNet<float>;
template class UNet<double>;

}  // namespace mmld::unet
