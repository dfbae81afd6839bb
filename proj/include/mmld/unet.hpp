#pragma once

// 1D cross-attention UNet over latent sequences [B, k, d]; the sequence axis
// is the spatial axis and d is the feature/channel axis.

#include <vector>

#include "mmld/nn.hpp"

namespace mmld::unet {

struct UNetConfig {
    int base_channels = 64;
    std::vector<int> channel_mults{1, 2, 4};
    int d_cond = 64;
    int heads = 4;
    int groups = 8;
    int k = 8;
    int d = 32;
    int timesteps = 1000;
    int res_kernel = 1;     // resblock convolutions
    int io_kernel = 3;      // input/output projections and down/up samplers

    int levels() const { return static_cast<int>(channel_mults.size()); }
    int time_embed_dim() const { return 4 * base_channels; }
    int padded_length() const;
    void validate() const;
};

// Sinusoid base of a timestep: interleaved [sin(t w_0), cos(t w_0), ...].
std::vector<double> timestep_sinusoid(int t, int dim);

template <typename T>
struct ResBlock {
    nn::Conv1d<T> conv1, conv2, skip;
    nn::GroupNorm<T> norm1, norm2;
    nn::Linear<T> emb_proj;  // emb -> [scale, shift]
    std::size_t cout = 0;

    ResBlock() = default;
    ResBlock(ParamStore<T>& ps, const std::string& name, std::size_t cin, std::size_t cout, const UNetConfig& cfg, Rng& rng);
    // h [B, cin, L], emb [B, E] -> [B, cout, L]
    Var<T> operator()(Tape<T>& t, Var<T> h, Var<T> emb) const;
};

// h * (1 + scale) + shift with (scale, shift) = proj(emb) split per channel.
template <typename T>
Var<T> modulate(Tape<T>& t, Var<T> h, Var<T> emb, const nn::Linear<T>& proj);

template <typename T>
struct AttentionBlock {
    nn::LayerNorm<T> ln_self, ln_ff, ln_cross;
    nn::Linear<T> q, k, v, o;
    nn::Linear<T> ff1, ff2;
    nn::Linear<T> cq, ck, cv, co;
    int heads = 1;

    AttentionBlock() = default;
    AttentionBlock(ParamStore<T>& ps, const std::string& name, std::size_t c, const UNetConfig& cfg, Rng& rng);
    // h [B, C, L], cond [B, N, d_cond]
    Var<T> operator()(Tape<T>& t, Var<T> h, Var<T> cond) const;
};

template <typename T>
class UNet {
public:
    UNet() = default;
    UNet(ParamStore<T>& ps, const UNetConfig& cfg, Rng& rng);

    const UNetConfig& config() const { return cfg_; }

    // [B, E] embedding of per-sample timestep indices in [0, timesteps).
    Var<T> timestep_embed(Tape<T>& t, const std::vector<int>& steps) const;

    // z [B, k, d], one timestep index per sample, cond [B, N, d_cond] -> [B, k, d]
    Var<T> operator()(Tape<T>& t, Var<T> z, const std::vector<int>& steps, Var<T> cond) const;

private:
    struct Level {
        ResBlock<T> res[2];
        AttentionBlock<T> attn;
        nn::Conv1d<T> sampler;  // downsampler (down path) or upsampler conv (up path)
        bool has_sampler = false;
    };

    UNetConfig cfg_;
    nn::Linear<T> time1_, time2_;
    nn::Conv1d<T> conv_in_, conv_out_;
    nn::GroupNorm<T> norm_out_;
    std::vector<Level> down_, up_;
};

}  // namespace mmld::unet
