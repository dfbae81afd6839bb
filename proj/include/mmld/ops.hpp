#pragma once

// Differentiable primitives over Tape/Var. Sequence features are
// channels-first: [C, L] or batched [B, C, L]; token sets are [B, N, D].

#include <optional>
#include <type_traits>
#include <vector>

#include "mmld/autodiff.hpp"

namespace mmld::ops {

// --- elementwise / arithmetic ---------------------------------------------
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_const(Var<T> a, const Tensor<T>& c);
template <typename T> Var<T> mul_const(Var<T> a, const Tensor<T>& c);
// a * s + o elementwise, with constant vectors s and o broadcast over leading dims.
template <typename T> Var<T> affine_const(Var<T> a, const Tensor<T>& s, const Tensor<T>& o);

template <typename T> Var<T> relu(Var<T> x);
template <typename T> Var<T> silu(Var<T> x);
template <typename T> Var<T> gelu(Var<T> x);
template <typename T> Var<T> sigmoid(Var<T> x);
template <typename T> Var<T> softmax(Var<T> x, int axis = -1);

// --- reductions -------------------------------------------------------------
template <typename T> Var<T> sum(Var<T> x);
template <typename T> Var<T> mean(Var<T> x);
template <typename T> Var<T> sum_squares(Var<T> x);
// Mean squared error; with a weight tensor the mean runs over weighted entries:
// sum(w * (a-b)^2) / sum(w), or 0 when all weights are zero.
template <typename T> Var<T> mse(Var<T> a, Var<T> b);
template <typename T> Var<T> weighted_mse(Var<T> a, Var<T> b, const Tensor<T>& w);
// Mean per-pixel cross-entropy of logits [B, C, S...] against integer labels [B*S].
template <typename T> Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels);

// --- linear algebra ---------------------------------------------------------
template <typename T> Var<T> matmul(Var<T> a, Var<T> b);
// x [..., Din] · weight [Din, Dout] + bias [Dout]
template <typename T> Var<T> linear(Var<T> x, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias = std::nullopt);

// Cross-correlation. input [C_in, L] or [B, C_in, L]; weight [C_out, C_in, K], K odd.
template <typename T>
Var<T> conv1d(Var<T> input, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias, int padding, int stride = 1);
// input [B, C_in, H, W]; weight [C_out, C_in, K, K], K odd.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias, int padding, int stride = 1);

// x [C, S...] or [B, C, S...]; statistics per (sample, group).
template <typename T> Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// Normalizes the last axis.
template <typename T> Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

// Scaled dot-product attention, softmax(Q K^T / sqrt(d_k)) V, per head.
// Q [Lq, H*dk] K [Lk, H*dk] V [Lk, H*dv], optionally with a leading batch dim.
template <typename T> Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads = 1);

// h [B, C, S...] * (1 + scale[B, C]) + shift[B, C]
template <typename T> Var<T> scale_shift(Var<T> h, Var<T> scale, Var<T> shift);

// --- shape ------------------------------------------------------------------
template <typename T> Var<T> reshape(Var<T> x, Shape shape);
template <typename T> Var<T> transpose_last2(Var<T> x);
template <typename T> Var<T> concat(const std::vector<Var<T>>& xs, int axis);
template <typename T> Var<T> slice(Var<T> x, int axis, std::size_t start, std::size_t length);
// Zero-pads `count` entries at the end of `axis`.
template <typename T> Var<T> pad_end(Var<T> x, int axis, std::size_t count);
// Nearest-neighbour repeat along the last axis.
template <typename T> Var<T> upsample_nearest(Var<T> x, std::size_t factor = 2);
// [S...] -> [B, S...]
template <typename T> Var<T> broadcast_batch(Var<T> x, std::size_t batch);

// Inverted dropout; identity when `inference` is set or rate == 0.
template <typename T> Var<T> dropout(Var<T> x, double rate, Rng& rng, bool inference);

}  // namespace mmld::ops
