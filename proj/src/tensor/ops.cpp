#include "mmld/ops.hpp"

#include <cmath>
#include <numbers>

#include <unsupported/Eigen/SpecialFunctions>

#include "mmld/gemm.hpp"

namespace mmld::ops {
namespace {

template <typename T>
void require_same_shape(const Var<T>& a, const Var<T>& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <typename T>
Tape<T>& tape_of(const Var<T>& v) {
    if (!v.valid()) throw std::invalid_argument("invalid Var");
    return *v.tape;
}

std::size_t norm_axis(int axis, std::size_t rank) {
    int r = static_cast<int>(rank);
    int a = axis < 0 ? axis + r : axis;
    if (a < 0 || a >= r) throw ShapeError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
    return static_cast<std::size_t>(a);
}

// (outer, axis, inner) decomposition of a shape around one axis.
struct AxisSplit {
    std::size_t outer = 1, n = 1, inner = 1;
};
AxisSplit split_axis(const Shape& s, std::size_t axis) {
    AxisSplit r;
    for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
    r.n = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
    return r;
}

template <typename T>
void accumulate(Tensor<T>& dst, const Tensor<T>& src) {
    auto& d = dst.vec();
    const auto& s = src.vec();
    for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

template <typename T, typename F, typename DF>
Var<T> unary(Var<T> x, F f, DF df) {
    auto& tp = tape_of(x);
    const auto& xv = x.value();
    Tensor<T> y(xv.shape());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = f(xv[i]);
    int xid = x.id;
    return tp.record(std::move(y), {x}, [xid, df](Tape<T>& t, const Tensor<T>& g) {
        if (!t.requires_grad(xid)) return;
        const auto& xv = t.value(xid);
        auto& gx = t.grad_buffer(xid);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xv[i]);
    });
}

template <typename T>
using ArrayMap = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrayMapMut = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

// Elementwise op on whole arrays so the transcendental functions vectorize.
template <typename T, typename F, typename DF>
Var<T> unary_array(Var<T> x, F f, DF df) {
    auto& tp = tape_of(x);
    const auto& xv = x.value();
    const auto n = static_cast<Eigen::Index>(xv.size());
    Tensor<T> y(xv.shape());
    ArrayMapMut<T>(y.raw(), n) = f(ArrayMap<T>(xv.raw(), n));
    int xid = x.id;
    return tp.record(std::move(y), {x}, [xid, df, n](Tape<T>& t, const Tensor<T>& g) {
        if (!t.requires_grad(xid)) return;
        auto& gx = t.grad_buffer(xid);
        ArrayMapMut<T>(gx.raw(), n) += ArrayMap<T>(g.raw(), n) * df(ArrayMap<T>(t.value(xid).raw(), n));
    });
}

template <typename T>
T sigmoid_scalar(T v) {
    return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace

// ---------------------------------------------------------------------------
template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "add");
    Tensor<T> y = a.value();
    accumulate(y, b.value());
    int ia = a.id, ib = b.id;
    return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) accumulate(t.grad_buffer(ib), g);
    });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "sub");
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] -= bv[i];
    int ia = a.id, ib = b.id;
    return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(ia)) accumulate(t.grad_buffer(ia), g);
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
    require_same_shape(a, b, "mul");
    Tensor<T> y = a.value();
    const auto& bv = b.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= bv[i];
    int ia = a.id, ib = b.id;
    return tape_of(a).record(std::move(y), {a, b}, [ia, ib](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad_buffer(ia);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
    Tensor<T> y = a.value();
    for (auto& v : y.data()) v *= s;
    int ia = a.id;
    return tape_of(a).record(std::move(y), {a}, [ia, s](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
}

template <typename T>
Var<T> add_const(Var<T> a, const Tensor<T>& c) {
    if (a.shape() != c.shape()) throw ShapeError("add_const: shape mismatch");
    Tensor<T> y = a.value();
    accumulate(y, c);
    int ia = a.id;
    return tape_of(a).record(std::move(y), {a}, [ia](Tape<T>& t, const Tensor<T>& g) { accumulate(t.grad_buffer(ia), g); });
}

template <typename T>
Var<T> mul_const(Var<T> a, const Tensor<T>& c) {
    if (a.shape() != c.shape()) throw ShapeError("mul_const: shape mismatch");
    Tensor<T> y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] *= c[i];
    int ia = a.id;
    return tape_of(a).record(std::move(y), {a}, [ia, c](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
    });
}

template <typename T>
Var<T> affine_const(Var<T> a, const Tensor<T>& s, const Tensor<T>& o) {
    const std::size_t n = s.size();
    if (o.size() != n || a.value().size() % n != 0 || a.shape().back() != n)
        throw ShapeError("affine_const: last axis must match the constant vectors");
    Tensor<T> y = a.value();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = y[i] * s[i % n] + o[i % n];
    int ia = a.id;
    return tape_of(a).record(std::move(y), {a}, [ia, s, n](Tape<T>& t, const Tensor<T>& g) {
        auto& ga = t.grad_buffer(ia);
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s[i % n];
    });
}

template <typename T>
Var<T> relu(Var<T> x) {
    return unary(x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Var<T> sigmoid(Var<T> x) {
    auto sig = [](const auto& a) { return (T(1) + (-a).exp()).inverse(); };
    return unary_array(
        x, [sig](const ArrayMap<T>& a) { return sig(a).eval(); },
        [sig](const ArrayMap<T>& a) {
            auto s = sig(a).eval();
            return (s * (T(1) - s)).eval();
        });
}

template <typename T>
Var<T> silu(Var<T> x) {
    auto sig = [](const auto& a) { return (T(1) + (-a).exp()).inverse(); };
    return unary_array(
        x, [sig](const ArrayMap<T>& a) { return (a * sig(a)).eval(); },
        [sig](const ArrayMap<T>& a) {
            auto s = sig(a).eval();
            return (s * (T(1) + a * (T(1) - s))).eval();
        });
}

template <typename T>
Var<T> gelu(Var<T> x) {
    static constexpr T inv_sqrt2 = T(1) / std::numbers::sqrt2_v<T>;
    static constexpr T inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<T> * inv_sqrt2;
    return unary_array(
        x, [](const ArrayMap<T>& a) { return (T(0.5) * a * (T(1) + (a * inv_sqrt2).erf())).eval(); },
        [](const ArrayMap<T>& a) {
            return (T(0.5) * (T(1) + (a * inv_sqrt2).erf()) + a * inv_sqrt_2pi * (T(-0.5) * a.square()).exp()).eval();
        });
}

template <typename T>
Var<T> softmax(Var<T> x, int axis) {
    const auto& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    const AxisSplit sp = split_axis(xv.shape(), ax);
    Tensor<T> y(xv.shape());
    for (std::size_t o = 0; o < sp.outer; ++o)
        for (std::size_t in = 0; in < sp.inner; ++in) {
            const std::size_t base = o * sp.n * sp.inner + in;
            T mx = xv[base];
            for (std::size_t j = 1; j < sp.n; ++j) mx = std::max(mx, xv[base + j * sp.inner]);
            T z = 0;
            for (std::size_t j = 0; j < sp.n; ++j) {
                T e = std::exp(xv[base + j * sp.inner] - mx);
                y[base + j * sp.inner] = e;
                z += e;
            }
            for (std::size_t j = 0; j < sp.n; ++j) y[base + j * sp.inner] /= z;
        }
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, sp](Tape<T>& t, const Tensor<T>& g) {
        const auto& y = t.value(t.current());
        auto& gx = t.grad_buffer(ix);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t in = 0; in < sp.inner; ++in) {
                const std::size_t base = o * sp.n * sp.inner + in;
                T dot = 0;
                for (std::size_t j = 0; j < sp.n; ++j) dot += g[base + j * sp.inner] * y[base + j * sp.inner];
                for (std::size_t j = 0; j < sp.n; ++j) {
                    const std::size_t q = base + j * sp.inner;
                    gx[q] += y[q] * (g[q] - dot);
                }
            }
    });
}


// ---------------------------------------------------------------------------
template <typename T>
Var<T> sum(Var<T> x) {
    T s = 0;
    for (T v : x.value().data()) s += v;
    int ix = x.id;
    return tape_of(x).record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (auto& v : gx.data()) v += g[0];
    });
}

template <typename T>
Var<T> mean(Var<T> x) {
    const T n = static_cast<T>(x.value().size());
    T s = 0;
    for (T v : x.value().data()) s += v;
    int ix = x.id;
    return tape_of(x).record(Tensor<T>::scalar(s / n), {x}, [ix, n](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (auto& v : gx.data()) v += g[0] / n;
    });
}

template <typename T>
Var<T> sum_squares(Var<T> x) {
    T s = 0;
    for (T v : x.value().data()) s += v * v;
    int ix = x.id;
    return tape_of(x).record(Tensor<T>::scalar(s), {x}, [ix](Tape<T>& t, const Tensor<T>& g) {
        const auto& xv = t.value(ix);
        auto& gx = t.grad_buffer(ix);
        for (std::size_t i = 0; i < xv.size(); ++i) gx[i] += T(2) * xv[i] * g[0];
    });
}

template <typename T>
Var<T> weighted_mse(Var<T> a, Var<T> b, const Tensor<T>& w) {
    require_same_shape(a, b, "weighted_mse");
    if (w.shape() != a.shape()) throw ShapeError("weighted_mse: weight shape mismatch");
    const auto& av = a.value();
    const auto& bv = b.value();
    T wsum = 0, s = 0;
    for (std::size_t i = 0; i < av.size(); ++i) {
        T d = av[i] - bv[i];
        s += w[i] * d * d;
        wsum += w[i];
    }
    const T denom = wsum > T(0) ? wsum : T(1);
    int ia = a.id, ib = b.id;
    return tape_of(a).record(Tensor<T>::scalar(s / denom), {a, b}, [ia, ib, w, denom](Tape<T>& t, const Tensor<T>& g) {
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        const bool ga_on = t.requires_grad(ia), gb_on = t.requires_grad(ib);
        Tensor<T>* ga = ga_on ? &t.grad_buffer(ia) : nullptr;
        Tensor<T>* gb = gb_on ? &t.grad_buffer(ib) : nullptr;
        for (std::size_t i = 0; i < av.size(); ++i) {
            T d = T(2) * w[i] * (av[i] - bv[i]) / denom * g[0];
            if (ga) (*ga)[i] += d;
            if (gb) (*gb)[i] -= d;
        }
    });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
    return weighted_mse(a, b, Tensor<T>(a.shape(), T(1)));
}

template <typename T>
Var<T> cross_entropy(Var<T> logits, const std::vector<int>& labels) {
    const auto& lv = logits.value();
    if (lv.rank() < 2) throw ShapeError("cross_entropy: logits need [B, C, ...]");
    const std::size_t B = lv.dim(0), C = lv.dim(1), S = lv.size() / (B * C);
    if (labels.size() != B * S) throw ShapeError("cross_entropy: label count mismatch");
    Tensor<T> prob(lv.shape());
    T loss = 0;
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t s = 0; s < S; ++s) {
            const T* x = lv.raw() + b * C * S + s;
            T mx = x[0];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, x[c * S]);
            T z = 0;
            for (std::size_t c = 0; c < C; ++c) z += std::exp(x[c * S] - mx);
            const int lab = labels[b * S + s];
            if (lab < 0 || static_cast<std::size_t>(lab) >= C) throw std::out_of_range("cross_entropy: label out of range");
            loss -= x[static_cast<std::size_t>(lab) * S] - mx - std::log(z);
            for (std::size_t c = 0; c < C; ++c) prob[b * C * S + c * S + s] = std::exp(x[c * S] - mx) / z;
        }
    const T n = static_cast<T>(B * S);
    int il = logits.id;
    return tape_of(logits).record(Tensor<T>::scalar(loss / n), {logits},
                                  [il, prob = std::move(prob), labels, B, C, S, n](Tape<T>& t, const Tensor<T>& g) {
                                      auto& gl = t.grad_buffer(il);
                                      for (std::size_t b = 0; b < B; ++b)
                                          for (std::size_t s = 0; s < S; ++s)
                                              for (std::size_t c = 0; c < C; ++c) {
                                                  std::size_t q = b * C * S + c * S + s;
                                                  T onehot = static_cast<std::size_t>(labels[b * S + s]) == c ? T(1) : T(0);
                                                  gl[q] += (prob[q] - onehot) / n * g[0];
                                              }
                                  });
}

// ---------------------------------------------------------------------------
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " x " + to_string(b.shape()));
    const auto M = static_cast<Eigen::Index>(a.dim(0)), K = static_cast<Eigen::Index>(a.dim(1)),
               N = static_cast<Eigen::Index>(b.dim(1));
    Tensor<T> y(Shape{a.dim(0), b.dim(1)});
    gemm<T>(false, false, M, N, K, a.value().raw(), b.value().raw(), y.raw(), false);
    int ia = a.id, ib = b.id;
    return tape_of(a).record(std::move(y), {a, b}, [ia, ib, M, N, K](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(ia)) gemm<T>(false, true, M, K, N, g.raw(), t.value(ib).raw(), t.grad_buffer(ia).raw(), true);
        if (t.requires_grad(ib)) gemm<T>(true, false, K, N, M, t.value(ia).raw(), g.raw(), t.grad_buffer(ib).raw(), true);
    });
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias) {
    const auto& xv = x.value();
    const auto& wv = weight.value();
    if (wv.rank() != 2 || xv.shape().back() != wv.dim(0))
        throw ShapeError("linear: input " + to_string(xv.shape()) + " incompatible with weight " + to_string(wv.shape()));
    const std::size_t din = wv.dim(0), dout = wv.dim(1), rows = xv.size() / din;
    if (bias && (bias->rank() != 1 || bias->dim(0) != dout)) throw ShapeError("linear: bias shape mismatch");
    Shape os = xv.shape();
    os.back() = dout;
    Tensor<T> y(os);
    const auto M = static_cast<Eigen::Index>(rows), K = static_cast<Eigen::Index>(din), N = static_cast<Eigen::Index>(dout);
    gemm<T>(false, false, M, N, K, xv.raw(), wv.raw(), y.raw(), false);
    if (bias) {
        const auto& bv = bias->value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < dout; ++j) y[r * dout + j] += bv[j];
    }
    int ix = x.id, iw = weight.id, ib = bias ? bias->id : -1;
    std::vector<Var<T>> inputs{x, weight};
    if (bias) inputs.push_back(*bias);
    return tape_of(x).record(std::move(y), inputs, [ix, iw, ib, M, N, K](Tape<T>& t, const Tensor<T>& g) {
        if (t.requires_grad(ix)) gemm<T>(false, true, M, K, N, g.raw(), t.value(iw).raw(), t.grad_buffer(ix).raw(), true);
        if (t.requires_grad(iw)) gemm<T>(true, false, K, N, M, t.value(ix).raw(), g.raw(), t.grad_buffer(iw).raw(), true);
        if (ib >= 0 && t.requires_grad(ib)) {
            auto& gb = t.grad_buffer(ib);
            for (Eigen::Index r = 0; r < M; ++r)
                for (Eigen::Index j = 0; j < N; ++j) gb[static_cast<std::size_t>(j)] += g[static_cast<std::size_t>(r * N + j)];
        }
    });
}

// ---------------------------------------------------------------------------
// Convolutions run as im2col + one GEMM over all (batch, position) rows.
template <typename T>
Var<T> conv1d(Var<T> input, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias, int padding, int stride) {
    const auto& xv = input.value();
    const auto& wv = weight.value();
    const bool batched = xv.rank() == 3;
    if (!(xv.rank() == 2 || batched)) throw ShapeError("conv1d: input must be [C, L] or [B, C, L]");
    if (wv.rank() != 3) throw ShapeError("conv1d: weight must be [C_out, C_in, K]");
    const std::size_t B = batched ? xv.dim(0) : 1, Cin = xv.dim(batched ? 1 : 0), L = xv.dim(batched ? 2 : 1);
    const std::size_t Cout = wv.dim(0), K = wv.dim(2);
    if (wv.dim(1) != Cin) throw ShapeError("conv1d: channel mismatch " + to_string(xv.shape()) + " vs " + to_string(wv.shape()));
    if (K % 2 == 0) throw ShapeError("conv1d: kernel size must be odd");
    if (stride < 1 || padding < 0) throw ShapeError("conv1d: invalid stride/padding");
    if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) throw ShapeError("conv1d: bias shape mismatch");
    const long span = static_cast<long>(L) + 2L * padding - static_cast<long>(K);
    if (span < 0) throw ShapeError("conv1d: input shorter than kernel");
    const std::size_t Lout = static_cast<std::size_t>(span / stride + 1);
    const std::size_t rows = B * Lout, cols = Cin * K;

    AlignedVector<T> col(rows * cols, T(0));
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < Lout; ++l) {
            T* dst = col.data() + (b * Lout + l) * cols;
            for (std::size_t c = 0; c < Cin; ++c) {
                const T* src = xv.raw() + (b * Cin + c) * L;
                for (std::size_t j = 0; j < K; ++j) {
                    long pos = static_cast<long>(l) * stride + static_cast<long>(j) - padding;
                    if (pos >= 0 && pos < static_cast<long>(L)) dst[c * K + j] = src[pos];
                }
            }
        }
    AlignedVector<T> outm(rows * Cout);
    gemm<T>(false, true, static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(Cout), static_cast<Eigen::Index>(cols),
            col.data(), wv.raw(), outm.data(), false);
    Shape os = batched ? Shape{B, Cout, Lout} : Shape{Cout, Lout};
    Tensor<T> y(os);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t l = 0; l < Lout; ++l)
            for (std::size_t o = 0; o < Cout; ++o)
                y[(b * Cout + o) * Lout + l] = outm[(b * Lout + l) * Cout + o] + (bias ? bias->value()[o] : T(0));

    int ix = input.id, iw = weight.id, ib = bias ? bias->id : -1;
    std::vector<Var<T>> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    return tape_of(input).record(
        std::move(y), inputs,
        [ix, iw, ib, col = std::move(col), B, Cin, L, Cout, K, Lout, rows, cols, padding, stride](Tape<T>& t, const Tensor<T>& g) {
            AlignedVector<T> gm(rows * Cout);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t o = 0; o < Cout; ++o)
                    for (std::size_t l = 0; l < Lout; ++l) gm[(b * Lout + l) * Cout + o] = g[(b * Cout + o) * Lout + l];
            const auto R = static_cast<Eigen::Index>(rows), CO = static_cast<Eigen::Index>(Cout), CC = static_cast<Eigen::Index>(cols);
            if (t.requires_grad(iw)) gemm<T>(true, false, CO, CC, R, gm.data(), col.data(), t.grad_buffer(iw).raw(), true);
            if (ib >= 0 && t.requires_grad(ib)) {
                auto& gb = t.grad_buffer(ib);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t o = 0; o < Cout; ++o) gb[o] += gm[r * Cout + o];
            }
            if (t.requires_grad(ix)) {
                AlignedVector<T> dcol(rows * cols);
                gemm<T>(false, false, R, CC, CO, gm.data(), t.value(iw).raw(), dcol.data(), false);
                auto& gx = t.grad_buffer(ix);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t l = 0; l < Lout; ++l) {
                        const T* src = dcol.data() + (b * Lout + l) * cols;
                        for (std::size_t c = 0; c < Cin; ++c) {
                            T* dst = gx.raw() + (b * Cin + c) * L;
                            for (std::size_t j = 0; j < K; ++j) {
                                long pos = static_cast<long>(l) * stride + static_cast<long>(j) - padding;
                                if (pos >= 0 && pos < static_cast<long>(L)) dst[pos] += src[c * K + j];
                            }
                        }
                    }
            }
        });
}

template <typename T>
Var<T> conv2d(Var<T> input, Var<T> weight, std::type_identity_t<std::optional<Var<T>>> bias, int padding, int stride) {
    const auto& xv = input.value();
    const auto& wv = weight.value();
    if (xv.rank() != 4) throw ShapeError("conv2d: input must be [B, C, H, W]");
    if (wv.rank() != 4 || wv.dim(2) != wv.dim(3)) throw ShapeError("conv2d: weight must be [C_out, C_in, K, K]");
    const std::size_t B = xv.dim(0), Cin = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    const std::size_t Cout = wv.dim(0), K = wv.dim(2);
    if (wv.dim(1) != Cin) throw ShapeError("conv2d: channel mismatch");
    if (K % 2 == 0) throw ShapeError("conv2d: kernel size must be odd");
    if (stride < 1 || padding < 0) throw ShapeError("conv2d: invalid stride/padding");
    if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) throw ShapeError("conv2d: bias shape mismatch");
    const long sh = static_cast<long>(H) + 2L * padding - static_cast<long>(K);
    const long sw = static_cast<long>(W) + 2L * padding - static_cast<long>(K);
    if (sh < 0 || sw < 0) throw ShapeError("conv2d: input smaller than kernel");
    const std::size_t Ho = static_cast<std::size_t>(sh / stride + 1), Wo = static_cast<std::size_t>(sw / stride + 1);
    const std::size_t P = Ho * Wo, cols = Cin * K * K;

    // Column matrix [cols, P] of one sample; rebuilt in backward to stay cache-sized.
    const auto pad = static_cast<long>(padding), st = static_cast<long>(stride);
    auto im2col = [=](const T* src_sample, T* colm) {
        for (std::size_t c = 0; c < Cin; ++c) {
            const T* src = src_sample + c * H * W;
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    T* dst = colm + ((c * K + ky) * K + kx) * P;
                    const long lo_num = pad - static_cast<long>(kx);
                    const long lo = std::min<long>(static_cast<long>(Wo), lo_num <= 0 ? 0 : (lo_num + st - 1) / st);
                    const long hi_num = static_cast<long>(W) - 1 + pad - static_cast<long>(kx);
                    const long hi = hi_num < 0 ? -1 : std::min<long>(static_cast<long>(Wo) - 1, hi_num / st);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        T* out = dst + oy * Wo;
                        const long iy = static_cast<long>(oy) * st + static_cast<long>(ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(H) || hi < lo) {
                            std::fill(out, out + Wo, T(0));
                            continue;
                        }
                        std::fill(out, out + lo, T(0));
                        std::fill(out + hi + 1, out + Wo, T(0));
                        const T* row = src + iy * static_cast<long>(W) + static_cast<long>(kx) - pad;
                        if (st == 1)
                            std::copy(row + lo, row + hi + 1, out + lo);
                        else
                            for (long ox = lo; ox <= hi; ++ox) out[ox] = row[ox * st];
                    }
                }
        }
    };
    auto col2im = [=](const T* colm, T* dst_sample) {
        for (std::size_t c = 0; c < Cin; ++c) {
            T* dst = dst_sample + c * H * W;
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const T* src = colm + ((c * K + ky) * K + kx) * P;
                    const long lo_num = pad - static_cast<long>(kx);
                    const long lo = lo_num <= 0 ? 0 : (lo_num + st - 1) / st;
                    const long hi_num = static_cast<long>(W) - 1 + pad - static_cast<long>(kx);
                    const long hi = hi_num < 0 ? -1 : std::min<long>(static_cast<long>(Wo) - 1, hi_num / st);
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        const long iy = static_cast<long>(oy) * st + static_cast<long>(ky) - pad;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        T* row = dst + iy * static_cast<long>(W) + static_cast<long>(kx) - pad;
                        const T* in = src + oy * Wo;
                        for (long ox = lo; ox <= hi; ++ox) row[ox * st] += in[ox];
                    }
                }
        }
    };

    Tensor<T> y(Shape{B, Cout, Ho, Wo});
    const auto CO = static_cast<Eigen::Index>(Cout), CC = static_cast<Eigen::Index>(cols), PP = static_cast<Eigen::Index>(P);
    {
        AlignedVector<T> col(cols * P);
        for (std::size_t b = 0; b < B; ++b) {
            im2col(xv.raw() + b * Cin * H * W, col.data());
            T* yb = y.raw() + b * Cout * P;
            gemm<T>(false, false, CO, PP, CC, wv.raw(), col.data(), yb, false);
            if (bias)
                for (std::size_t o = 0; o < Cout; ++o) {
                    const T bo = bias->value()[o];
                    for (std::size_t p = 0; p < P; ++p) yb[o * P + p] += bo;
                }
        }
    }

    int iin = input.id, iw = weight.id, ib = bias ? bias->id : -1;
    std::vector<Var<T>> inputs{input, weight};
    if (bias) inputs.push_back(*bias);
    return tape_of(input).record(
        std::move(y), inputs,
        [iin, iw, ib, B, Cin, H, W, Cout, P, cols, im2col, col2im, CO, CC, PP](Tape<T>& t, const Tensor<T>& g) {
            const bool gw_needed = t.requires_grad(iw), gx_needed = t.requires_grad(iin);
            if (ib >= 0 && t.requires_grad(ib)) {
                auto& gb = t.grad_buffer(ib);
                for (std::size_t b = 0; b < B; ++b)
                    for (std::size_t o = 0; o < Cout; ++o) {
                        const T* gr = g.raw() + (b * Cout + o) * P;
                        T acc = 0;
                        for (std::size_t p = 0; p < P; ++p) acc += gr[p];
                        gb[o] += acc;
                    }
            }
            if (!gw_needed && !gx_needed) return;
            AlignedVector<T> col(cols * P);
            const T* x = t.value(iin).raw();
            const T* w = t.value(iw).raw();
            T* gw = gw_needed ? t.grad_buffer(iw).raw() : nullptr;
            T* gx = gx_needed ? t.grad_buffer(iin).raw() : nullptr;
            for (std::size_t b = 0; b < B; ++b) {
                const T* gb = g.raw() + b * Cout * P;
                if (gw_needed) {
                    im2col(x + b * Cin * H * W, col.data());
                    gemm<T>(false, true, CO, CC, PP, gb, col.data(), gw, true);
                }
                if (gx_needed) {
                    gemm<T>(true, false, CC, PP, CO, w, gb, col.data(), false);
                    col2im(col.data(), gx + b * Cin * H * W);
                }
            }
        });
}

// ---------------------------------------------------------------------------
namespace {

// Shared normalization kernel: `groups` contiguous runs per sample, each run
// scaled by per-channel affine parameters; channel c spans `spatial` entries.
template <typename T>
Var<T> normalize_groups(Var<T> x, Var<T> gamma, Var<T> beta, T eps, std::size_t samples, std::size_t channels,
                        std::size_t spatial, std::size_t groups, bool channel_is_last) {
    const auto& xv = x.value();
    const std::size_t per_group = channels / groups;
    const std::size_t gsize = per_group * spatial;
    AlignedVector<T> mu(samples * groups), rstd(samples * groups);
    Tensor<T> y(xv.shape());
    const auto& gm = gamma.value();
    const auto& bt = beta.value();
    auto channel_of = [&](std::size_t g, std::size_t i) {
        // index within a group run -> channel
        return channel_is_last ? i % channels : g * per_group + i / spatial;
    };
    for (std::size_t s = 0; s < samples; ++s)
        for (std::size_t g = 0; g < groups; ++g) {
            const std::size_t base = (s * groups + g) * gsize;
            T m = 0;
            for (std::size_t i = 0; i < gsize; ++i) m += xv[base + i];
            m /= static_cast<T>(gsize);
            T var = 0;
            for (std::size_t i = 0; i < gsize; ++i) {
                T d = xv[base + i] - m;
                var += d * d;
            }
            var /= static_cast<T>(gsize);
            const T r = T(1) / std::sqrt(var + eps);
            mu[s * groups + g] = m;
            rstd[s * groups + g] = r;
            for (std::size_t i = 0; i < gsize; ++i) {
                const std::size_t c = channel_of(g, i);
                y[base + i] = (xv[base + i] - m) * r * gm[c] + bt[c];
            }
        }
    int ix = x.id, ig = gamma.id, ib = beta.id;
    return tape_of(x).record(
        std::move(y), {x, gamma, beta},
        [ix, ig, ib, mu = std::move(mu), rstd = std::move(rstd), samples, channels, spatial, groups, per_group, gsize,
         channel_is_last](Tape<T>& t, const Tensor<T>& g) {
            const auto& xv = t.value(ix);
            const auto& gm = t.value(ig);
            Tensor<T>* gx = t.requires_grad(ix) ? &t.grad_buffer(ix) : nullptr;
            Tensor<T>* gg = t.requires_grad(ig) ? &t.grad_buffer(ig) : nullptr;
            Tensor<T>* gb = t.requires_grad(ib) ? &t.grad_buffer(ib) : nullptr;
            auto channel_of = [&](std::size_t grp, std::size_t i) {
                return channel_is_last ? i % channels : grp * per_group + i / spatial;
            };
            for (std::size_t s = 0; s < samples; ++s)
                for (std::size_t grp = 0; grp < groups; ++grp) {
                    const std::size_t base = (s * groups + grp) * gsize;
                    const T m = mu[s * groups + grp], r = rstd[s * groups + grp];
                    T mean_d = 0, mean_dx = 0;
                    for (std::size_t i = 0; i < gsize; ++i) {
                        const std::size_t c = channel_of(grp, i);
                        const T xh = (xv[base + i] - m) * r;
                        const T d = g[base + i] * gm[c];
                        mean_d += d;
                        mean_dx += d * xh;
                        if (gg) (*gg)[c] += g[base + i] * xh;
                        if (gb) (*gb)[c] += g[base + i];
                    }
                    if (!gx) continue;
                    mean_d /= static_cast<T>(gsize);
                    mean_dx /= static_cast<T>(gsize);
                    for (std::size_t i = 0; i < gsize; ++i) {
                        const std::size_t c = channel_of(grp, i);
                        const T xh = (xv[base + i] - m) * r;
                        (*gx)[base + i] += r * (g[base + i] * gm[c] - mean_d - xh * mean_dx);
                    }
                }
        });
}

}  // namespace

template <typename T>
Var<T> group_norm(Var<T> x, int groups, Var<T> gamma, Var<T> beta, T eps) {
    const auto& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("group_norm: input rank must be >= 2");
    if (eps <= T(0)) throw std::invalid_argument("group_norm: eps must be positive");
    const bool unbatched = xv.rank() == 2;
    const std::size_t B = unbatched ? 1 : xv.dim(0);
    const std::size_t C = xv.dim(unbatched ? 0 : 1);
    const std::size_t S = xv.size() / (B * C);
    if (groups <= 0 || C % static_cast<std::size_t>(groups) != 0)
        throw ShapeError("group_norm: " + std::to_string(C) + " channels not divisible into " + std::to_string(groups) + " groups");
    if (gamma.value().size() != C || beta.value().size() != C) throw ShapeError("group_norm: affine parameter size mismatch");
    return normalize_groups(x, gamma, beta, eps, B, C, S, static_cast<std::size_t>(groups), false);
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
    const auto& xv = x.value();
    const std::size_t D = xv.shape().back();
    if (gamma.value().size() != D || beta.value().size() != D) throw ShapeError("layer_norm: affine parameter size mismatch");
    return normalize_groups(x, gamma, beta, eps, xv.size() / D, D, 1, 1, true);
}

// ---------------------------------------------------------------------------
template <typename T>
Var<T> attention(Var<T> q, Var<T> k, Var<T> v, int heads) {
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using SMap = Eigen::Map<const Mat, 0, Eigen::OuterStride<>>;
    using SMapW = Eigen::Map<Mat, 0, Eigen::OuterStride<>>;
    const auto& qv = q.value();
    const auto& kv = k.value();
    const auto& vv = v.value();
    const std::size_t r = qv.rank();
    if (!(r == 2 || r == 3) || kv.rank() != r || vv.rank() != r) throw ShapeError("attention: inputs must all be rank 2 or 3");
    const std::size_t B = r == 3 ? qv.dim(0) : 1;
    if (r == 3 && (kv.dim(0) != B || vv.dim(0) != B)) throw ShapeError("attention: batch mismatch");
    const std::size_t Lq = qv.dim(r - 2), Dq = qv.dim(r - 1), Lk = kv.dim(r - 2), Dk = kv.dim(r - 1), Dv = vv.dim(r - 1);
    if (Dq != Dk) throw ShapeError("attention: query/key dimension mismatch");
    if (vv.dim(r - 2) != Lk) throw ShapeError("attention: key/value length mismatch");
    if (heads <= 0 || Dk % static_cast<std::size_t>(heads) != 0 || Dv % static_cast<std::size_t>(heads) != 0)
        throw ShapeError("attention: head count must divide key and value dims");
    const std::size_t H = static_cast<std::size_t>(heads), dk = Dk / H, dv = Dv / H;
    const T sc = T(1) / std::sqrt(static_cast<T>(dk));
    const auto eLq = static_cast<Eigen::Index>(Lq), eLk = static_cast<Eigen::Index>(Lk);
    const auto edk = static_cast<Eigen::Index>(dk), edv = static_cast<Eigen::Index>(dv);

    Shape os = qv.shape();
    os[r - 1] = Dv;
    Tensor<T> y(os);
    AlignedVector<T> probs(B * H * Lq * Lk);
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t h = 0; h < H; ++h) {
            SMap Q(qv.raw() + b * Lq * Dk + h * dk, eLq, edk, Eigen::OuterStride<>(static_cast<Eigen::Index>(Dk)));
            SMap Kh(kv.raw() + b * Lk * Dk + h * dk, eLk, edk, Eigen::OuterStride<>(static_cast<Eigen::Index>(Dk)));
            SMap V(vv.raw() + b * Lk * Dv + h * dv, eLk, edv, Eigen::OuterStride<>(static_cast<Eigen::Index>(Dv)));
            Eigen::Map<Mat> P(probs.data() + (b * H + h) * Lq * Lk, eLq, eLk);
            P.noalias() = (Q * Kh.transpose()) * sc;
            for (Eigen::Index i = 0; i < eLq; ++i) {
                T mx = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - mx).exp();
                P.row(i) /= P.row(i).sum();
            }
            SMapW O(y.raw() + b * Lq * Dv + h * dv, eLq, edv, Eigen::OuterStride<>(static_cast<Eigen::Index>(Dv)));
            O.noalias() = P * V;
        }
    int iq = q.id, ik = k.id, iv = v.id;
    return tape_of(q).record(
        std::move(y), {q, k, v},
        [iq, ik, iv, probs = std::move(probs), B, H, Lq, Lk, Dk, Dv, dk, dv, sc](Tape<T>& t, const Tensor<T>& g) {
            const auto eLq = static_cast<Eigen::Index>(Lq), eLk = static_cast<Eigen::Index>(Lk);
            const auto edk = static_cast<Eigen::Index>(dk), edv = static_cast<Eigen::Index>(dv);
            const auto sDk = Eigen::OuterStride<>(static_cast<Eigen::Index>(Dk));
            const auto sDv = Eigen::OuterStride<>(static_cast<Eigen::Index>(Dv));
            const auto& qv = t.value(iq);
            const auto& kv = t.value(ik);
            const auto& vv = t.value(iv);
            T* gq = t.requires_grad(iq) ? t.grad_buffer(iq).raw() : nullptr;
            T* gk = t.requires_grad(ik) ? t.grad_buffer(ik).raw() : nullptr;
            T* gv = t.requires_grad(iv) ? t.grad_buffer(iv).raw() : nullptr;
            Mat dP(eLq, eLk), dS(eLq, eLk);
            for (std::size_t b = 0; b < B; ++b)
                for (std::size_t h = 0; h < H; ++h) {
                    SMap Q(qv.raw() + b * Lq * Dk + h * dk, eLq, edk, sDk);
                    SMap Kh(kv.raw() + b * Lk * Dk + h * dk, eLk, edk, sDk);
                    SMap V(vv.raw() + b * Lk * Dv + h * dv, eLk, edv, sDv);
                    SMap dO(g.raw() + b * Lq * Dv + h * dv, eLq, edv, sDv);
                    Eigen::Map<const Mat> P(probs.data() + (b * H + h) * Lq * Lk, eLq, eLk);
                    if (gv) {
                        SMapW dV(gv + b * Lk * Dv + h * dv, eLk, edv, sDv);
                        dV.noalias() += P.transpose() * dO;
                    }
                    if (!gq && !gk) continue;
                    dP.noalias() = dO * V.transpose();
                    for (Eigen::Index i = 0; i < eLq; ++i) {
                        T dot = (dP.row(i).array() * P.row(i).array()).sum();
                        dS.row(i) = P.row(i).array() * (dP.row(i).array() - dot);
                    }
                    if (gq) {
                        SMapW dQ(gq + b * Lq * Dk + h * dk, eLq, edk, sDk);
                        dQ.noalias() += (dS * Kh) * sc;
                    }
                    if (gk) {
                        SMapW dK(gk + b * Lk * Dk + h * dk, eLk, edk, sDk);
                        dK.noalias() += (dS.transpose() * Q) * sc;
                    }
                }
        });
}

template <typename T>
Var<T> scale_shift(Var<T> h, Var<T> scale, Var<T> shift) {
    const auto& hv = h.value();
    Shape outer(hv.shape().begin(), hv.shape().end() - 1);
    if (scale.shape() != outer || shift.shape() != outer)
        throw ShapeError("scale_shift: modulation shape " + to_string(scale.shape()) + " does not match " + to_string(hv.shape()));
    const std::size_t inner = hv.shape().back(), rows = hv.size() / inner;
    const auto& sv = scale.value();
    const auto& tv = shift.value();
    Tensor<T> y(hv.shape());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < inner; ++i) y[r * inner + i] = hv[r * inner + i] * (T(1) + sv[r]) + tv[r];
    int ih = h.id, is = scale.id, it = shift.id;
    return tape_of(h).record(std::move(y), {h, scale, shift}, [ih, is, it, rows, inner](Tape<T>& t, const Tensor<T>& g) {
        const auto& hv = t.value(ih);
        const auto& sv = t.value(is);
        Tensor<T>* gh = t.requires_grad(ih) ? &t.grad_buffer(ih) : nullptr;
        Tensor<T>* gs = t.requires_grad(is) ? &t.grad_buffer(is) : nullptr;
        Tensor<T>* gt = t.requires_grad(it) ? &t.grad_buffer(it) : nullptr;
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t i = 0; i < inner; ++i) {
                const T gi = g[r * inner + i];
                if (gh) (*gh)[r * inner + i] += gi * (T(1) + sv[r]);
                if (gs) (*gs)[r] += gi * hv[r * inner + i];
                if (gt) (*gt)[r] += gi;
            }
    });
}

// ---------------------------------------------------------------------------
template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
    Tensor<T> y = x.value().reshaped(std::move(shape));
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix](Tape<T>& t, const Tensor<T>& g) { accumulate(t.grad_buffer(ix), g); });
}

template <typename T>
Var<T> transpose_last2(Var<T> x) {
    const auto& xv = x.value();
    if (xv.rank() < 2) throw ShapeError("transpose_last2: rank must be >= 2");
    const std::size_t r = xv.rank(), A = xv.dim(r - 2), Bd = xv.dim(r - 1), outer = xv.size() / (A * Bd);
    Shape os = xv.shape();
    std::swap(os[r - 2], os[r - 1]);
    Tensor<T> y(os);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < A; ++i)
            for (std::size_t j = 0; j < Bd; ++j) y[o * A * Bd + j * A + i] = xv[o * A * Bd + i * Bd + j];
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, outer, A, Bd](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < A; ++i)
                for (std::size_t j = 0; j < Bd; ++j) gx[o * A * Bd + i * Bd + j] += g[o * A * Bd + j * A + i];
    });
}

template <typename T>
Var<T> concat(const std::vector<Var<T>>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: no inputs");
    const Shape& s0 = xs[0].shape();
    const std::size_t ax = norm_axis(axis, s0.size());
    std::vector<std::size_t> sizes;
    Shape os = s0;
    os[ax] = 0;
    for (const auto& x : xs) {
        const Shape& s = x.shape();
        if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t i = 0; i < s.size(); ++i)
            if (i != ax && s[i] != s0[i]) throw ShapeError("concat: shape mismatch " + to_string(s) + " vs " + to_string(s0));
        sizes.push_back(s[ax]);
        os[ax] += s[ax];
    }
    const AxisSplit sp = split_axis(os, ax);
    Tensor<T> y(os);
    std::size_t off = 0;
    for (std::size_t n = 0; n < xs.size(); ++n) {
        const auto& xv = xs[n].value();
        const std::size_t chunk = sizes[n] * sp.inner;
        for (std::size_t o = 0; o < sp.outer; ++o)
            std::copy_n(xv.raw() + o * chunk, chunk, y.raw() + o * sp.n * sp.inner + off * sp.inner);
        off += sizes[n];
    }
    std::vector<int> ids;
    for (const auto& x : xs) ids.push_back(x.id);
    return tape_of(xs[0]).record(std::move(y), xs, [ids, sizes, sp](Tape<T>& t, const Tensor<T>& g) {
        std::size_t off = 0;
        for (std::size_t n = 0; n < ids.size(); ++n) {
            const std::size_t chunk = sizes[n] * sp.inner;
            if (t.requires_grad(ids[n])) {
                auto& gx = t.grad_buffer(ids[n]);
                for (std::size_t o = 0; o < sp.outer; ++o)
                    for (std::size_t i = 0; i < chunk; ++i) gx[o * chunk + i] += g[o * sp.n * sp.inner + off * sp.inner + i];
            }
            off += sizes[n];
        }
    });
}

template <typename T>
Var<T> slice(Var<T> x, int axis, std::size_t start, std::size_t length) {
    const auto& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    if (length == 0 || start + length > xv.dim(ax)) throw ShapeError("slice: range out of bounds");
    const AxisSplit sp = split_axis(xv.shape(), ax);
    Shape os = xv.shape();
    os[ax] = length;
    Tensor<T> y(os);
    const std::size_t chunk = length * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
        std::copy_n(xv.raw() + o * sp.n * sp.inner + start * sp.inner, chunk, y.raw() + o * chunk);
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, sp, start, chunk](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gx[o * sp.n * sp.inner + start * sp.inner + i] += g[o * chunk + i];
    });
}

template <typename T>
Var<T> pad_end(Var<T> x, int axis, std::size_t count) {
    if (count == 0) return x;
    const auto& xv = x.value();
    const std::size_t ax = norm_axis(axis, xv.rank());
    const AxisSplit sp = split_axis(xv.shape(), ax);
    Shape os = xv.shape();
    os[ax] += count;
    Tensor<T> y(os);
    const std::size_t chunk = sp.n * sp.inner, ochunk = os[ax] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) std::copy_n(xv.raw() + o * chunk, chunk, y.raw() + o * ochunk);
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, sp, chunk, ochunk](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (std::size_t o = 0; o < sp.outer; ++o)
            for (std::size_t i = 0; i < chunk; ++i) gx[o * chunk + i] += g[o * ochunk + i];
    });
}

template <typename T>
Var<T> upsample_nearest(Var<T> x, std::size_t factor) {
    const auto& xv = x.value();
    const std::size_t L = xv.shape().back(), rows = xv.size() / L;
    Shape os = xv.shape();
    os.back() = L * factor;
    Tensor<T> y(os);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t l = 0; l < L * factor; ++l) y[r * L * factor + l] = xv[r * L + l / factor];
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, rows, L, factor](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t l = 0; l < L * factor; ++l) gx[r * L + l / factor] += g[r * L * factor + l];
    });
}

template <typename T>
Var<T> broadcast_batch(Var<T> x, std::size_t batch) {
    const auto& xv = x.value();
    Shape os{batch};
    os.insert(os.end(), xv.shape().begin(), xv.shape().end());
    Tensor<T> y(os);
    const std::size_t n = xv.size();
    for (std::size_t b = 0; b < batch; ++b) std::copy_n(xv.raw(), n, y.raw() + b * n);
    int ix = x.id;
    return tape_of(x).record(std::move(y), {x}, [ix, batch, n](Tape<T>& t, const Tensor<T>& g) {
        auto& gx = t.grad_buffer(ix);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t i = 0; i < n; ++i) gx[i] += g[b * n + i];
    });
}

template <typename T>
Var<T> dropout(Var<T> x, double rate, Rng& rng, bool inference) {
    if (rate < 0.0 || rate > 1.0) throw std::invalid_argument("dropout: rate must be in [0, 1]");
    if (inference || rate == 0.0) return x;
    Tensor<T> mask(x.shape());
    const T keep_scale = rate >= 1.0 ? T(0) : static_cast<T>(1.0 / (1.0 - rate));
    for (auto& m : mask.data()) m = rng.bernoulli(1.0 - rate) ? keep_scale : T(0);
    return mul_const(x, mask);
}

// ---------------------------------------------------------------------------
#define MMLD_INSTANTIATE_OPS(T)                                                                       \
    template Var<T> add(Var<T>, Var<T>);                                                              \
    template Var<T> sub(Var<T>, Var<T>);                                                              \
    template Var<T> mul(Var<T>, Var<T>);                                                              \
    template Var<T> scale(Var<T>, T);                                                                 \
    template Var<T> add_const(Var<T>, const Tensor<T>&);                                              \
    template Var<T> mul_const(Var<T>, const Tensor<T>&);                                              \
    template Var<T> affine_const(Var<T>, const Tensor<T>&, const Tensor<T>&);                         \
    template Var<T> relu(Var<T>);                                                                     \
    template Var<T> silu(Var<T>);                                                                     \
    template Var<T> gelu(Var<T>);                                                                     \
    template Var<T> sigmoid(Var<T>);                                                                  \
    template Var<T> softmax(Var<T>, int);                                                             \
    template Var<T> sum(Var<T>);                                                                      \
    template Var<T> mean(Var<T>);                                                                     \
    template Var<T> sum_squares(Var<T>);                                                              \
    template Var<T> mse(Var<T>, Var<T>);                                                              \
    template Var<T> weighted_mse(Var<T>, Var<T>, const Tensor<T>&);                                   \
    template Var<T> cross_entropy(Var<T>, const std::vector<int>&);                                   \
    template Var<T> matmul(Var<T>, Var<T>);                                                           \
    template Var<T> linear(Var<T>, Var<T>, std::type_identity_t<std::optional<Var<T>>>);                                    \
    template Var<T> conv1d(Var<T>, Var<T>, std::type_identity_t<std::optional<Var<T>>>, int, int);                          \
    template Var<T> conv2d(Var<T>, Var<T>, std::type_identity_t<std::optional<Var<T>>>, int, int);                          \
    template Var<T> group_norm(Var<T>, int, Var<T>, Var<T>, T);                                       \
    template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                            \
    template Var<T> attention(Var<T>, Var<T>, Var<T>, int);                                           \
    template Var<T> scale_shift(Var<T>, Var<T>, Var<T>);                                              \
    template Var<T> reshape(Var<T>, Shape);                                                           \
    template Var<T> transpose_last2(Var<T>);                                                          \
    template Var<T> concat(const std::vector<Var<T>>&, int);                                          \
    template Var<T> slice(Var<T>, int, std::size_t, std::size_t);                                     \
    template Var<T> pad_end(Var<T>, int, std::size_t);                                                \
    template Var<T> upsample_nearest(Var<T>, std::size_t);                                            \
    template Var<T> broadcast_batch(Var<T>, std::size_t);                                             \
    template Var<T> dropout(Var<T>, double, Rng&, bool);

MMLD_INSTANTIATE_OPS(float)
MMLD_INSTANTIATE_OPS(double)

}  // namespace mmld::ops
