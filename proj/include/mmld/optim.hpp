#pragma once

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "mmld/autodiff.hpp"

namespace mmld {

template <typename T>
struct AdamState {
    std::vector<Tensor<T>> m;
    std::vector<Tensor<T>> v;
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    bool initialized() const { return !m.empty() && m.size() == v.size(); }
};

template <typename T>
AdamState<T> adam_init(const ParamStore<T>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    AdamState<T> s;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    for (std::size_t i = 0; i < params.size(); ++i) {
        s.m.emplace_back(params[i].value.shape());
        s.v.emplace_back(params[i].value.shape());
    }
    return s;
}

// Adam with bias correction and no weight decay. Gradients are read, not cleared.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& s, double lr) {
    if (!s.initialized() || s.m.size() != params.size()) throw std::logic_error("adam_step: optimizer state not initialized for these parameters");
    if (!(lr > 0.0)) throw std::invalid_argument("adam_step: lr must be positive");
    ++s.step;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    const T b1 = static_cast<T>(s.beta1), b2 = static_cast<T>(s.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(s.eps);
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        if (s.m[i].shape() != p.value.shape()) throw ShapeError("adam_step: moment shape mismatch for " + p.name);
        T* w = p.value.raw();
        const T* g = p.grad.raw();
        T* m = s.m[i].raw();
        T* v = s.v[i].raw();
        for (std::size_t j = 0; j < p.value.size(); ++j) {
            m[j] = b1 * m[j] + (T(1) - b1) * g[j];
            v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
            w[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_bc2) + eps);
        }
    }
}

struct LrSchedule {
    double max_lr = 1e-4;
    long total_steps = 1;
    long warmup_steps = 0;
    double floor_lr = 0.0;

    void validate() const {
        if (!(max_lr > 0.0)) throw std::invalid_argument("LrSchedule: max_lr must be positive");
        if (total_steps <= 0) throw std::invalid_argument("LrSchedule: total_steps must be positive");
        if (warmup_steps < 0 || warmup_steps >= total_steps)
            throw std::invalid_argument("LrSchedule: warmup_steps must be in [0, total_steps)");
        if (floor_lr < 0.0 || floor_lr > max_lr) throw std::invalid_argument("LrSchedule: floor_lr must be in [0, max_lr]");
    }
};

// Linear warmup floor -> max, then cosine decay max -> floor.
inline double onecycle_lr(long step, const LrSchedule& s) {
    s.validate();
    if (step < 0 || step > s.total_steps) throw std::out_of_range("onecycle_lr: step out of range");
    if (step < s.warmup_steps)
        return s.floor_lr + (s.max_lr - s.floor_lr) * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
    const double frac = static_cast<double>(step - s.warmup_steps) / static_cast<double>(s.total_steps - s.warmup_steps);
    return s.floor_lr + 0.5 * (s.max_lr - s.floor_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

}  // namespace mmld
