#pragma once

// Forward-diffusion schedule: per-timestep (alpha, beta) with
// alpha^2 + beta^2 = 1, alpha[0] = 1, alpha strictly decreasing to a small
// terminal value so t = T is usable as the noise-initialized decode point.

#include <cmath>
#include <string>
#include <vector>

#include "layton/errors.hpp"
#include "layton/tensor.hpp"

namespace layton {

inline constexpr double kScheduleAlphaEnd = 0.05;

template <class R>
struct NoiseScheduleT {
    int t_max = 0;                // T
    std::vector<R> alpha, beta;   // length T+1

    R alpha_at(int t) const {
        LAYTON_CHECK(t >= 0 && t <= t_max, "schedule: t out of range");
        return alpha[size_t(t)];
    }
    R beta_at(int t) const {
        LAYTON_CHECK(t >= 0 && t <= t_max, "schedule: t out of range");
        return beta[size_t(t)];
    }
};

using NoiseSchedule = NoiseScheduleT<float>;

enum class ScheduleKind { Cosine, Linear };

// Closed forms:
//   cosine: alpha[t] = cos((t/T) * acos(alpha_end))
//   linear: alpha[t] = 1 - (1 - alpha_end) * t/T
// beta[t] = sqrt(1 - alpha[t]^2) in both cases.
template <class R = float>
inline NoiseScheduleT<R> make_schedule(int t_max, ScheduleKind kind = ScheduleKind::Cosine) {
    LAYTON_CHECK(t_max >= 1, "make_schedule: T must be >= 1");
    NoiseScheduleT<R> s;
    s.t_max = t_max;
    s.alpha.resize(size_t(t_max) + 1);
    s.beta.resize(size_t(t_max) + 1);
    double theta_end = std::acos(kScheduleAlphaEnd);
    for (int t = 0; t <= t_max; ++t) {
        double a;
        if (kind == ScheduleKind::Cosine)
            a = std::cos(double(t) / t_max * theta_end);
        else
            a = 1.0 - (1.0 - kScheduleAlphaEnd) * double(t) / t_max;
        s.alpha[size_t(t)] = R(a);
        s.beta[size_t(t)] = R(std::sqrt(1.0 - a * a));
    }
    s.alpha[0] = R(1);
    s.beta[0] = R(0);
    return s;
}

inline ScheduleKind schedule_kind_from(const std::string& name) {
    if (name == "cosine") return ScheduleKind::Cosine;
    if (name == "linear") return ScheduleKind::Linear;
    throw ConfigError("unknown schedule kind: " + name);
}

// x_t = alpha_t * z0 + beta_t * eps, exactly.
template <class R>
inline TensorT<R> diffuse(const NoiseScheduleT<R>& s, const TensorT<R>& z0, int t, const TensorT<R>& eps) {
    LAYTON_CHECK(t >= 0 && t <= s.t_max, "diffuse: t out of range");
    LAYTON_CHECK(z0.same_shape(eps), "diffuse: eps must match z0 shape");
    TensorT<R> out(z0.shape);
    R a = s.alpha[size_t(t)], b = s.beta[size_t(t)];
    for (int64_t i = 0; i < z0.size(); ++i) out[i] = a * z0[i] + b * eps[i];
    return out;
}

// Uniformly strided DDIM timestep subsequence T = t_0 > t_1 > ... > t_S = 0.
inline std::vector<int> ddim_timesteps(int t_max, int steps) {
    LAYTON_CHECK(steps >= 1, "ddim: steps must be >= 1");
    LAYTON_CHECK(steps <= t_max, "ddim: steps must not exceed T");
    std::vector<int> ts(size_t(steps) + 1);
    for (int k = 0; k <= steps; ++k)
        ts[size_t(k)] = int(std::lround(double(t_max) * double(steps - k) / double(steps)));
    ts[0] = t_max;
    ts[size_t(steps)] = 0;
    return ts;
}

// One deterministic (eta = 0) DDIM update t_from -> t_to given the noise
// prediction at t_from.
template <class R>
inline TensorT<R> ddim_update(const NoiseScheduleT<R>& s, const TensorT<R>& z, const TensorT<R>& eps_pred,
                              int t_from, int t_to) {
    LAYTON_CHECK(t_to < t_from, "ddim_update: t_to must be < t_from");
    R a_from = s.alpha[size_t(t_from)], b_from = s.beta[size_t(t_from)];
    R a_to = s.alpha[size_t(t_to)], b_to = s.beta[size_t(t_to)];
    TensorT<R> out(z.shape);
    for (int64_t i = 0; i < z.size(); ++i) {
        R x0 = (z[i] - b_from * eps_pred[i]) / a_from;
        out[i] = a_to * x0 + b_to * eps_pred[i];
    }
    return out;
}

template <class R, class DenoiseFn>
inline TensorT<R> ddim_sample_from(DenoiseFn&& denoise, const NoiseScheduleT<R>& s, TensorT<R> z, int steps) {
    auto ts = ddim_timesteps(s.t_max, steps);
    for (size_t k = 0; k + 1 < ts.size(); ++k) {
        TensorT<R> eps = denoise(z, ts[k]);
        z = ddim_update(s, z, eps, ts[k], ts[k + 1]);
    }
    return z;
}

// Full DDIM sampling loop from pure Gaussian noise at t = T. `denoise` is
// called as denoise(z, t) and returns the eps prediction.
template <class R, class DenoiseFn>
inline TensorT<R> ddim_sample(DenoiseFn&& denoise, const NoiseScheduleT<R>& s, std::vector<int> shape,
                              int steps, Rng& rng) {
    TensorT<R> z = TensorT<R>::randn(shape, rng);
    return ddim_sample_from(std::forward<DenoiseFn>(denoise), s, std::move(z), steps);
}

}  // namespace layton
