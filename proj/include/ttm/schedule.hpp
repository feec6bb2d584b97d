#pragma once

#include "ttm/core.hpp"

#include <vector>

namespace ttm {

/// Variance-preserving noise schedule: alpha[t]^2 + sigma[t]^2 = 1 for every
/// timestep, alpha non-increasing, index 0 = clean end, index T = noise end.
/// Immutable after construction; safe to share across threads.
template <typename Scalar>
struct NoiseSchedule {
    int num_steps = 0;  // T
    Vec<Scalar> alpha;  // T+1 entries
    Vec<Scalar> sigma;  // T+1 entries
    Scalar cosine_offset = Scalar(0.008);

    Scalar alpha_at(int t) const {
        check_t(t);
        return alpha[t];
    }
    Scalar sigma_at(int t) const {
        check_t(t);
        return sigma[t];
    }
    void check_t(int t) const {
        require(t >= 0 && t <= num_steps, "timestep out of range [0, T]");
    }
};

/// Cosine schedule: alpha[t] = cos(((t/T + s)/(1 + s)) * pi/2), normalized by
/// the t=0 value so alpha[0] = 1 exactly; sigma[t] = sqrt(1 - alpha[t]^2).
template <typename Scalar>
NoiseSchedule<Scalar> make_cosine_schedule(int num_steps, Scalar offset = Scalar(0.008)) {
    require(num_steps >= 1, "make_cosine_schedule: T must be >= 1");
    NoiseSchedule<Scalar> s;
    s.num_steps = num_steps;
    s.cosine_offset = offset;
    s.alpha.resize(num_steps + 1);
    s.sigma.resize(num_steps + 1);
    const Scalar half_pi = Scalar(M_PI) / Scalar(2);
    const Scalar a0 = std::cos(offset / (Scalar(1) + offset) * half_pi);
    for (int t = 0; t <= num_steps; ++t) {
        Scalar u = (Scalar(t) / Scalar(num_steps) + offset) / (Scalar(1) + offset);
        Scalar a = std::cos(u * half_pi) / a0;
        a = std::min<Scalar>(Scalar(1), std::max<Scalar>(Scalar(0), a));
        s.alpha[t] = a;
        s.sigma[t] = std::sqrt(std::max<Scalar>(Scalar(0), Scalar(1) - a * a));
    }
    return s;
}

namespace detail {
template <typename Scalar>
inline void check_pair(const Tensor3<Scalar>& a, const Tensor3<Scalar>& b, const char* op) {
    require(a.same_shape(b), std::string(op) + ": shape mismatch");
}
}  // namespace detail

/// Forward noising: alpha_t * z0 + sigma_t * eps.
template <typename Scalar>
Tensor3<Scalar> q_sample(const Tensor3<Scalar>& z0, const Tensor3<Scalar>& eps, int t,
                         const NoiseSchedule<Scalar>& s) {
    detail::check_pair(z0, eps, "q_sample");
    s.check_t(t);
    Tensor3<Scalar> out = z0;
    out.m = s.alpha[t] * z0.m + s.sigma[t] * eps.m;
    return out;
}

/// v-objective target: alpha_t * eps - sigma_t * z0.
template <typename Scalar>
Tensor3<Scalar> v_target(const Tensor3<Scalar>& z0, const Tensor3<Scalar>& eps, int t,
                         const NoiseSchedule<Scalar>& s) {
    detail::check_pair(z0, eps, "v_target");
    s.check_t(t);
    Tensor3<Scalar> out = z0;
    out.m = s.alpha[t] * eps.m - s.sigma[t] * z0.m;
    return out;
}

/// Invert the v-parameterization: z0 = alpha_t * z_t - sigma_t * v.
template <typename Scalar>
Tensor3<Scalar> z0_from_v(const Tensor3<Scalar>& z_t, const Tensor3<Scalar>& v, int t,
                          const NoiseSchedule<Scalar>& s) {
    detail::check_pair(z_t, v, "z0_from_v");
    s.check_t(t);
    Tensor3<Scalar> out = z_t;
    out.m = s.alpha[t] * z_t.m - s.sigma[t] * v.m;
    return out;
}

/// Invert the v-parameterization: eps = sigma_t * z_t + alpha_t * v.
template <typename Scalar>
Tensor3<Scalar> eps_from_v(const Tensor3<Scalar>& z_t, const Tensor3<Scalar>& v, int t,
                           const NoiseSchedule<Scalar>& s) {
    detail::check_pair(z_t, v, "eps_from_v");
    s.check_t(t);
    Tensor3<Scalar> out = z_t;
    out.m = s.sigma[t] * z_t.m + s.alpha[t] * v.m;
    return out;
}

/// One deterministic (eta = 0) DDIM update from t to t_prev < t.
template <typename Scalar>
Tensor3<Scalar> ddim_step(const Tensor3<Scalar>& z_t, const Tensor3<Scalar>& v_hat, int t,
                          int t_prev, const NoiseSchedule<Scalar>& s) {
    detail::check_pair(z_t, v_hat, "ddim_step");
    s.check_t(t);
    s.check_t(t_prev);
    require(t_prev < t, "ddim_step: t_prev must be strictly less than t");
    Tensor3<Scalar> z0_hat = z0_from_v(z_t, v_hat, t, s);
    Tensor3<Scalar> eps_hat = eps_from_v(z_t, v_hat, t, s);
    Tensor3<Scalar> out = z_t;
    out.m = s.alpha[t_prev] * z0_hat.m + s.sigma[t_prev] * eps_hat.m;
    return out;
}

/// Evenly spaced descending timesteps T = t_K > ... > t_0 = 0 with K steps.
inline std::vector<int> ddim_timesteps(int num_train_steps, int num_sampling_steps) {
    require(num_sampling_steps >= 1, "ddim_timesteps: need at least one step");
    require(num_sampling_steps <= num_train_steps,
            "ddim_timesteps: more sampling steps than schedule steps");
    std::vector<int> ts(num_sampling_steps + 1);
    for (int k = 0; k <= num_sampling_steps; ++k) {
        double x = (double)k * num_train_steps / num_sampling_steps;
        ts[num_sampling_steps - k] = (int)std::llround(x);
    }
    ts.front() = num_train_steps;
    ts.back() = 0;
    return ts;
}

}  // namespace ttm
