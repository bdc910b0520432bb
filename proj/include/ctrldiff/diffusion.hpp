#pragma once

#include <cmath>
#include <functional>
#include <type_traits>
#include <optional>
#include <vector>

#include "ctrldiff/common.hpp"
#include "ctrldiff/rng.hpp"
#include "ctrldiff/tensor.hpp"

namespace ctrldiff {

// Which target the denoiser regresses; selects the loss weight branch.
enum class PredictionKind { X, EPS, V };

inline const char* to_string(PredictionKind k) {
    switch (k) {
        case PredictionKind::X: return "x";
        case PredictionKind::EPS: return "eps";
        case PredictionKind::V: return "v";
    }
    return "?";
}

// Per-timestep beta/alpha/alpha_bar plus the posterior variance of the
// reverse step. Arrays are 0-indexed storage for t = 1..T; alpha_bar(0) = 1
// by convention, which pins posterior_var(1) = 0 and makes the final
// sampler step deterministic. Kept in double regardless of the model's
// scalar type: the arrays are tiny and every consumer wants the precision.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> posterior_var;

    void require_t(int t) const {
        check(t >= 1 && t <= T, "timestep out of range: t=" + std::to_string(t) +
                                    ", T=" + std::to_string(T));
    }

    double beta_at(int t) const {
        require_t(t);
        return beta[static_cast<size_t>(t - 1)];
    }
    double alpha_at(int t) const {
        require_t(t);
        return alpha[static_cast<size_t>(t - 1)];
    }
    // defined for t = 0..T
    double alpha_bar_at(int t) const {
        if (t == 0) return 1.0;
        require_t(t);
        return alpha_bar[static_cast<size_t>(t - 1)];
    }
    double posterior_var_at(int t) const {
        require_t(t);
        return posterior_var[static_cast<size_t>(t - 1)];
    }
};

enum class ScheduleKind { Linear };

inline NoiseSchedule make_schedule(int T, double beta_start, double beta_end,
                                   ScheduleKind kind = ScheduleKind::Linear) {
    check(T >= 1, "schedule needs T >= 1, got " + std::to_string(T));
    check(beta_start > 0.0 && beta_end < 1.0 && beta_start <= beta_end,
          "beta bounds must satisfy 0 < beta_start <= beta_end < 1");
    (void)kind;  // only the linear ramp exists

    NoiseSchedule s;
    s.T = T;
    s.beta.resize(static_cast<size_t>(T));
    s.alpha.resize(static_cast<size_t>(T));
    s.alpha_bar.resize(static_cast<size_t>(T));
    s.posterior_var.resize(static_cast<size_t>(T));

    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        double b = beta_start + (beta_end - beta_start) * frac;
        double prev_bar = prod;  // alpha_bar(t-1), starts at the t=0 convention of 1
        prod *= 1.0 - b;
        size_t i = static_cast<size_t>(t - 1);
        s.beta[i] = b;
        s.alpha[i] = 1.0 - b;
        s.alpha_bar[i] = prod;
        s.posterior_var[i] = (1.0 - prev_bar) / (1.0 - prod) * b;
    }
    return s;
}

// forward noising: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
template <typename Real>
Tensor<Real> q_sample(const Tensor<Real>& x0, int t, const Tensor<Real>& eps,
                      const NoiseSchedule& sched) {
    sched.require_t(t);
    require_same_shape(x0, eps, "q_sample");
    double abar = sched.alpha_bar_at(t);
    Real a = static_cast<Real>(std::sqrt(abar));
    Real b = static_cast<Real>(std::sqrt(1.0 - abar));
    Tensor<Real> out(x0.shape());
    for (int64_t i = 0; i < x0.numel(); ++i) out[i] = a * x0[i] + b * eps[i];
    return out;
}

inline double loss_weight(int t, PredictionKind kind, const NoiseSchedule& sched) {
    sched.require_t(t);
    double abar = sched.alpha_bar_at(t);
    switch (kind) {
        case PredictionKind::X: return 1.0;
        case PredictionKind::EPS: return abar / (1.0 - abar);
        case PredictionKind::V: return 1.0 + abar / (1.0 - abar);
    }
    return 0.0;
}

// Converts the model's native output to an x-space prediction so all three
// prediction kinds share one target convention.
template <typename Real>
Tensor<Real> to_x_space(const Tensor<Real>& model_out, const Tensor<Real>& x_t, int t,
                        PredictionKind kind, const NoiseSchedule& sched) {
    require_same_shape(model_out, x_t, "to_x_space");
    double abar = sched.alpha_bar_at(t);
    Tensor<Real> out(x_t.shape());
    switch (kind) {
        case PredictionKind::X:
            out = model_out;
            break;
        case PredictionKind::EPS: {
            // x0 = (x_t - sqrt(1-abar) eps) / sqrt(abar)
            Real inv_a = static_cast<Real>(1.0 / std::sqrt(abar));
            Real b = static_cast<Real>(std::sqrt(1.0 - abar));
            for (int64_t i = 0; i < x_t.numel(); ++i) out[i] = (x_t[i] - b * model_out[i]) * inv_a;
            break;
        }
        case PredictionKind::V: {
            // x0 = sqrt(abar) x_t - sqrt(1-abar) v
            Real a = static_cast<Real>(std::sqrt(abar));
            Real b = static_cast<Real>(std::sqrt(1.0 - abar));
            for (int64_t i = 0; i < x_t.numel(); ++i) out[i] = a * x_t[i] - b * model_out[i];
            break;
        }
    }
    return out;
}

// Denoiser evaluation: (x_t, t, optional control) -> native prediction.
template <typename Real>
using DenoiserFn =
    std::function<Tensor<Real>(const Tensor<Real>&, int, const Tensor<Real>*)>;

// Weighted x-space MSE of a single (x0, t) pair; eps is injected so the loss
// is deterministic under test.
template <typename Real>
double diffusion_loss(const Tensor<Real>& x0, int t,
                      std::type_identity_t<const Tensor<Real>*> control,
                      const std::type_identity_t<DenoiserFn<Real>>& model, PredictionKind kind,
                      const NoiseSchedule& sched, const Tensor<Real>& eps) {
    Tensor<Real> x_t = q_sample(x0, t, eps, sched);
    Tensor<Real> out = model(x_t, t, control);
    require_same_shape(out, x0, "diffusion_loss: model output");
    Tensor<Real> x0_hat = to_x_space(out, x_t, t, kind, sched);
    double mse = 0.0;
    for (int64_t i = 0; i < x0.numel(); ++i) {
        double d = static_cast<double>(x0_hat[i]) - static_cast<double>(x0[i]);
        mse += d * d;
    }
    mse /= static_cast<double>(x0.numel());
    return loss_weight(t, kind, sched) * mse;
}

// One reverse step: posterior mean of the forward process parameterized by the
// predicted clean sample, plus sqrt(posterior_var) * injected noise. Steps run
// t = T..1, each producing the t-1 state.
template <typename Real>
Tensor<Real> ddpm_step(const Tensor<Real>& x_t, int t, const Tensor<Real>& x0_hat,
                       const Tensor<Real>& noise, const NoiseSchedule& sched) {
    sched.require_t(t);
    require_same_shape(x_t, x0_hat, "ddpm_step");
    require_same_shape(x_t, noise, "ddpm_step noise");
    double abar = sched.alpha_bar_at(t);
    double abar_prev = sched.alpha_bar_at(t - 1);
    double beta_t = sched.beta_at(t);
    double alpha_t = sched.alpha_at(t);
    double c0 = std::sqrt(abar_prev) * beta_t / (1.0 - abar);
    double ct = std::sqrt(alpha_t) * (1.0 - abar_prev) / (1.0 - abar);
    double sigma = std::sqrt(sched.posterior_var_at(t));
    Tensor<Real> out(x_t.shape());
    for (int64_t i = 0; i < x_t.numel(); ++i) {
        out[i] = static_cast<Real>(c0 * static_cast<double>(x0_hat[i]) +
                                   ct * static_cast<double>(x_t[i]) +
                                   sigma * static_cast<double>(noise[i]));
    }
    return out;
}

// Re-spaced subsequence of a full schedule for cheap sampling: K timesteps
// evenly spread over [1, T]. The derived betas telescope so the derived
// alpha_bar equals the full schedule's at the selected steps; model_t maps
// each strided index to the original timestep fed to the model.
struct StridedSchedule {
    NoiseSchedule sched;       // K-step derived schedule
    std::vector<int> model_t;  // model_t[k-1] = original t for strided step k
};

inline StridedSchedule make_strided(const NoiseSchedule& full, int num_steps) {
    check(num_steps >= 1 && num_steps <= full.T,
          "strided sampler needs 1 <= steps <= T, got " + std::to_string(num_steps));
    StridedSchedule ss;
    ss.model_t.resize(static_cast<size_t>(num_steps));
    for (int k = 1; k <= num_steps; ++k) {
        // evenly spaced, hitting T at k = num_steps
        int t = static_cast<int>(std::llround(static_cast<double>(k) * full.T / num_steps));
        ss.model_t[static_cast<size_t>(k - 1)] = std::max(1, t);
    }
    NoiseSchedule& d = ss.sched;
    d.T = num_steps;
    d.beta.resize(static_cast<size_t>(num_steps));
    d.alpha.resize(static_cast<size_t>(num_steps));
    d.alpha_bar.resize(static_cast<size_t>(num_steps));
    d.posterior_var.resize(static_cast<size_t>(num_steps));
    for (int k = 1; k <= num_steps; ++k) {
        size_t i = static_cast<size_t>(k - 1);
        double abar = full.alpha_bar_at(ss.model_t[i]);
        double abar_prev = (k == 1) ? 1.0 : full.alpha_bar_at(ss.model_t[i - 1]);
        double b = 1.0 - abar / abar_prev;
        d.beta[i] = b;
        d.alpha[i] = 1.0 - b;
        d.alpha_bar[i] = abar;
        d.posterior_var[i] = (1.0 - abar_prev) / (1.0 - abar) * b;
    }
    return ss;
}

// Ancestral sampling loop. predict_x0 receives the batch state and the
// original timestep and returns the x-space prediction; draws come from the
// supplied rng in a fixed order (init noise, then one map per step > 1).
template <typename Real>
Tensor<Real> ancestral_sample(const StridedSchedule& ss,
                              const std::function<Tensor<Real>(const Tensor<Real>&, int)>& predict_x0,
                              const std::vector<int64_t>& shape, Rng& rng, bool clip_x0 = true) {
    Tensor<Real> x = Tensor<Real>::randn(shape, rng);
    for (int k = ss.sched.T; k >= 1; --k) {
        Tensor<Real> x0_hat = predict_x0(x, ss.model_t[static_cast<size_t>(k - 1)]);
        if (clip_x0) {
            for (int64_t i = 0; i < x0_hat.numel(); ++i) {
                x0_hat[i] = std::min(Real(1), std::max(Real(-1), x0_hat[i]));
            }
        }
        Tensor<Real> noise = (k > 1) ? Tensor<Real>::randn(shape, rng)
                                     : Tensor<Real>::zeros(shape);
        x = ddpm_step(x, k, x0_hat, noise, ss.sched);
    }
    return x;
}

}  // namespace ctrldiff
