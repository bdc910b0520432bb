#include <catch2/catch_amalgamated.hpp>

#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/rng.hpp"

using namespace ctrldiff;

namespace {

Tensor<double> scalar_map(double v) {
    return Tensor<double>::full({1, 1, 1, 1}, v);
}

}  // namespace

TEST_CASE("make_schedule basic values") {
    SECTION("single step") {
        NoiseSchedule s = make_schedule(1, 0.1, 0.1);
        REQUIRE(s.alpha_bar_at(1) == Catch::Approx(0.9).epsilon(1e-14));
        REQUIRE(s.posterior_var_at(1) == 0.0);
        REQUIRE(s.alpha_bar_at(0) == 1.0);
    }
    SECTION("two steps, hand-derived") {
        NoiseSchedule s = make_schedule(2, 0.1, 0.2);
        REQUIRE(s.beta_at(1) == Catch::Approx(0.1).margin(1e-15));
        REQUIRE(s.beta_at(2) == Catch::Approx(0.2).margin(1e-15));
        REQUIRE(s.alpha_bar_at(1) == Catch::Approx(0.9).epsilon(1e-14));
        REQUIRE(s.alpha_bar_at(2) == Catch::Approx(0.72).epsilon(1e-14));
        REQUIRE(s.posterior_var_at(1) == 0.0);
        // (1 - 0.9) / (1 - 0.72) * 0.2
        REQUIRE(s.posterior_var_at(2) == Catch::Approx(0.0714285714285714).epsilon(1e-12));
    }
    SECTION("long schedule against independent running product") {
        const int T = 1000;
        NoiseSchedule s = make_schedule(T, 1e-4, 0.02);
        long double prod = 1.0L;
        for (int t = 1; t <= T; ++t) {
            long double b = 1e-4L + (0.02L - 1e-4L) * (t - 1) / (T - 1);
            prod *= 1.0L - b;
            REQUIRE(s.alpha_bar_at(t) ==
                    Catch::Approx(static_cast<double>(prod)).epsilon(1e-12));
        }
        REQUIRE(s.alpha_bar_at(T) > 3.9e-5);
        REQUIRE(s.alpha_bar_at(T) < 4.2e-5);
    }
    SECTION("rejects bad arguments") {
        REQUIRE_THROWS(make_schedule(0, 0.1, 0.2));
        REQUIRE_THROWS(make_schedule(10, 0.0, 0.2));
        REQUIRE_THROWS(make_schedule(10, 0.2, 0.1));
        REQUIRE_THROWS(make_schedule(10, 0.1, 1.0));
    }
}

TEST_CASE("schedule invariants") {
    NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
    double prev = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        REQUIRE(s.beta_at(t) > 0.0);
        REQUIRE(s.beta_at(t) < 1.0);
        REQUIRE(s.alpha_bar_at(t) < prev);  // strictly decreasing
        REQUIRE(s.posterior_var_at(t) <= s.beta_at(t));
        prev = s.alpha_bar_at(t);
    }
}

TEST_CASE("q_sample") {
    SECTION("hand value at alpha_bar = 0.25") {
        NoiseSchedule s = make_schedule(1, 0.75, 0.75);  // alpha_bar = 0.25 exactly
        Tensor<double> x0 = Tensor<double>::full({1, 1, 2, 2}, 1.0);
        Tensor<double> eps = Tensor<double>::full({1, 1, 2, 2}, 2.0);
        Tensor<double> out = q_sample(x0, 1, eps, s);
        for (int64_t i = 0; i < out.numel(); ++i) {
            REQUIRE(out[i] == Catch::Approx(0.5 + std::sqrt(0.75) * 2.0).epsilon(1e-14));
        }
    }
    SECTION("limits") {
        NoiseSchedule hi = make_schedule(1, 1e-12, 1e-12);  // alpha_bar ~ 1
        NoiseSchedule lo = make_schedule(1, 1.0 - 1e-12, 1.0 - 1e-12);  // alpha_bar ~ 0
        Tensor<double> x0 = scalar_map(0.37), eps = scalar_map(-1.21);
        REQUIRE(q_sample(x0, 1, eps, hi)[0] == Catch::Approx(0.37).margin(1e-6));
        REQUIRE(q_sample(x0, 1, eps, lo)[0] == Catch::Approx(-1.21).margin(1e-6));
    }
    SECTION("errors") {
        NoiseSchedule s = make_schedule(4, 0.1, 0.2);
        Tensor<double> x0({1, 1, 2, 2}), eps({1, 1, 2, 3});
        REQUIRE_THROWS(q_sample(x0, 1, eps, s));
        Tensor<double> ok({1, 1, 2, 2});
        REQUIRE_THROWS(q_sample(x0, 0, ok, s));
        REQUIRE_THROWS(q_sample(x0, 5, ok, s));
    }
    SECTION("variance law over many draws") {
        NoiseSchedule s = make_schedule(1, 0.6, 0.6);  // 1 - alpha_bar = 0.6
        Rng rng(7);
        const int n = 10000;
        double sum = 0.0, sum2 = 0.0;
        Tensor<double> x0 = scalar_map(0.25);
        for (int i = 0; i < n; ++i) {
            Tensor<double> eps = Tensor<double>::randn({1, 1, 1, 1}, rng);
            double v = q_sample(x0, 1, eps, s)[0];
            sum += v;
            sum2 += v * v;
        }
        double var = sum2 / n - (sum / n) * (sum / n);
        REQUIRE(var == Catch::Approx(0.6).epsilon(0.05));
    }
}

TEST_CASE("loss_weight") {
    SECTION("x-prediction weight is 1 at any t") {
        NoiseSchedule s = make_schedule(100, 1e-3, 0.1);
        for (int t : {1, 17, 50, 100}) REQUIRE(loss_weight(t, PredictionKind::X, s) == 1.0);
    }
    SECTION("hand values at alpha_bar = 0.5") {
        NoiseSchedule s = make_schedule(1, 0.5, 0.5);
        REQUIRE(loss_weight(1, PredictionKind::EPS, s) == Catch::Approx(1.0).epsilon(1e-14));
        REQUIRE(loss_weight(1, PredictionKind::V, s) == Catch::Approx(2.0).epsilon(1e-14));
    }
    SECTION("eps weight vanishes as alpha_bar -> 0") {
        NoiseSchedule s = make_schedule(1, 1.0 - 1e-12, 1.0 - 1e-12);
        REQUIRE(loss_weight(1, PredictionKind::EPS, s) == Catch::Approx(0.0).margin(1e-11));
    }
    SECTION("w_V - w_EPS = 1 for every t") {
        NoiseSchedule s = make_schedule(1000, 1e-4, 0.02);
        for (int t = 1; t <= 1000; ++t) {
            double d = loss_weight(t, PredictionKind::V, s) -
                       loss_weight(t, PredictionKind::EPS, s);
            REQUIRE(d == Catch::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("diffusion_loss") {
    NoiseSchedule s = make_schedule(1, 0.5, 0.5);  // alpha_bar = 0.5
    Rng rng(11);
    Tensor<double> x0 = Tensor<double>::randn({1, 1, 2, 2}, rng);
    Tensor<double> eps = Tensor<double>::randn({1, 1, 2, 2}, rng);

    SECTION("exact x-space prediction gives zero loss for every kind") {
        for (PredictionKind kind :
             {PredictionKind::X, PredictionKind::EPS, PredictionKind::V}) {
            DenoiserFn<double> model = [&](const Tensor<double>& x_t, int t,
                                           const Tensor<double>*) {
                double abar = s.alpha_bar_at(t);
                Tensor<double> out(x_t.shape());
                for (int64_t i = 0; i < out.numel(); ++i) {
                    switch (kind) {
                        case PredictionKind::X: out[i] = x0[i]; break;
                        case PredictionKind::EPS: out[i] = eps[i]; break;
                        case PredictionKind::V:
                            out[i] = std::sqrt(abar) * eps[i] - std::sqrt(1 - abar) * x0[i];
                            break;
                    }
                }
                return out;
            };
            double l = diffusion_loss(x0, 1, nullptr, model, kind, s, eps);
            REQUIRE(l == Catch::Approx(0.0).margin(1e-22));
        }
    }
    SECTION("x0 + 1 model with x-prediction gives loss 1") {
        DenoiserFn<double> model = [&](const Tensor<double>&, int, const Tensor<double>*) {
            Tensor<double> out(x0.shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = x0[i] + 1.0;
            return out;
        };
        REQUIRE(diffusion_loss(x0, 1, nullptr, model, PredictionKind::X, s, eps) ==
                Catch::Approx(1.0).epsilon(1e-14));
    }
    SECTION("constant eps model matches brute-force oracle") {
        const double c = 0.7;
        DenoiserFn<double> model = [&](const Tensor<double>& x_t, int, const Tensor<double>*) {
            return Tensor<double>::full(x_t.shape(), c);
        };
        double got = diffusion_loss(x0, 1, nullptr, model, PredictionKind::EPS, s, eps);
        // independent term-by-term evaluation
        double abar = 0.5;
        double w = abar / (1.0 - abar);
        double acc = 0.0;
        for (int64_t i = 0; i < x0.numel(); ++i) {
            double xt = std::sqrt(abar) * x0[i] + std::sqrt(1 - abar) * eps[i];
            double x0hat = (xt - std::sqrt(1 - abar) * c) / std::sqrt(abar);
            acc += (x0[i] - x0hat) * (x0[i] - x0hat);
        }
        double expected = w * acc / static_cast<double>(x0.numel());
        REQUIRE(got == Catch::Approx(expected).epsilon(1e-12));
    }
    SECTION("loss is non-negative and zero only at exact prediction") {
        DenoiserFn<double> model = [&](const Tensor<double>&, int, const Tensor<double>*) {
            Tensor<double> out(x0.shape());
            for (int64_t i = 0; i < out.numel(); ++i) out[i] = x0[i] + (i == 0 ? 1e-3 : 0.0);
            return out;
        };
        double l = diffusion_loss(x0, 1, nullptr, model, PredictionKind::X, s, eps);
        REQUIRE(l > 0.0);
    }
}

TEST_CASE("ddpm_step") {
    SECTION("t = 1 ignores the noise draw") {
        NoiseSchedule s = make_schedule(2, 0.1, 0.2);
        Tensor<double> xt = scalar_map(0.4), x0 = scalar_map(0.1);
        Tensor<double> big_noise = scalar_map(1e6), zero = scalar_map(0.0);
        Tensor<double> a = ddpm_step(xt, 1, x0, big_noise, s);
        Tensor<double> b = ddpm_step(xt, 1, x0, zero, s);
        REQUIRE(a[0] == b[0]);
    }
    SECTION("fixed point when x0_hat = x_t and beta -> 0") {
        NoiseSchedule s = make_schedule(2, 1e-12, 1e-12);
        Tensor<double> xt = scalar_map(0.8);
        Tensor<double> out = ddpm_step(xt, 2, xt, scalar_map(0.0), s);
        REQUIRE(out[0] == Catch::Approx(0.8).margin(1e-9));
    }
    SECTION("hand oracle on the T=2 schedule") {
        NoiseSchedule s = make_schedule(2, 0.1, 0.2);
        double xt = 0.3, x0 = -0.2, noise = 1.7;
        Tensor<double> out =
            ddpm_step(scalar_map(xt), 2, scalar_map(x0), scalar_map(noise), s);
        // independent long-double evaluation of the posterior mean formula
        long double abar = 0.72L, abar_prev = 0.9L, beta = 0.2L, alpha = 0.8L;
        long double mu = sqrtl(abar_prev) * beta / (1.0L - abar) * x0 +
                         sqrtl(alpha) * (1.0L - abar_prev) / (1.0L - abar) * xt;
        long double var = (1.0L - abar_prev) / (1.0L - abar) * beta;
        long double expected = mu + sqrtl(var) * noise;
        REQUIRE(out[0] == Catch::Approx(static_cast<double>(expected)).epsilon(1e-12));
    }
    SECTION("errors") {
        NoiseSchedule s = make_schedule(2, 0.1, 0.2);
        Tensor<double> a({1, 1, 1, 1}), b({1, 1, 1, 2});
        REQUIRE_THROWS(ddpm_step(a, 3, a, a, s));
        REQUIRE_THROWS(ddpm_step(a, 1, b, a, s));
    }
}

TEST_CASE("strided schedule") {
    NoiseSchedule full = make_schedule(1000, 1e-4, 0.02);
    StridedSchedule ss = make_strided(full, 20);
    REQUIRE(ss.sched.T == 20);
    REQUIRE(ss.model_t.back() == 1000);
    REQUIRE(ss.model_t.front() == 50);
    for (int k = 1; k <= 20; ++k) {
        REQUIRE(ss.sched.alpha_bar_at(k) == full.alpha_bar_at(ss.model_t[k - 1]));
        REQUIRE(ss.sched.beta_at(k) > 0.0);
        REQUIRE(ss.sched.beta_at(k) < 1.0);
    }
    REQUIRE(ss.sched.posterior_var_at(1) == 0.0);
    REQUIRE_THROWS(make_strided(full, 0));
    REQUIRE_THROWS(make_strided(full, 1001));
}

TEST_CASE("ancestral sampler is deterministic given the rng seed") {
    NoiseSchedule full = make_schedule(100, 1e-3, 0.05);
    StridedSchedule ss = make_strided(full, 10);
    auto model = [](const Tensor<double>& x, int) {
        Tensor<double> out(x.shape());
        for (int64_t i = 0; i < out.numel(); ++i) out[i] = 0.5 * x[i];
        return out;
    };
    Rng r1(42), r2(42);
    Tensor<double> a = ancestral_sample<double>(ss, model, {2, 1, 4, 4}, r1);
    Tensor<double> b = ancestral_sample<double>(ss, model, {2, 1, 4, 4}, r2);
    for (int64_t i = 0; i < a.numel(); ++i) REQUIRE(a[i] == b[i]);
}
