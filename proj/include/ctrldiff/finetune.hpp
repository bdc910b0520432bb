#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "ctrldiff/backbone.hpp"
#include "ctrldiff/control.hpp"
#include "ctrldiff/datagen.hpp"
#include "ctrldiff/diffusion.hpp"
#include "ctrldiff/registry.hpp"

namespace ctrldiff {

enum class Architecture { ControlNet, ControlNeXt };

inline const char* to_string(Architecture a) {
    return a == Architecture::ControlNet ? "controlnet" : "controlnext";
}

// Glob-style include patterns over registry names selecting the trainable
// subset of the pretrained parameters.
struct ParamSelector {
    std::vector<std::string> patterns;
};

struct SelectorResult {
    std::set<std::string> names;
    std::vector<std::string> unmatched_patterns;  // warning-level, not an error
};

template <typename Real>
SelectorResult resolve_selector(const ParamSelector& sel, const ParamRegistry<Real>& reg) {
    SelectorResult out;
    for (const auto& pat : sel.patterns) {
        bool hit = false;
        for (const auto& p : reg.items()) {
            if (glob_match(pat, p->name)) {
                out.names.insert(p->name);
                hit = true;
            }
        }
        if (!hit) out.unmatched_patterns.push_back(pat);
    }
    return out;
}

struct EvalSettings {
    int sample_steps = 20;  // strided reverse steps per evaluation
    int num_controls = 8;   // held-out controls scored per evaluation
    uint64_t noise_seed = 2024;
};

struct TrainConfig {
    int steps = 1200;
    int batch_size = 4;
    double learning_rate = 0.2;
    uint64_t seed = 0;
    PredictionKind prediction_kind = PredictionKind::X;
    Architecture architecture = Architecture::ControlNeXt;
    ParamSelector selector{{"mid.*", "*.norm.*"}};  // controlnext only
    int eval_every = 50;
    double adherence_threshold = 0.6;
    int pretrain_steps = 300;  // unconditional warm start, run by the caller
    int diffusion_steps = 1000;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    EvalSettings eval;

    void validate() const {
        check(steps >= 0 && batch_size > 0 && eval_every > 0 && pretrain_steps >= 0 &&
                  diffusion_steps >= 1,
              "train config: counts must be positive");
        check(learning_rate >= 0.0, "train config: learning rate must be >= 0");
        check(adherence_threshold > 0.0 && adherence_threshold < 1.0,
              "train config: adherence threshold must lie in (0, 1)");
        check(eval.sample_steps >= 1 && eval.sample_steps <= diffusion_steps,
              "train config: eval sample steps out of range");
        check(eval.num_controls >= 1, "train config: need at least one eval control");
    }
};

struct TraceRecord {
    int step = 0;
    double loss = 0.0;
    double adherence = 0.0;
};

struct ConvergenceTrace {
    std::vector<TraceRecord> records;                // sorted by step
    std::optional<int> steps_to_threshold;           // empty = never
    double threshold = 0.0;

    void finalize(double thr) {
        threshold = thr;
        steps_to_threshold.reset();
        for (const auto& r : records) {
            if (r.adherence >= thr) {
                steps_to_threshold = r.step;
                break;
            }
        }
    }
};

// ---- adherence -------------------------------------------------------------

// Otsu's global threshold over a [-1,1] grayscale map; returns a binary mask.
// A flat image has no foreground.
template <typename Real>
Tensor<Real> otsu_binarize(const Tensor<Real>& img) {
    constexpr int kBins = 256;
    int64_t n = img.numel();
    std::vector<int64_t> hist(kBins, 0);
    for (int64_t i = 0; i < n; ++i) {
        double v = std::clamp(static_cast<double>(img[i]), -1.0, 1.0);
        int bin = std::min(kBins - 1, static_cast<int>((v + 1.0) * 0.5 * kBins));
        hist[static_cast<size_t>(bin)]++;
    }
    double total_sum = 0.0;
    for (int i = 0; i < kBins; ++i) total_sum += static_cast<double>(i) * hist[static_cast<size_t>(i)];

    double best = -1.0;
    int best_bin = -1;
    double w0 = 0.0, sum0 = 0.0;
    for (int t = 0; t < kBins - 1; ++t) {
        w0 += static_cast<double>(hist[static_cast<size_t>(t)]);
        if (w0 == 0) continue;
        double w1 = static_cast<double>(n) - w0;
        if (w1 == 0) break;
        sum0 += static_cast<double>(t) * hist[static_cast<size_t>(t)];
        double m0 = sum0 / w0;
        double m1 = (total_sum - sum0) / w1;
        double between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if (between > best) {
            best = between;
            best_bin = t;
        }
    }
    Tensor<Real> out(img.shape());
    if (best_bin < 0 || best <= 0.0) return out;  // flat image -> empty mask
    double thr = -1.0 + 2.0 * static_cast<double>(best_bin + 1) / kBins;
    for (int64_t i = 0; i < n; ++i) {
        if (static_cast<double>(img[i]) >= thr) out[i] = Real(1);
    }
    return out;
}

// Intersection-over-union of two binary masks; both empty counts as 1.
template <typename Real>
double iou(const Tensor<Real>& a, const Tensor<Real>& b) {
    require_same_shape(a, b, "iou");
    int64_t inter = 0, uni = 0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        bool pa = a[i] != Real(0), pb = b[i] != Real(0);
        inter += (pa && pb) ? 1 : 0;
        uni += (pa || pb) ? 1 : 0;
    }
    if (uni == 0) return 1.0;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

// control-adherence score in [0,1]: Otsu-binarize the generated image, then
// IoU against the control mask
template <typename Real>
double adherence(const Tensor<Real>& generated, const Tensor<Real>& control) {
    return iou(otsu_binarize(generated), control);
}

// ---- conditioning dispatch -------------------------------------------------

// Holds whichever conditioning architecture a run uses.
template <typename Real>
struct ControlModule {
    Architecture arch = Architecture::ControlNeXt;
    std::optional<ControlNext<Real>> next;
    std::optional<ControlNetBranch<Real>> cnet;

    ParamRegistry<Real>& registry() {
        return arch == Architecture::ControlNeXt ? next->registry : cnet->registry;
    }
    const ParamRegistry<Real>& registry() const {
        return arch == Architecture::ControlNeXt ? next->registry : cnet->registry;
    }

    Var<Real> forward_t(Tape<Real>& tp, const Backbone<Real>& bb, Var<Real> x,
                        const std::vector<int>& ts, Var<Real> control) const {
        if (arch == Architecture::ControlNeXt) {
            return controlnext_forward_t(tp, bb, *next, std::move(x), ts, std::move(control));
        }
        return controlnet_forward_t(tp, bb, *cnet, std::move(x), ts, std::move(control));
    }

    Tensor<Real> forward(const Backbone<Real>& bb, const Tensor<Real>& x, int t,
                         const Tensor<Real>& control) const {
        Tape<Real> tp(false);
        std::vector<int> ts(static_cast<size_t>(x.dim(0)), t);
        return forward_t(tp, bb, tp.input(x), ts, tp.input(control))->value;
    }
};

// ---- sampling --------------------------------------------------------------

// Generates a batch with the strided ancestral sampler; ctrl == nullptr means
// unconditional. controls must be (B, 1, S, S) matching the batch.
template <typename Real>
Tensor<Real> sample_batch(const Backbone<Real>& bb, const ControlModule<Real>* ctrl,
                          const Tensor<Real>* controls, const NoiseSchedule& sched,
                          int sample_steps, PredictionKind kind, Rng& rng) {
    StridedSchedule ss = make_strided(sched, sample_steps);
    std::vector<int64_t> shape = controls
                                     ? controls->shape()
                                     : std::vector<int64_t>{1, 1, bb.cfg.image_size,
                                                            bb.cfg.image_size};
    shape[1] = bb.cfg.in_channels;
    auto predict = [&](const Tensor<Real>& x, int t) {
        Tensor<Real> native = ctrl ? ctrl->forward(bb, x, t, *controls) : bb.forward(x, t);
        return to_x_space(native, x, t, kind, sched);
    };
    return ancestral_sample<Real>(ss, predict, shape, rng);
}

// Mean adherence of samples generated for the held-out controls; the fixed
// noise seed keeps scores comparable across evaluations.
template <typename Real>
double eval_adherence(const Backbone<Real>& bb, const ControlModule<Real>* ctrl,
                      const std::vector<ControlSample<Real>>& heldout,
                      const NoiseSchedule& sched, PredictionKind kind, const EvalSettings& ev) {
    int B = std::min<int>(ev.num_controls, static_cast<int>(heldout.size()));
    check(B >= 1, "eval needs at least one held-out control");
    int S = bb.cfg.image_size;
    Tensor<Real> controls({B, 1, S, S});
    for (int i = 0; i < B; ++i) {
        for (int64_t j = 0; j < heldout[static_cast<size_t>(i)].control.numel(); ++j) {
            controls[static_cast<int64_t>(i) * S * S + j] =
                heldout[static_cast<size_t>(i)].control[j];
        }
    }
    Rng rng(ev.noise_seed);
    Tensor<Real> images =
        sample_batch(bb, ctrl, &controls, sched, ev.sample_steps, kind, rng);
    double acc = 0.0;
    for (int i = 0; i < B; ++i) {
        Tensor<Real> img({1, 1, S, S}), m({1, 1, S, S});
        for (int64_t j = 0; j < static_cast<int64_t>(S) * S; ++j) {
            img[j] = images[static_cast<int64_t>(i) * S * S + j];
            m[j] = controls[static_cast<int64_t>(i) * S * S + j];
        }
        acc += adherence(img, m);
    }
    return acc / B;
}

// ---- training --------------------------------------------------------------

namespace detail {

constexpr uint64_t kBatchSalt = 0xB47C5EEDull;
constexpr uint64_t kPretrainSalt = 0x9A37ACEDull;

// Draws a training batch: images, controls, per-sample timesteps, noised
// inputs and x-space conversion coefficients. Sample i of step k depends only
// on (seed, k).
template <typename Real>
struct Batch {
    Tensor<Real> x0, control, x_t;
    std::vector<int> ts;
    std::vector<Real> weights;       // loss weights per sample
    std::vector<Real> ca, cb;        // x0_hat = ca * x_t + cb * native
};

template <typename Real>
Batch<Real> draw_batch(const std::vector<ControlSample<Real>>& data, int batch_size,
                       const NoiseSchedule& sched, PredictionKind kind, uint64_t seed,
                       int step, uint64_t salt) {
    Rng rng = Rng::indexed(seed ^ salt, static_cast<uint64_t>(step));
    int S = static_cast<int>(data.front().image.dim(2));
    Batch<Real> b;
    b.x0 = Tensor<Real>({batch_size, 1, S, S});
    b.control = Tensor<Real>({batch_size, 1, S, S});
    b.x_t = Tensor<Real>({batch_size, 1, S, S});
    int64_t per = static_cast<int64_t>(S) * S;
    for (int i = 0; i < batch_size; ++i) {
        const auto& s = data[rng.next_u64() % data.size()];
        int t = 1 + static_cast<int>(rng.next_u64() % static_cast<uint64_t>(sched.T));
        b.ts.push_back(t);
        double abar = sched.alpha_bar_at(t);
        double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
        for (int64_t j = 0; j < per; ++j) {
            Real x0v = s.image[j];
            Real eps = static_cast<Real>(rng.normal());
            b.x0[i * per + j] = x0v;
            b.control[i * per + j] = s.control[j];
            b.x_t[i * per + j] = static_cast<Real>(sa) * x0v + static_cast<Real>(sb) * eps;
        }
        b.weights.push_back(static_cast<Real>(loss_weight(t, kind, sched)));
        switch (kind) {
            case PredictionKind::X:
                b.ca.push_back(Real(0));
                b.cb.push_back(Real(1));
                break;
            case PredictionKind::EPS:
                b.ca.push_back(static_cast<Real>(1.0 / sa));
                b.cb.push_back(static_cast<Real>(-sb / sa));
                break;
            case PredictionKind::V:
                b.ca.push_back(static_cast<Real>(sa));
                b.cb.push_back(static_cast<Real>(-sb));
                break;
        }
    }
    return b;
}

template <typename Real>
void sgd_step(ParamRegistry<Real>& reg, Real lr) {
    for (const auto& p : reg.items()) {
        if (!p->trainable) continue;
        for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] -= lr * p->grad[i];
    }
    reg.zero_grads();
}

}  // namespace detail

// Unconditional warm start: plain denoising on the dataset images, every
// backbone parameter trainable. Runs before conditional fine-tuning so the
// frozen model the adapters see behaves like a pretrained generator.
template <typename Real>
void pretrain_backbone(Backbone<Real>& bb, const std::vector<ControlSample<Real>>& data,
                       const NoiseSchedule& sched, const TrainConfig& cfg) {
    bb.registry.set_all_trainable(true);
    bb.registry.zero_grads();
    for (int step = 1; step <= cfg.pretrain_steps; ++step) {
        auto b = detail::draw_batch<Real>(data, cfg.batch_size, sched, cfg.prediction_kind,
                                          cfg.seed, step, detail::kPretrainSalt);
        Tape<Real> tp;
        Var<Real> xt = tp.input(b.x_t);
        Var<Real> native = bb.forward_t(tp, xt, b.ts);
        Var<Real> x0_hat = tp.combine_per_sample(xt, native, b.ca, b.cb);
        Var<Real> loss = tp.weighted_mse(x0_hat, b.x0, b.weights);
        if (!std::isfinite(static_cast<double>(loss->value[0]))) {
            fail("non-finite loss at pretrain step " + std::to_string(step));
        }
        tp.backward(loss);
        detail::sgd_step(bb.registry, static_cast<Real>(cfg.learning_rate));
    }
}

// Conditional fine-tuning. For controlnet the backbone is fully frozen and
// the branch + zero convs train; for controlnext the extractor, gamma and the
// selector-resolved backbone subset train. Plain fixed-rate SGD; every
// registry entry outside the trained set stays bit-identical.
template <typename Real>
ConvergenceTrace train(const TrainConfig& cfg, Backbone<Real>& bb, ControlModule<Real>& ctrl,
                       const std::vector<ControlSample<Real>>& data,
                       const std::vector<ControlSample<Real>>& heldout,
                       const NoiseSchedule& sched) {
    cfg.validate();
    check(!data.empty(), "train: empty dataset");
    check(ctrl.arch == cfg.architecture, "train: control module/config architecture mismatch");

    if (cfg.architecture == Architecture::ControlNeXt) {
        SelectorResult sel = resolve_selector(cfg.selector, bb.registry);
        for (const auto& p : bb.registry.items()) p->trainable = sel.names.count(p->name) > 0;
    } else {
        bb.registry.set_all_trainable(false);
    }
    ctrl.registry().set_all_trainable(true);
    bb.registry.zero_grads();
    ctrl.registry().zero_grads();

    ConvergenceTrace trace;
    for (int step = 1; step <= cfg.steps; ++step) {
        auto b = detail::draw_batch<Real>(data, cfg.batch_size, sched, cfg.prediction_kind,
                                          cfg.seed, step, detail::kBatchSalt);
        Tape<Real> tp;
        Var<Real> xt = tp.input(b.x_t);
        Var<Real> control = tp.input(b.control);
        Var<Real> native = ctrl.forward_t(tp, bb, xt, b.ts, control);
        Var<Real> x0_hat = tp.combine_per_sample(xt, native, b.ca, b.cb);
        Var<Real> loss = tp.weighted_mse(x0_hat, b.x0, b.weights);
        double loss_v = static_cast<double>(loss->value[0]);
        if (!std::isfinite(loss_v)) {
            fail("non-finite loss at step " + std::to_string(step));
        }
        tp.backward(loss);
        detail::sgd_step(bb.registry, static_cast<Real>(cfg.learning_rate));
        detail::sgd_step(ctrl.registry(), static_cast<Real>(cfg.learning_rate));

        if (step % cfg.eval_every == 0 || step == cfg.steps) {
            if (!trace.records.empty() && trace.records.back().step == step) continue;
            double adh = eval_adherence(bb, &ctrl, heldout, sched, cfg.prediction_kind, cfg.eval);
            trace.records.push_back({step, loss_v, adh});
        }
    }
    trace.finalize(cfg.adherence_threshold);
    return trace;
}

}  // namespace ctrldiff
