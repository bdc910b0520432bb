#pragma once

#include <string>
#include <vector>

#include "ctrldiff/autodiff.hpp"
#include "ctrldiff/backbone.hpp"
#include "ctrldiff/nn.hpp"
#include "ctrldiff/registry.hpp"

namespace ctrldiff {

// Residual block without timestep conditioning, used by the control
// feature extractor.
template <typename Real>
struct PlainResBlock {
    GroupNormLayer<Real> norm0, norm1;
    Conv2dLayer<Real> conv0, conv1;

    PlainResBlock() = default;
    PlainResBlock(ParamRegistry<Real>& reg, const std::string& name, int channels, Rng& rng)
        : norm0(reg, name + ".norm.0", channels),
          norm1(reg, name + ".norm.1", channels),
          conv0(reg, name + ".conv.0", channels, channels, 3, 1, 1, rng),
          conv1(reg, name + ".conv.1", channels, channels, 3, 1, 1, rng) {}

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const {
        Var<Real> h = conv0(tp, tp.silu(norm0(tp, x)));
        h = conv1(tp, tp.silu(norm1(tp, h)));
        return tp.add(h, x);
    }
};

// 1x1 convolution with weight and bias exactly zero at construction, so a
// freshly bridged branch contributes nothing.
template <typename Real>
struct ZeroConv {
    Conv2dLayer<Real> conv;

    ZeroConv() = default;
    ZeroConv(ParamRegistry<Real>& reg, const std::string& name, int in_ch, int out_ch, Rng& rng)
        : conv(reg, name, in_ch, out_ch, 1, 1, 0, rng, WeightInit::Zeros) {}

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const { return conv(tp, std::move(x)); }
};

template <typename Real>
Tensor<Real> zero_conv_forward(const ZeroConv<Real>& z, const Tensor<Real>& x) {
    Tape<Real> tp(false);
    return z(tp, tp.input(x))->value;
}

// Learnable per-channel scale for cross-normalized features; init 1 keeps the
// injection live from the first training step.
template <typename Real>
struct CrossNorm {
    ParamPtr<Real> gamma;
    Real eps = Real(1e-5);

    CrossNorm() = default;
    CrossNorm(ParamRegistry<Real>& reg, const std::string& name, int channels,
              Real eps_ = Real(1e-5))
        : gamma(reg.add(name, Tensor<Real>::ones({channels}))), eps(eps_) {
        check(eps > Real(0), "cross norm eps must be positive");
    }
};

// gamma * (x_c - mu_m) / sqrt(var_m + eps) with per-sample, per-channel
// statistics taken from x_m over its spatial positions. x_m is read-only.
template <typename Real>
Tensor<Real> cross_normalize(const Tensor<Real>& x_c, const Tensor<Real>& x_m,
                             const Tensor<Real>& gamma, Real eps) {
    Tape<Real> tp(false);
    return tp.cross_norm(tp.input(x_c), tp.input(x_m), tp.input(gamma), eps)->value;
}

template <typename Real>
Tensor<Real> cross_normalize(const Tensor<Real>& x_c, const Tensor<Real>& x_m,
                             const CrossNorm<Real>& state) {
    return cross_normalize(x_c, x_m, state.gamma->value, state.eps);
}

struct ControlExtractorConfig {
    int in_channels = 1;
    int num_blocks = 1;  // res blocks per stage
    std::vector<int> channels_per_stage = {8, 16, 32};
    int downsample_to = 16;  // target spatial size = injection port size
    int out_channels = 128;  // = injection port channels

    int stages() const { return static_cast<int>(channels_per_stage.size()); }

    void validate(int image_size) const {
        check(in_channels > 0 && num_blocks > 0 && downsample_to > 0 && out_channels > 0,
              "extractor config: all counts must be positive");
        check(!channels_per_stage.empty(), "extractor config: need at least one stage");
        for (int c : channels_per_stage)
            check(c > 0, "extractor config: stage widths must be positive");
        // stage s runs at image_size / 2^s; the last stage must land on the port
        int reached = image_size >> (stages() - 1);
        check(reached == downsample_to && (downsample_to << (stages() - 1)) == image_size,
              "extractor config: " + std::to_string(stages()) + " stages reach spatial size " +
                  std::to_string(reached) + ", cannot reach port size " +
                  std::to_string(downsample_to) + " by halvings from " +
                  std::to_string(image_size));
    }
};

// Lightweight convolutional control-feature extractor: a stem, a few ResNet
// blocks per resolution, strided halvings down to the port size, and a 1x1
// projection to the port width.
template <typename Real>
struct ControlExtractor {
    ControlExtractorConfig cfg;
    Conv2dLayer<Real> stem;
    std::vector<std::vector<PlainResBlock<Real>>> stages;
    std::vector<Conv2dLayer<Real>> downs;
    Conv2dLayer<Real> out;

    ControlExtractor() = default;
    ControlExtractor(ParamRegistry<Real>& reg, const std::string& prefix,
                     const ControlExtractorConfig& c, Rng& rng)
        : cfg(c) {
        stem = Conv2dLayer<Real>(reg, prefix + "stem", c.in_channels, c.channels_per_stage[0], 3,
                                 1, 1, rng);
        int S = c.stages();
        stages.resize(static_cast<size_t>(S));
        for (int s = 0; s < S; ++s) {
            int ch = c.channels_per_stage[static_cast<size_t>(s)];
            for (int j = 0; j < c.num_blocks; ++j) {
                stages[static_cast<size_t>(s)].emplace_back(
                    reg, prefix + "stage." + std::to_string(s) + ".res." + std::to_string(j), ch,
                    rng);
            }
            if (s + 1 < S) {
                downs.emplace_back(reg, prefix + "stage." + std::to_string(s) + ".down", ch,
                                   c.channels_per_stage[static_cast<size_t>(s + 1)], 3, 2, 1,
                                   rng);
            }
        }
        out = Conv2dLayer<Real>(reg, prefix + "out", c.channels_per_stage.back(), c.out_channels,
                                1, 1, 0, rng);
    }

    Var<Real> forward_t(Tape<Real>& tp, Var<Real> control) const {
        Var<Real> h = stem(tp, std::move(control));
        for (size_t s = 0; s < stages.size(); ++s) {
            for (const auto& res : stages[s]) h = res(tp, h);
            if (s + 1 < stages.size()) h = downs[s](tp, h);
        }
        return out(tp, h);
    }

    Tensor<Real> forward(const Tensor<Real>& control) const {
        Tape<Real> tp(false);
        return forward_t(tp, tp.input(control))->value;
    }
};

// Plug-and-play conditioning module: extractor + cross-norm scale, one
// registry namespaced under control.*
template <typename Real>
struct ControlNext {
    ControlExtractorConfig cfg;
    ParamRegistry<Real> registry;
    ControlExtractor<Real> extractor;
    CrossNorm<Real> cn;

    ControlNext(const ControlExtractorConfig& c, int image_size, uint64_t seed) : cfg(c) {
        cfg.validate(image_size);
        Rng rng(seed);
        extractor = ControlExtractor<Real>(registry, "control.extractor.", cfg, rng);
        cn = CrossNorm<Real>(registry, "control.gamma", cfg.out_channels);
    }
};

template <typename Real>
ControlNext<Real> build_extractor(const ControlExtractorConfig& cfg, int image_size,
                                  uint64_t seed) {
    return ControlNext<Real>(cfg, image_size, seed);
}

struct ControlNetBranchConfig {
    int hint_hidden = 16;  // width of the small control-to-input encoder
};

// Trainable copy of the denoiser's encoder + mid, bridged into the frozen
// denoiser through zero convolutions: one bridge per encoder level plus one
// at the mid output. The control map enters through a small learned encoder
// added to x_t.
template <typename Real>
struct ControlNetBranch {
    ControlNetBranchConfig cfg;
    BackboneConfig bb_cfg;
    ParamRegistry<Real> registry;
    Conv2dLayer<Real> hint0, hint1;
    EncoderMid<Real> trunk;
    std::vector<ZeroConv<Real>> zero;  // levels..., then mid

    ControlNetBranch(const ControlNetBranchConfig& c, const Backbone<Real>& source,
                     int control_channels, uint64_t seed)
        : cfg(c), bb_cfg(source.cfg) {
        Rng rng(seed);
        hint0 = Conv2dLayer<Real>(registry, "control.hint.0", control_channels, c.hint_hidden, 3,
                                  1, 1, rng);
        hint1 = Conv2dLayer<Real>(registry, "control.hint.1", c.hint_hidden,
                                  bb_cfg.in_channels, 3, 1, 1, rng);
        trunk = EncoderMid<Real>(registry, "control.branch.", bb_cfg, rng);
        copy_from_source(source);
        for (int i = 0; i < bb_cfg.levels(); ++i) {
            int ch = bb_cfg.level_channels(i);
            zero.emplace_back(registry, "control.zero." + std::to_string(i), ch, ch, rng);
        }
        zero.emplace_back(registry, "control.zero.mid", bb_cfg.mid_channels, bb_cfg.mid_channels,
                          rng);
    }

private:
    // branch weights start as a copy of the pretrained encoder/mid
    void copy_from_source(const Backbone<Real>& source) {
        const std::string prefix = "control.branch.";
        for (const auto& p : registry.items()) {
            if (p->name.rfind(prefix, 0) != 0) continue;
            auto src = source.registry.find(p->name.substr(prefix.size()));
            if (!src) continue;
            check(src->value.same_shape(p->value),
                  "branch copy shape mismatch at " + p->name);
            p->value = src->value;
        }
    }
};

// y = F_m(x) + bridged zero-conv contributions of the trainable copy run on
// (x + encoded control). At fresh initialization every bridge emits zero and
// the result equals the plain denoiser forward bit-exactly.
template <typename Real>
Var<Real> controlnet_forward_t(Tape<Real>& tp, const Backbone<Real>& bb,
                               const ControlNetBranch<Real>& br, Var<Real> x,
                               const std::vector<int>& ts, Var<Real> control) {
    Var<Real> hint = br.hint1(tp, tp.silu(br.hint0(tp, control)));
    Var<Real> bx = tp.add(x, hint);
    auto enc = br.trunk.encode(tp, bx, ts);
    Var<Real> bmid = br.trunk.mid(tp, enc.mid_in, enc.temb);

    int L = bb.cfg.levels();
    std::vector<Var<Real>> adds;
    for (int i = 0; i < L; ++i) {
        Var<Real> z = br.zero[static_cast<size_t>(i)](tp, enc.level_out[static_cast<size_t>(i)]);
        int spatial = bb.cfg.image_size >> i;
        const auto& zs = z->value.shape();
        check(zs[1] == bb.cfg.level_channels(i) && zs[2] == spatial && zs[3] == spatial,
              "bridge control.zero." + std::to_string(i) + ": shape mismatch, expected (n, " +
                  std::to_string(bb.cfg.level_channels(i)) + ", " + std::to_string(spatial) +
                  ", " + std::to_string(spatial) + "), got " + z->value.shape_str());
        adds.push_back(z);
    }
    Var<Real> mid_add = br.zero.back()(tp, bmid);
    {
        const auto& zs = mid_add->value.shape();
        check(zs[1] == bb.cfg.mid_channels && zs[2] == bb.cfg.port_spatial() &&
                  zs[3] == bb.cfg.port_spatial(),
              "bridge control.zero.mid: shape mismatch, got " + mid_add->value.shape_str());
    }
    return bb.forward_t(tp, std::move(x), ts, nullptr, &adds, mid_add);
}

template <typename Real>
Tensor<Real> controlnet_forward(const Backbone<Real>& bb, const ControlNetBranch<Real>& br,
                                const Tensor<Real>& x, int t, const Tensor<Real>& control) {
    bb.require_input(x);
    Tape<Real> tp(false);
    std::vector<int> ts(static_cast<size_t>(x.dim(0)), t);
    return controlnet_forward_t(tp, bb, br, tp.input(x), ts, tp.input(control))->value;
}

// Extracts control features, normalizes them with the main branch's port
// statistics and adds them at the injection port.
template <typename Real>
Var<Real> controlnext_forward_t(Tape<Real>& tp, const Backbone<Real>& bb,
                                const ControlNext<Real>& next, Var<Real> x,
                                const std::vector<int>& ts, Var<Real> control) {
    auto enc = bb.trunk.encode(tp, std::move(x), ts);
    Var<Real> xc = next.extractor.forward_t(tp, std::move(control));
    const auto& cs = xc->value.shape();
    check(cs[1] == bb.port.channels && cs[2] == bb.port.spatial && cs[3] == bb.port.spatial,
          "extractor/port shape mismatch: expected (n, " + std::to_string(bb.port.channels) +
              ", " + std::to_string(bb.port.spatial) + ", " + std::to_string(bb.port.spatial) +
              "), got " + xc->value.shape_str());
    Var<Real> inj = tp.cross_norm(xc, enc.mid_in, tp.use(next.cn.gamma), next.cn.eps);
    Var<Real> mid_in = tp.add(enc.mid_in, inj);
    Var<Real> m = bb.trunk.mid(tp, mid_in, enc.temb);
    return bb.decode(tp, m, enc);
}

template <typename Real>
Tensor<Real> controlnext_forward(const Backbone<Real>& bb, const ControlNext<Real>& next,
                                 const Tensor<Real>& x, int t, const Tensor<Real>& control) {
    bb.require_input(x);
    Tape<Real> tp(false);
    std::vector<int> ts(static_cast<size_t>(x.dim(0)), t);
    return controlnext_forward_t(tp, bb, next, tp.input(x), ts, tp.input(control))->value;
}

}  // namespace ctrldiff
