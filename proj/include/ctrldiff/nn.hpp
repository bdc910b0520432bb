#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "ctrldiff/autodiff.hpp"
#include "ctrldiff/registry.hpp"
#include "ctrldiff/rng.hpp"

namespace ctrldiff {

enum class WeightInit { FanInNormal, Zeros };

// weights ~ N(0, 1/fan_in), biases zero
template <typename Real>
Tensor<Real> init_weight(std::vector<int64_t> shape, int64_t fan_in, Rng& rng, WeightInit init) {
    if (init == WeightInit::Zeros) return Tensor<Real>::zeros(std::move(shape));
    Real stddev = static_cast<Real>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    return Tensor<Real>::randn(std::move(shape), rng, stddev);
}

template <typename Real>
struct Conv2dLayer {
    ParamPtr<Real> w, b;
    int stride = 1;
    int pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(ParamRegistry<Real>& reg, const std::string& name, int in_ch, int out_ch, int k,
                int stride_, int pad_, Rng& rng, WeightInit init = WeightInit::FanInNormal)
        : stride(stride_), pad(pad_) {
        w = reg.add(name + ".weight",
                    init_weight<Real>({out_ch, in_ch, k, k},
                                      static_cast<int64_t>(in_ch) * k * k, rng, init));
        b = reg.add(name + ".bias", Tensor<Real>::zeros({out_ch}));
    }

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const {
        return tp.conv2d(std::move(x), tp.use(w), tp.use(b), stride, pad);
    }
};

template <typename Real>
struct LinearLayer {
    ParamPtr<Real> w, b;

    LinearLayer() = default;
    LinearLayer(ParamRegistry<Real>& reg, const std::string& name, int in_f, int out_f, Rng& rng,
                WeightInit init = WeightInit::FanInNormal) {
        w = reg.add(name + ".weight", init_weight<Real>({out_f, in_f}, in_f, rng, init));
        b = reg.add(name + ".bias", Tensor<Real>::zeros({out_f}));
    }

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const {
        return tp.linear(std::move(x), tp.use(w), tp.use(b));
    }
};

template <typename Real>
struct GroupNormLayer {
    ParamPtr<Real> scale, shift;
    int groups = 1;
    Real eps = Real(1e-5);

    GroupNormLayer() = default;
    GroupNormLayer(ParamRegistry<Real>& reg, const std::string& name, int channels) {
        // largest group count <= 8 that divides the width
        groups = 1;
        for (int g = std::min(8, channels); g >= 1; --g) {
            if (channels % g == 0) {
                groups = g;
                break;
            }
        }
        scale = reg.add(name + ".scale", Tensor<Real>::ones({channels}));
        shift = reg.add(name + ".shift", Tensor<Real>::zeros({channels}));
    }

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const {
        return tp.group_norm(std::move(x), tp.use(scale), tp.use(shift), groups, eps);
    }
};

// sin/cos positional features for integer timesteps; dim must be even
template <typename Real>
Tensor<Real> sinusoid_embedding(const std::vector<int>& ts, int dim) {
    check(dim % 2 == 0, "time embedding dim must be even");
    int half = dim / 2;
    Tensor<Real> out({static_cast<int64_t>(ts.size()), dim});
    for (size_t n = 0; n < ts.size(); ++n) {
        for (int i = 0; i < half; ++i) {
            double freq = std::exp(-std::log(10000.0) * i / half);
            double a = ts[n] * freq;
            out[static_cast<int64_t>(n) * dim + i] = static_cast<Real>(std::sin(a));
            out[static_cast<int64_t>(n) * dim + half + i] = static_cast<Real>(std::cos(a));
        }
    }
    return out;
}

// sinusoid features -> linear -> silu -> linear
template <typename Real>
struct TimeEmbedding {
    LinearLayer<Real> lin0, lin1;
    int dim = 0;

    TimeEmbedding() = default;
    TimeEmbedding(ParamRegistry<Real>& reg, const std::string& name, int dim_, Rng& rng)
        : lin0(reg, name + ".mlp.0", dim_, dim_, rng),
          lin1(reg, name + ".mlp.1", dim_, dim_, rng),
          dim(dim_) {}

    Var<Real> operator()(Tape<Real>& tp, const std::vector<int>& ts) const {
        Var<Real> e = tp.input(sinusoid_embedding<Real>(ts, dim));
        return lin1(tp, tp.silu(lin0(tp, e)));
    }
};

// Residual block with timestep conditioning. With hidden_channels set it runs
// as a 1x1 -> 3x3 -> 1x1 bottleneck, otherwise as the usual pair of 3x3 convs.
template <typename Real>
struct ResBlock {
    GroupNormLayer<Real> norm0, norm1;
    std::optional<GroupNormLayer<Real>> norm2;
    Conv2dLayer<Real> conv0, conv1;
    std::optional<Conv2dLayer<Real>> conv2;
    LinearLayer<Real> emb;
    std::optional<Conv2dLayer<Real>> skip;

    ResBlock() = default;
    ResBlock(ParamRegistry<Real>& reg, const std::string& name, int in_ch, int out_ch,
             int time_dim, Rng& rng, int hidden_channels = 0) {
        int mid = hidden_channels > 0 ? hidden_channels : out_ch;
        norm0 = GroupNormLayer<Real>(reg, name + ".norm.0", in_ch);
        if (hidden_channels > 0) {
            conv0 = Conv2dLayer<Real>(reg, name + ".conv.0", in_ch, mid, 1, 1, 0, rng);
            norm1 = GroupNormLayer<Real>(reg, name + ".norm.1", mid);
            conv1 = Conv2dLayer<Real>(reg, name + ".conv.1", mid, mid, 3, 1, 1, rng);
            norm2 = GroupNormLayer<Real>(reg, name + ".norm.2", mid);
            conv2 = Conv2dLayer<Real>(reg, name + ".conv.2", mid, out_ch, 1, 1, 0, rng);
        } else {
            conv0 = Conv2dLayer<Real>(reg, name + ".conv.0", in_ch, mid, 3, 1, 1, rng);
            norm1 = GroupNormLayer<Real>(reg, name + ".norm.1", mid);
            conv1 = Conv2dLayer<Real>(reg, name + ".conv.1", mid, out_ch, 3, 1, 1, rng);
        }
        emb = LinearLayer<Real>(reg, name + ".emb", time_dim, mid, rng);
        if (in_ch != out_ch) {
            skip = Conv2dLayer<Real>(reg, name + ".skip", in_ch, out_ch, 1, 1, 0, rng);
        }
    }

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x, Var<Real> temb) const {
        Var<Real> h = conv0(tp, tp.silu(norm0(tp, x)));
        h = tp.add_bias_nc(h, emb(tp, tp.silu(temb)));
        h = conv1(tp, tp.silu(norm1(tp, h)));
        if (conv2) h = (*conv2)(tp, tp.silu((*norm2)(tp, h)));
        Var<Real> s = skip ? (*skip)(tp, x) : x;
        return tp.add(h, s);
    }
};

template <typename Real>
struct Downsample {
    Conv2dLayer<Real> conv;

    Downsample() = default;
    Downsample(ParamRegistry<Real>& reg, const std::string& name, int in_ch, int out_ch, Rng& rng)
        : conv(reg, name, in_ch, out_ch, 3, 2, 1, rng) {}

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const { return conv(tp, std::move(x)); }
};

template <typename Real>
struct UpsampleConv {
    Conv2dLayer<Real> conv;

    UpsampleConv() = default;
    UpsampleConv(ParamRegistry<Real>& reg, const std::string& name, int in_ch, int out_ch,
                 Rng& rng)
        : conv(reg, name, in_ch, out_ch, 3, 1, 1, rng) {}

    Var<Real> operator()(Tape<Real>& tp, Var<Real> x) const {
        return conv(tp, tp.upsample_nearest2x(std::move(x)));
    }
};

}  // namespace ctrldiff
