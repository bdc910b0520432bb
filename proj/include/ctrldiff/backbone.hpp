#pragma once

#include <string>
#include <vector>

#include "ctrldiff/autodiff.hpp"
#include "ctrldiff/nn.hpp"
#include "ctrldiff/registry.hpp"

namespace ctrldiff {

struct BackboneConfig {
    int in_channels = 1;
    int base_channels = 32;
    std::vector<int> channel_multipliers = {1, 2, 4};
    int mid_channels = 128;
    int num_res_blocks_per_level = 1;
    int time_embed_dim = 128;
    int image_size = 64;

    int levels() const { return static_cast<int>(channel_multipliers.size()); }
    int level_channels(int i) const { return base_channels * channel_multipliers.at(i); }
    int port_channels() const { return level_channels(levels() - 1); }
    int port_spatial() const { return image_size >> (levels() - 1); }
    // bottleneck width of the mid blocks
    int mid_hidden() const { return std::max(4, mid_channels / 4); }

    void validate() const {
        check(in_channels > 0 && base_channels > 0 && mid_channels > 0 &&
                  num_res_blocks_per_level > 0 && time_embed_dim > 0 && image_size > 0,
              "backbone config: all counts must be positive");
        check(!channel_multipliers.empty(), "backbone config: need at least one level");
        for (int m : channel_multipliers)
            check(m > 0, "backbone config: channel multipliers must be positive");
        check(time_embed_dim % 2 == 0, "backbone config: time_embed_dim must be even");
        int down = 1 << (levels() - 1);
        check(image_size % down == 0, "backbone config: image_size " +
                                          std::to_string(image_size) +
                                          " not divisible by 2^(levels-1) = " +
                                          std::to_string(down));
        check(image_size / down >= 4, "backbone config: bottom resolution below 4");
    }
};

// The single site where control features enter the denoiser.
struct InjectionPort {
    int channels = 0;
    int spatial = 0;
};

// Encoder + mid trunk, shared between the denoiser and the trainable-copy
// control branch (which duplicates exactly this part).
template <typename Real>
struct EncoderMid {
    BackboneConfig cfg;
    TimeEmbedding<Real> time;
    Conv2dLayer<Real> stem;
    std::vector<std::vector<ResBlock<Real>>> level_res;
    std::vector<Downsample<Real>> downs;
    std::vector<ResBlock<Real>> mid_blocks;

    EncoderMid() = default;
    EncoderMid(ParamRegistry<Real>& reg, const std::string& prefix, const BackboneConfig& c,
               Rng& rng)
        : cfg(c) {
        stem = Conv2dLayer<Real>(reg, prefix + "stem", c.in_channels, c.level_channels(0), 3, 1,
                                 1, rng);
        time = TimeEmbedding<Real>(reg, prefix + "time", c.time_embed_dim, rng);
        int L = c.levels();
        level_res.resize(static_cast<size_t>(L));
        for (int i = 0; i < L; ++i) {
            int ch = c.level_channels(i);
            for (int j = 0; j < c.num_res_blocks_per_level; ++j) {
                level_res[static_cast<size_t>(i)].emplace_back(
                    reg, prefix + "enc." + std::to_string(i) + ".res." + std::to_string(j), ch,
                    ch, c.time_embed_dim, rng);
            }
            if (i + 1 < L) {
                downs.emplace_back(reg, prefix + "enc." + std::to_string(i) + ".down", ch,
                                   c.level_channels(i + 1), rng);
            }
        }
        mid_blocks.emplace_back(reg, prefix + "mid.0", c.port_channels(), c.mid_channels,
                                c.time_embed_dim, rng, c.mid_hidden());
        mid_blocks.emplace_back(reg, prefix + "mid.1", c.mid_channels, c.mid_channels,
                                c.time_embed_dim, rng, c.mid_hidden());
    }

    struct EncOut {
        std::vector<Var<Real>> level_out;  // per-level features (post res blocks)
        Var<Real> mid_in;                  // injection-port features, pre-injection
        Var<Real> temb;
    };

    // level_add, when given, is added to each level output (bridge taps).
    EncOut encode(Tape<Real>& tp, Var<Real> x, const std::vector<int>& ts,
                  const std::vector<Var<Real>>* level_add = nullptr) const {
        EncOut out;
        out.temb = time(tp, ts);
        Var<Real> h = stem(tp, std::move(x));
        int L = cfg.levels();
        for (int i = 0; i < L; ++i) {
            for (const auto& res : level_res[static_cast<size_t>(i)]) h = res(tp, h, out.temb);
            if (level_add) h = tp.add(h, level_add->at(static_cast<size_t>(i)));
            out.level_out.push_back(h);
            if (i + 1 < L) h = downs[static_cast<size_t>(i)](tp, h);
        }
        out.mid_in = h;
        return out;
    }

    Var<Real> mid(Tape<Real>& tp, Var<Real> mid_in, Var<Real> temb) const {
        Var<Real> h = std::move(mid_in);
        for (const auto& blk : mid_blocks) h = blk(tp, h, temb);
        return h;
    }
};

// Small encoder-mid-decoder denoiser with an addressable parameter registry
// and one additive injection port at the mid-block input. Forward evaluation
// never mutates parameters, so concurrent calls on one instance are safe;
// training mutates parameters and needs exclusive access.
template <typename Real>
struct Backbone {
    BackboneConfig cfg;
    ParamRegistry<Real> registry;
    InjectionPort port;

    EncoderMid<Real> trunk;
    std::vector<std::vector<ResBlock<Real>>> dec_res;
    std::vector<UpsampleConv<Real>> ups;
    GroupNormLayer<Real> out_norm;
    Conv2dLayer<Real> out_conv;

    Backbone(const BackboneConfig& c, uint64_t seed) : cfg(c) {
        cfg.validate();
        Rng rng(seed);
        port.channels = cfg.port_channels();
        port.spatial = cfg.port_spatial();

        trunk = EncoderMid<Real>(registry, "", cfg, rng);
        int L = cfg.levels();
        dec_res.resize(static_cast<size_t>(L));
        for (int i = L - 1; i >= 0; --i) {
            int ch = cfg.level_channels(i);
            int in_ch = (i == L - 1 ? cfg.mid_channels : ch) + ch;  // concat with skip
            for (int j = 0; j < cfg.num_res_blocks_per_level; ++j) {
                dec_res[static_cast<size_t>(i)].emplace_back(
                    registry, "dec." + std::to_string(i) + ".res." + std::to_string(j),
                    j == 0 ? in_ch : ch, ch, cfg.time_embed_dim, rng);
            }
            if (i > 0) {
                ups.emplace_back(registry, "dec." + std::to_string(i) + ".up", ch,
                                 cfg.level_channels(i - 1), rng);
            }
        }
        out_norm = GroupNormLayer<Real>(registry, "out.norm", cfg.level_channels(0));
        out_conv = Conv2dLayer<Real>(registry, "out.conv", cfg.level_channels(0),
                                     cfg.in_channels, 3, 1, 1, rng);
    }

    void require_input(const Tensor<Real>& x) const {
        check(x.ndim() == 4 && x.dim(1) == cfg.in_channels && x.dim(2) == cfg.image_size &&
                  x.dim(3) == cfg.image_size,
              "backbone input must be (n, " + std::to_string(cfg.in_channels) + ", " +
                  std::to_string(cfg.image_size) + ", " + std::to_string(cfg.image_size) +
                  "), got " + x.shape_str());
    }

    void require_port_shape(const Tensor<Real>& injected) const {
        check(injected.ndim() == 4 && injected.dim(1) == port.channels &&
                  injected.dim(2) == port.spatial && injected.dim(3) == port.spatial,
              "injection shape mismatch: expected (n, " + std::to_string(port.channels) + ", " +
                  std::to_string(port.spatial) + ", " + std::to_string(port.spatial) +
                  "), got " + injected.shape_str());
    }

    // decode from mid output down to the image; mid_out_add is the trainable
    // copy's final bridge, added to the mid output when present
    Var<Real> decode(Tape<Real>& tp, Var<Real> mid_out,
                     const typename EncoderMid<Real>::EncOut& enc,
                     Var<Real> mid_out_add = nullptr) const {
        Var<Real> d = mid_out_add ? tp.add(mid_out, mid_out_add) : mid_out;
        int L = cfg.levels();
        size_t up_idx = 0;
        for (int i = L - 1; i >= 0; --i) {
            d = tp.concat_ch(d, enc.level_out[static_cast<size_t>(i)]);
            for (const auto& res : dec_res[static_cast<size_t>(i)]) d = res(tp, d, enc.temb);
            if (i > 0) d = ups[up_idx++](tp, d);
        }
        return out_conv(tp, tp.silu(out_norm(tp, d)));
    }

    // Tape-level forward. injected (optional) is added to the mid-block input;
    // level_add/mid_out_add (optional) are the zero-conv bridge additions.
    Var<Real> forward_t(Tape<Real>& tp, Var<Real> x, const std::vector<int>& ts,
                        Var<Real> injected = nullptr,
                        const std::vector<Var<Real>>* level_add = nullptr,
                        Var<Real> mid_out_add = nullptr) const {
        auto enc = trunk.encode(tp, std::move(x), ts, level_add);
        Var<Real> mid_in = enc.mid_in;
        if (injected) {
            require_port_shape(injected->value);
            mid_in = tp.add(mid_in, injected);
        }
        Var<Real> m = trunk.mid(tp, mid_in, enc.temb);
        return decode(tp, m, enc, std::move(mid_out_add));
    }

    // plain evaluation: same timestep for the whole batch
    Tensor<Real> forward(const Tensor<Real>& x, int t, const Tensor<Real>* injected = nullptr) const {
        require_input(x);
        Tape<Real> tp(false);
        std::vector<int> ts(static_cast<size_t>(x.dim(0)), t);
        Var<Real> inj = nullptr;
        if (injected) {
            require_port_shape(*injected);
            inj = tp.input(*injected);
        }
        return forward_t(tp, tp.input(x), ts, inj)->value;
    }

    // injection-port features of this forward pass, pre-injection
    Tensor<Real> read_mid_features(const Tensor<Real>& x, int t) const {
        require_input(x);
        Tape<Real> tp(false);
        std::vector<int> ts(static_cast<size_t>(x.dim(0)), t);
        return trunk.encode(tp, tp.input(x), ts).mid_in->value;
    }
};

template <typename Real>
Backbone<Real> build_backbone(const BackboneConfig& cfg, uint64_t seed) {
    return Backbone<Real>(cfg, seed);
}

}  // namespace ctrldiff
