#include <catch2/catch_amalgamated.hpp>

#include "ctrldiff/control.hpp"
#include "ctrldiff/finetune.hpp"
#include "support/param_oracle.hpp"

using namespace ctrldiff;

namespace {

BackboneConfig bb_cfg() {
    BackboneConfig c;
    c.in_channels = 1;
    c.base_channels = 4;
    c.channel_multipliers = {1, 2};
    c.mid_channels = 8;
    c.num_res_blocks_per_level = 1;
    c.time_embed_dim = 8;
    c.image_size = 16;
    return c;
}

ControlExtractorConfig ex_cfg() {
    ControlExtractorConfig c;
    c.in_channels = 1;
    c.num_blocks = 1;
    c.channels_per_stage = {4, 4};
    c.downsample_to = 8;
    c.out_channels = 8;
    return c;
}

}  // namespace

TEST_CASE("cross_normalize hand cases") {
    SECTION("[0,4] against [1,3] gives [-2,2]") {
        Tensor<double> xc({1, 1, 1, 2}), xm({1, 1, 1, 2});
        xc[0] = 0.0;
        xc[1] = 4.0;
        xm[0] = 1.0;
        xm[1] = 3.0;
        Tensor<double> gamma = Tensor<double>::ones({1});
        Tensor<double> out = cross_normalize(xc, xm, gamma, 0.0);
        REQUIRE(out[0] == Catch::Approx(-2.0).epsilon(1e-12));
        REQUIRE(out[1] == Catch::Approx(2.0).epsilon(1e-12));
    }
    SECTION("self-normalization gives zero mean, unit variance per channel") {
        Rng rng(3);
        Tensor<double> x = Tensor<double>::randn({2, 3, 6, 6}, rng);
        for (int64_t i = 0; i < x.numel(); ++i) x[i] = 0.5 + 2.5 * x[i];
        Tensor<double> gamma = Tensor<double>::ones({3});
        Tensor<double> out = cross_normalize(x, x, gamma, 0.0);
        int64_t hw = 36;
        for (int n = 0; n < 2; ++n) {
            for (int c = 0; c < 3; ++c) {
                double mean = 0, var = 0;
                for (int64_t i = 0; i < hw; ++i) mean += out[(n * 3 + c) * hw + i];
                mean /= hw;
                for (int64_t i = 0; i < hw; ++i) {
                    double d = out[(n * 3 + c) * hw + i] - mean;
                    var += d * d;
                }
                var /= hw;
                REQUIRE(std::abs(mean) < 1e-12);
                REQUIRE(var == Catch::Approx(1.0).epsilon(1e-12));
            }
        }
    }
    SECTION("gamma = 0 zeroes the output") {
        Rng rng(5);
        Tensor<double> xc = Tensor<double>::randn({1, 2, 4, 4}, rng);
        Tensor<double> xm = Tensor<double>::randn({1, 2, 4, 4}, rng);
        Tensor<double> gamma = Tensor<double>::zeros({2});
        Tensor<double> out = cross_normalize(xc, xm, gamma, 1e-5);
        for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == 0.0);
    }
    SECTION("invariant to joint affine rescaling") {
        Rng rng(7);
        Tensor<double> xc = Tensor<double>::randn({1, 2, 5, 5}, rng);
        Tensor<double> xm = Tensor<double>::randn({1, 2, 5, 5}, rng);
        Tensor<double> gamma({2});
        gamma[0] = 1.3;
        gamma[1] = -0.4;
        Tensor<double> base = cross_normalize(xc, xm, gamma, 0.0);
        double a = 3.7, b = -1.9;
        Tensor<double> xc2(xc.shape()), xm2(xm.shape());
        for (int64_t i = 0; i < xc.numel(); ++i) {
            xc2[i] = a * xc[i] + b;
            xm2[i] = a * xm[i] + b;
        }
        Tensor<double> scaled = cross_normalize(xc2, xm2, gamma, 0.0);
        for (int64_t i = 0; i < base.numel(); ++i) {
            REQUIRE(scaled[i] == Catch::Approx(base[i]).margin(1e-12));
        }
    }
    SECTION("per-channel statistics stay near unit for random maps") {
        Rng rng(11);
        for (int trial = 0; trial < 20; ++trial) {
            Tensor<double> x = Tensor<double>::randn({1, 4, 8, 8}, rng);
            for (int64_t i = 0; i < x.numel(); ++i) x[i] *= 0.1 + trial * 0.2;
            Tensor<double> gamma = Tensor<double>::ones({4});
            Tensor<double> out = cross_normalize(x, x, gamma, 1e-5);
            for (int c = 0; c < 4; ++c) {
                double mean = 0, var = 0;
                for (int i = 0; i < 64; ++i) mean += out[c * 64 + i];
                mean /= 64;
                for (int i = 0; i < 64; ++i) {
                    double d = out[c * 64 + i] - mean;
                    var += d * d;
                }
                var /= 64;
                REQUIRE(std::abs(mean) < 1e-6);
                REQUIRE(var >= 1.0 - 1e-3 - 1e-5);
                REQUIRE(var <= 1.0);
            }
        }
    }
    SECTION("errors") {
        Tensor<double> xc({1, 2, 2, 2}), xm({1, 3, 2, 2});
        Tensor<double> gamma = Tensor<double>::ones({2});
        REQUIRE_THROWS_WITH(cross_normalize(xc, xm, gamma, 1e-5),
                            Catch::Matchers::ContainsSubstring("channel mismatch"));
        Tensor<double> xm2({1, 2, 2, 2});
        xm2[0] = std::numeric_limits<double>::infinity();
        REQUIRE_THROWS_WITH(cross_normalize(xc, xm2, gamma, 1e-5),
                            Catch::Matchers::ContainsSubstring("non-finite"));
    }
}

TEST_CASE("zero_conv_forward") {
    ParamRegistry<float> reg;
    Rng rng(1);
    ZeroConv<float> z(reg, "z", 2, 2, rng);
    SECTION("fresh init maps everything to zero") {
        Rng r(2);
        Tensor<float> x = Tensor<float>::randn({1, 2, 3, 3}, r);
        Tensor<float> out = zero_conv_forward(z, x);
        for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == 0.0f);
    }
    SECTION("identity kernel reproduces the input") {
        z.conv.w->value.at(0, 0, 0, 0) = 1.0f;
        z.conv.w->value.at(1, 1, 0, 0) = 1.0f;
        Rng r(3);
        Tensor<float> x = Tensor<float>::randn({1, 2, 3, 3}, r);
        Tensor<float> out = zero_conv_forward(z, x);
        for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == x[i]);
    }
    SECTION("1x1 arithmetic: w=2, b=1, x=3 -> 7") {
        ParamRegistry<float> reg1;
        ZeroConv<float> z1(reg1, "z1", 1, 1, rng);
        z1.conv.w->value[0] = 2.0f;
        z1.conv.b->value[0] = 1.0f;
        Tensor<float> x = Tensor<float>::full({1, 1, 2, 2}, 3.0f);
        Tensor<float> out = zero_conv_forward(z1, x);
        for (int64_t i = 0; i < out.numel(); ++i) REQUIRE(out[i] == 7.0f);
    }
    SECTION("channel mismatch") {
        Tensor<float> x({1, 3, 2, 2});
        REQUIRE_THROWS(zero_conv_forward(z, x));
    }
}

TEST_CASE("controlnet at fresh init equals the plain forward bit-exactly") {
    Backbone<float> bb(bb_cfg(), 21);
    ControlNetBranch<float> br(ControlNetBranchConfig{4}, bb, 1, 22);
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, rng);
        Tensor<float> c = Tensor<float>::randn({1, 1, 16, 16}, rng);
        Tensor<float> with = controlnet_forward(bb, br, x, 3, c);
        Tensor<float> base = bb.forward(x, 3);
        for (int64_t i = 0; i < with.numel(); ++i) REQUIRE(with[i] == base[i]);
    }
}

TEST_CASE("branch copies the backbone encoder and mid weights") {
    Backbone<float> bb(bb_cfg(), 21);
    ControlNetBranch<float> br(ControlNetBranchConfig{4}, bb, 1, 22);
    int copied = 0;
    for (const auto& p : br.registry.items()) {
        const std::string prefix = "control.branch.";
        if (p->name.rfind(prefix, 0) != 0) continue;
        auto src = bb.registry.find(p->name.substr(prefix.size()));
        REQUIRE(src != nullptr);
        REQUIRE(src->value.shape() == p->value.shape());
        for (int64_t i = 0; i < src->value.numel(); ++i) REQUIRE(src->value[i] == p->value[i]);
        ++copied;
    }
    REQUIRE(copied > 0);
    // every zero conv starts exactly zero
    for (const auto& p : br.registry.items()) {
        if (p->name.rfind("control.zero.", 0) == 0) {
            for (int64_t i = 0; i < p->value.numel(); ++i) REQUIRE(p->value[i] == 0.0f);
        }
    }
}

TEST_CASE("gradient blocking at fresh initialization") {
    Backbone<double> bb(bb_cfg(), 21);
    ControlNetBranch<double> br(ControlNetBranchConfig{4}, bb, 1, 22);
    ControlNext<double> next(ex_cfg(), 16, 23);
    Rng rng(10);
    Tensor<double> x = Tensor<double>::randn({2, 1, 16, 16}, rng);
    Tensor<double> c = Tensor<double>::randn({2, 1, 16, 16}, rng);
    Tensor<double> target = Tensor<double>::randn({2, 1, 16, 16}, rng);
    std::vector<int> ts = {2, 5};

    bb.registry.set_all_trainable(false);
    br.registry.set_all_trainable(true);
    br.registry.zero_grads();
    {
        Tape<double> tp;
        tp.backward(tp.mse(controlnet_forward_t(tp, bb, br, tp.input(x), ts, tp.input(c)), target));
    }
    double zero_conv_grad = 0.0;
    for (const auto& p : br.registry.items()) {
        bool is_bridge = p->name.rfind("control.zero.", 0) == 0;
        if (is_bridge) {
            for (int64_t i = 0; i < p->grad.numel(); ++i)
                zero_conv_grad += std::abs(p->grad[i]);
        } else {
            // everything upstream of a zero conv gets exactly zero gradient
            for (int64_t i = 0; i < p->grad.numel(); ++i) {
                INFO(p->name);
                REQUIRE(p->grad[i] == 0.0);
            }
        }
    }
    REQUIRE(zero_conv_grad > 0.0);

    // contrast: the extractor receives nonzero gradients for the same loss
    next.registry.set_all_trainable(true);
    next.registry.zero_grads();
    {
        Tape<double> tp;
        tp.backward(
            tp.mse(controlnext_forward_t(tp, bb, next, tp.input(x), ts, tp.input(c)), target));
    }
    double extractor_grad = 0.0;
    for (const auto& p : next.registry.items()) {
        for (int64_t i = 0; i < p->grad.numel(); ++i) extractor_grad += std::abs(p->grad[i]);
    }
    REQUIRE(extractor_grad > 0.0);
}

TEST_CASE("one step on the zero convs moves the output") {
    Backbone<double> bb(bb_cfg(), 21);
    ControlNetBranch<double> br(ControlNetBranchConfig{4}, bb, 1, 22);
    Rng rng(12);
    Tensor<double> x = Tensor<double>::randn({1, 1, 16, 16}, rng);
    Tensor<double> c = Tensor<double>::randn({1, 1, 16, 16}, rng);
    Tensor<double> target = Tensor<double>::randn({1, 1, 16, 16}, rng);
    Tensor<double> base = bb.forward(x, 3);

    bb.registry.set_all_trainable(false);
    br.registry.set_all_trainable(true);
    br.registry.zero_grads();
    {
        Tape<double> tp;
        tp.backward(tp.mse(controlnet_forward_t(tp, bb, br, tp.input(x), {3}, tp.input(c)), target));
    }
    for (const auto& p : br.registry.items()) {
        for (int64_t i = 0; i < p->value.numel(); ++i) p->value[i] -= 0.5 * p->grad[i];
    }
    Tensor<double> after = controlnet_forward(bb, br, x, 3, c);
    bool differ = false;
    for (int64_t i = 0; i < after.numel(); ++i) differ |= after[i] != base[i];
    REQUIRE(differ);
}

TEST_CASE("controlnext with gamma = 0 equals the plain forward bit-exactly") {
    Backbone<float> bb(bb_cfg(), 31);
    ControlNext<float> next(ex_cfg(), 16, 32);
    next.cn.gamma->value.fill(0.0f);
    Rng rng(13);
    for (int trial = 0; trial < 10; ++trial) {
        Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, rng);
        Tensor<float> c = Tensor<float>::randn({1, 1, 16, 16}, rng);
        Tensor<float> with = controlnext_forward(bb, next, x, 4, c);
        Tensor<float> base = bb.forward(x, 4);
        for (int64_t i = 0; i < with.numel(); ++i) REQUIRE(with[i] == base[i]);
    }
}

TEST_CASE("injected features land on the port scale") {
    // the injection is normalized by the main branch's statistics, so it
    // arrives on the port's O(1) scale instead of the extractor's raw range
    Backbone<float> bb(bb_cfg(), 31);
    ControlNext<float> next(ex_cfg(), 16, 32);
    Rng rng(14);
    Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, rng);
    Tensor<float> c = Tensor<float>::randn({1, 1, 16, 16}, rng);
    Tensor<float> xm = bb.read_mid_features(x, 4);
    Tensor<float> xc = next.extractor.forward(c);
    REQUIRE(xc.shape() == xm.shape());
    Tensor<float> inj = cross_normalize(xc, xm, next.cn);
    int64_t hw = static_cast<int64_t>(bb.port.spatial) * bb.port.spatial;
    for (int ch = 0; ch < bb.port.channels; ++ch) {
        double mean = 0, var = 0;
        for (int64_t i = 0; i < hw; ++i) mean += inj[ch * hw + i];
        mean /= static_cast<double>(hw);
        for (int64_t i = 0; i < hw; ++i) {
            double d = inj[ch * hw + i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(hw);
        REQUIRE(std::abs(mean) < 1.0);
        REQUIRE(var > 0.1);
        REQUIRE(var < 10.0);
    }
    // when the control features already share the port statistics the result
    // is exactly standardized
    Tensor<float> self = cross_normalize(xm, xm, next.cn);
    double mean = 0;
    for (int64_t i = 0; i < hw; ++i) mean += self[i];
    REQUIRE(std::abs(mean / static_cast<double>(hw)) < 1e-5);
}

TEST_CASE("build_extractor") {
    SECTION("deterministic init") {
        ControlNext<float> a(ex_cfg(), 16, 5), b(ex_cfg(), 16, 5);
        for (size_t i = 0; i < a.registry.items().size(); ++i) {
            const auto& pa = *a.registry.items()[i];
            const auto& pb = *b.registry.items()[i];
            REQUIRE(pa.name == pb.name);
            for (int64_t j = 0; j < pa.value.numel(); ++j) REQUIRE(pa.value[j] == pb.value[j]);
        }
    }
    SECTION("parameter count matches the oracle") {
        ControlNext<float> next(ex_cfg(), 16, 5);
        REQUIRE(next.registry.total_params() == param_oracle::controlnext_params(ex_cfg()));
    }
    SECTION("default extractor is under 10% of the default backbone") {
        BackboneConfig bc;      // defaults
        ControlExtractorConfig ec;  // defaults
        ControlNext<float> next(ec, bc.image_size, 5);
        Backbone<float> bb(bc, 1);
        REQUIRE(next.registry.total_params() <
                static_cast<int64_t>(0.10 * static_cast<double>(bb.registry.total_params())));
    }
    SECTION("output spatial size equals the port size") {
        ControlNext<float> next(ex_cfg(), 16, 5);
        Rng rng(6);
        Tensor<float> c = Tensor<float>::randn({3, 1, 16, 16}, rng);
        Tensor<float> out = next.extractor.forward(c);
        REQUIRE(out.shape() == std::vector<int64_t>{3, 8, 8, 8});
    }
    SECTION("rejects configs that cannot reach the port size by halvings") {
        ControlExtractorConfig bad = ex_cfg();
        bad.channels_per_stage = {4, 4, 4};  // would reach 4, not 8
        REQUIRE_THROWS_WITH(ControlNext<float>(bad, 16, 5),
                            Catch::Matchers::ContainsSubstring("halvings"));
    }
}

TEST_CASE("bridge shape mismatch names the bridge") {
    Backbone<float> bb(bb_cfg(), 21);
    ControlNetBranch<float> br(ControlNetBranchConfig{4}, bb, 1, 22);
    // sabotage one zero conv so its output channel count is wrong
    ParamRegistry<float> other;
    Rng rng(1);
    ZeroConv<float> bad(other, "bad", 4, 3, rng);
    br.zero[0] = bad;
    Rng r(2);
    Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, r);
    Tensor<float> c = Tensor<float>::randn({1, 1, 16, 16}, r);
    REQUIRE_THROWS_WITH(controlnet_forward(bb, br, x, 3, c),
                        Catch::Matchers::ContainsSubstring("control.zero.0"));
}
