#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "ctrldiff/backbone.hpp"
#include "support/param_oracle.hpp"

using namespace ctrldiff;

namespace {

BackboneConfig small_cfg() {
    BackboneConfig c;
    c.in_channels = 1;
    c.base_channels = 8;
    c.channel_multipliers = {1, 2};
    c.mid_channels = 16;
    c.num_res_blocks_per_level = 1;
    c.time_embed_dim = 32;
    c.image_size = 16;
    return c;
}

BackboneConfig tiny_cfg() {
    BackboneConfig c;
    c.in_channels = 1;
    c.base_channels = 4;
    c.channel_multipliers = {1, 2};
    c.mid_channels = 8;
    c.num_res_blocks_per_level = 1;
    c.time_embed_dim = 8;
    c.image_size = 8;
    return c;
}

}  // namespace

TEST_CASE("build is deterministic for identical (config, seed)") {
    Backbone<float> a(small_cfg(), 7), b(small_cfg(), 7);
    REQUIRE(a.registry.items().size() == b.registry.items().size());
    for (size_t i = 0; i < a.registry.items().size(); ++i) {
        const auto& pa = *a.registry.items()[i];
        const auto& pb = *b.registry.items()[i];
        REQUIRE(pa.name == pb.name);
        REQUIRE(pa.value.shape() == pb.value.shape());
        for (int64_t j = 0; j < pa.value.numel(); ++j) REQUIRE(pa.value[j] == pb.value[j]);
    }
    Backbone<float> c(small_cfg(), 8);
    bool differ = false;
    for (size_t i = 0; i < a.registry.items().size() && !differ; ++i) {
        const auto& pa = *a.registry.items()[i];
        const auto& pc = *c.registry.items()[i];
        for (int64_t j = 0; j < pa.value.numel(); ++j) {
            if (pa.value[j] != pc.value[j]) {
                differ = true;
                break;
            }
        }
    }
    REQUIRE(differ);
}

TEST_CASE("registry total matches the shape-enumeration oracle") {
    BackboneConfig cfg = small_cfg();
    Backbone<float> bb(cfg, 3);
    auto oracle = param_oracle::backbone_params(cfg);
    REQUIRE(bb.registry.total_params() == oracle.total);

    // registry invariants: unique names, total = sum of shape products
    std::set<std::string> names;
    int64_t total = 0;
    for (const auto& p : bb.registry.items()) {
        REQUIRE(names.insert(p->name).second);
        total += p->value.numel();
    }
    REQUIRE(total == bb.registry.total_params());
}

TEST_CASE("forward shape contract and purity") {
    Backbone<float> bb(small_cfg(), 11);
    Rng rng(4);
    Tensor<float> x = Tensor<float>::randn({2, 1, 16, 16}, rng);
    Tensor<float> y1 = bb.forward(x, 5);
    Tensor<float> y2 = bb.forward(x, 5);
    REQUIRE(y1.shape() == x.shape());
    for (int64_t i = 0; i < y1.numel(); ++i) REQUIRE(y1[i] == y2[i]);
}

TEST_CASE("zero injection is neutral bit-exactly") {
    Backbone<float> bb(small_cfg(), 11);
    Rng rng(5);
    Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, rng);
    Tensor<float> zeros({1, bb.port.channels, bb.port.spatial, bb.port.spatial});
    Tensor<float> with = bb.forward(x, 3, &zeros);
    Tensor<float> without = bb.forward(x, 3);
    for (int64_t i = 0; i < with.numel(); ++i) REQUIRE(with[i] == without[i]);
}

TEST_CASE("injection shape mismatch names both shapes") {
    Backbone<float> bb(small_cfg(), 11);
    Rng rng(6);
    Tensor<float> x = Tensor<float>::randn({1, 1, 16, 16}, rng);
    Tensor<float> bad({1, 3, 4, 4});
    REQUIRE_THROWS_WITH(bb.forward(x, 3, &bad),
                        Catch::Matchers::ContainsSubstring("expected") &&
                            Catch::Matchers::ContainsSubstring("(1, 3, 4, 4)"));
}

TEST_CASE("read_mid_features shape and purity") {
    Backbone<float> bb(small_cfg(), 11);
    Rng rng(7);
    Tensor<float> x = Tensor<float>::randn({2, 1, 16, 16}, rng);
    Tensor<float> m1 = bb.read_mid_features(x, 4);
    Tensor<float> m2 = bb.read_mid_features(x, 4);
    REQUIRE(m1.shape() == std::vector<int64_t>{2, bb.port.channels, bb.port.spatial,
                                               bb.port.spatial});
    for (int64_t i = 0; i < m1.numel(); ++i) REQUIRE(m1[i] == m2[i]);
}

TEST_CASE("hand-traced single-level encoder") {
    // one level; stem forced to a doubling delta kernel, res block forced to
    // the identity. mid input must equal 2x broadcast over channels.
    BackboneConfig cfg;
    cfg.in_channels = 1;
    cfg.base_channels = 4;
    cfg.channel_multipliers = {1};
    cfg.mid_channels = 4;
    cfg.num_res_blocks_per_level = 1;
    cfg.time_embed_dim = 8;
    cfg.image_size = 8;
    Backbone<double> bb(cfg, 1);
    for (const auto& p : bb.registry.items()) p->value.fill(0.0);
    auto stem_w = bb.registry.at("stem.weight");
    for (int co = 0; co < 4; ++co) stem_w->value.at(co, 0, 1, 1) = 2.0;  // center tap
    // res block: zero convs push everything through the identity skip
    Rng rng(8);
    Tensor<double> x = Tensor<double>::randn({1, 1, 8, 8}, rng);
    Tensor<double> mid = bb.read_mid_features(x, 1);
    for (int c = 0; c < 4; ++c) {
        for (int h = 0; h < 8; ++h) {
            for (int w = 0; w < 8; ++w) {
                REQUIRE(mid.at(0, c, h, w) == 2.0 * x.at(0, 0, h, w));
            }
        }
    }
}

TEST_CASE("mid feature statistics match the recorded golden values") {
    std::string path = std::string(CTRLDIFF_GOLDEN_DIR) + "/backbone_mid_stats.json";
    Backbone<double> bb(small_cfg(), 2024);
    Rng rng(31337);
    Tensor<double> x = Tensor<double>::randn({1, 1, 16, 16}, rng);
    Tensor<double> mid = bb.read_mid_features(x, 7);
    double mean = 0, var = 0;
    for (int64_t i = 0; i < mid.numel(); ++i) mean += mid[i];
    mean /= static_cast<double>(mid.numel());
    for (int64_t i = 0; i < mid.numel(); ++i) var += (mid[i] - mean) * (mid[i] - mean);
    var /= static_cast<double>(mid.numel());

    if (!std::filesystem::exists(path)) {
        // first run records the golden values
        nlohmann::json j = {{"mean", mean}, {"variance", var}};
        std::ofstream f(path);
        f << j.dump(2) << "\n";
        SUCCEED("golden file created");
        return;
    }
    nlohmann::json j = nlohmann::json::parse(std::ifstream(path));
    REQUIRE(mean == Catch::Approx(j.at("mean").get<double>()).margin(1e-9));
    REQUIRE(var == Catch::Approx(j.at("variance").get<double>()).margin(1e-9));
}

TEST_CASE("analytic gradients match finite differences on a tiny config") {
    Backbone<double> bb(tiny_cfg(), 5);
    Rng rng(17);
    Tensor<double> x = Tensor<double>::randn({1, 1, 8, 8}, rng);
    Tensor<double> target = Tensor<double>::randn({1, 1, 8, 8}, rng);
    std::vector<int> ts = {3};

    auto loss_value = [&]() {
        Tape<double> tp(false);
        return tp.mse(bb.forward_t(tp, tp.input(x), ts), target)->value[0];
    };
    bb.registry.set_all_trainable(true);
    bb.registry.zero_grads();
    {
        Tape<double> tp;
        tp.backward(tp.mse(bb.forward_t(tp, tp.input(x), ts), target));
    }

    // 10 randomly chosen parameters, central differences with step 1e-4
    Rng pick(99);
    const auto& items = bb.registry.items();
    for (int k = 0; k < 10; ++k) {
        const auto& p = items[pick.next_u64() % items.size()];
        int64_t idx = static_cast<int64_t>(pick.next_u64() % static_cast<uint64_t>(p->value.numel()));
        double saved = p->value[idx];
        const double step = 1e-4;
        p->value[idx] = saved + step;
        double up = loss_value();
        p->value[idx] = saved - step;
        double dn = loss_value();
        p->value[idx] = saved;
        double fd = (up - dn) / (2 * step);
        double ana = p->grad[idx];
        INFO(p->name << "[" << idx << "] fd=" << fd << " analytic=" << ana);
        REQUIRE(std::abs(fd - ana) <= 1e-3 * std::max({1.0, std::abs(fd), std::abs(ana)}));
    }
}

TEST_CASE("perturbing any registered parameter changes the output") {
    Backbone<float> bb(tiny_cfg(), 5);
    Rng rng(18);
    Tensor<float> x = Tensor<float>::randn({1, 1, 8, 8}, rng);
    Tensor<float> base = bb.forward(x, 2);
    Rng pick(55);
    const auto& items = bb.registry.items();
    for (int k = 0; k < 10; ++k) {
        const auto& p = items[pick.next_u64() % items.size()];
        int64_t idx = static_cast<int64_t>(pick.next_u64() % static_cast<uint64_t>(p->value.numel()));
        float saved = p->value[idx];
        p->value[idx] = saved + 1.0f;
        Tensor<float> out = bb.forward(x, 2);
        p->value[idx] = saved;
        bool differ = false;
        for (int64_t i = 0; i < out.numel(); ++i) differ |= out[i] != base[i];
        INFO("parameter " << p->name);
        REQUIRE(differ);
    }
}

TEST_CASE("config validation") {
    BackboneConfig c = small_cfg();
    c.image_size = 15;  // not divisible by 2^(levels-1)
    REQUIRE_THROWS(Backbone<float>(c, 1));
    c = small_cfg();
    c.base_channels = 0;
    REQUIRE_THROWS(Backbone<float>(c, 1));
    c = small_cfg();
    c.channel_multipliers = {};
    REQUIRE_THROWS(Backbone<float>(c, 1));
}
