#pragma once

#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrldiff/backbone.hpp"
#include "ctrldiff/control.hpp"
#include "ctrldiff/datagen.hpp"
#include "ctrldiff/finetune.hpp"

namespace ctrldiff {

// Versioned, strictly-parsed experiment configuration: unknown keys are
// errors so a typo never silently changes a run.
constexpr int kConfigVersion = 1;

namespace detail {

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& allowed,
                         const std::string& ctx) {
    check(j.is_object(), "config: " + ctx + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it) {
        check(allowed.count(it.key()) > 0, "config: unknown key '" + it.key() + "' in " + ctx);
    }
}

template <typename T>
T get_or(const nlohmann::json& j, const std::string& key, T fallback) {
    if (!j.contains(key)) return fallback;
    return j.at(key).get<T>();
}

}  // namespace detail

struct DatasetConfig {
    uint64_t seed = 77;
    int count = 256;
    int size = 64;
    ControlKind kind = ControlKind::Mask;
    int heldout_count = 16;

    // held-out controls come from an independent index stream
    uint64_t heldout_seed() const { return seed ^ 0x48E1D05EEDull; }

    void validate() const {
        check(count >= 1 && heldout_count >= 1, "dataset config: counts must be >= 1");
        check(size >= 16, "dataset config: size must be >= 16");
    }
};

struct CompareConfig {
    std::vector<uint64_t> seeds = {0, 1, 2};
    std::vector<Architecture> architectures = {Architecture::ControlNeXt,
                                               Architecture::ControlNet};
};

struct BenchSettings {
    int iters = 100;
    int warmup = 10;
};

struct RunConfig {
    int version = kConfigVersion;
    std::string run_name = "run";
    BackboneConfig backbone;
    ControlExtractorConfig extractor;
    ControlNetBranchConfig controlnet;
    Architecture architecture = Architecture::ControlNeXt;
    uint64_t backbone_seed = 42;
    uint64_t control_seed = 1;
    TrainConfig train;
    DatasetConfig dataset;
    BenchSettings bench;
    CompareConfig compare;
    std::string output_dir = "runs";

    void validate() const {
        check(version == kConfigVersion,
              "config: unsupported version " + std::to_string(version));
        check(!run_name.empty(), "config: run_name must not be empty");
        backbone.validate();
        extractor.validate(backbone.image_size);
        train.validate();
        dataset.validate();
        // cross-field consistency
        check(dataset.size == backbone.image_size,
              "config: dataset size must equal backbone image_size");
        check(extractor.downsample_to == backbone.port_spatial(),
              "config: extractor downsample_to (" + std::to_string(extractor.downsample_to) +
                  ") must equal the injection port size (" +
                  std::to_string(backbone.port_spatial()) + ")");
        check(extractor.out_channels == backbone.port_channels(),
              "config: extractor out_channels must equal the injection port channels");
        check(train.eval.num_controls <= dataset.heldout_count,
              "config: eval num_controls exceeds heldout_count");
        check(!compare.seeds.empty() && !compare.architectures.empty(),
              "config: compare needs seeds and architectures");
    }
};

// ---- json round trip --------------------------------------------------------

inline PredictionKind prediction_kind_from_string(const std::string& s) {
    if (s == "x") return PredictionKind::X;
    if (s == "eps") return PredictionKind::EPS;
    if (s == "v") return PredictionKind::V;
    fail("config: unknown prediction kind '" + s + "'");
}

inline Architecture architecture_from_string(const std::string& s) {
    if (s == "controlnet") return Architecture::ControlNet;
    if (s == "controlnext") return Architecture::ControlNeXt;
    fail("config: unknown architecture '" + s + "'");
}

inline ControlKind control_kind_from_string(const std::string& s) {
    if (s == "mask") return ControlKind::Mask;
    if (s == "edge") return ControlKind::Edge;
    fail("config: unknown control kind '" + s + "'");
}

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json j;
    j["version"] = c.version;
    j["run_name"] = c.run_name;
    j["output_dir"] = c.output_dir;
    j["backbone_seed"] = c.backbone_seed;
    j["control_seed"] = c.control_seed;
    j["architecture"] = to_string(c.architecture);
    j["backbone"] = {{"in_channels", c.backbone.in_channels},
                     {"base_channels", c.backbone.base_channels},
                     {"channel_multipliers", c.backbone.channel_multipliers},
                     {"mid_channels", c.backbone.mid_channels},
                     {"num_res_blocks_per_level", c.backbone.num_res_blocks_per_level},
                     {"time_embed_dim", c.backbone.time_embed_dim},
                     {"image_size", c.backbone.image_size}};
    j["extractor"] = {{"in_channels", c.extractor.in_channels},
                      {"num_blocks", c.extractor.num_blocks},
                      {"channels_per_stage", c.extractor.channels_per_stage},
                      {"downsample_to", c.extractor.downsample_to},
                      {"out_channels", c.extractor.out_channels}};
    j["controlnet"] = {{"hint_hidden", c.controlnet.hint_hidden}};
    j["train"] = {{"steps", c.train.steps},
                  {"batch_size", c.train.batch_size},
                  {"learning_rate", c.train.learning_rate},
                  {"seed", c.train.seed},
                  {"prediction_kind", to_string(c.train.prediction_kind)},
                  {"selector", c.train.selector.patterns},
                  {"eval_every", c.train.eval_every},
                  {"adherence_threshold", c.train.adherence_threshold},
                  {"pretrain_steps", c.train.pretrain_steps},
                  {"diffusion_steps", c.train.diffusion_steps},
                  {"beta_start", c.train.beta_start},
                  {"beta_end", c.train.beta_end},
                  {"eval",
                   {{"sample_steps", c.train.eval.sample_steps},
                    {"num_controls", c.train.eval.num_controls},
                    {"noise_seed", c.train.eval.noise_seed}}}};
    j["dataset"] = {{"seed", c.dataset.seed},
                    {"count", c.dataset.count},
                    {"size", c.dataset.size},
                    {"kind", to_string(c.dataset.kind)},
                    {"heldout_count", c.dataset.heldout_count}};
    j["bench"] = {{"iters", c.bench.iters}, {"warmup", c.bench.warmup}};
    nlohmann::json arch = nlohmann::json::array();
    for (Architecture a : c.compare.architectures) arch.push_back(to_string(a));
    j["compare"] = {{"seeds", c.compare.seeds}, {"architectures", arch}};
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    using detail::get_or;
    using detail::require_keys;
    require_keys(j, {"version", "run_name", "output_dir", "backbone_seed", "control_seed",
                     "architecture", "backbone", "extractor", "controlnet", "train", "dataset",
                     "bench", "compare"},
                 "top level");
    RunConfig c;
    c.version = get_or(j, "version", kConfigVersion);
    c.run_name = get_or<std::string>(j, "run_name", c.run_name);
    c.output_dir = get_or<std::string>(j, "output_dir", c.output_dir);
    c.backbone_seed = get_or(j, "backbone_seed", c.backbone_seed);
    c.control_seed = get_or(j, "control_seed", c.control_seed);
    if (j.contains("architecture")) {
        c.architecture = architecture_from_string(j.at("architecture").get<std::string>());
    }
    if (j.contains("backbone")) {
        const auto& b = j.at("backbone");
        require_keys(b, {"in_channels", "base_channels", "channel_multipliers", "mid_channels",
                         "num_res_blocks_per_level", "time_embed_dim", "image_size"},
                     "backbone");
        c.backbone.in_channels = get_or(b, "in_channels", c.backbone.in_channels);
        c.backbone.base_channels = get_or(b, "base_channels", c.backbone.base_channels);
        c.backbone.channel_multipliers =
            get_or(b, "channel_multipliers", c.backbone.channel_multipliers);
        c.backbone.mid_channels = get_or(b, "mid_channels", c.backbone.mid_channels);
        c.backbone.num_res_blocks_per_level =
            get_or(b, "num_res_blocks_per_level", c.backbone.num_res_blocks_per_level);
        c.backbone.time_embed_dim = get_or(b, "time_embed_dim", c.backbone.time_embed_dim);
        c.backbone.image_size = get_or(b, "image_size", c.backbone.image_size);
    }
    if (j.contains("extractor")) {
        const auto& e = j.at("extractor");
        require_keys(e, {"in_channels", "num_blocks", "channels_per_stage", "downsample_to",
                         "out_channels"},
                     "extractor");
        c.extractor.in_channels = get_or(e, "in_channels", c.extractor.in_channels);
        c.extractor.num_blocks = get_or(e, "num_blocks", c.extractor.num_blocks);
        c.extractor.channels_per_stage =
            get_or(e, "channels_per_stage", c.extractor.channels_per_stage);
        c.extractor.downsample_to = get_or(e, "downsample_to", c.extractor.downsample_to);
        c.extractor.out_channels = get_or(e, "out_channels", c.extractor.out_channels);
    }
    if (j.contains("controlnet")) {
        require_keys(j.at("controlnet"), {"hint_hidden"}, "controlnet");
        c.controlnet.hint_hidden = get_or(j.at("controlnet"), "hint_hidden",
                                          c.controlnet.hint_hidden);
    }
    if (j.contains("train")) {
        const auto& t = j.at("train");
        require_keys(t, {"steps", "batch_size", "learning_rate", "seed", "prediction_kind",
                         "selector", "eval_every", "adherence_threshold", "pretrain_steps",
                         "diffusion_steps", "beta_start", "beta_end", "eval"},
                     "train");
        c.train.steps = get_or(t, "steps", c.train.steps);
        c.train.batch_size = get_or(t, "batch_size", c.train.batch_size);
        c.train.learning_rate = get_or(t, "learning_rate", c.train.learning_rate);
        c.train.seed = get_or(t, "seed", c.train.seed);
        if (t.contains("prediction_kind")) {
            c.train.prediction_kind =
                prediction_kind_from_string(t.at("prediction_kind").get<std::string>());
        }
        c.train.selector.patterns = get_or(t, "selector", c.train.selector.patterns);
        c.train.eval_every = get_or(t, "eval_every", c.train.eval_every);
        c.train.adherence_threshold =
            get_or(t, "adherence_threshold", c.train.adherence_threshold);
        c.train.pretrain_steps = get_or(t, "pretrain_steps", c.train.pretrain_steps);
        c.train.diffusion_steps = get_or(t, "diffusion_steps", c.train.diffusion_steps);
        c.train.beta_start = get_or(t, "beta_start", c.train.beta_start);
        c.train.beta_end = get_or(t, "beta_end", c.train.beta_end);
        if (t.contains("eval")) {
            const auto& ev = t.at("eval");
            require_keys(ev, {"sample_steps", "num_controls", "noise_seed"}, "train.eval");
            c.train.eval.sample_steps = get_or(ev, "sample_steps", c.train.eval.sample_steps);
            c.train.eval.num_controls = get_or(ev, "num_controls", c.train.eval.num_controls);
            c.train.eval.noise_seed = get_or(ev, "noise_seed", c.train.eval.noise_seed);
        }
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        require_keys(d, {"seed", "count", "size", "kind", "heldout_count"}, "dataset");
        c.dataset.seed = get_or(d, "seed", c.dataset.seed);
        c.dataset.count = get_or(d, "count", c.dataset.count);
        c.dataset.size = get_or(d, "size", c.dataset.size);
        if (d.contains("kind")) {
            c.dataset.kind = control_kind_from_string(d.at("kind").get<std::string>());
        }
        c.dataset.heldout_count = get_or(d, "heldout_count", c.dataset.heldout_count);
    }
    if (j.contains("bench")) {
        require_keys(j.at("bench"), {"iters", "warmup"}, "bench");
        c.bench.iters = get_or(j.at("bench"), "iters", c.bench.iters);
        c.bench.warmup = get_or(j.at("bench"), "warmup", c.bench.warmup);
    }
    if (j.contains("compare")) {
        const auto& cm = j.at("compare");
        require_keys(cm, {"seeds", "architectures"}, "compare");
        c.compare.seeds = get_or(cm, "seeds", c.compare.seeds);
        if (cm.contains("architectures")) {
            c.compare.architectures.clear();
            for (const auto& a : cm.at("architectures")) {
                c.compare.architectures.push_back(
                    architecture_from_string(a.get<std::string>()));
            }
        }
    }
    c.validate();
    return c;
}

inline RunConfig parse_config_text(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        fail(std::string("config: invalid json: ") + e.what());
    }
    return config_from_json(j);
}

inline std::string serialize_config(const RunConfig& c) {
    return to_json(c).dump(2) + "\n";
}

}  // namespace ctrldiff
