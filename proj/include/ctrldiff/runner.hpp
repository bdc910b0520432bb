#pragma once

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ctrldiff/bench.hpp"
#include "ctrldiff/checkpoint.hpp"
#include "ctrldiff/config.hpp"
#include "ctrldiff/finetune.hpp"
#include "ctrldiff/lora.hpp"
#include "ctrldiff/report.hpp"

namespace ctrldiff {

// Experiment plumbing shared by the CLI, the comparison harness and the
// acceptance suite. One run owns its own models, dataset and RNG streams, so
// sub-experiments are isolated and reruns reproduce artifacts byte-for-byte.

template <typename Real>
std::vector<ControlSample<Real>> make_train_set(const DatasetConfig& d) {
    return generate<Real>(d.seed, d.count, d.size, d.kind);
}

template <typename Real>
std::vector<ControlSample<Real>> make_heldout_set(const DatasetConfig& d, int count = -1) {
    return generate<Real>(d.heldout_seed(), count < 0 ? d.heldout_count : count, d.size, d.kind);
}

template <typename Real>
ControlModule<Real> build_control(const RunConfig& cfg, Architecture arch,
                                  const Backbone<Real>& bb, uint64_t seed) {
    ControlModule<Real> cm;
    cm.arch = arch;
    if (arch == Architecture::ControlNeXt) {
        cm.next.emplace(cfg.extractor, cfg.backbone.image_size, seed);
    } else {
        cm.cnet.emplace(cfg.controlnet, bb, cfg.extractor.in_channels, seed);
    }
    return cm;
}

inline NoiseSchedule schedule_of(const RunConfig& cfg) {
    return make_schedule(cfg.train.diffusion_steps, cfg.train.beta_start, cfg.train.beta_end);
}

// ---- checkpoints -------------------------------------------------------------

template <typename Real>
void save_checkpoint(const std::string& path, const RunConfig& cfg, const Backbone<Real>& bb,
                     const ControlModule<Real>* ctrl) {
    Archive ar;
    ar.meta = {{"kind", "checkpoint"},
               {"format_version", 1},
               {"has_control", ctrl != nullptr},
               {"config", to_json(cfg)}};
    append_registry(ar, bb.registry);
    if (ctrl) append_registry(ar, ctrl->registry());
    write_archive(path, ar);
}

template <typename Real>
struct CheckpointBundle {
    RunConfig cfg;
    Backbone<Real> backbone;
    std::optional<ControlModule<Real>> control;
};

template <typename Real>
CheckpointBundle<Real> load_checkpoint(const std::string& path) {
    Archive ar = read_archive(path);
    check(ar.meta.value("kind", "") == "checkpoint", path + " is not a checkpoint archive");
    RunConfig cfg = config_from_json(ar.meta.at("config"));
    Backbone<Real> bb(cfg.backbone, cfg.backbone_seed);
    load_registry(ar, bb.registry);
    std::optional<ControlModule<Real>> cm;
    if (ar.meta.value("has_control", false)) {
        cm = build_control<Real>(cfg, cfg.architecture, bb, cfg.control_seed);
        load_registry(ar, cm->registry());
    }
    return {std::move(cfg), std::move(bb), std::move(cm)};
}

// ---- parameter snapshots (for shared pretrained starts) ----------------------

template <typename Real>
std::vector<Tensor<Real>> snapshot_params(const ParamRegistry<Real>& reg) {
    std::vector<Tensor<Real>> out;
    for (const auto& p : reg.items()) out.push_back(p->value);
    return out;
}

template <typename Real>
void restore_params(ParamRegistry<Real>& reg, const std::vector<Tensor<Real>>& snap) {
    check(snap.size() == reg.items().size(), "snapshot does not match registry");
    for (size_t i = 0; i < snap.size(); ++i) reg.items()[i]->value = snap[i];
}

// ---- train pipeline ----------------------------------------------------------

struct TrainPaths {
    std::string run_dir;
    std::string checkpoint() const { return run_dir + "/checkpoint"; }
    std::string trace() const { return run_dir + "/trace.csv"; }
    std::string resolved_config() const { return run_dir + "/config.resolved"; }
    std::string reports_dir() const { return run_dir + "/reports"; }
};

inline std::string trace_to_csv(const ConvergenceTrace& t) {
    std::string out = "step,loss,adherence\n";
    for (const auto& r : t.records) {
        out += std::to_string(r.step) + "," + fmt_g(r.loss) + "," + fmt_g(r.adherence) + "\n";
    }
    return out;
}

// dataset -> build -> pretrain -> conditional train -> artifacts
template <typename Real>
ConvergenceTrace run_train(const RunConfig& cfg, const TrainPaths& paths,
                           const std::function<void(const std::string&)>& progress = {}) {
    auto note = [&](const std::string& s) {
        if (progress) progress(s);
    };
    NoiseSchedule sched = schedule_of(cfg);
    note("dataset");
    auto data = make_train_set<Real>(cfg.dataset);
    auto heldout = make_heldout_set<Real>(cfg.dataset);
    note("build");
    Backbone<Real> bb(cfg.backbone, cfg.backbone_seed);
    ControlModule<Real> ctrl = build_control<Real>(cfg, cfg.architecture, bb, cfg.control_seed);
    TrainConfig tc = cfg.train;
    tc.architecture = cfg.architecture;
    note("pretrain");
    if (tc.pretrain_steps > 0) pretrain_backbone(bb, data, sched, tc);
    note("train");
    ConvergenceTrace trace = train(tc, bb, ctrl, data, heldout, sched);
    note("write-artifacts");
    std::filesystem::create_directories(paths.run_dir);
    save_checkpoint(paths.checkpoint(), cfg, bb, &ctrl);
    write_text_file(paths.trace(), trace_to_csv(trace));
    write_text_file(paths.resolved_config(), serialize_config(cfg));
    return trace;
}

// ---- sample pipeline ---------------------------------------------------------

struct SampleResult {
    std::vector<double> scores;
    double mean_adherence = 0.0;
};

template <typename Real>
SampleResult run_sample(const std::string& checkpoint_path, int count, uint64_t seed,
                        const std::string& out_dir, const std::string& lora_path = "") {
    CheckpointBundle<Real> bundle = load_checkpoint<Real>(checkpoint_path);
    const RunConfig& cfg = bundle.cfg;
    NoiseSchedule sched = schedule_of(cfg);

    LoraHandle<Real> lora;
    if (!lora_path.empty()) {
        LoraAdapter<Real> ad = load_lora<Real>(lora_path);
        lora = lora_attach(ad, bundle.backbone.registry);
    }

    auto heldout = make_heldout_set<Real>(cfg.dataset, count);
    int S = cfg.backbone.image_size;
    Tensor<Real> controls({count, 1, S, S});
    for (int i = 0; i < count; ++i) {
        for (int64_t j = 0; j < static_cast<int64_t>(S) * S; ++j) {
            controls[static_cast<int64_t>(i) * S * S + j] = heldout[static_cast<size_t>(i)].control[j];
        }
    }
    Rng rng(seed ^ 0x5A3B1Eull);
    const ControlModule<Real>* ctrl = bundle.control ? &*bundle.control : nullptr;
    Tensor<Real> images = sample_batch(bundle.backbone, ctrl, ctrl ? &controls : nullptr, sched,
                                       cfg.train.eval.sample_steps, cfg.train.prediction_kind,
                                       rng);

    std::filesystem::create_directories(out_dir);
    SampleResult res;
    std::string csv = "index,adherence\n";
    for (int i = 0; i < count; ++i) {
        Tensor<Real> img({1, 1, S, S}), m({1, 1, S, S});
        for (int64_t j = 0; j < static_cast<int64_t>(S) * S; ++j) {
            img[j] = images[static_cast<int64_t>(i) * S * S + j];
            m[j] = controls[static_cast<int64_t>(i) * S * S + j];
        }
        char name[32];
        std::snprintf(name, sizeof(name), "out-%03d.pgm", i);
        write_text_file(out_dir + "/" + name, encode_pgm(img));
        double a = adherence(img, m);
        res.scores.push_back(a);
        res.mean_adherence += a;
        csv += std::to_string(i) + "," + fmt_g(a) + "\n";
    }
    res.mean_adherence /= count;
    write_text_file(out_dir + "/adherence.csv", csv);
    return res;
}

// ---- bench pipeline ----------------------------------------------------------

struct BenchOutcome {
    ParamReport params;
    LatencyReport latency;
};

template <typename Real>
BenchOutcome run_bench(const RunConfig& cfg) {
    Backbone<Real> bb(cfg.backbone, cfg.backbone_seed);
    ControlModule<Real> cnext = build_control<Real>(cfg, Architecture::ControlNeXt, bb,
                                                    cfg.control_seed);
    ControlModule<Real> cnet = build_control<Real>(cfg, Architecture::ControlNet, bb,
                                                   cfg.control_seed);

    // parameter accounting
    std::set<std::string> none;
    std::set<std::string> cnet_train;
    for (const auto& p : cnet.registry().items()) cnet_train.insert(p->name);
    std::set<std::string> cnext_train;
    for (const auto& p : cnext.registry().items()) cnext_train.insert(p->name);
    SelectorResult sel = resolve_selector(cfg.train.selector, bb.registry);
    cnext_train.insert(sel.names.begin(), sel.names.end());

    std::vector<ParamCountInput<Real>> inputs;
    inputs.push_back({"base", {&bb.registry}, none});
    inputs.push_back({"controlnet", {&bb.registry, &cnet.registry()}, cnet_train});
    inputs.push_back({"controlnext", {&bb.registry, &cnext.registry()}, cnext_train});

    BenchOutcome out;
    out.params = count_params(inputs);

    // latency closures share one input
    int S = cfg.backbone.image_size;
    Rng rng(cfg.backbone_seed ^ 0xBE7Cull);
    Tensor<Real> x = Tensor<Real>::randn({1, cfg.backbone.in_channels, S, S}, rng);
    Tensor<Real> control = make_heldout_set<Real>(cfg.dataset, 1)[0].control;
    int t = std::max(1, cfg.train.diffusion_steps / 2);
    volatile double sink = 0.0;  // keep the work observable
    std::vector<LatencyConfig> lat = {
        {"base", [&] { sink = sink + bb.forward(x, t)[0]; }},
        {"controlnext", [&] { sink = sink + cnext.forward(bb, x, t, control)[0]; }},
        {"controlnet", [&] { sink = sink + cnet.forward(bb, x, t, control)[0]; }},
    };
    out.latency = bench_latency(lat, cfg.bench.iters, cfg.bench.warmup);
    return out;
}

inline void write_bench_reports(const BenchOutcome& out, const std::string& reports_dir) {
    std::filesystem::create_directories(reports_dir);
    write_text_file(reports_dir + "/params.csv", to_csv(out.params));
    write_text_file(reports_dir + "/params.json", to_json(out.params).dump(2) + "\n");
    write_text_file(reports_dir + "/latency.csv", to_csv(out.latency));
    write_text_file(reports_dir + "/latency.json", to_json(out.latency).dump(2) + "\n");
}

// ---- compare pipeline --------------------------------------------------------

struct CompareOutcome {
    std::vector<LabeledTrace> traces;
    // lower median; empty optional = never reached within budget
    std::map<std::string, std::optional<int>> medians;
    std::string verdict;
    CompareReport report;
};

inline std::optional<int> lower_median(std::vector<std::optional<int>> v) {
    auto key = [](const std::optional<int>& x) {
        return x ? *x : std::numeric_limits<int>::max();
    };
    std::sort(v.begin(), v.end(),
              [&](const auto& a, const auto& b) { return key(a) < key(b); });
    return v[(v.size() - 1) / 2];
}

// Trains every architecture on every seed under identical budgets from a
// shared per-seed pretrained backbone. parallel > 1 runs seeds concurrently;
// outputs are deterministic either way.
template <typename Real>
CompareOutcome run_compare(const RunConfig& cfg, int parallel = 1,
                           const std::function<void(const std::string&)>& progress = {}) {
    check(parallel >= 1, "compare: parallelism must be >= 1");
    auto note = [&](const std::string& s) {
        if (progress) progress(s);
    };
    NoiseSchedule sched = schedule_of(cfg);
    auto data = make_train_set<Real>(cfg.dataset);
    auto heldout = make_heldout_set<Real>(cfg.dataset);

    struct Slot {
        std::string label;
        Architecture arch;
        uint64_t seed;
        ConvergenceTrace trace;
    };
    std::vector<std::vector<Slot>> per_seed(cfg.compare.seeds.size());

    auto run_seed = [&](size_t si) {
        uint64_t seed = cfg.compare.seeds[si];
        TrainConfig tc = cfg.train;
        tc.seed = cfg.train.seed + seed;
        Backbone<Real> bb(cfg.backbone, cfg.backbone_seed + seed);
        note("seed " + std::to_string(seed) + ": pretrain (" +
             std::to_string(tc.pretrain_steps) + " steps)");
        if (tc.pretrain_steps > 0) pretrain_backbone(bb, data, sched, tc);
        auto snap = snapshot_params(bb.registry);
        for (Architecture arch : cfg.compare.architectures) {
            restore_params(bb.registry, snap);
            ControlModule<Real> ctrl =
                build_control<Real>(cfg, arch, bb, cfg.control_seed + seed);
            TrainConfig run_tc = tc;
            run_tc.architecture = arch;
            note("seed " + std::to_string(seed) + ": train " + to_string(arch) + " (" +
                 std::to_string(run_tc.steps) + " steps)");
            Slot s;
            s.label = std::string(to_string(arch)) + "-s" + std::to_string(seed);
            s.arch = arch;
            s.seed = seed;
            s.trace = train(run_tc, bb, ctrl, data, heldout, sched);
            if (s.trace.steps_to_threshold) {
                note("seed " + std::to_string(seed) + ": " + to_string(arch) +
                     " reached threshold at step " + std::to_string(*s.trace.steps_to_threshold));
            } else {
                note("seed " + std::to_string(seed) + ": " + to_string(arch) +
                     " never reached threshold");
            }
            per_seed[si].push_back(std::move(s));
        }
    };

    if (parallel <= 1 || cfg.compare.seeds.size() <= 1) {
        for (size_t si = 0; si < cfg.compare.seeds.size(); ++si) run_seed(si);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        int n_threads = std::min<int>(parallel, static_cast<int>(cfg.compare.seeds.size()));
        for (int k = 0; k < n_threads; ++k) {
            pool.emplace_back([&] {
                for (size_t si = next.fetch_add(1); si < cfg.compare.seeds.size();
                     si = next.fetch_add(1)) {
                    run_seed(si);
                }
            });
        }
        for (auto& th : pool) th.join();
    }

    CompareOutcome out;
    std::map<std::string, std::vector<std::optional<int>>> thresholds;
    for (const auto& seed_slots : per_seed) {
        for (const auto& s : seed_slots) {
            thresholds[to_string(s.arch)].push_back(s.trace.steps_to_threshold);
            out.traces.push_back({s.label, s.trace});
        }
    }
    std::string verdict = "verdict:";
    for (Architecture arch : cfg.compare.architectures) {
        // keep first occurrence ordering, skip duplicates
        std::string name = to_string(arch);
        if (out.medians.count(name)) continue;
        out.medians[name] = lower_median(thresholds[name]);
        verdict += " " + name + " median steps_to_threshold = " +
                   (out.medians[name] ? std::to_string(*out.medians[name]) : "never") + ";";
    }
    out.verdict = verdict;
    out.report = compare_traces(out.traces);
    return out;
}

inline void write_compare_reports(const CompareOutcome& out, const std::string& reports_dir) {
    std::filesystem::create_directories(reports_dir);
    write_text_file(reports_dir + "/compare.csv", out.report.csv);
    nlohmann::json j = out.report.json;
    nlohmann::json med = nlohmann::json::object();
    for (const auto& [name, m] : out.medians) {
        if (m) {
            med[name] = *m;
        } else {
            med[name] = nullptr;
        }
    }
    j["median_steps_to_threshold"] = med;
    j["verdict"] = out.verdict;
    write_text_file(reports_dir + "/compare.json", j.dump(2) + "\n");
    write_text_file(reports_dir + "/compare.svg", out.report.svg);
}

}  // namespace ctrldiff
