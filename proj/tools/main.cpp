// ctrldiff: train / sample / bench / compare / gen-data for the toy
// controllable-diffusion lab. One command per process; all artifacts are
// reproducible byte-for-byte given identical inputs (timestamps live in
// sidecar meta.json files only).

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ctrldiff/ctrldiff.hpp"

namespace cd = ctrldiff;

namespace {

using Real = float;

struct GlobalOpts {
    std::string config_path;
    std::string outdir;
    int64_t seed = -1;
    bool seed_set = false;
    int parallel = 1;
};

cd::RunConfig load_config(const GlobalOpts& g) {
    cd::RunConfig cfg;
    if (!g.config_path.empty()) {
        cfg = cd::parse_config_text(cd::read_text_file(g.config_path));
    } else {
        cfg.validate();
    }
    if (!g.outdir.empty()) cfg.output_dir = g.outdir;
    if (g.seed_set) cfg.train.seed = static_cast<uint64_t>(g.seed);
    return cfg;
}

std::string run_dir(const cd::RunConfig& cfg) {
    return cfg.output_dir + "/" + cfg.run_name;
}

// timestamps are kept out of every report body
void write_sidecar_meta(const std::string& dir) {
    auto now = std::chrono::system_clock::now().time_since_epoch();
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(now).count();
    std::filesystem::create_directories(dir);
    cd::write_text_file(dir + "/meta.json",
                        "{\"generated_at_unix\": " + std::to_string(secs) + "}\n");
}

int cmd_train(const GlobalOpts& g) {
    cd::RunConfig cfg = load_config(g);
    cd::TrainPaths paths{run_dir(cfg)};
    std::string stage = "config";
    try {
        auto trace = cd::run_train<Real>(cfg, paths, [&](const std::string& s) {
            stage = s;
            std::printf("[train] %s\n", s.c_str());
            std::fflush(stdout);
        });
        write_sidecar_meta(paths.run_dir);
        std::printf("[train] done: %zu eval records, steps_to_threshold = %s\n",
                    trace.records.size(),
                    trace.steps_to_threshold ? std::to_string(*trace.steps_to_threshold).c_str()
                                             : "never");
        std::printf("[train] wrote %s, %s, %s\n", paths.checkpoint().c_str(),
                    paths.trace().c_str(), paths.resolved_config().c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "train failed during stage '%s': %s\n", stage.c_str(), e.what());
        return 1;
    }
}

int cmd_sample(const GlobalOpts& g, const std::string& checkpoint, int count,
               const std::string& lora_path, const std::string& out_override) {
    try {
        cd::check(!checkpoint.empty(), "sample: --checkpoint is required");
        std::string out = out_override;
        if (out.empty()) {
            std::string base = g.outdir.empty() ? "runs" : g.outdir;
            out = base + "/samples";
        }
        uint64_t seed = g.seed_set ? static_cast<uint64_t>(g.seed) : 0;
        auto res = cd::run_sample<Real>(checkpoint, count, seed, out, lora_path);
        write_sidecar_meta(out);
        std::printf("[sample] wrote %d images to %s, mean adherence %.4f\n", count, out.c_str(),
                    res.mean_adherence);
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "sample failed: %s\n", e.what());
        return 1;
    }
}

int cmd_bench(const GlobalOpts& g) {
    try {
        cd::RunConfig cfg = load_config(g);
        auto out = cd::run_bench<Real>(cfg);
        std::string reports = run_dir(cfg) + "/reports";
        cd::write_bench_reports(out, reports);
        write_sidecar_meta(reports);
        std::printf("%s", cd::to_csv(out.params).c_str());
        std::printf("%s", cd::to_csv(out.latency).c_str());
        std::printf("[bench] wrote reports to %s\n", reports.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "bench failed: %s\n", e.what());
        return 1;
    }
}

int cmd_compare(const GlobalOpts& g) {
    try {
        cd::RunConfig cfg = load_config(g);
        auto out = cd::run_compare<Real>(cfg, g.parallel, [](const std::string& s) {
            std::printf("[compare] %s\n", s.c_str());
            std::fflush(stdout);
        });
        std::string dir = run_dir(cfg);
        std::string reports = dir + "/reports";
        cd::write_compare_reports(out, reports);
        std::filesystem::create_directories(dir);
        cd::write_text_file(dir + "/config.resolved", cd::serialize_config(cfg));
        write_sidecar_meta(reports);
        std::printf("%s\n", out.verdict.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "compare failed: %s\n", e.what());
        return 1;
    }
}

int cmd_gen_data(const GlobalOpts& g, const std::string& out_override) {
    try {
        cd::RunConfig cfg = load_config(g);
        auto data = cd::make_train_set<Real>(cfg.dataset);
        std::string out = out_override.empty() ? run_dir(cfg) + "/dataset.cdar" : out_override;
        std::filesystem::create_directories(std::filesystem::path(out).parent_path());
        cd::save_dataset(out, data, cfg.dataset.seed, cfg.dataset.size, cfg.dataset.kind);
        std::printf("[gen-data] wrote %d samples (%s controls, %dx%d) to %s\n",
                    cfg.dataset.count, cd::to_string(cfg.dataset.kind), cfg.dataset.size,
                    cfg.dataset.size, out.c_str());
        return 0;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "gen-data failed: %s\n", e.what());
        return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"desk-scale controllable diffusion lab"};
    app.require_subcommand(1);

    GlobalOpts g;
    app.add_option("--config", g.config_path, "experiment config file (json)")
        ->envname("CTRLDIFF_CONFIG");
    app.add_option("--outdir", g.outdir, "output directory override")
        ->envname("CTRLDIFF_OUTDIR");
    auto* seed_opt =
        app.add_option("--seed", g.seed, "seed override")->envname("CTRLDIFF_SEED");
    app.add_option("--parallel", g.parallel, "concurrent sub-experiments for compare")
        ->envname("CTRLDIFF_PARALLEL");

    auto* train = app.add_subcommand("train", "train one conditioning architecture");
    auto* sample = app.add_subcommand("sample", "sample images from a checkpoint");
    std::string checkpoint, lora_path, sample_out, gen_out;
    int count = 16;
    sample->add_option("--checkpoint", checkpoint, "checkpoint archive")->required();
    sample->add_option("--count", count, "number of held-out controls to sample");
    sample->add_option("--lora", lora_path, "attach a lora adapter archive before sampling");
    sample->add_option("--out", sample_out, "output directory for images");
    auto* bench = app.add_subcommand("bench", "parameter and latency reports");
    auto* compare =
        app.add_subcommand("compare", "train both architectures and compare convergence");
    auto* gen = app.add_subcommand("gen-data", "write the synthetic dataset cache");
    gen->add_option("--out", gen_out, "cache file path");

    CLI11_PARSE(app, argc, argv);
    g.seed_set = seed_opt->count() > 0;

    if (train->parsed()) return cmd_train(g);
    if (sample->parsed()) return cmd_sample(g, checkpoint, count, lora_path, sample_out);
    if (bench->parsed()) return cmd_bench(g);
    if (compare->parsed()) return cmd_compare(g);
    if (gen->parsed()) return cmd_gen_data(g, gen_out);
    return 1;
}
