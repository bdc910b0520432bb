#pragma once

#include <algorithm>
#include <chrono>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ctrldiff/finetune.hpp"
#include "ctrldiff/registry.hpp"
#include "ctrldiff/report.hpp"

namespace ctrldiff {

// Full-scale reference points (SD1.5-class setting) kept for documentation and
// relational tests: parameter counts in millions, per-step latency overhead in
// percent. The toy benchmark reproduces the ratios/orderings, not the values.
inline constexpr double kRefControlNetTotalM = 1220.0;
inline constexpr double kRefControlNetLearnableM = 361.0;
inline constexpr double kRefControlNextTotalM = 865.0;
inline constexpr double kRefControlNextLearnableM = 30.0;
inline constexpr double kRefBaseTotalM = 859.0;
inline constexpr double kRefControlNetOverheadPct = 41.9;
inline constexpr double kRefControlNextOverheadPct = 10.4;

struct ParamRow {
    std::string label;
    int64_t total_params = 0;
    int64_t learnable_params = 0;
    double learnable_fraction = 0.0;
};

struct ParamReport {
    std::vector<ParamRow> rows;
};

// One configuration to account: a label, the registries composing the model
// and the names of its trainable parameters.
template <typename Real>
struct ParamCountInput {
    std::string label;
    std::vector<const ParamRegistry<Real>*> registries;
    std::set<std::string> trainable;
};

template <typename Real>
ParamReport count_params(const std::vector<ParamCountInput<Real>>& inputs) {
    ParamReport rep;
    for (const auto& in : inputs) {
        ParamRow row;
        row.label = in.label;
        for (const auto* reg : in.registries) {
            check(reg != nullptr, "count_params: null registry");
            row.total_params += reg->total_params();
            row.learnable_params += reg->count_matching(in.trainable);
        }
        check(row.learnable_params <= row.total_params, "count_params: learnable > total");
        row.learnable_fraction =
            row.total_params == 0
                ? 0.0
                : static_cast<double>(row.learnable_params) /
                      static_cast<double>(row.total_params);
        rep.rows.push_back(std::move(row));
    }
    return rep;
}

struct LatencyRow {
    std::string label;
    double median_step_seconds = 0.0;
    double overhead_percent = 0.0;  // vs the row labeled "base"
};

struct LatencyReport {
    std::vector<LatencyRow> rows;
    int iters = 0;
    int warmup = 0;
};

struct LatencyConfig {
    std::string label;
    std::function<void()> step;
};

// Median wall-clock seconds per step per configuration, single stream. The
// timed region must stay single-threaded (BLAS is pinned to one thread).
inline LatencyReport bench_latency(const std::vector<LatencyConfig>& configs, int iters,
                                   int warmup) {
    check(iters >= 100, "bench_latency: need >= 100 timed iterations");
    check(warmup >= 10, "bench_latency: need >= 10 warmup iterations");
    bool has_base = false;
    for (const auto& c : configs) has_base |= c.label == "base";
    check(has_base, "bench_latency: missing config labeled 'base'");

    LatencyReport rep;
    rep.iters = iters;
    rep.warmup = warmup;
    using Clock = std::chrono::steady_clock;
    for (const auto& c : configs) {
        for (int i = 0; i < warmup; ++i) c.step();
        std::vector<double> times;
        times.reserve(static_cast<size_t>(iters));
        for (int i = 0; i < iters; ++i) {
            auto t0 = Clock::now();
            c.step();
            auto t1 = Clock::now();
            times.push_back(std::chrono::duration<double>(t1 - t0).count());
        }
        std::sort(times.begin(), times.end());
        size_t n = times.size();
        double median = (n % 2 == 1) ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
        rep.rows.push_back({c.label, median, 0.0});
    }
    double base = 0.0;
    for (const auto& r : rep.rows) {
        if (r.label == "base") base = r.median_step_seconds;
    }
    for (auto& r : rep.rows) {
        r.overhead_percent =
            r.label == "base" ? 0.0 : (r.median_step_seconds / base - 1.0) * 100.0;
    }
    return rep;
}

// ---- report serialization ---------------------------------------------------

inline std::string to_csv(const ParamReport& rep) {
    std::string out = "label,total_params,learnable_params,learnable_fraction\n";
    for (const auto& r : rep.rows) {
        out += r.label + "," + std::to_string(r.total_params) + "," +
               std::to_string(r.learnable_params) + "," + fmt_g(r.learnable_fraction) + "\n";
    }
    return out;
}

inline nlohmann::json to_json(const ParamReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"label", r.label},
                        {"total_params", r.total_params},
                        {"learnable_params", r.learnable_params},
                        {"learnable_fraction", r.learnable_fraction}});
    }
    return {{"report", "params"}, {"rows", rows}};
}

inline std::string to_csv(const LatencyReport& rep) {
    std::string out = "label,median_step_seconds,overhead_percent\n";
    for (const auto& r : rep.rows) {
        out += r.label + "," + fmt_g(r.median_step_seconds) + "," + fmt_g(r.overhead_percent) +
               "\n";
    }
    return out;
}

inline nlohmann::json to_json(const LatencyReport& rep) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& r : rep.rows) {
        rows.push_back({{"label", r.label},
                        {"median_step_seconds", r.median_step_seconds},
                        {"overhead_percent", r.overhead_percent}});
    }
    return {{"report", "latency"}, {"iters", rep.iters}, {"warmup", rep.warmup}, {"rows", rows}};
}

// ---- convergence comparison -------------------------------------------------

struct LabeledTrace {
    std::string label;
    ConvergenceTrace trace;
};

struct CompareReport {
    std::string csv;
    nlohmann::json json;
    std::string svg;
};

// Joint view of convergence traces: CSV table, JSON mirror and an SVG plot of
// adherence vs step with steps_to_threshold markers. Traces must share the
// evaluation schedule.
inline CompareReport compare_traces(const std::vector<LabeledTrace>& traces) {
    check(!traces.empty(), "compare_traces: no traces");
    for (size_t i = 1; i < traces.size(); ++i) {
        check(traces[i].trace.records.size() == traces[0].trace.records.size(),
              "compare_traces: mismatched eval schedules");
        for (size_t j = 0; j < traces[i].trace.records.size(); ++j) {
            check(traces[i].trace.records[j].step == traces[0].trace.records[j].step,
                  "compare_traces: mismatched eval schedules");
        }
    }

    CompareReport rep;
    rep.csv = "label,step,loss,adherence\n";
    for (const auto& lt : traces) {
        for (const auto& r : lt.trace.records) {
            rep.csv += lt.label + "," + std::to_string(r.step) + "," + fmt_g(r.loss) + "," +
                       fmt_g(r.adherence) + "\n";
        }
    }

    nlohmann::json jtraces = nlohmann::json::array();
    std::vector<PlotSeries> series;
    std::vector<PlotVLine> vlines;
    for (const auto& lt : traces) {
        nlohmann::json rows = nlohmann::json::array();
        PlotSeries s;
        s.label = lt.label;
        for (const auto& r : lt.trace.records) {
            rows.push_back({{"step", r.step}, {"loss", r.loss}, {"adherence", r.adherence}});
            s.points.emplace_back(static_cast<double>(r.step), r.adherence);
        }
        nlohmann::json jt = {{"label", lt.label},
                             {"threshold", lt.trace.threshold},
                             {"records", rows}};
        if (lt.trace.steps_to_threshold) {
            jt["steps_to_threshold"] = *lt.trace.steps_to_threshold;
            vlines.push_back({lt.label + " @" + std::to_string(*lt.trace.steps_to_threshold),
                              static_cast<double>(*lt.trace.steps_to_threshold)});
        } else {
            jt["steps_to_threshold"] = nullptr;
        }
        jtraces.push_back(jt);
        series.push_back(std::move(s));
    }
    rep.json = {{"report", "compare"}, {"traces", jtraces}};
    rep.svg = svg_line_plot("control adherence vs training step", "step", "adherence IoU",
                            series, vlines);
    return rep;
}

}  // namespace ctrldiff
