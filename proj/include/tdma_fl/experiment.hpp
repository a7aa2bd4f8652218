#pragma once

#include <json.hpp>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "tdma_fl/analysis.hpp"
#include "tdma_fl/idx.hpp"
#include "tdma_fl/learner.hpp"
#include "tdma_fl/quadratic.hpp"
#include "tdma_fl/schedule.hpp"
#include "tdma_fl/timing.hpp"

namespace tdma_fl {

using Json = nlohmann::ordered_json;

inline constexpr const char* dataset_dir_env = "TDMA_FL_DATASET_DIR";

struct TaskSpec {
    std::string kind = "quadratic";      // quadratic | logistic | mlp
    std::string dataset = "synthetic";   // synthetic | mnist | cifar10
    std::string partition = "single_label";
    int dim = 5;
    int samples_per_device = 32;
    double heterogeneity = 1.0;          // quadratic: max ||A u_n||
    double noise = 0.5;                  // sample spread (quadratic targets, class clusters)
    double eig_min = 0.5;
    double eig_max = 2.0;
    int classes = 10;
    double separation = 3.0;
    int hidden = 32;
    double init_radius = 2.0;            // quadratic start: optimum + radius * random unit
};

/// An explicit delay, or "auto" for the largest delay that keeps the round length.
struct DelaySetting {
    bool automatic = false;
    int value = 0;

    std::string label() const { return automatic ? "auto" : std::to_string(value); }
    friend bool operator==(const DelaySetting&, const DelaySetting&) = default;
};

struct SweepSpec {
    std::vector<int> group_sizes;         // empty: the system's S
    std::vector<DelaySetting> delays;     // empty: the system's delay
};

struct RateTrendSpec {
    std::vector<int> group_sizes{10, 5, 2, 1};
    Round rounds = 2000;
    int seeds = 10;
    int decay_group_size = 5;
    int decay_multiplier = 4;
    std::string constants = "exact";      // exact | estimated
};

struct ExperimentSpec {
    std::string scenario = "experiment";
    std::string mode = "run";
    SystemConfig system;
    DelaySetting delay;
    TaskSpec task;
    std::vector<std::uint64_t> seeds{1};
    std::string output_dir = "out";
    int workers = 1;
    int metrics_every = 1;
    Round round_limit = 0;                // 0: run to the horizon
    std::string dataset_dir;              // empty: environment default
    SweepSpec sweep;
    RateTrendSpec rate_trend;
};

namespace detail {

inline const std::set<std::string> experiment_modes{"run", "sweep", "validate-timing", "validate-prop1", "rate-trend"};

class Reader {
public:
    Reader(const Json& obj, std::string path) : m_obj(obj), m_path(std::move(path))
    {
        if (!m_obj.is_object())
            throw ConfigError(where() + ": expected an object");
    }

    template <class T>
    void read(const char* key, T& out)
    {
        m_known.insert(key);
        auto it = m_obj.find(key);
        if (it == m_obj.end())
            return;
        const std::string field = join(key);
        try {
            if constexpr (std::is_same_v<T, double>) {
                if (!it->is_number())
                    throw ConfigError(field + ": expected a number");
            }
            else if constexpr (std::is_integral_v<T>) {
                if (!it->is_number_integer())
                    throw ConfigError(field + ": expected an integer");
            }
            else if constexpr (std::is_same_v<T, std::string>) {
                if (!it->is_string())
                    throw ConfigError(field + ": expected a string");
            }
            out = it->template get<T>();
        }
        catch (const nlohmann::json::exception&) {
            throw ConfigError(field + ": wrong type");
        }
    }

    const Json* child(const char* key)
    {
        m_known.insert(key);
        auto it = m_obj.find(key);
        return it == m_obj.end() ? nullptr : &*it;
    }

    std::string join(const char* key) const { return m_path.empty() ? key : m_path + "." + key; }

    void finish() const
    {
        for (auto it = m_obj.begin(); it != m_obj.end(); ++it)
            if (!m_known.count(it.key()))
                throw ConfigError(join(it.key().c_str()) + ": unknown field");
    }

private:
    std::string where() const { return m_path.empty() ? "config" : m_path; }

    const Json& m_obj;
    std::string m_path;
    std::set<std::string> m_known;
};

inline DelaySetting parse_delay(const Json& v, const std::string& field)
{
    if (v.is_string() && v.get<std::string>() == "auto")
        return {true, 0};
    if (v.is_number_integer() && v.get<long long>() >= 0)
        return {false, static_cast<int>(v.get<long long>())};
    throw ConfigError(field + ": expected a non-negative integer or \"auto\"");
}

inline Json delay_json(const DelaySetting& d) { return d.automatic ? Json("auto") : Json(d.value); }

template <class T>
std::vector<T> int_list(const Json& v, const std::string& field)
{
    if (!v.is_array())
        throw ConfigError(field + ": expected an array");
    std::vector<T> out;
    for (const auto& e : v) {
        if (!e.is_number_integer())
            throw ConfigError(field + ": expected integers");
        out.push_back(e.get<T>());
    }
    return out;
}

inline void require(bool ok, const std::string& field, const std::string& why)
{
    if (!ok)
        throw ConfigError(field + ": " + why);
}

} // namespace detail

inline void validate(const ExperimentSpec& s)
{
    using detail::require;
    require(detail::experiment_modes.count(s.mode) > 0, "mode",
            "must be one of run, sweep, validate-timing, validate-prop1, rate-trend");
    require(!s.seeds.empty(), "seeds", "must not be empty");
    require(!s.output_dir.empty(), "output_dir", "must not be empty");
    require(s.workers >= 1, "workers", "must be >= 1");
    require(s.metrics_every >= 1, "metrics_every", "must be >= 1");
    require(s.round_limit >= 0, "round_limit", "must be >= 0");
    s.system.validate();

    const auto& t = s.task;
    require(t.kind == "quadratic" || t.kind == "logistic" || t.kind == "mlp", "task.kind",
            "must be quadratic, logistic or mlp");
    require(t.dataset == "synthetic" || t.dataset == "mnist" || t.dataset == "cifar10", "task.dataset",
            "must be synthetic, mnist or cifar10");
    require(t.kind != "quadratic" || t.dataset == "synthetic", "task.dataset", "quadratic tasks are synthetic");
    require(t.partition == "single_label" || t.partition == "iid", "task.partition", "must be single_label or iid");
    require(t.dim >= 1, "task.dim", "must be >= 1");
    require(t.samples_per_device >= 1, "task.samples_per_device", "must be >= 1");
    require(t.samples_per_device >= s.system.batch_size, "task.samples_per_device",
            "must be >= system.batch_size");
    require(t.heterogeneity >= 0.0, "task.heterogeneity", "must be >= 0");
    require(t.noise >= 0.0, "task.noise", "must be >= 0");
    require(t.eig_min > 0.0 && t.eig_max >= t.eig_min, "task.eig_min", "need 0 < eig_min <= eig_max");
    require(t.classes >= 2, "task.classes", "must be >= 2");
    require(t.hidden >= 1, "task.hidden", "must be >= 1");
    require(t.init_radius >= 0.0, "task.init_radius", "must be >= 0");

    for (int S : s.sweep.group_sizes)
        require(S >= 1 && S <= s.system.num_devices, "sweep.group_size", "values must lie in [1, num_devices]");

    const auto& r = s.rate_trend;
    require(!r.group_sizes.empty(), "rate_trend.group_sizes", "must not be empty");
    require(r.rounds >= 1, "rate_trend.rounds", "must be >= 1");
    require(r.seeds >= 2, "rate_trend.seeds", "must be >= 2");
    require(r.decay_group_size >= 0, "rate_trend.decay_group_size", "must be >= 0");
    require(r.decay_multiplier >= 2, "rate_trend.decay_multiplier", "must be >= 2");
    require(r.constants == "exact" || r.constants == "estimated", "rate_trend.constants",
            "must be exact or estimated");
}

inline ExperimentSpec spec_from_json(const Json& j)
{
    ExperimentSpec s;
    detail::Reader top(j, "");
    top.read("scenario", s.scenario);
    top.read("mode", s.mode);
    top.read("output_dir", s.output_dir);
    top.read("workers", s.workers);
    top.read("metrics_every", s.metrics_every);
    top.read("round_limit", s.round_limit);
    top.read("dataset_dir", s.dataset_dir);
    if (const Json* seeds = top.child("seeds"))
        s.seeds = detail::int_list<std::uint64_t>(*seeds, "seeds");

    if (const Json* sys = top.child("system")) {
        detail::Reader r(*sys, "system");
        auto& c = s.system;
        r.read("num_devices", c.num_devices);
        r.read("group_size", c.group_size);
        r.read("slots_per_transfer", c.slots_per_transfer);
        r.read("local_steps", c.local_steps);
        r.read("batch_size", c.batch_size);
        r.read("step_size", c.step_size);
        r.read("horizon", c.horizon);
        if (const Json* q = r.child("samples_per_slot")) {
            if (q->is_string())
                c.samples_per_slot = parse_rational(q->get<std::string>());
            else if (q->is_number_integer())
                c.samples_per_slot = Rational(q->get<std::int64_t>());
            else if (q->is_number())
                c.samples_per_slot = rational_from_double(q->get<double>());
            else
                throw ConfigError("system.samples_per_slot: expected a number or a fraction string");
        }
        if (const Json* slots = r.child("compute_slots")) {
            if (sys->contains("samples_per_slot"))
                throw ConfigError("system.compute_slots: give either compute_slots or samples_per_slot");
            if (!slots->is_number_integer())
                throw ConfigError("system.compute_slots: expected an integer");
            c.with_compute_slots(slots->get<Slot>());
        }
        if (const Json* d = r.child("intentional_delay"))
            s.delay = detail::parse_delay(*d, "system.intentional_delay");
        c.intentional_delay = s.delay.automatic ? 0 : s.delay.value;
        r.finish();
    }

    if (const Json* task = top.child("task")) {
        detail::Reader r(*task, "task");
        auto& t = s.task;
        r.read("kind", t.kind);
        r.read("dataset", t.dataset);
        r.read("partition", t.partition);
        r.read("dim", t.dim);
        r.read("samples_per_device", t.samples_per_device);
        r.read("heterogeneity", t.heterogeneity);
        r.read("noise", t.noise);
        r.read("eig_min", t.eig_min);
        r.read("eig_max", t.eig_max);
        r.read("classes", t.classes);
        r.read("separation", t.separation);
        r.read("hidden", t.hidden);
        r.read("init_radius", t.init_radius);
        r.finish();
    }

    if (const Json* sweep = top.child("sweep")) {
        detail::Reader r(*sweep, "sweep");
        if (const Json* g = r.child("group_size"))
            s.sweep.group_sizes = detail::int_list<int>(*g, "sweep.group_size");
        if (const Json* d = r.child("intentional_delay")) {
            if (!d->is_array())
                throw ConfigError("sweep.intentional_delay: expected an array");
            for (const auto& e : *d)
                s.sweep.delays.push_back(detail::parse_delay(e, "sweep.intentional_delay"));
        }
        r.finish();
    }

    if (const Json* rt = top.child("rate_trend")) {
        detail::Reader r(*rt, "rate_trend");
        if (const Json* g = r.child("group_sizes"))
            s.rate_trend.group_sizes = detail::int_list<int>(*g, "rate_trend.group_sizes");
        r.read("rounds", s.rate_trend.rounds);
        r.read("seeds", s.rate_trend.seeds);
        r.read("decay_group_size", s.rate_trend.decay_group_size);
        r.read("decay_multiplier", s.rate_trend.decay_multiplier);
        r.read("constants", s.rate_trend.constants);
        r.finish();
    }
    top.finish();
    validate(s);
    return s;
}

/// Canonical form: every field present, fixed key order, q as an exact fraction.
inline Json spec_to_json(const ExperimentSpec& s)
{
    const auto& c = s.system;
    const auto& t = s.task;
    Json j;
    j["scenario"] = s.scenario;
    j["mode"] = s.mode;
    j["system"] = {{"num_devices", c.num_devices},
                   {"group_size", c.group_size},
                   {"slots_per_transfer", c.slots_per_transfer},
                   {"samples_per_slot", to_string(c.samples_per_slot)},
                   {"local_steps", c.local_steps},
                   {"batch_size", c.batch_size},
                   {"step_size", c.step_size},
                   {"horizon", c.horizon},
                   {"intentional_delay", detail::delay_json(s.delay)}};
    j["task"] = {{"kind", t.kind},
                 {"dataset", t.dataset},
                 {"partition", t.partition},
                 {"dim", t.dim},
                 {"samples_per_device", t.samples_per_device},
                 {"heterogeneity", t.heterogeneity},
                 {"noise", t.noise},
                 {"eig_min", t.eig_min},
                 {"eig_max", t.eig_max},
                 {"classes", t.classes},
                 {"separation", t.separation},
                 {"hidden", t.hidden},
                 {"init_radius", t.init_radius}};
    j["seeds"] = s.seeds;
    j["output_dir"] = s.output_dir;
    j["workers"] = s.workers;
    j["metrics_every"] = s.metrics_every;
    j["round_limit"] = s.round_limit;
    j["dataset_dir"] = s.dataset_dir;
    Json delays = Json::array();
    for (const auto& d : s.sweep.delays)
        delays.push_back(detail::delay_json(d));
    j["sweep"] = {{"group_size", s.sweep.group_sizes}, {"intentional_delay", delays}};
    const auto& r = s.rate_trend;
    j["rate_trend"] = {{"group_sizes", r.group_sizes},
                       {"rounds", r.rounds},
                       {"seeds", r.seeds},
                       {"decay_group_size", r.decay_group_size},
                       {"decay_multiplier", r.decay_multiplier},
                       {"constants", r.constants}};
    return j;
}

inline ExperimentSpec parse_spec(const std::string& text, const std::string& origin = "config")
{
    Json j;
    try {
        j = Json::parse(text);
    }
    catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(origin + ": invalid JSON: " + e.what());
    }
    return spec_from_json(j);
}

inline ExperimentSpec load_spec(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("--config: cannot read " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_spec(ss.str(), path.string());
}

/// Resolves "auto" and returns the system actually simulated.
inline SystemConfig resolved_system(const SystemConfig& base, const DelaySetting& delay)
{
    SystemConfig cfg = base;
    cfg.intentional_delay = delay.automatic ? (base.divisible() ? optimal_intentional_delay(base).alpha : 0)
                                            : delay.value;
    cfg.validate();
    return cfg;
}

/// Staleness every update carries once the pipeline is full.
inline Round expected_steady_staleness(const SystemConfig& cfg)
{
    return cfg.num_groups() - 1 - cfg.intentional_delay;
}

// ---------------------------------------------------------------- tasks

struct BuiltTask {
    FederatedTask task;
    Vector w0;
    std::optional<Vector> optimum;                // known for the quadratic task
    std::optional<AssumptionConstants> exact;
};

inline std::filesystem::path dataset_directory(const ExperimentSpec& s)
{
    if (!s.dataset_dir.empty())
        return s.dataset_dir;
    if (const char* env = std::getenv(dataset_dir_env))
        return env;
    throw ConfigError("dataset_dir: " + s.task.dataset + " needs --dataset-dir or " + dataset_dir_env);
}

inline std::shared_ptr<const Dataset> load_real_dataset(const ExperimentSpec& s)
{
    const auto dir = dataset_directory(s);
    if (s.task.dataset == "mnist") {
        const auto images = dir / "train-images-idx3-ubyte";
        const auto labels = dir / "train-labels-idx1-ubyte";
        for (const auto& p : {images, labels})
            if (!std::filesystem::exists(p))
                throw DataError("dataset_dir: missing " + p.string());
        return std::make_shared<Dataset>(load_idx_dataset(images, labels));
    }
    std::vector<std::filesystem::path> batches;
    for (int i = 1; i <= 5; ++i) {
        auto p = dir / ("data_batch_" + std::to_string(i) + ".bin");
        if (!std::filesystem::exists(p))
            throw DataError("dataset_dir: missing " + p.string());
        batches.push_back(p);
    }
    return std::make_shared<Dataset>(load_cifar10_batches(batches));
}

/// Everything random about the task (data, shards, start point) follows `seed`.
/// `real` is the loaded dataset for mnist/cifar10 tasks.
inline BuiltTask build_task(const ExperimentSpec& s, std::uint64_t seed,
                            const std::shared_ptr<const Dataset>& real = nullptr)
{
    std::mt19937_64 rng(seed);
    const auto& t = s.task;
    const int N = s.system.num_devices;
    BuiltTask out;
    if (t.kind == "quadratic") {
        QuadraticOptions o;
        o.samples_per_device = t.samples_per_device;
        o.noise_std = t.noise;
        o.eig_min = t.eig_min;
        o.eig_max = t.eig_max;
        auto q = make_quadratic(N, t.dim, t.heterogeneity, rng, o);
        out.w0 = q.optimum + t.init_radius * detail::random_unit(t.dim, rng);
        out.exact = q.exact;
        out.optimum = q.optimum;
        out.task = std::move(q.task);
        return out;
    }

    std::shared_ptr<const Dataset> data = real;
    if (t.dataset == "synthetic") {
        const int per_class = t.partition == "single_label" ? N * t.samples_per_device
                                                            : (N * t.samples_per_device + t.classes - 1) / t.classes;
        data = std::make_shared<Dataset>(make_gaussian_classes(t.classes, t.dim, per_class, t.separation, t.noise, rng));
    }
    else if (!data) {
        data = load_real_dataset(s);
    }
    auto shards = t.partition == "single_label" ? partition_single_label(*data, N, t.samples_per_device, rng)
                                                : partition_iid(*data, N, t.samples_per_device, rng);
    std::shared_ptr<const Model> model;
    if (t.kind == "logistic")
        model = std::make_shared<SoftmaxRegression>(data->feature_dim(), data->num_classes);
    else
        model = std::make_shared<Mlp>(data->feature_dim(), t.hidden, data->num_classes);
    out.w0 = model->initial_parameters(rng);
    out.task = FederatedTask(std::move(model), std::move(data), std::move(shards));
    return out;
}

// ---------------------------------------------------------------- runs

struct SeedResult {
    std::uint64_t seed = 0;
    Round completed_rounds = 0;
    double final_loss = 0.0;
    double final_grad_norm_sq = 0.0;
    double avg_grad_norm_sq = 0.0;
    std::optional<Round> steady_staleness;
    std::optional<Rational> round_duration;
    std::string csv;
    int exit_code = 0;
    std::string error;
    RunMetrics metrics;
    std::vector<Vector> history;
};

struct RunOptions {
    bool keep_history = false;
};

/// One seed of one configuration. Errors raised mid-run are caught: whatever
/// metrics were produced are kept and the error is recorded.
inline SeedResult run_seed(const ExperimentSpec& s, const SystemConfig& cfg, std::uint64_t seed,
                           const std::filesystem::path& dir, const std::shared_ptr<const Dataset>& real = nullptr,
                           const RunOptions& ro = {})
{
    SeedResult r;
    r.seed = seed;
    std::optional<BuiltTask> built;
    std::optional<FederatedLearner> learner;
    try {
        built.emplace(build_task(s, seed, real));
        LearnerOptions lo;
        lo.local = {cfg.batch_size, cfg.local_steps, cfg.step_size, true};
        lo.seed = seed;
        lo.metrics_every = s.metrics_every;
        lo.keep_history = ro.keep_history;
        learner.emplace(built->task, built->w0, lo);
        SimulationOptions so;
        so.record_events = false;
        if (s.round_limit > 0)
            so.round_limit = s.round_limit;
        const Timeline tl = run_timeline(cfg, *learner, so);
        r.completed_rounds = tl.completed_rounds();
        if (r.completed_rounds > 0) {
            const auto last = measured_staleness(tl.staleness, r.completed_rounds - 1);
            r.steady_staleness = *std::max_element(last.begin(), last.end());
        }
        const int window = cfg.num_groups();
        if (r.completed_rounds > window)
            r.round_duration = steady_round_duration(tl, window);
        // Final model, measured even when it falls between metric rows.
        double loss = 0.0;
        r.final_grad_norm_sq = built->task.global_gradient(learner->state().w, &loss).squaredNorm();
        r.final_loss = loss;
    }
    catch (const Error& e) {
        r.exit_code = e.exit_code();
        r.error = e.what();
    }
    if (learner) {
        r.metrics = learner->metrics();
        r.avg_grad_norm_sq = r.metrics.average_grad_norm_sq();
        r.history = learner->history();
    }
    if (!dir.empty()) {
        std::filesystem::create_directories(dir);
        r.csv = "metrics_seed" + std::to_string(seed) + ".csv";
        std::ofstream out(dir / r.csv);
        if (!out)
            throw ConfigError("output_dir: cannot write " + (dir / r.csv).string());
        write_metrics_csv(out, r.metrics);
    }
    return r;
}

inline Json timing_json(const SystemConfig& cfg)
{
    const auto p = timing_profile(cfg);
    return {{"tau_comp", p.tau_comp},
            {"tau_comm", p.tau_comm},
            {"tau_asyn", to_string(p.tau_asyn)},
            {"num_groups", p.num_groups},
            {"intentional_delay", cfg.intentional_delay},
            {"expected_staleness", expected_steady_staleness(cfg)},
            {"formula_rounds", rounds_by_formula(cfg)}};
}

inline Json seed_json(const SeedResult& r)
{
    Json j;
    j["seed"] = r.seed;
    j["status"] = r.exit_code == 0 ? "ok" : "error";
    j["completed_rounds"] = r.completed_rounds;
    j["final_loss"] = r.final_loss;
    j["final_grad_norm_sq"] = r.final_grad_norm_sq;
    j["avg_grad_norm_sq"] = r.avg_grad_norm_sq;
    j["steady_staleness"] = r.steady_staleness ? Json(*r.steady_staleness) : Json(nullptr);
    j["round_duration"] = r.round_duration ? Json(to_string(*r.round_duration)) : Json(nullptr);
    j["csv"] = r.csv;
    if (r.exit_code != 0)
        j["error"] = {{"exit_code", r.exit_code}, {"message", r.error}};
    return j;
}

inline constexpr const char* plot_script = R"(#!/usr/bin/env python3
"""Global loss against time slot for every metrics_seed*.csv next to this file."""
import csv
import glob
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

MARKER_INTERVAL = 1000  # slots between markers

here = os.path.dirname(os.path.abspath(__file__))
fig, ax = plt.subplots()
for path in sorted(glob.glob(os.path.join(here, "metrics_seed*.csv"))):
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        continue
    slots = [int(r["slot"]) for r in rows]
    loss = [float(r["loss"]) for r in rows]
    marks, next_mark = [], 0
    for i, s in enumerate(slots):
        if s >= next_mark:
            marks.append(i)
            next_mark = (s // MARKER_INTERVAL + 1) * MARKER_INTERVAL
    ax.plot(slots, loss, marker="o", markevery=marks, label=os.path.basename(path)[:-4])
ax.set_xlabel("time slot")
ax.set_ylabel("global loss")
ax.legend()
fig.savefig(os.path.join(here, "loss.png"), dpi=150)
)";

inline void write_text(const std::filesystem::path& path, const std::string& text)
{
    std::ofstream out(path);
    if (!out)
        throw ConfigError("output_dir: cannot write " + path.string());
    out << text;
}

struct ExperimentOutcome {
    int exit_code = 0;
    Json report;
    std::vector<SeedResult> seeds;
};

/// Runs every seed of one configuration into `dir`: per-seed CSVs,
/// summary.json and plot.py.
inline ExperimentOutcome run_configuration(const ExperimentSpec& s, const SystemConfig& cfg,
                                           const std::filesystem::path& dir,
                                           const std::shared_ptr<const Dataset>& real = nullptr,
                                           const RunOptions& ro = {})
{
    ExperimentOutcome out;
    out.report["config"] = spec_to_json(s);
    out.report["timing"] = timing_json(cfg);
    out.report["seeds"] = Json::array();
    for (auto seed : s.seeds) {
        auto r = run_seed(s, cfg, seed, dir, real, ro);
        if (r.exit_code != 0 && out.exit_code == 0)
            out.exit_code = r.exit_code;
        out.report["seeds"].push_back(seed_json(r));
        out.seeds.push_back(std::move(r));
    }
    out.report["status"] = out.exit_code == 0 ? "ok" : "error";
    std::filesystem::create_directories(dir);
    write_text(dir / "summary.json", out.report.dump(2) + "\n");
    write_text(dir / "plot.py", plot_script);
    return out;
}

inline std::shared_ptr<const Dataset> preload(const ExperimentSpec& s)
{
    if (s.task.kind == "quadratic" || s.task.dataset == "synthetic")
        return nullptr;
    return load_real_dataset(s);
}

inline ExperimentOutcome run_experiment(const ExperimentSpec& s, const RunOptions& ro = {})
{
    validate(s);
    const auto cfg = resolved_system(s.system, s.delay);
    return run_configuration(s, cfg, s.output_dir, preload(s), ro);
}

// ---------------------------------------------------------------- sweep

struct SweepPoint {
    int group_size = 0;
    DelaySetting delay;
    std::string directory;
    std::optional<SystemConfig> config;
    int exit_code = 0;
    std::string error;
    Round rounds = 0;
    std::optional<Round> staleness;
    std::optional<Rational> round_duration;
    double final_loss = 0.0;
    double avg_grad_norm_sq = 0.0;
};

inline std::vector<SweepPoint> sweep_grid(const ExperimentSpec& s)
{
    auto sizes = s.sweep.group_sizes.empty() ? std::vector<int>{s.system.group_size} : s.sweep.group_sizes;
    auto delays = s.sweep.delays.empty() ? std::vector<DelaySetting>{s.delay} : s.sweep.delays;
    std::vector<SweepPoint> grid;
    for (int S : sizes)
        for (const auto& d : delays) {
            SweepPoint p;
            p.group_size = S;
            p.delay = d;
            p.directory = "S" + std::to_string(S) + "_delay_" + d.label();
            grid.push_back(p);
        }
    if (grid.empty())
        throw ConfigError("sweep: grid is empty");
    return grid;
}

inline void run_sweep_point(const ExperimentSpec& s, SweepPoint& p, const std::shared_ptr<const Dataset>& real)
{
    try {
        SystemConfig base = s.system;
        base.group_size = p.group_size;
        base.intentional_delay = 0;
        p.config = resolved_system(base, p.delay);
        auto outcome = run_configuration(s, *p.config, std::filesystem::path(s.output_dir) / p.directory, real);
        p.exit_code = outcome.exit_code;
        double loss = 0.0;
        double avg = 0.0;
        for (const auto& r : outcome.seeds) {
            loss += r.final_loss;
            avg += r.avg_grad_norm_sq;
            if (r.exit_code != 0 && p.error.empty())
                p.error = r.error;
        }
        const auto& first = outcome.seeds.front();
        p.rounds = first.completed_rounds;
        p.staleness = first.steady_staleness;
        p.round_duration = first.round_duration;
        p.final_loss = loss / static_cast<double>(outcome.seeds.size());
        p.avg_grad_norm_sq = avg / static_cast<double>(outcome.seeds.size());
    }
    catch (const Error& e) {
        p.exit_code = e.exit_code();
        p.error = e.what();
    }
}

/// Grid points run on up to `workers` threads; each writes only its own directory.
inline ExperimentOutcome run_sweep(const ExperimentSpec& s)
{
    validate(s);
    auto grid = sweep_grid(s);
    const auto real = preload(s);
    std::atomic<std::size_t> next{0};
    auto work = [&] {
        for (std::size_t i = next++; i < grid.size(); i = next++)
            run_sweep_point(s, grid[i], real);
    };
    const int threads = std::min<int>(s.workers, static_cast<int>(grid.size()));
    std::vector<std::thread> pool;
    for (int t = 1; t < threads; ++t)
        pool.emplace_back(work);
    work();
    for (auto& t : pool)
        t.join();

    ExperimentOutcome out;
    Json points = Json::array();
    std::ostringstream csv;
    csv << "group_size,intentional_delay,alpha,num_groups,rounds,staleness,round_duration,final_loss,"
           "avg_grad_norm_sq,status\n";
    for (const auto& p : grid) {
        if (p.exit_code != 0 && out.exit_code == 0)
            out.exit_code = p.exit_code;
        Json j;
        j["group_size"] = p.group_size;
        j["intentional_delay"] = detail::delay_json(p.delay);
        j["alpha"] = p.config ? Json(p.config->intentional_delay) : Json(nullptr);
        j["num_groups"] = p.config ? Json(p.config->num_groups()) : Json(nullptr);
        j["rounds"] = p.rounds;
        j["staleness"] = p.staleness ? Json(*p.staleness) : Json(nullptr);
        j["round_duration"] = p.round_duration ? Json(to_string(*p.round_duration)) : Json(nullptr);
        j["final_loss"] = p.final_loss;
        j["avg_grad_norm_sq"] = p.avg_grad_norm_sq;
        j["directory"] = p.directory;
        j["status"] = p.exit_code == 0 ? "ok" : "error";
        if (p.exit_code != 0)
            j["error"] = {{"exit_code", p.exit_code}, {"message", p.error}};
        points.push_back(j);
        csv << p.group_size << ',' << p.delay.label() << ','
            << (p.config ? std::to_string(p.config->intentional_delay) : "") << ','
            << (p.config ? std::to_string(p.config->num_groups()) : "") << ',' << p.rounds << ','
            << (p.staleness ? std::to_string(*p.staleness) : "") << ','
            << (p.round_duration ? to_string(*p.round_duration) : "") << ',' << detail::shortest(p.final_loss) << ','
            << detail::shortest(p.avg_grad_norm_sq) << ',' << (p.exit_code == 0 ? "ok" : "error") << '\n';
    }

    // IDFL minus plain asynchronous FL, per S, on the mean final loss.
    Json deltas = Json::array();
    std::map<int, std::pair<const SweepPoint*, const SweepPoint*>> by_size;
    for (const auto& p : grid) {
        if (p.exit_code != 0 || !p.config)
            continue;
        auto& slot = by_size[p.group_size];
        if (!p.delay.automatic && p.delay.value == 0)
            slot.first = &p;
        else if (!slot.second)
            slot.second = &p;
    }
    for (const auto& [S, pair] : by_size) {
        if (!pair.first || !pair.second)
            continue;
        deltas.push_back({{"group_size", S},
                          {"alpha", pair.second->config->intentional_delay},
                          {"plain_final_loss", pair.first->final_loss},
                          {"idfl_final_loss", pair.second->final_loss},
                          {"delta", pair.second->final_loss - pair.first->final_loss}});
    }

    out.report["config"] = spec_to_json(s);
    out.report["points"] = points;
    out.report["deltas"] = deltas;
    out.report["status"] = out.exit_code == 0 ? "ok" : "error";
    std::filesystem::create_directories(s.output_dir);
    write_text(std::filesystem::path(s.output_dir) / "sweep.json", out.report.dump(2) + "\n");
    write_text(std::filesystem::path(s.output_dir) / "sweep.csv", csv.str());
    return out;
}

// ---------------------------------------------------------------- validation reports

struct TimingCase {
    std::string name;
    SystemConfig base;                 // group_size is overridden per entry
    std::vector<int> group_sizes;
    std::vector<Round> reference;      // published round counts, may be empty
};

/// The two configurations behind the published round-count table.
inline std::vector<TimingCase> default_timing_cases()
{
    SystemConfig mnist;
    mnist.num_devices = 100;
    mnist.local_steps = 5;
    mnist.batch_size = 64;
    mnist.samples_per_slot = Rational(32, 5);
    mnist.horizon = 50000;
    mnist.step_size = 0.01;
    SystemConfig cifar = mnist;
    cifar.num_devices = 20;
    cifar.local_steps = 8;
    cifar.samples_per_slot = Rational(128);
    cifar.horizon = 100000;
    return {{"mnist", mnist, {1, 5, 10, 25, 50, 100}, {24976, 8326, 4541, 1922, 980, 332}},
            {"cifar10", cifar, {1, 2, 5, 10, 20}, {49999, 33333, 16667, 9091, 4001}}};
}

inline Json validate_timing(const std::vector<TimingCase>& cases)
{
    Json out = Json::array();
    for (const auto& c : cases) {
        Json rows = Json::array();
        for (std::size_t i = 0; i < c.group_sizes.size(); ++i) {
            SystemConfig cfg = c.base;
            cfg.group_size = c.group_sizes[i];
            cfg.intentional_delay = 0;
            SimulationOptions so;
            so.record_events = false;
            const auto tl = run_timeline(cfg, so);
            Json row = timing_json(cfg);
            row["group_size"] = cfg.group_size;
            row["simulated_rounds"] = tl.completed_rounds();
            if (i < c.reference.size())
                row["reference_rounds"] = c.reference[i];
            rows.push_back(row);
        }
        out.push_back({{"name", c.name},
                       {"num_devices", c.base.num_devices},
                       {"horizon", c.base.horizon},
                       {"tau_comp", compute_tau_comp(c.base)},
                       {"slots_per_transfer", c.base.slots_per_transfer},
                       {"rows", rows}});
    }
    return out;
}

struct Prop1Case {
    Rational compute_per_transfer;
    int group_size = 1;
    int num_devices = 100;
};

inline std::vector<Prop1Case> default_prop1_cases()
{
    return {{Rational(50), 1, 100}, {Rational(10), 1, 100}, {Rational(2), 1, 100}};
}

inline Json validate_prop1(const std::vector<Prop1Case>& cases)
{
    Json out = Json::array();
    for (const auto& c : cases) {
        const auto d = optimal_intentional_delay(c.compute_per_transfer, c.group_size, c.num_devices);
        out.push_back({{"tau_comp_over_r", to_string(c.compute_per_transfer)},
                       {"group_size", c.group_size},
                       {"num_devices", c.num_devices},
                       {"alpha", d.alpha},
                       {"d_star", d.d_star}});
    }
    return out;
}

inline Json rate_point_json(const RatePoint& p)
{
    return {{"group_size", p.group_size}, {"num_groups", p.num_groups}, {"rounds", p.rounds},
            {"eta", p.eta},               {"capped", p.capped},         {"per_seed", p.per_seed},
            {"mean", p.mean},             {"stderr", p.stderr_}};
}

inline Json run_rate_trend(const ExperimentSpec& s)
{
    validate(s);
    if (s.task.kind != "quadratic")
        throw ConfigError("task.kind: rate-trend needs the quadratic task");
    const std::uint64_t seed = s.seeds.front();
    auto built = build_task(s, seed);
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    AssumptionConstants constants = *built.exact;
    if (s.rate_trend.constants == "estimated")
        constants = estimate_constants(built.task, 64, 2.0 * std::max(1.0, s.task.init_radius), rng);
    RateTrendOptions o;
    o.group_sizes = s.rate_trend.group_sizes;
    o.rounds = s.rate_trend.rounds;
    o.seeds = s.rate_trend.seeds;
    o.decay_group_size = s.rate_trend.decay_group_size;
    o.decay_multiplier = s.rate_trend.decay_multiplier;
    o.init_radius = s.task.init_radius;
    o.base_seed = seed;
    const auto report = rate_trend(built.task, constants, s.system, o, *built.optimum, rng);
    Json points = Json::array();
    for (const auto& p : report.by_group)
        points.push_back(rate_point_json(p));
    Json j;
    j["constants"] = {{"L_smooth", constants.L_smooth},
                      {"sigma_sq", constants.sigma_sq},
                      {"M", constants.M},
                      {"gamma_sq", constants.gamma_sq},
                      {"provenance", to_string(constants.provenance)}};
    j["by_group"] = points;
    j["monotone"] = report.monotone;
    j["separated"] = report.separated;
    if (report.decay_base) {
        j["decay"] = {{"base", rate_point_json(*report.decay_base)},
                      {"scaled", rate_point_json(*report.decay_scaled)},
                      {"ratio", report.decay_ratio}};
    }
    j["notices"] = report.notices;
    return j;
}

} // namespace tdma_fl
