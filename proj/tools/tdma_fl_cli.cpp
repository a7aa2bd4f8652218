// tdma-fl: experiment runner for asynchronous federated learning over TDMA.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>
#include <optional>

#include "tdma_fl/experiment.hpp"

using namespace tdma_fl;

namespace {

struct Flags {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> workers;
    std::string dataset_dir;
};

void add_flags(CLI::App* cmd, Flags& f, bool config_required)
{
    auto* c = cmd->add_option("--config", f.config, "experiment JSON file");
    if (config_required)
        c->required();
    cmd->add_option("--seed", f.seed, "run this single seed instead of the configured list");
    cmd->add_option("--out", f.out, "output directory");
    cmd->add_option("--workers", f.workers, "concurrent sweep points");
    cmd->add_option("--dataset-dir", f.dataset_dir,
                    std::string("directory holding MNIST/CIFAR-10 files (default: $") + dataset_dir_env + ")");
}

ExperimentSpec load(const Flags& f, const std::string& mode)
{
    ExperimentSpec s = f.config.empty() ? ExperimentSpec{} : load_spec(f.config);
    s.mode = mode;
    if (f.seed)
        s.seeds = {*f.seed};
    if (!f.out.empty())
        s.output_dir = f.out;
    if (f.workers)
        s.workers = *f.workers;
    if (!f.dataset_dir.empty())
        s.dataset_dir = f.dataset_dir;
    validate(s);
    return s;
}

void save_report(const Flags& f, const std::string& name, const Json& report)
{
    if (f.out.empty())
        return;
    std::filesystem::create_directories(f.out);
    write_text(std::filesystem::path(f.out) / name, report.dump(2) + "\n");
}

int cmd_run(const Flags& f)
{
    const auto s = load(f, "run");
    const auto outcome = run_experiment(s);
    const auto& t = outcome.report["timing"];
    std::printf("scenario %s: tau_comp=%lld tau_asyn=%s G=%d alpha=%d\n", s.scenario.c_str(),
                t["tau_comp"].get<long long>(), t["tau_asyn"].get<std::string>().c_str(), t["num_groups"].get<int>(),
                t["intentional_delay"].get<int>());
    for (const auto& r : outcome.seeds) {
        if (r.exit_code == 0)
            std::printf("seed %llu: rounds=%lld final_loss=%.6g avg_grad_norm_sq=%.6g\n",
                        static_cast<unsigned long long>(r.seed), static_cast<long long>(r.completed_rounds),
                        r.final_loss, r.avg_grad_norm_sq);
        else
            std::printf("seed %llu: error (%d): %s\n", static_cast<unsigned long long>(r.seed), r.exit_code,
                        r.error.c_str());
    }
    std::printf("artifacts in %s\n", s.output_dir.c_str());
    return outcome.exit_code;
}

int cmd_sweep(const Flags& f)
{
    const auto s = load(f, "sweep");
    const auto outcome = run_sweep(s);
    std::printf("%6s %6s %6s %8s %10s %14s  %s\n", "S", "delay", "alpha", "rounds", "staleness", "final_loss",
                "status");
    for (const auto& p : outcome.report["points"]) {
        const std::string delay = p["intentional_delay"].is_string() ? "auto"
                                                                     : std::to_string(p["intentional_delay"].get<int>());
        std::printf("%6d %6s %6s %8lld %10s %14.6g  %s\n", p["group_size"].get<int>(), delay.c_str(),
                    p["alpha"].is_null() ? "-" : std::to_string(p["alpha"].get<int>()).c_str(),
                    p["rounds"].get<long long>(),
                    p["staleness"].is_null() ? "-" : std::to_string(p["staleness"].get<long long>()).c_str(),
                    p["final_loss"].get<double>(), p["status"].get<std::string>().c_str());
    }
    for (const auto& d : outcome.report["deltas"])
        std::printf("S=%d: IDFL - plain final loss = %.6g\n", d["group_size"].get<int>(), d["delta"].get<double>());
    std::printf("artifacts in %s\n", s.output_dir.c_str());
    return outcome.exit_code;
}

int cmd_validate_timing(const Flags& f)
{
    std::vector<TimingCase> cases;
    if (f.config.empty()) {
        cases = default_timing_cases();
    }
    else {
        const auto s = load(f, "validate-timing");
        auto sizes = s.sweep.group_sizes.empty() ? std::vector<int>{s.system.group_size} : s.sweep.group_sizes;
        cases.push_back({s.scenario, s.system, sizes, {}});
    }
    const Json report = validate_timing(cases);
    for (const auto& c : report) {
        std::printf("%s: N=%d T=%lld tau_comp=%lld r=%d\n", c["name"].get<std::string>().c_str(),
                    c["num_devices"].get<int>(), c["horizon"].get<long long>(), c["tau_comp"].get<long long>(),
                    c["slots_per_transfer"].get<int>());
        std::printf("%6s %10s %10s %10s %10s\n", "S", "tau_asyn", "formula", "simulated", "reference");
        for (const auto& r : c["rows"])
            std::printf("%6d %10s %10lld %10lld %10s\n", r["group_size"].get<int>(),
                        r["tau_asyn"].get<std::string>().c_str(), r["formula_rounds"].get<long long>(),
                        r["simulated_rounds"].get<long long>(),
                        r.contains("reference_rounds") ? std::to_string(r["reference_rounds"].get<long long>()).c_str()
                                                       : "-");
    }
    save_report(f, "validate_timing.json", report);
    return 0;
}

int cmd_validate_prop1(const Flags& f)
{
    std::vector<Prop1Case> cases;
    if (f.config.empty()) {
        cases = default_prop1_cases();
    }
    else {
        const auto s = load(f, "validate-prop1");
        cases.push_back({Rational(compute_tau_comp(s.system), s.system.slots_per_transfer), s.system.group_size,
                         s.system.num_devices});
    }
    const Json report = validate_prop1(cases);
    for (const auto& c : report)
        std::printf("tau_comp/r=%s S=%d N=%d: (alpha, d*) = (%d, %d)\n",
                    c["tau_comp_over_r"].get<std::string>().c_str(), c["group_size"].get<int>(),
                    c["num_devices"].get<int>(), c["alpha"].get<int>(), c["d_star"].get<int>());
    save_report(f, "validate_prop1.json", report);
    return 0;
}

int cmd_rate_trend(const Flags& f)
{
    const auto s = load(f, "rate-trend");
    const Json report = run_rate_trend(s);
    std::printf("constants (%s): L=%.6g sigma^2=%.6g M=%.6g Gamma^2=%.6g\n",
                report["constants"]["provenance"].get<std::string>().c_str(),
                report["constants"]["L_smooth"].get<double>(), report["constants"]["sigma_sq"].get<double>(),
                report["constants"]["M"].get<double>(), report["constants"]["gamma_sq"].get<double>());
    for (const auto& p : report["by_group"])
        std::printf("G=%d S=%d eta=%.4g avg ||grad f||^2 = %.6g +- %.2g\n", p["num_groups"].get<int>(),
                    p["group_size"].get<int>(), p["eta"].get<double>(), p["mean"].get<double>(),
                    p["stderr"].get<double>());
    std::printf("non-decreasing in G: %s, separated: %s\n", report["monotone"].get<bool>() ? "yes" : "no",
                report["separated"].get<bool>() ? "yes" : "no");
    if (report.contains("decay"))
        std::printf("decay ratio K vs %dK: %.4g\n", s.rate_trend.decay_multiplier,
                    report["decay"]["ratio"].get<double>());
    for (const auto& n : report["notices"])
        std::printf("notice: %s\n", n.get<std::string>().c_str());
    std::filesystem::create_directories(s.output_dir);
    write_text(std::filesystem::path(s.output_dir) / "rate_trend.json", report.dump(2) + "\n");
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Asynchronous federated learning over a TDMA channel"};
    app.require_subcommand(1);
    Flags flags;
    auto* run = app.add_subcommand("run", "train every configured seed and write metrics");
    auto* sweep = app.add_subcommand("sweep", "run a grid over group size and intentional delay");
    auto* timing = app.add_subcommand("validate-timing", "simulated vs closed-form round counts");
    auto* prop1 = app.add_subcommand("validate-prop1", "optimal intentional delay for given ratios");
    auto* trend = app.add_subcommand("rate-trend", "average squared gradient norm across group counts");
    add_flags(run, flags, true);
    add_flags(sweep, flags, true);
    add_flags(timing, flags, false);
    add_flags(prop1, flags, false);
    add_flags(trend, flags, true);

    try {
        app.parse(argc, argv);
    }
    catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : static_cast<int>(ErrorClass::config);
    }

    try {
        if (run->parsed())
            return cmd_run(flags);
        if (sweep->parsed())
            return cmd_sweep(flags);
        if (timing->parsed())
            return cmd_validate_timing(flags);
        if (prop1->parsed())
            return cmd_validate_prop1(flags);
        return cmd_rate_trend(flags);
    }
    catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    }
    catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}
