#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "tdma_fl/errors.hpp"
#include "tdma_fl/learner.hpp"
#include "tdma_fl/metrics.hpp"
#include "tdma_fl/schedule.hpp"
#include "tdma_fl/task.hpp"
#include "tdma_fl/timing.hpp"

namespace tdma_fl {

namespace detail {

template <class Rng>
Vector random_unit(Eigen::Index dim, Rng& rng)
{
    std::normal_distribution<double> gauss(0.0, 1.0);
    Vector v(dim);
    do {
        for (Eigen::Index i = 0; i < dim; ++i)
            v(i) = gauss(rng);
    } while (v.norm() == 0.0);
    return v / v.norm();
}

/// Uniform point in the ball of the given radius around `center`.
template <class Rng>
Vector random_in_ball(const Vector& center, double radius, Rng& rng)
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double scale = radius * std::pow(unit(rng), 1.0 / static_cast<double>(center.size()));
    return center + scale * random_unit(center.size(), rng);
}

inline double mean_of(const std::vector<double>& v)
{
    double s = 0.0;
    for (double x : v)
        s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double stderr_of(const std::vector<double>& v)
{
    if (v.size() < 2)
        return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v)
        ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1) / static_cast<double>(v.size()));
}

} // namespace detail

struct EstimateOptions {
    std::optional<Vector> center;      // default: origin
    int refine_pairs = 4;              // best pairs refined by gradient-difference power iteration
    int max_refine_iterations = 5000;
};

/// Sampled envelopes of the assumption constants.
///
/// L: largest witnessed ||grad f(w) - grad f(w')|| / ||w - w'||; the best
/// pairs are pushed towards the top curvature direction by iterating the
/// gradient difference. Gamma^2: largest ||grad f(w) - grad f_n(w)||^2.
/// (sigma^2, M): least-squares slope of E||grad l(w; zeta)||^2 against
/// ||grad f_n(w)||^2 (clamped to >= 1), intercept lifted until no sampled
/// point lies above the line.
template <class Rng>
AssumptionConstants estimate_constants(const FederatedTask& task, int sample_count, double radius, Rng& rng,
                                       const EstimateOptions& opts = {})
{
    if (sample_count < 2)
        throw ConfigError("estimate_constants: sample_count must be >= 2");
    if (!(radius > 0.0))
        throw ConfigError("estimate_constants: degenerate sampling (radius must be > 0)");
    const Eigen::Index dim = task.dimension();
    const Vector center = opts.center.value_or(Vector::Zero(dim));

    std::vector<Vector> points;
    for (int i = 0; i < sample_count; ++i)
        points.push_back(detail::random_in_ball(center, radius, rng));

    // Smoothness.
    struct Pair {
        double ratio;
        Vector w;
        Vector delta;
    };
    std::vector<Pair> pairs;
    for (int i = 0; i < sample_count; ++i) {
        const Vector& w = points[static_cast<std::size_t>(i)];
        const Vector& v = points[static_cast<std::size_t>((i + 1) % sample_count)];
        const Vector delta = v - w;
        if (delta.norm() == 0.0)
            continue;
        const double ratio = (task.global_gradient(v) - task.global_gradient(w)).norm() / delta.norm();
        pairs.push_back({ratio, w, delta});
    }
    if (pairs.empty())
        throw ConfigError("estimate_constants: degenerate sampling (all points coincide)");
    std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) { return a.ratio > b.ratio; });
    double smooth = pairs.front().ratio;
    const int refine = std::min<int>(opts.refine_pairs, static_cast<int>(pairs.size()));
    for (int p = 0; p < refine; ++p) {
        Vector w = pairs[static_cast<std::size_t>(p)].w;
        Vector delta = pairs[static_cast<std::size_t>(p)].delta;
        const double len = delta.norm();
        const Vector gw = task.global_gradient(w);
        double last = 0.0;
        for (int it = 0; it < opts.max_refine_iterations; ++it) {
            const Vector diff = task.global_gradient(w + delta) - gw;
            const double ratio = diff.norm() / delta.norm();
            smooth = std::max(smooth, ratio);
            if (diff.norm() == 0.0 || std::abs(ratio - last) <= 1e-15 * ratio)
                break;
            last = ratio;
            delta = diff * (len / diff.norm());
        }
    }

    // Heterogeneity and second moment.
    double gamma_sq = 0.0;
    std::vector<double> xs;
    std::vector<double> ys;
    for (const auto& w : points) {
        const Vector g = task.global_gradient(w);
        for (int n = 1; n <= task.num_devices(); ++n) {
            const Vector gn = task.local_gradient(n, w);
            gamma_sq = std::max(gamma_sq, (g - gn).squaredNorm());
            double second = 0.0;
            for (auto i : task.shard(n).indices)
                second += task.sample_gradient(w, i).squaredNorm();
            xs.push_back(gn.squaredNorm());
            ys.push_back(second / static_cast<double>(task.shard(n).size()));
        }
    }
    const double mx = detail::mean_of(xs);
    const double my = detail::mean_of(ys);
    double sxx = 0.0;
    double sxy = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxx += (xs[i] - mx) * (xs[i] - mx);
        sxy += (xs[i] - mx) * (ys[i] - my);
    }
    const double slope = sxx > 0.0 ? sxy / sxx : 1.0;
    AssumptionConstants c;
    c.M = std::max(1.0, slope);
    c.sigma_sq = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i)
        c.sigma_sq = std::max(c.sigma_sq, ys[i] - c.M * xs[i]);
    c.L_smooth = smooth;
    c.gamma_sq = gamma_sq;
    c.provenance = Provenance::estimated;
    return c;
}

/// The state entering round k: w_k, the transmitters of round k and the
/// stale models they trained on.
struct ProbeState {
    Round round = 0;
    Vector w;
    std::vector<int> transmitters;
    std::vector<Vector> stale_models;
    std::vector<Round> staleness;
};

/// Probes taken from actual asynchronous runs: each starts from a random
/// point within `radius` of `center`, runs to a random round k in [G, 3G]
/// and records the state entering round k.
template <class Rng>
std::vector<ProbeState> trajectory_probes(const FederatedTask& task, const SystemConfig& cfg, int count,
                                          const Vector& center, double radius, Rng& rng)
{
    cfg.validate();
    const int G = cfg.num_groups();
    std::uniform_int_distribution<Round> pick_round(G, 3 * G);
    std::vector<ProbeState> probes;
    for (int p = 0; p < count; ++p) {
        const Round k = pick_round(rng);
        LearnerOptions lo;
        lo.local = {cfg.batch_size, 1, cfg.step_size, true};
        lo.seed = rng();
        lo.metrics_every = 0;
        lo.keep_history = true;
        FederatedLearner learner(task, detail::random_in_ball(center, radius, rng), lo);
        SimulationOptions so;
        so.round_limit = k + 1;
        so.record_events = false;
        SystemConfig run = cfg;
        run.horizon = std::numeric_limits<Slot>::max() / 4;
        const Timeline tl = run_timeline(run, learner, so);
        if (tl.completed_rounds() < k + 1)
            throw ContractError("trajectory_probes: run ended before round " + std::to_string(k));
        ProbeState s;
        s.round = k;
        s.w = learner.history()[static_cast<std::size_t>(k)];
        s.transmitters = tl.rounds[static_cast<std::size_t>(k)].transmitters;
        for (const auto& rec : tl.staleness) {
            if (rec.round != k)
                continue;
            s.stale_models.push_back(learner.history()[static_cast<std::size_t>(rec.model_round)]);
            s.staleness.push_back(rec.staleness);
        }
        probes.push_back(std::move(s));
    }
    return probes;
}

/// Right-hand side of the one-round descent bound for a probe, with every
/// expectation on that side replaced by its exact full-gradient value.
inline double descent_bound_rhs(const FederatedTask& task, const AssumptionConstants& c, const ProbeState& probe,
                                int group_size, int batch_size, double step_size)
{
    const double eta = step_size;
    const double S = group_size;
    const double B = batch_size;
    const double L = c.L_smooth;
    double f_k = 0.0;
    const Vector g_k = task.global_gradient(probe.w, &f_k);
    double stale_grad_sq = 0.0;
    double drift_sq = 0.0;
    for (std::size_t i = 0; i < probe.transmitters.size(); ++i) {
        stale_grad_sq += task.local_gradient(probe.transmitters[i], probe.stale_models[i]).squaredNorm();
        drift_sq += (probe.w - probe.stale_models[i]).squaredNorm();
    }
    return f_k - 0.5 * eta * g_k.squaredNorm() +
           (eta * eta * c.M * L / (2.0 * S * S * B) - eta / (2.0 * S)) * stale_grad_sq + 0.5 * eta * c.gamma_sq +
           eta * L * L / (2.0 * S) * drift_sq + eta * eta * c.sigma_sq * L / (2.0 * S * B);
}

/// Exact E[f(w_{k+1})] for a shared-curvature quadratic task (one local
/// step, batches drawn without replacement): f(w - eta E[g]) plus
/// (eta^2 / 2) tr(A Cov[g]).
inline double quadratic_expected_next_loss(const FederatedTask& task, const Matrix& curvature,
                                           const ProbeState& probe, int batch_size, double step_size)
{
    const double S = static_cast<double>(probe.transmitters.size());
    Vector mean_grad = Vector::Zero(probe.w.size());
    Matrix cov = Matrix::Zero(probe.w.size(), probe.w.size());
    for (std::size_t i = 0; i < probe.transmitters.size(); ++i) {
        const auto& shard = task.shard(probe.transmitters[i]);
        mean_grad += task.local_gradient(probe.transmitters[i], probe.stale_models[i]);
        const double D = static_cast<double>(shard.size());
        Matrix x(probe.w.size(), shard.indices.size());
        for (std::size_t j = 0; j < shard.indices.size(); ++j)
            x.col(static_cast<Eigen::Index>(j)) = task.data().features.col(static_cast<Eigen::Index>(shard.indices[j]));
        x.colwise() -= x.rowwise().mean();
        const Matrix pop = curvature * (x * x.transpose() / D) * curvature;
        const double shrink = D > 1.0 ? (D - batch_size) / (batch_size * (D - 1.0)) : 0.0;
        cov += shrink * pop;
    }
    mean_grad /= S;
    cov /= S * S;
    return task.global_loss(probe.w - step_size * mean_grad) +
           0.5 * step_size * step_size * (curvature * cov).trace();
}

struct ProbeResult {
    Round round = 0;
    double lhs = 0.0;        // Monte-Carlo mean of f(w_{k+1})
    double lhs_stderr = 0.0;
    double rhs = 0.0;
    double margin = 0.0;     // rhs - lhs
    bool violated = false;   // margin < -3 standard errors
};

struct DescentReport {
    std::vector<ProbeResult> probes;
    int violations = 0;
    double fraction_ok = 1.0;
    double max_stderr = 0.0;
    std::vector<std::string> warnings;
};

struct DescentCheckOptions {
    int trials = 10000;
    std::optional<double> target_stderr;
};

/// Monte-Carlo check of the one-round descent bound: E[f(w_{k+1})] over the
/// round-k mini-batches (one step per device) against the exact bound.
template <class Rng>
DescentReport check_descent_lemma(const FederatedTask& task, const AssumptionConstants& constants,
                                  const SystemConfig& cfg, const std::vector<ProbeState>& probes, Rng& rng,
                                  const DescentCheckOptions& opts = {})
{
    if (opts.trials < 2)
        throw ConfigError("check_descent_lemma: need at least 2 trials");
    DescentReport report;
    for (const auto& probe : probes) {
        std::vector<double> draws;
        draws.reserve(static_cast<std::size_t>(opts.trials));
        const std::size_t S = probe.transmitters.size();
        Vector grad;
        for (int t = 0; t < opts.trials; ++t) {
            Vector g_bar = Vector::Zero(probe.w.size());
            for (std::size_t i = 0; i < S; ++i) {
                const auto& shard = task.shard(probe.transmitters[i]);
                const auto batch = sample_batch(shard, cfg.batch_size, rng);
                task.model().evaluate(probe.stale_models[i], task.data(), batch, &grad);
                g_bar += grad;
            }
            g_bar /= static_cast<double>(S);
            draws.push_back(task.global_loss(probe.w - cfg.step_size * g_bar));
        }
        ProbeResult r;
        r.round = probe.round;
        r.lhs = detail::mean_of(draws);
        r.lhs_stderr = detail::stderr_of(draws);
        r.rhs = descent_bound_rhs(task, constants, probe, static_cast<int>(S), cfg.batch_size, cfg.step_size);
        r.margin = r.rhs - r.lhs;
        // Round-off allowance for deterministic probes, where the standard error is zero.
        r.violated = r.margin < -3.0 * r.lhs_stderr - 1e-12 * std::max(1.0, std::abs(r.rhs));
        report.violations += r.violated ? 1 : 0;
        report.max_stderr = std::max(report.max_stderr, r.lhs_stderr);
        report.probes.push_back(r);
    }
    if (!probes.empty())
        report.fraction_ok = 1.0 - static_cast<double>(report.violations) / static_cast<double>(probes.size());
    if (opts.target_stderr && report.max_stderr > *opts.target_stderr)
        report.warnings.push_back("trials too small: achieved standard error " + std::to_string(report.max_stderr) +
                                  " exceeds target " + std::to_string(*opts.target_stderr));
    return report;
}

/// beta = (S B / (2 L N)) (sqrt(1 + 8 N / (B M)) - 1).
inline double theorem_beta(const AssumptionConstants& c, int group_size, int batch_size, int num_devices)
{
    const double S = group_size;
    const double B = batch_size;
    const double N = num_devices;
    return S * B / (2.0 * c.L_smooth * N) * (std::sqrt(1.0 + 8.0 * N / (B * c.M)) - 1.0);
}

struct StepSizeChoice {
    double eta = 0.0;
    bool capped = false;
};

/// eta = beta / sqrt(K + 1), capped at 2 / L.
inline StepSizeChoice theorem_step_size(const AssumptionConstants& c, int group_size, int batch_size,
                                        int num_devices, Round rounds)
{
    StepSizeChoice s;
    s.eta = theorem_beta(c, group_size, batch_size, num_devices) / std::sqrt(static_cast<double>(rounds) + 1.0);
    const double cap = 2.0 / c.L_smooth;
    if (s.eta > cap) {
        s.eta = cap;
        s.capped = true;
    }
    return s;
}

struct RateTrendOptions {
    std::vector<int> group_sizes;   // S values; G = N / S
    Round rounds = 2000;            // K
    int seeds = 10;
    int decay_group_size = 0;       // S for the K vs 4K check; 0 skips it
    int decay_multiplier = 4;
    double init_radius = 2.0;
    std::uint64_t base_seed = 1;
};

struct RatePoint {
    int group_size = 0;
    int num_groups = 0;
    Round rounds = 0;
    double eta = 0.0;
    bool capped = false;
    std::vector<double> per_seed;
    double mean = 0.0;
    double stderr_ = 0.0;
};

struct RateTrendReport {
    std::vector<RatePoint> by_group;  // ascending G
    bool monotone = false;            // mean non-decreasing in G
    bool separated = false;           // each adjacent increase >= 1 standard error
    std::optional<RatePoint> decay_base;
    std::optional<RatePoint> decay_scaled;
    double decay_ratio = 0.0;         // base mean / scaled mean
    std::vector<std::string> notices;
};

/// Seed-average of (1/(K+1)) sum_{k=0}^{K} ||grad f(w_k)||^2 for one S.
inline RatePoint average_grad_norm_point(const FederatedTask& task, const AssumptionConstants& c,
                                         const SystemConfig& base, int group_size, Round rounds, int seeds,
                                         const Vector& w0, std::uint64_t base_seed)
{
    SystemConfig cfg = base;
    cfg.group_size = group_size;
    cfg.intentional_delay = 0;
    cfg.local_steps = 1;
    cfg.slots_per_transfer = 1;
    cfg.with_compute_slots(1);
    cfg.horizon = std::numeric_limits<Slot>::max() / 4;
    const auto step = theorem_step_size(c, group_size, cfg.batch_size, cfg.num_devices, rounds);
    cfg.step_size = step.eta;

    RatePoint p;
    p.group_size = group_size;
    p.num_groups = cfg.num_groups();
    p.rounds = rounds;
    p.eta = step.eta;
    p.capped = step.capped;
    for (int s = 0; s < seeds; ++s) {
        LearnerOptions lo;
        lo.local = {cfg.batch_size, 1, cfg.step_size, true};
        lo.seed = base_seed + static_cast<std::uint64_t>(s);
        FederatedLearner learner(task, w0, lo);
        SimulationOptions so;
        so.round_limit = rounds;
        so.record_events = false;
        run_timeline(cfg, learner, so);
        p.per_seed.push_back(learner.metrics().average_grad_norm_sq());
    }
    p.mean = detail::mean_of(p.per_seed);
    p.stderr_ = detail::stderr_of(p.per_seed);
    return p;
}

/// Average squared gradient norm across TDMA group counts at fixed K, and
/// its decay when K is multiplied, with eta from the theorem's schedule.
template <class Rng>
RateTrendReport rate_trend(const FederatedTask& task, const AssumptionConstants& constants, const SystemConfig& base,
                           const RateTrendOptions& opts, const Vector& center, Rng& rng)
{
    RateTrendReport report;
    const Vector w0 = center + opts.init_radius * detail::random_unit(task.dimension(), rng);
    std::vector<int> sizes = opts.group_sizes;
    std::sort(sizes.begin(), sizes.end(), std::greater<>()); // ascending G
    for (int S : sizes) {
        if (S < 1 || S > base.num_devices || base.num_devices % S != 0) {
            report.notices.push_back("group size " + std::to_string(S) + " skipped: N=" +
                                     std::to_string(base.num_devices) + " is not divisible by it");
            continue;
        }
        auto p = average_grad_norm_point(task, constants, base, S, opts.rounds, opts.seeds, w0, opts.base_seed);
        if (p.capped)
            report.notices.push_back("S=" + std::to_string(S) + ": theorem step size capped at 2/L");
        report.by_group.push_back(std::move(p));
    }
    report.monotone = true;
    report.separated = true;
    for (std::size_t i = 1; i < report.by_group.size(); ++i) {
        const auto& lo = report.by_group[i - 1];
        const auto& hi = report.by_group[i];
        if (hi.mean < lo.mean)
            report.monotone = false;
        if (hi.mean - lo.mean < std::max(lo.stderr_, hi.stderr_))
            report.separated = false;
    }
    if (opts.decay_group_size > 0) {
        report.decay_base = average_grad_norm_point(task, constants, base, opts.decay_group_size, opts.rounds,
                                                    opts.seeds, w0, opts.base_seed);
        report.decay_scaled =
            average_grad_norm_point(task, constants, base, opts.decay_group_size,
                                    opts.rounds * opts.decay_multiplier, opts.seeds, w0, opts.base_seed);
        report.decay_ratio = report.decay_base->mean / report.decay_scaled->mean;
    }
    return report;
}

} // namespace tdma_fl
