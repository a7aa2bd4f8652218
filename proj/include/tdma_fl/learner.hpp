#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tdma_fl/dataset.hpp"
#include "tdma_fl/errors.hpp"
#include "tdma_fl/metrics.hpp"
#include "tdma_fl/models.hpp"
#include "tdma_fl/schedule.hpp"
#include "tdma_fl/task.hpp"

namespace tdma_fl {

struct GlobalState {
    Round round = 0;
    Vector w;
};

/// What a device uploads: the summed step gradients of its local pass,
/// i.e. (w_start - w_end) / eta, which is the plain mini-batch gradient
/// when local_steps == 1.
struct LocalGradient {
    int device = 0;
    Round origin_round = 0;
    Vector gradient;
    std::vector<std::size_t> batch_ids;
};

struct LocalTrainingOptions {
    int batch_size = 1;
    int local_steps = 1;
    double step_size = 0.01;
    bool fresh_batch_per_step = true; // false: reuse the first batch for all H steps
};

/// Independent stream per (seed, device, round) so runs are reproducible
/// regardless of event order.
inline std::mt19937_64 batch_rng(std::uint64_t seed, int device, Round round)
{
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(device), static_cast<std::uint32_t>(round),
                      static_cast<std::uint32_t>(static_cast<std::uint64_t>(round) >> 32)};
    return std::mt19937_64(seq);
}

/// B distinct samples of the shard, uniformly at random.
template <class Rng>
std::vector<std::size_t> sample_batch(const DatasetShard& shard, int batch_size, Rng& rng)
{
    if (shard.indices.empty())
        throw DataError("device " + std::to_string(shard.device_id) + ": empty shard");
    if (batch_size < 1 || static_cast<std::size_t>(batch_size) > shard.size())
        throw DataError("device " + std::to_string(shard.device_id) + ": batch size " + std::to_string(batch_size) +
                        " exceeds shard size " + std::to_string(shard.size()));
    std::vector<std::size_t> pool = shard.indices;
    for (std::size_t i = 0; i < static_cast<std::size_t>(batch_size); ++i) {
        std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
        std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(static_cast<std::size_t>(batch_size));
    return pool;
}

template <class Rng>
LocalGradient local_update(const Model& model, const Dataset& data, const DatasetShard& shard, const Vector& w,
                           const LocalTrainingOptions& opts, Rng& rng, Round origin_round = 0)
{
    if (opts.local_steps < 1)
        throw ConfigError("local_steps: must be >= 1");
    LocalGradient out;
    out.device = shard.device_id;
    out.origin_round = origin_round;
    out.gradient = Vector::Zero(model.dimension());

    Vector current = w;
    Vector step;
    std::vector<std::size_t> batch;
    for (int h = 0; h < opts.local_steps; ++h) {
        if (h == 0 || opts.fresh_batch_per_step) {
            batch = sample_batch(shard, opts.batch_size, rng);
            out.batch_ids.insert(out.batch_ids.end(), batch.begin(), batch.end());
        }
        model.evaluate(current, data, batch, &step);
        out.gradient += step;
        if (h + 1 < opts.local_steps)
            current -= opts.step_size * step;
    }
    return out;
}

/// Mean of exactly S uploaded gradients.
inline Vector aggregate(std::span<const LocalGradient> gradients, int group_size)
{
    if (static_cast<int>(gradients.size()) != group_size)
        throw ContractError("aggregate: got " + std::to_string(gradients.size()) + " gradients, expected " +
                            std::to_string(group_size));
    if (gradients.empty())
        throw ContractError("aggregate: nothing to aggregate");
    Vector sum = Vector::Zero(gradients.front().gradient.size());
    for (const auto& g : gradients) {
        if (g.gradient.size() != sum.size())
            throw ContractError("aggregate: gradient dimension mismatch");
        sum += g.gradient;
    }
    return sum / static_cast<double>(group_size);
}

/// w_{k+1} = w_k - eta * g_bar.
inline GlobalState global_update(const GlobalState& state, const Vector& g_bar, double step_size)
{
    if (g_bar.size() != state.w.size())
        throw ContractError("global_update: dimension mismatch");
    GlobalState next{state.round + 1, state.w - step_size * g_bar};
    if (!next.w.allFinite())
        throw NumericError("global_update: non-finite parameters after round " + std::to_string(state.round));
    return next;
}

/// f(w) = (1/D) sum over the samples of l(w, zeta).
inline double global_loss(const Model& model, const Vector& w, const Dataset& data,
                          std::span<const std::size_t> samples)
{
    return model.evaluate(w, data, samples, nullptr);
}

struct LearnerOptions {
    LocalTrainingOptions local;
    std::uint64_t seed = 0;
    int metrics_every = 1;     // 0 disables per-round metrics
    bool keep_history = false; // retain every w_k (probe generation, audits)
};

/// Which stale model fed which global update.
struct AppliedUpdate {
    Round round = 0;
    int device = 0;
    Round origin_round = 0;
};

/// Connects the slot simulator to the numerical update rule. A device's
/// update is computed when it starts training, from a copy of the model it
/// has just received, and held until it is uploaded.
class FederatedLearner {
public:
    FederatedLearner(const FederatedTask& task, Vector w0, LearnerOptions opts)
        : m_task(task), m_opts(std::move(opts)), m_state{0, std::move(w0)}
    {
        if (m_state.w.size() != task.dimension())
            throw ConfigError("initial parameters have the wrong dimension");
        if (m_opts.keep_history)
            m_history.push_back(m_state.w);
        if (m_opts.metrics_every > 0)
            record(0, 0);
    }

    void start_local(int device, Round model_round)
    {
        if (model_round != m_state.round)
            throw ContractError("device " + std::to_string(device) + " asked for w_" + std::to_string(model_round) +
                                " while the server holds w_" + std::to_string(m_state.round));
        auto rng = batch_rng(m_opts.seed, device, model_round);
        m_pending[device] = local_update(m_task.model(), m_task.data(), m_task.shard(device), m_state.w,
                                         m_opts.local, rng, model_round);
    }

    void finish_round(const RoundSummary& s)
    {
        if (s.round != m_state.round)
            throw ContractError("finish_round: out-of-order round " + std::to_string(s.round));
        std::vector<LocalGradient> batch;
        batch.reserve(s.transmitters.size());
        Round worst = 0;
        for (std::size_t i = 0; i < s.transmitters.size(); ++i) {
            const int id = s.transmitters[i];
            auto it = m_pending.find(id);
            if (it == m_pending.end())
                throw ContractError("device " + std::to_string(id) + " transmitted without a pending update");
            if (it->second.origin_round != s.model_rounds[i])
                throw ContractError("device " + std::to_string(id) + " update origin mismatch");
            m_applied.push_back({s.round, id, it->second.origin_round});
            worst = std::max(worst, s.round - it->second.origin_round);
            batch.push_back(std::move(it->second));
            m_pending.erase(it);
        }
        m_state = global_update(m_state, aggregate(batch, static_cast<int>(batch.size())),
                                m_opts.local.step_size);
        if (m_opts.keep_history)
            m_history.push_back(m_state.w);
        if (m_opts.metrics_every > 0 && m_state.round % m_opts.metrics_every == 0)
            record(s.end_slot, worst);
    }

    const GlobalState& state() const { return m_state; }
    const RunMetrics& metrics() const { return m_metrics; }
    const std::vector<AppliedUpdate>& applied() const { return m_applied; }
    const std::vector<Vector>& history() const { return m_history; }

private:
    void record(Slot slot, Round staleness)
    {
        double loss = 0.0;
        const Vector g = m_task.global_gradient(m_state.w, &loss);
        if (!std::isfinite(loss) || !std::isfinite(g.squaredNorm()))
            throw NumericError("global loss overflowed at round " + std::to_string(m_state.round));
        m_metrics.rows.push_back({m_state.round, slot, loss, g.squaredNorm(), staleness});
    }

    const FederatedTask& m_task;
    LearnerOptions m_opts;
    GlobalState m_state;
    std::map<int, LocalGradient> m_pending;
    std::vector<AppliedUpdate> m_applied;
    std::vector<Vector> m_history;
    RunMetrics m_metrics;
};

static_assert(RoundLearner<FederatedLearner>);

} // namespace tdma_fl
