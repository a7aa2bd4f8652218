#pragma once

#include <algorithm>
#include <concepts>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "tdma_fl/errors.hpp"
#include "tdma_fl/timing.hpp"

namespace tdma_fl {

/// Per-device round bookkeeping kept by the slot simulator.
struct DeviceState {
    int id = 0;                                     // 1-based
    Round last_model_round = 0;                     // k-hat: round index of the model it trains on
    std::optional<Slot> compute_done_slot;          // first slot at which the update can be sent
    std::optional<Round> awaiting_model_until_round; // delayed downlink (intentional delay only)

    /// An update is pending once local training has finished and it has not
    /// been transmitted yet.
    bool ready_at(Slot t) const { return compute_done_slot && *compute_done_slot <= t; }
};

enum class EventKind { compute_start, compute_done, uplink, downlink };

inline const char* to_string(EventKind kind)
{
    switch (kind) {
    case EventKind::compute_start: return "compute_start";
    case EventKind::compute_done: return "compute_done";
    case EventKind::uplink: return "uplink";
    case EventKind::downlink: return "downlink";
    }
    return "?";
}

inline EventKind parse_event_kind(const std::string& s)
{
    for (auto k : {EventKind::compute_start, EventKind::compute_done, EventKind::uplink, EventKind::downlink})
        if (s == to_string(k))
            return k;
    throw DataError("unknown event kind '" + s + "'");
}

/// Slot-stamped action. Transfers occupy [slot, slot + r); a compute_start
/// opens [slot, compute_done.slot) for the device. Downlink events are
/// emitted once per recipient.
struct TimelineEvent {
    Slot slot = 0;
    EventKind kind = EventKind::uplink;
    int device = 0;
    Round round = 0;

    friend bool operator==(const TimelineEvent&, const TimelineEvent&) = default;
};

struct StalenessRecord {
    Round round = 0;
    int device = 0;
    Round model_round = 0;
    Round staleness = 0; // round - model_round
};

struct RoundRecord {
    Round round = 0;
    Slot start_slot = 0;  // first uplink slot
    Slot end_slot = 0;    // last slot of the broadcast
    std::vector<int> transmitters;
    std::vector<int> recipients;
};

/// Passed to the learner once the S uploads of a round are in.
struct RoundSummary {
    Round round = 0;
    std::span<const int> transmitters;
    std::span<const Round> model_rounds;
    Slot end_slot = 0;
};

template <class L>
concept RoundLearner = requires(L& learner, int device, Round model_round, const RoundSummary& summary) {
    // Device starts local training on the learner's current global model,
    // which must be w_{model_round}.
    learner.start_local(device, model_round);
    // Aggregates the pending updates of summary.transmitters into w_{round+1}.
    learner.finish_round(summary);
};

/// Timing-only runs.
struct NullLearner {
    void start_local(int, Round) {}
    void finish_round(const RoundSummary&) {}
};

struct SimulationOptions {
    std::optional<Round> round_limit; // stop after this many completed rounds
    bool record_events = true;
};

struct Timeline {
    std::vector<TimelineEvent> events;
    std::vector<StalenessRecord> staleness;
    std::vector<RoundRecord> rounds;
    std::vector<std::string> warnings;

    Round completed_rounds() const { return static_cast<Round>(rounds.size()); }
};

/// Picks the S available devices with the smallest sum of k-hat. Ties go to
/// the earliest finisher, then to the lowest index; the returned order is
/// the TDMA slot order. Fewer than S are returned when fewer are available.
inline std::vector<int> select_transmitters(std::span<const DeviceState> available, int group_size,
                                            int num_devices)
{
    if (group_size < 1 || group_size > num_devices)
        throw ConfigError("group_size: must satisfy 1 <= S <= N");
    std::vector<const DeviceState*> order;
    order.reserve(available.size());
    for (const auto& d : available)
        order.push_back(&d);
    auto key = [](const DeviceState* d) {
        return std::make_tuple(d->last_model_round, d->compute_done_slot.value_or(std::numeric_limits<Slot>::max()),
                               d->id);
    };
    const auto take = std::min<std::size_t>(order.size(), static_cast<std::size_t>(group_size));
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end(),
                      [&](const DeviceState* a, const DeviceState* b) { return key(a) < key(b); });
    std::vector<int> ids;
    ids.reserve(take);
    for (std::size_t i = 0; i < take; ++i)
        ids.push_back(order[i]->id);
    return ids;
}

namespace detail {

class SlotSimulator {
public:
    SlotSimulator(const SystemConfig& cfg, const SimulationOptions& opts)
        : m_cfg(cfg), m_opts(opts), m_tau_comp(compute_tau_comp(cfg)), m_r(cfg.slots_per_transfer)
    {
        m_devices.resize(static_cast<std::size_t>(cfg.num_devices));
        for (int i = 0; i < cfg.num_devices; ++i)
            m_devices[static_cast<std::size_t>(i)].id = i + 1;
    }

    template <RoundLearner L>
    Timeline run(L& learner)
    {
        const int S = m_cfg.group_size;
        const int alpha = m_cfg.intentional_delay;
        const int G = m_cfg.num_groups();

        // Initial groups: with a delay of alpha, only the first G - alpha
        // groups train on w_0; the remaining alpha groups receive w_1 .. w_alpha
        // through the first alpha broadcasts.
        const int initially_active = alpha == 0 ? m_cfg.num_devices : (G - alpha) * S;
        for (int id = 1; id <= initially_active; ++id)
            begin_compute(learner, id, 0, 0);
        std::vector<std::vector<int>> pre_recipients(static_cast<std::size_t>(alpha));
        for (int j = 0; j < alpha; ++j) {
            for (int id = (G - alpha + j) * S + 1; id <= (G - alpha + j + 1) * S; ++id) {
                pre_recipients[static_cast<std::size_t>(j)].push_back(id);
                device(id).awaiting_model_until_round = j;
            }
        }

        std::vector<std::vector<int>> history;
        Slot t = 0;
        for (Round k = 0;; ++k) {
            if (m_opts.round_limit && k >= *m_opts.round_limit)
                break;

            std::vector<int> chosen;
            std::vector<Round> model_rounds;
            std::vector<TimelineEvent> pending_events;
            std::vector<StalenessRecord> pending_staleness;
            Slot round_start = -1;
            bool fixed = false;
            bool stalled = false;

            for (int p = 0; p < S; ++p) {
                if (!fixed) {
                    auto avail = available(t, chosen);
                    if (avail.empty()) {
                        auto next = next_ready_slot(t);
                        if (!next) {
                            m_timeline.warnings.push_back("round " + std::to_string(k) +
                                                          ": no device is training; schedule cannot progress");
                            stalled = true;
                            break;
                        }
                        t = *next; // channel idles until a device finishes
                        avail = available(t, chosen);
                    }
                    if (p == 0 && static_cast<int>(avail.size()) >= S) {
                        chosen = select_transmitters(avail, S, m_cfg.num_devices);
                        fixed = true;
                    }
                    else {
                        chosen.push_back(select_transmitters(avail, 1, m_cfg.num_devices).front());
                    }
                }
                if (t + m_r > m_cfg.horizon) {
                    stalled = true;
                    break;
                }
                const int id = chosen[static_cast<std::size_t>(p)];
                auto& dev = device(id);
                if (round_start < 0)
                    round_start = t;
                pending_events.push_back({t, EventKind::uplink, id, k});
                pending_staleness.push_back({k, id, dev.last_model_round, k - dev.last_model_round});
                model_rounds.push_back(dev.last_model_round);
                t += m_r;
            }
            if (stalled || t + m_r > m_cfg.horizon)
                break;

            for (int id : chosen) {
                auto& dev = device(id);
                dev.compute_done_slot.reset();
                if (alpha > 0)
                    dev.awaiting_model_until_round = k + alpha;
            }

            const Slot downlink = t;
            learner.finish_round(RoundSummary{k, chosen, model_rounds, downlink + m_r - 1});

            std::vector<int> recipients;
            if (alpha == 0)
                recipients = chosen;
            else if (k - alpha >= 0)
                recipients = history[static_cast<std::size_t>(k - alpha)];
            else
                recipients = pre_recipients[static_cast<std::size_t>(k)];

            if (m_opts.record_events) {
                m_timeline.events.insert(m_timeline.events.end(), pending_events.begin(), pending_events.end());
                for (int id : recipients)
                    m_timeline.events.push_back({downlink, EventKind::downlink, id, k});
            }
            m_timeline.staleness.insert(m_timeline.staleness.end(), pending_staleness.begin(),
                                        pending_staleness.end());
            t += m_r;
            for (int id : recipients)
                begin_compute(learner, id, k + 1, t);

            m_timeline.rounds.push_back({k, round_start, t - 1, chosen, recipients});
            history.push_back(std::move(chosen));
        }

        if (m_timeline.rounds.empty())
            m_timeline.warnings.push_back("no training round completed within the horizon");
        if (m_opts.record_events)
            std::stable_sort(m_timeline.events.begin(), m_timeline.events.end(),
                             [](const TimelineEvent& a, const TimelineEvent& b) { return a.slot < b.slot; });
        return std::move(m_timeline);
    }

    const std::vector<DeviceState>& devices() const { return m_devices; }

private:
    DeviceState& device(int id) { return m_devices[static_cast<std::size_t>(id - 1)]; }

    template <RoundLearner L>
    void begin_compute(L& learner, int id, Round model_round, Slot start)
    {
        auto& dev = device(id);
        dev.last_model_round = model_round;
        dev.awaiting_model_until_round.reset();
        dev.compute_done_slot = start + m_tau_comp;
        if (m_opts.record_events) {
            if (start < m_cfg.horizon)
                m_timeline.events.push_back({start, EventKind::compute_start, id, model_round});
            if (start + m_tau_comp < m_cfg.horizon)
                m_timeline.events.push_back({start + m_tau_comp, EventKind::compute_done, id, model_round});
        }
        learner.start_local(id, model_round);
    }

    std::vector<DeviceState> available(Slot t, const std::vector<int>& exclude) const
    {
        std::vector<DeviceState> out;
        for (const auto& d : m_devices)
            if (d.ready_at(t) && std::find(exclude.begin(), exclude.end(), d.id) == exclude.end())
                out.push_back(d);
        return out;
    }

    std::optional<Slot> next_ready_slot(Slot t) const
    {
        std::optional<Slot> best;
        for (const auto& d : m_devices)
            if (d.compute_done_slot && *d.compute_done_slot > t && (!best || *d.compute_done_slot < *best))
                best = d.compute_done_slot;
        return best;
    }

    SystemConfig m_cfg;
    SimulationOptions m_opts;
    Slot m_tau_comp;
    Slot m_r;
    std::vector<DeviceState> m_devices;
    Timeline m_timeline;
};

} // namespace detail

/// Slot-accurate simulation of asynchronous FL over a single TDMA channel,
/// with the downlink deferred by cfg.intentional_delay rounds when non-zero.
///
/// Each round carries S uploads of r slots followed by one r-slot broadcast.
/// Rounds whose broadcast would end past the horizon are not counted.
template <RoundLearner L>
Timeline run_timeline(const SystemConfig& cfg, L& learner, const SimulationOptions& opts = {})
{
    cfg.validate();
    detail::SlotSimulator sim(cfg, opts);
    return sim.run(learner);
}

inline Timeline run_timeline(const SystemConfig& cfg, const SimulationOptions& opts = {})
{
    NullLearner none;
    return run_timeline(cfg, none, opts);
}

/// Staleness values of round k's transmitters, in slot order.
inline std::vector<Round> measured_staleness(std::span<const StalenessRecord> records, Round k)
{
    auto lo = std::lower_bound(records.begin(), records.end(), k,
                               [](const StalenessRecord& r, Round v) { return r.round < v; });
    if (lo == records.end() || lo->round != k)
        throw RangeError("measured_staleness: round " + std::to_string(k) + " was not simulated");
    std::vector<Round> out;
    for (auto it = lo; it != records.end() && it->round == k; ++it)
        out.push_back(it->staleness);
    return out;
}

/// (end of last round - end of the round `window` rounds earlier) / window.
inline Rational steady_round_duration(const Timeline& tl, int window)
{
    if (window < 1 || tl.completed_rounds() <= window)
        throw RangeError("steady_round_duration: not enough completed rounds");
    const auto& last = tl.rounds.back();
    const auto& first = tl.rounds[tl.rounds.size() - 1 - static_cast<std::size_t>(window)];
    return Rational(last.end_slot - first.end_slot, window);
}

/// Line-delimited trace: "<slot> <kind> <device> <round>".
inline void write_trace(std::ostream& os, std::span<const TimelineEvent> events)
{
    for (const auto& e : events)
        os << e.slot << ' ' << to_string(e.kind) << ' ' << e.device << ' ' << e.round << '\n';
}

inline std::vector<TimelineEvent> read_trace(std::istream& is)
{
    std::vector<TimelineEvent> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::istringstream ls(line);
        TimelineEvent e;
        std::string kind;
        if (!(ls >> e.slot >> kind >> e.device >> e.round))
            throw DataError("trace line " + std::to_string(lineno) + ": expected 'slot kind device round'");
        e.kind = parse_event_kind(kind);
        out.push_back(e);
    }
    return out;
}

} // namespace tdma_fl
