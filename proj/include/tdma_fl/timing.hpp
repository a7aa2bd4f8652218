#pragma once

#include <cstdint>
#include <string>

#include "tdma_fl/errors.hpp"
#include "tdma_fl/rational.hpp"

namespace tdma_fl {

using Slot = std::int64_t;
using Round = std::int64_t;

/// Scenario constants for one federated run over a TDMA uplink.
///
/// `local_steps` is the number of local SGD steps per training cycle (H).
/// Note that published experiment descriptions sometimes call this "L",
/// which collides with the smoothness constant used by the analysis
/// module; the two are unrelated here.
struct SystemConfig {
    int num_devices = 1;             // N
    int group_size = 1;              // S, devices served per round
    int slots_per_transfer = 1;      // r, one upload or one broadcast
    Rational samples_per_slot{1};    // q
    int local_steps = 1;             // H
    int batch_size = 1;              // B
    double step_size = 0.01;         // eta
    Slot horizon = 1;                // T, total slots
    int intentional_delay = 0;       // alpha, 0 for plain asynchronous FL

    /// G = ceil(N / S); derived, never stored.
    int num_groups() const { return (num_devices + group_size - 1) / group_size; }
    bool divisible() const { return num_devices % group_size == 0; }

    /// Sets q so that the compute time comes out at exactly `slots`.
    SystemConfig& with_compute_slots(Slot slots)
    {
        if (slots < 1)
            throw ConfigError("compute_slots: must be >= 1");
        samples_per_slot = Rational(static_cast<std::int64_t>(local_steps) * batch_size, slots);
        return *this;
    }

    void validate() const
    {
        auto require = [](bool ok, const char* field, const char* why) {
            if (!ok)
                throw ConfigError(std::string(field) + ": " + why);
        };
        require(num_devices >= 1, "num_devices", "must be >= 1");
        require(group_size >= 1, "group_size", "must be >= 1");
        require(group_size <= num_devices, "group_size", "must not exceed num_devices");
        require(slots_per_transfer >= 1, "slots_per_transfer", "must be >= 1");
        require(samples_per_slot > 0, "samples_per_slot", "must be > 0");
        require(local_steps >= 1, "local_steps", "must be >= 1");
        require(batch_size >= 1, "batch_size", "must be >= 1");
        require(step_size > 0.0, "step_size", "must be > 0");
        require(horizon >= 1, "horizon", "must be >= 1");
        require(intentional_delay >= 0, "intentional_delay", "must be >= 0");
        if (intentional_delay > 0) {
            require(divisible(), "intentional_delay", "requires num_devices divisible by group_size");
            require(intentional_delay <= num_groups() - 1, "intentional_delay",
                    "must not exceed num_groups - 1");
        }
    }
};

struct TimingProfile {
    Slot tau_comp = 0;
    Slot tau_comm = 0;
    Rational tau_asyn{0};
    int num_groups = 1;
};

/// Local training time: ceil(H * B / q) slots.
inline Slot compute_tau_comp(const Rational& q, int local_steps, int batch_size)
{
    if (q <= 0)
        throw ConfigError("samples_per_slot: must be > 0");
    if (local_steps < 1)
        throw ConfigError("local_steps: must be >= 1");
    if (batch_size < 1)
        throw ConfigError("batch_size: must be >= 1");
    return ceil_of(Rational(static_cast<std::int64_t>(local_steps) * batch_size) / q);
}

/// Communication time of one round: S uploads plus one broadcast, r slots each.
inline Slot compute_tau_comm(int slots_per_transfer, int group_size)
{
    if (slots_per_transfer < 1)
        throw ConfigError("slots_per_transfer: must be >= 1");
    if (group_size < 1)
        throw ConfigError("group_size: must be >= 1");
    return static_cast<Slot>(slots_per_transfer) * (group_size + 1);
}

inline Slot compute_tau_comp(const SystemConfig& cfg)
{
    return compute_tau_comp(cfg.samples_per_slot, cfg.local_steps, cfg.batch_size);
}

/// Average slots per round under asynchronous operation.
///
/// When local training outlasts the communication of the other G-1 groups,
/// a cycle of G rounds costs tau_comp + r(S+1); otherwise computation is
/// fully hidden and every round costs tau_comm.
inline Rational compute_tau_asyn(const SystemConfig& cfg)
{
    cfg.validate();
    const Slot comp = compute_tau_comp(cfg);
    const Slot comm = compute_tau_comm(cfg.slots_per_transfer, cfg.group_size);
    const int groups = cfg.num_groups();
    if (comp >= static_cast<Slot>(groups - 1) * comm)
        return Rational(comp + comm, groups);
    return Rational(comm);
}

inline TimingProfile timing_profile(const SystemConfig& cfg)
{
    TimingProfile p;
    p.tau_comp = compute_tau_comp(cfg);
    p.tau_comm = compute_tau_comm(cfg.slots_per_transfer, cfg.group_size);
    p.tau_asyn = compute_tau_asyn(cfg);
    p.num_groups = cfg.num_groups();
    return p;
}

/// K = floor(T / tau_asyn). The event simulator's count can differ by the
/// initial compute fill; see schedule.hpp.
inline Round rounds_by_formula(const SystemConfig& cfg)
{
    return floor_of(Rational(cfg.horizon) / compute_tau_asyn(cfg));
}

/// Staleness of an update applied in round k under plain asynchronous FL:
/// k while the initial model is still being drained, G-1 afterwards.
inline Round staleness_closed_form(Round k, const SystemConfig& cfg)
{
    if (cfg.intentional_delay != 0)
        throw ContractError("staleness_closed_form: only defined for intentional_delay == 0; "
                            "use IntentionalDelay::d_star for delayed schedules");
    if (k < 0)
        throw RangeError("staleness_closed_form: round must be >= 0");
    const Round groups = cfg.num_groups();
    return k < groups ? k : groups - 1;
}

struct IntentionalDelay {
    int alpha = 0;
    int d_star = 0;

    friend bool operator==(const IntentionalDelay&, const IntentionalDelay&) = default;
};

/// Largest downlink deferral that does not lengthen the round, and the
/// resulting steady-state staleness d* = G - 1 - alpha.
///
/// `compute_per_transfer` is tau_comp / r. Requires N divisible by S.
inline IntentionalDelay optimal_intentional_delay(const Rational& compute_per_transfer, int group_size,
                                                  int num_devices)
{
    if (group_size < 1 || num_devices < 1 || group_size > num_devices)
        throw ConfigError("optimal_intentional_delay: need 1 <= group_size <= num_devices");
    if (num_devices % group_size != 0)
        throw ConfigError("optimal_intentional_delay: num_devices must be divisible by group_size");
    if (compute_per_transfer <= 0)
        throw ConfigError("optimal_intentional_delay: tau_comp / r must be > 0");

    const int groups = num_devices / group_size;
    const std::int64_t per_round = group_size + 1;
    if (compute_per_transfer >= Rational(static_cast<std::int64_t>(groups - 1) * per_round))
        return {0, groups - 1};

    // Smallest d with tau_comp / r <= d (S+1); then (d-1)(S+1) < tau_comp / r.
    const auto d = static_cast<int>(ceil_of(compute_per_transfer / per_round));
    return {groups - d - 1, d};
}

inline IntentionalDelay optimal_intentional_delay(const SystemConfig& cfg)
{
    SystemConfig plain = cfg;
    plain.intentional_delay = 0;
    plain.validate();
    return optimal_intentional_delay(Rational(compute_tau_comp(cfg), cfg.slots_per_transfer),
                                     cfg.group_size, cfg.num_devices);
}

} // namespace tdma_fl
