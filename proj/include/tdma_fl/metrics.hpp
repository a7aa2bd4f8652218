#pragma once

#include <charconv>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "tdma_fl/errors.hpp"
#include "tdma_fl/timing.hpp"

namespace tdma_fl {

/// One row per global model w_round. Row 0 is the initial model at slot 0;
/// row k > 0 is the model produced by round k-1, stamped with the last slot
/// of that round's broadcast. `staleness` is the largest staleness among
/// the updates that produced it.
struct MetricsRow {
    Round round = 0;
    Slot slot = 0;
    double loss = 0.0;
    double grad_norm_sq = 0.0;
    Round staleness = 0;

    friend bool operator==(const MetricsRow&, const MetricsRow&) = default;
};

struct RunMetrics {
    std::vector<MetricsRow> rows;

    /// (1/(K+1)) sum_k ||grad f(w_k)||^2 over the recorded rows.
    double average_grad_norm_sq() const
    {
        if (rows.empty())
            return 0.0;
        double s = 0.0;
        for (const auto& r : rows)
            s += r.grad_norm_sq;
        return s / static_cast<double>(rows.size());
    }

    void validate() const
    {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            if (rows[i].slot <= rows[i - 1].slot)
                throw ContractError("RunMetrics: slot indices must be strictly increasing");
            if (rows[i].round <= rows[i - 1].round)
                throw ContractError("RunMetrics: rounds must be strictly increasing");
        }
    }
};

inline constexpr const char* metrics_csv_header = "round,slot,loss,grad_norm_sq,staleness";

namespace detail {

inline std::string shortest(double v)
{
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace detail

inline void write_metrics_csv(std::ostream& os, const RunMetrics& m)
{
    os << metrics_csv_header << '\n';
    for (const auto& r : m.rows)
        os << r.round << ',' << r.slot << ',' << detail::shortest(r.loss) << ',' << detail::shortest(r.grad_norm_sq)
           << ',' << r.staleness << '\n';
}

inline RunMetrics read_metrics_csv(std::istream& is)
{
    std::string line;
    if (!std::getline(is, line) || line != metrics_csv_header)
        throw DataError("metrics csv: header must be '" + std::string(metrics_csv_header) + "'");
    RunMetrics m;
    std::size_t lineno = 1;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty())
            continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ','))
            cells.push_back(cell);
        if (cells.size() != 5)
            throw DataError("metrics csv line " + std::to_string(lineno) + ": expected 5 columns");
        MetricsRow r;
        auto num = [&](const std::string& c, auto& out) {
            auto res = std::from_chars(c.data(), c.data() + c.size(), out);
            if (res.ec != std::errc{} || res.ptr != c.data() + c.size())
                throw DataError("metrics csv line " + std::to_string(lineno) + ": bad value '" + c + "'");
        };
        num(cells[0], r.round);
        num(cells[1], r.slot);
        num(cells[2], r.loss);
        num(cells[3], r.grad_norm_sq);
        num(cells[4], r.staleness);
        m.rows.push_back(r);
    }
    return m;
}

} // namespace tdma_fl
