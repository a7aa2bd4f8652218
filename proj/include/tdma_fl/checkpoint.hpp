#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "tdma_fl/errors.hpp"
#include "tdma_fl/learner.hpp"

namespace tdma_fl {

// Layout (little-endian): "TDFLCKPT" | u64 dimension | i64 round | dimension x f64.
inline constexpr std::array<char, 8> checkpoint_magic{'T', 'D', 'F', 'L', 'C', 'K', 'P', 'T'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline void write_checkpoint(const std::filesystem::path& path, const GlobalState& state)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw DataError(path.string() + ": cannot write checkpoint");
    const std::uint64_t dim = static_cast<std::uint64_t>(state.w.size());
    const std::int64_t round = state.round;
    out.write(checkpoint_magic.data(), checkpoint_magic.size());
    out.write(reinterpret_cast<const char*>(&dim), sizeof dim);
    out.write(reinterpret_cast<const char*>(&round), sizeof round);
    out.write(reinterpret_cast<const char*>(state.w.data()), static_cast<std::streamsize>(dim * sizeof(double)));
}

inline GlobalState read_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw DataError(path.string() + ": cannot open checkpoint");
    std::array<char, 8> magic{};
    std::uint64_t dim = 0;
    std::int64_t round = 0;
    if (!in.read(magic.data(), magic.size()) || magic != checkpoint_magic)
        throw DataError(path.string() + ": not a checkpoint (bad magic)");
    if (!in.read(reinterpret_cast<char*>(&dim), sizeof dim) || !in.read(reinterpret_cast<char*>(&round), sizeof round))
        throw DataError(path.string() + ": truncated checkpoint header");
    GlobalState s{round, Vector(static_cast<Eigen::Index>(dim))};
    if (!in.read(reinterpret_cast<char*>(s.w.data()), static_cast<std::streamsize>(dim * sizeof(double))))
        throw DataError(path.string() + ": truncated checkpoint payload");
    return s;
}

} // namespace tdma_fl
