#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "tdma_fl/errors.hpp"

namespace tdma_fl {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Samples are stored column-wise: features.col(i) belongs to labels[i].
struct Dataset {
    Matrix features;
    std::vector<int> labels;
    int num_classes = 0;

    std::size_t size() const { return labels.size(); }
    Eigen::Index feature_dim() const { return features.rows(); }
};

/// A device's private data, as indices into a shared immutable Dataset.
struct DatasetShard {
    int device_id = 0;
    std::vector<std::size_t> indices;

    std::size_t size() const { return indices.size(); }
};

/// Every device receives `per_device` samples of one label drawn uniformly
/// at random. Samples are taken without replacement across devices; when the
/// drawn label has run dry the label is redrawn, up to `max_redraws` times.
template <class Rng>
std::vector<DatasetShard> partition_single_label(const Dataset& data, int num_devices, int per_device, Rng& rng,
                                                 int max_redraws = 1000)
{
    if (num_devices < 1 || per_device < 1)
        throw ConfigError("partition_single_label: num_devices and per_device must be >= 1");
    if (data.num_classes < 1)
        throw DataError("partition_single_label: dataset has no classes");
    if (data.size() < static_cast<std::size_t>(num_devices) * static_cast<std::size_t>(per_device))
        throw DataError("partition_single_label: dataset has " + std::to_string(data.size()) +
                        " samples, need " + std::to_string(num_devices * per_device));

    std::vector<std::vector<std::size_t>> pools(static_cast<std::size_t>(data.num_classes));
    for (std::size_t i = 0; i < data.size(); ++i) {
        const int y = data.labels[i];
        if (y < 0 || y >= data.num_classes)
            throw DataError("partition_single_label: label " + std::to_string(y) + " out of range");
        pools[static_cast<std::size_t>(y)].push_back(i);
    }
    for (auto& pool : pools)
        std::shuffle(pool.begin(), pool.end(), rng);

    std::uniform_int_distribution<int> pick(0, data.num_classes - 1);
    std::vector<DatasetShard> shards;
    shards.reserve(static_cast<std::size_t>(num_devices));
    for (int n = 1; n <= num_devices; ++n) {
        int label = pick(rng);
        int redraws = 0;
        while (pools[static_cast<std::size_t>(label)].size() < static_cast<std::size_t>(per_device)) {
            if (++redraws > max_redraws)
                throw DataError("partition_single_label: not enough samples of any drawn label for device " +
                                std::to_string(n));
            label = pick(rng);
        }
        auto& pool = pools[static_cast<std::size_t>(label)];
        DatasetShard shard{n, {}};
        shard.indices.assign(pool.end() - per_device, pool.end());
        pool.resize(pool.size() - static_cast<std::size_t>(per_device));
        std::sort(shard.indices.begin(), shard.indices.end());
        shards.push_back(std::move(shard));
    }
    return shards;
}

/// Uniformly random disjoint shards of equal size.
template <class Rng>
std::vector<DatasetShard> partition_iid(const Dataset& data, int num_devices, int per_device, Rng& rng)
{
    const auto need = static_cast<std::size_t>(num_devices) * static_cast<std::size_t>(per_device);
    if (num_devices < 1 || per_device < 1)
        throw ConfigError("partition_iid: num_devices and per_device must be >= 1");
    if (data.size() < need)
        throw DataError("partition_iid: not enough samples");
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<DatasetShard> shards;
    for (int n = 0; n < num_devices; ++n) {
        DatasetShard s{n + 1, {}};
        auto first = order.begin() + static_cast<std::ptrdiff_t>(n) * per_device;
        s.indices.assign(first, first + per_device);
        std::sort(s.indices.begin(), s.indices.end());
        shards.push_back(std::move(s));
    }
    return shards;
}

/// Gaussian class clusters: class c is centred at a random point of norm
/// `separation`, with isotropic noise of standard deviation `noise`.
template <class Rng>
Dataset make_gaussian_classes(int num_classes, Eigen::Index dim, int per_class, double separation, double noise,
                              Rng& rng)
{
    if (num_classes < 1 || dim < 1 || per_class < 1)
        throw ConfigError("make_gaussian_classes: sizes must be >= 1");
    std::normal_distribution<double> gauss(0.0, 1.0);
    Matrix centers(dim, num_classes);
    for (int c = 0; c < num_classes; ++c) {
        Vector v(dim);
        for (Eigen::Index i = 0; i < dim; ++i)
            v(i) = gauss(rng);
        centers.col(c) = separation * v / v.norm();
    }
    Dataset d;
    d.num_classes = num_classes;
    d.features.resize(dim, static_cast<Eigen::Index>(num_classes) * per_class);
    d.labels.reserve(static_cast<std::size_t>(num_classes) * static_cast<std::size_t>(per_class));
    Eigen::Index col = 0;
    for (int c = 0; c < num_classes; ++c) {
        for (int j = 0; j < per_class; ++j, ++col) {
            for (Eigen::Index i = 0; i < dim; ++i)
                d.features(i, col) = centers(i, c) + noise * gauss(rng);
            d.labels.push_back(c);
        }
    }
    return d;
}

} // namespace tdma_fl
