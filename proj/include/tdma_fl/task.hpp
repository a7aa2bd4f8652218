#pragma once

#include <algorithm>
#include <memory>
#include <string>
#include <vector>

#include "tdma_fl/dataset.hpp"
#include "tdma_fl/errors.hpp"
#include "tdma_fl/models.hpp"

namespace tdma_fl {

/// A model, the shared dataset and one shard per device (shards[n-1] is
/// device n). The global objective is the per-sample mean over the union of
/// the shards.
class FederatedTask {
public:
    FederatedTask() = default;

    FederatedTask(std::shared_ptr<const Model> model, std::shared_ptr<const Dataset> data,
                  std::vector<DatasetShard> shards)
        : m_model(std::move(model)), m_data(std::move(data)), m_shards(std::move(shards))
    {
        if (!m_model || !m_data)
            throw ConfigError("FederatedTask: model and dataset are required");
        if (m_shards.empty())
            throw DataError("FederatedTask: no shards");
        std::vector<char> seen(m_data->size(), 0);
        for (std::size_t n = 0; n < m_shards.size(); ++n) {
            auto& s = m_shards[n];
            if (s.device_id != static_cast<int>(n) + 1)
                throw DataError("FederatedTask: shard " + std::to_string(n) + " has device_id " +
                                std::to_string(s.device_id));
            if (s.indices.empty())
                throw DataError("FederatedTask: device " + std::to_string(s.device_id) + " has an empty shard");
            for (auto i : s.indices) {
                if (i >= m_data->size())
                    throw DataError("FederatedTask: sample index out of range");
                if (seen[i]++)
                    throw DataError("FederatedTask: shards overlap at sample " + std::to_string(i));
                m_all.push_back(i);
            }
        }
        std::sort(m_all.begin(), m_all.end());
    }

    const Model& model() const { return *m_model; }
    const Dataset& data() const { return *m_data; }
    const std::vector<DatasetShard>& shards() const { return m_shards; }
    const DatasetShard& shard(int device) const { return m_shards.at(static_cast<std::size_t>(device - 1)); }
    int num_devices() const { return static_cast<int>(m_shards.size()); }
    const std::vector<std::size_t>& all_samples() const { return m_all; }
    Eigen::Index dimension() const { return m_model->dimension(); }

    double global_loss(const Vector& w) const { return m_model->evaluate(w, *m_data, m_all, nullptr); }

    Vector global_gradient(const Vector& w, double* loss = nullptr) const
    {
        Vector g;
        const double l = m_model->evaluate(w, *m_data, m_all, &g);
        if (loss)
            *loss = l;
        return g;
    }

    double local_loss(int device, const Vector& w) const
    {
        return m_model->evaluate(w, *m_data, shard(device).indices, nullptr);
    }

    Vector local_gradient(int device, const Vector& w) const
    {
        Vector g;
        m_model->evaluate(w, *m_data, shard(device).indices, &g);
        return g;
    }

    Vector sample_gradient(const Vector& w, std::size_t sample) const
    {
        Vector g;
        const std::size_t one[] = {sample};
        m_model->evaluate(w, *m_data, one, &g);
        return g;
    }

private:
    std::shared_ptr<const Model> m_model;
    std::shared_ptr<const Dataset> m_data;
    std::vector<DatasetShard> m_shards;
    std::vector<std::size_t> m_all;
};

enum class Provenance { exact, estimated };

inline const char* to_string(Provenance p) { return p == Provenance::exact ? "exact" : "estimated"; }

/// Smoothness L, second-moment constants (sigma^2, M) and heterogeneity
/// bound Gamma^2 of a task.
struct AssumptionConstants {
    double L_smooth = 0.0;
    double sigma_sq = 0.0;
    double M = 1.0;
    double gamma_sq = 0.0;
    Provenance provenance = Provenance::estimated;
};

} // namespace tdma_fl
