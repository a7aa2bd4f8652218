#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <memory>
#include <random>
#include <vector>

#include "tdma_fl/dataset.hpp"
#include "tdma_fl/models.hpp"
#include "tdma_fl/task.hpp"

namespace tdma_fl {

struct QuadraticOptions {
    int samples_per_device = 32;
    double noise_std = 0.5;  // spread of a device's sample targets around its centre
    double eig_min = 0.5;    // spectrum of the shared curvature A
    double eig_max = 2.0;
    double center_scale = 1.0;
};

/// Shared-curvature quadratic: device n's samples are targets x around a
/// centre c + u_n, with sum_n u_n = 0. Then grad f - grad f_n = A (c_n - c)
/// for every w, so the heterogeneity and the optimum are known exactly.
struct SyntheticQuadraticTask {
    FederatedTask task;
    Matrix curvature;                // A
    Vector optimum;                  // w* = A^{-1} b-bar
    std::vector<Vector> offsets;     // u_n
    AssumptionConstants exact;
};

template <class Rng>
SyntheticQuadraticTask make_quadratic(int num_devices, Eigen::Index dim, double heterogeneity, Rng& rng,
                                      const QuadraticOptions& opts = {})
{
    if (num_devices < 1 || dim < 1)
        throw ConfigError("make_quadratic: num_devices and dim must be >= 1");
    if (heterogeneity < 0.0)
        throw ConfigError("make_quadratic: heterogeneity must be >= 0");
    if (opts.samples_per_device < 1)
        throw ConfigError("make_quadratic: samples_per_device must be >= 1");
    if (!(opts.eig_min > 0.0) || opts.eig_max < opts.eig_min)
        throw ConfigError("make_quadratic: need 0 < eig_min <= eig_max");

    std::normal_distribution<double> gauss(0.0, 1.0);
    auto gaussian = [&](Eigen::Index rows, Eigen::Index cols) {
        Matrix m(rows, cols);
        for (Eigen::Index j = 0; j < cols; ++j)
            for (Eigen::Index i = 0; i < rows; ++i)
                m(i, j) = gauss(rng);
        return m;
    };

    SyntheticQuadraticTask out;
    if (opts.eig_min == opts.eig_max) {
        out.curvature = opts.eig_max * Matrix::Identity(dim, dim);
    }
    else {
        std::uniform_real_distribution<double> spread(opts.eig_min, opts.eig_max);
        Vector eig(dim);
        for (Eigen::Index i = 0; i < dim; ++i)
            eig(i) = spread(rng);
        eig(0) = opts.eig_max;
        if (dim > 1)
            eig(dim - 1) = opts.eig_min;
        const Matrix q = Eigen::HouseholderQR<Matrix>(gaussian(dim, dim)).householderQ();
        out.curvature = q * eig.asDiagonal() * q.transpose();
        out.curvature = 0.5 * (out.curvature + out.curvature.transpose()).eval();
    }
    const Matrix& a = out.curvature;

    const Vector center = opts.center_scale * gaussian(dim, 1);
    Matrix offsets = gaussian(dim, num_devices);
    if (num_devices > 1) {
        offsets.colwise() -= offsets.rowwise().mean();
        const double widest = (a * offsets).colwise().norm().maxCoeff();
        offsets *= widest > 0.0 ? heterogeneity / widest : 0.0;
    }
    else {
        offsets.setZero();
    }

    auto data = std::make_shared<Dataset>();
    const int per = opts.samples_per_device;
    data->num_classes = 1;
    data->features.resize(dim, static_cast<Eigen::Index>(num_devices) * per);
    data->labels.assign(static_cast<std::size_t>(num_devices) * static_cast<std::size_t>(per), 0);
    std::vector<DatasetShard> shards;
    double sigma_sq = 0.0;
    for (int n = 0; n < num_devices; ++n) {
        Matrix noise = opts.noise_std * gaussian(dim, per);
        if (per > 1)
            noise.colwise() -= noise.rowwise().mean();
        else
            noise.setZero();
        sigma_sq = std::max(sigma_sq, (a * noise).colwise().squaredNorm().mean());
        DatasetShard shard{n + 1, {}};
        for (int j = 0; j < per; ++j) {
            const Eigen::Index col = static_cast<Eigen::Index>(n) * per + j;
            data->features.col(col) = center + offsets.col(n) + noise.col(j);
            shard.indices.push_back(static_cast<std::size_t>(col));
        }
        shards.push_back(std::move(shard));
        out.offsets.push_back(offsets.col(n));
    }

    out.optimum = center;
    out.exact.L_smooth = Eigen::SelfAdjointEigenSolver<Matrix>(a, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
    out.exact.M = 1.0;
    out.exact.sigma_sq = sigma_sq;
    out.exact.gamma_sq = (a * offsets).colwise().squaredNorm().maxCoeff();
    out.exact.provenance = Provenance::exact;
    out.task = FederatedTask(std::make_shared<QuadraticModel>(a), std::move(data), std::move(shards));
    return out;
}

} // namespace tdma_fl
