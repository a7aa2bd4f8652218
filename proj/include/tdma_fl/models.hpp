#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <memory>
#include <random>
#include <span>
#include <string>

#include "tdma_fl/dataset.hpp"
#include "tdma_fl/errors.hpp"

namespace tdma_fl {

/// Per-sample loss l(w, zeta) averaged over a set of samples.
class Model {
public:
    virtual ~Model() = default;

    virtual std::string name() const = 0;
    virtual Eigen::Index dimension() const = 0;

    /// Mean loss over `samples`. When `grad` is non-null it receives the mean
    /// gradient (resized as needed).
    virtual double evaluate(const Vector& w, const Dataset& data, std::span<const std::size_t> samples,
                            Vector* grad) const = 0;

    virtual Vector initial_parameters(std::mt19937_64&) const { return Vector::Zero(dimension()); }

protected:
    static Matrix gather(const Dataset& data, std::span<const std::size_t> samples)
    {
        Matrix x(data.feature_dim(), static_cast<Eigen::Index>(samples.size()));
        for (std::size_t j = 0; j < samples.size(); ++j)
            x.col(static_cast<Eigen::Index>(j)) = data.features.col(static_cast<Eigen::Index>(samples[j]));
        return x;
    }

    void check(const Vector& w, std::span<const std::size_t> samples) const
    {
        if (w.size() != dimension())
            throw ConfigError(name() + ": parameter dimension " + std::to_string(w.size()) + ", expected " +
                              std::to_string(dimension()));
        if (samples.empty())
            throw DataError(name() + ": empty sample set");
    }
};

/// l(w, x) = 1/2 (w - x)^T A (w - x); a sample's features are its target x.
class QuadraticModel final : public Model {
public:
    explicit QuadraticModel(Matrix curvature) : m_a(std::move(curvature)) {}

    std::string name() const override { return "quadratic"; }
    Eigen::Index dimension() const override { return m_a.rows(); }
    const Matrix& curvature() const { return m_a; }

    double evaluate(const Vector& w, const Dataset& data, std::span<const std::size_t> samples,
                    Vector* grad) const override
    {
        check(w, samples);
        Matrix diff = gather(data, samples);
        diff = (-diff).colwise() + w;
        const double n = static_cast<double>(samples.size());
        const double loss = 0.5 * (m_a * diff).cwiseProduct(diff).sum() / n;
        if (grad)
            *grad = m_a * (diff.rowwise().sum() / n);
        return loss;
    }

private:
    Matrix m_a;
};

/// Multinomial logistic regression. Parameters: W (classes x inputs,
/// column-major) followed by the bias vector.
class SoftmaxRegression final : public Model {
public:
    SoftmaxRegression(Eigen::Index inputs, int classes) : m_inputs(inputs), m_classes(classes)
    {
        if (inputs < 1 || classes < 2)
            throw ConfigError("logistic: need inputs >= 1 and classes >= 2");
    }

    std::string name() const override { return "logistic"; }
    Eigen::Index dimension() const override { return m_classes * (m_inputs + 1); }

    double evaluate(const Vector& w, const Dataset& data, std::span<const std::size_t> samples,
                    Vector* grad) const override
    {
        check(w, samples);
        if (data.feature_dim() != m_inputs)
            throw DataError("logistic: feature dimension mismatch");
        Eigen::Map<const Matrix> weights(w.data(), m_classes, m_inputs);
        Eigen::Map<const Vector> bias(w.data() + m_classes * m_inputs, m_classes);
        const Matrix x = gather(data, samples);
        Matrix z = weights * x;
        z.colwise() += bias;

        double loss = 0.0;
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            const double top = z.col(j).maxCoeff();
            const double lse = top + std::log((z.col(j).array() - top).exp().sum());
            const int y = data.labels[samples[static_cast<std::size_t>(j)]];
            loss += lse - z(y, j);
            z.col(j) = (z.col(j).array() - lse).exp().matrix(); // probabilities
            z(y, j) -= 1.0;                                     // dloss/dz
        }
        const double n = static_cast<double>(samples.size());
        if (grad) {
            grad->resize(dimension());
            Eigen::Map<Matrix> gw(grad->data(), m_classes, m_inputs);
            Eigen::Map<Vector> gb(grad->data() + m_classes * m_inputs, m_classes);
            gw.noalias() = z * x.transpose() / n;
            gb = z.rowwise().sum() / n;
        }
        return loss / n;
    }

private:
    Eigen::Index m_inputs;
    int m_classes;
};

/// Two-layer perceptron: tanh hidden layer, softmax cross-entropy output.
/// Parameters: W1 (hidden x inputs), b1, W2 (classes x hidden), b2.
class Mlp final : public Model {
public:
    Mlp(Eigen::Index inputs, Eigen::Index hidden, int classes) : m_inputs(inputs), m_hidden(hidden), m_classes(classes)
    {
        if (inputs < 1 || hidden < 1 || classes < 2)
            throw ConfigError("mlp: need inputs >= 1, hidden >= 1, classes >= 2");
    }

    std::string name() const override { return "mlp"; }
    Eigen::Index dimension() const override
    {
        return m_hidden * m_inputs + m_hidden + m_classes * m_hidden + m_classes;
    }

    Vector initial_parameters(std::mt19937_64& rng) const override
    {
        Vector w = Vector::Zero(dimension());
        std::uniform_real_distribution<double> u1(-1.0, 1.0);
        const double s1 = std::sqrt(6.0 / static_cast<double>(m_inputs + m_hidden));
        const double s2 = std::sqrt(6.0 / static_cast<double>(m_hidden + m_classes));
        for (Eigen::Index i = 0; i < m_hidden * m_inputs; ++i)
            w(i) = s1 * u1(rng);
        const Eigen::Index w2 = m_hidden * m_inputs + m_hidden;
        for (Eigen::Index i = 0; i < m_classes * m_hidden; ++i)
            w(w2 + i) = s2 * u1(rng);
        return w;
    }

    double evaluate(const Vector& w, const Dataset& data, std::span<const std::size_t> samples,
                    Vector* grad) const override
    {
        check(w, samples);
        if (data.feature_dim() != m_inputs)
            throw DataError("mlp: feature dimension mismatch");
        const double* p = w.data();
        Eigen::Map<const Matrix> w1(p, m_hidden, m_inputs);
        p += m_hidden * m_inputs;
        Eigen::Map<const Vector> b1(p, m_hidden);
        p += m_hidden;
        Eigen::Map<const Matrix> w2(p, m_classes, m_hidden);
        p += m_classes * m_hidden;
        Eigen::Map<const Vector> b2(p, m_classes);

        const Matrix x = gather(data, samples);
        Matrix pre = w1 * x;
        pre.colwise() += b1;
        const Matrix h = pre.array().tanh().matrix();
        Matrix z = w2 * h;
        z.colwise() += b2;

        double loss = 0.0;
        for (Eigen::Index j = 0; j < z.cols(); ++j) {
            const double top = z.col(j).maxCoeff();
            const double lse = top + std::log((z.col(j).array() - top).exp().sum());
            const int y = data.labels[samples[static_cast<std::size_t>(j)]];
            loss += lse - z(y, j);
            z.col(j) = (z.col(j).array() - lse).exp().matrix();
            z(y, j) -= 1.0;
        }
        const double n = static_cast<double>(samples.size());
        if (grad) {
            grad->resize(dimension());
            double* g = grad->data();
            Eigen::Map<Matrix> gw1(g, m_hidden, m_inputs);
            g += m_hidden * m_inputs;
            Eigen::Map<Vector> gb1(g, m_hidden);
            g += m_hidden;
            Eigen::Map<Matrix> gw2(g, m_classes, m_hidden);
            g += m_classes * m_hidden;
            Eigen::Map<Vector> gb2(g, m_classes);

            gw2.noalias() = z * h.transpose() / n;
            gb2 = z.rowwise().sum() / n;
            const Matrix dh = (w2.transpose() * z).array() * (1.0 - h.array().square());
            gw1.noalias() = dh * x.transpose() / n;
            gb1 = dh.rowwise().sum() / n;
        }
        return loss / n;
    }

private:
    Eigen::Index m_inputs;
    Eigen::Index m_hidden;
    int m_classes;
};

} // namespace tdma_fl
