#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "tdma_fl/checkpoint.hpp"
#include "tdma_fl/learner.hpp"
#include "tdma_fl/quadratic.hpp"

using namespace tdma_fl;

namespace {

/// Central differences, step h, on the mean loss over `samples`.
Vector numeric_gradient(const Model& m, const Vector& w, const Dataset& d, std::span<const std::size_t> samples,
                        double h = 1e-5)
{
    Vector g(w.size());
    for (Eigen::Index i = 0; i < w.size(); ++i) {
        Vector up = w, dn = w;
        up(i) += h;
        dn(i) -= h;
        g(i) = (m.evaluate(up, d, samples, nullptr) - m.evaluate(dn, d, samples, nullptr)) / (2 * h);
    }
    return g;
}

Dataset one_sample(const Vector& x, int label = 0, int classes = 1)
{
    Dataset d;
    d.features = x;
    d.labels = {label};
    d.num_classes = classes;
    return d;
}

/// l(w, x) = 1/2 (w.x - y)^2 with y stored in the label slot, for the single-sample oracle.
class LeastSquares final : public Model {
public:
    explicit LeastSquares(Eigen::Index dim) : m_dim(dim) {}
    std::string name() const override { return "least_squares"; }
    Eigen::Index dimension() const override { return m_dim; }
    double evaluate(const Vector& w, const Dataset& d, std::span<const std::size_t> s, Vector* grad) const override
    {
        double loss = 0.0;
        Vector g = Vector::Zero(m_dim);
        for (auto i : s) {
            const Vector x = d.features.col(static_cast<Eigen::Index>(i));
            const double r = w.dot(x) - d.labels[i];
            loss += 0.5 * r * r;
            g += r * x;
        }
        if (grad)
            *grad = g / static_cast<double>(s.size());
        return loss / static_cast<double>(s.size());
    }

private:
    Eigen::Index m_dim;
};

} // namespace

TEST(LocalUpdate, IdentityQuadraticFullBatch)
{
    QuadraticModel model(Matrix::Identity(2, 2));
    auto d = one_sample(Vector::Zero(2));
    DatasetShard shard{1, {0}};
    std::mt19937_64 rng(1);
    Vector w(2);
    w << 2, 0;
    auto g = local_update(model, d, shard, w, {1, 1, 0.1, true}, rng);
    EXPECT_EQ(g.gradient, (Vector(2) << 2, 0).finished());
    EXPECT_EQ(g.batch_ids, (std::vector<std::size_t>{0}));
}

TEST(LocalUpdate, SingleSampleLeastSquaresMatchesFiniteDifferences)
{
    LeastSquares model(3);
    Dataset d = one_sample((Vector(3) << 0.5, -1.0, 2.0).finished());
    d.labels[0] = 3;
    DatasetShard shard{1, {0}};
    std::mt19937_64 rng(2);
    const Vector w = (Vector(3) << 0.3, 0.1, -0.7).finished();
    auto g = local_update(model, d, shard, w, {1, 1, 0.1, true}, rng);
    const std::size_t idx[] = {0};
    const Vector fd = numeric_gradient(model, w, d, idx);
    const Vector analytic = (w.dot(d.features.col(0)) - 3.0) * d.features.col(0);
    EXPECT_LT((g.gradient - analytic).norm(), 1e-14);
    EXPECT_LT((g.gradient - fd).norm() / fd.norm(), 1e-8);
}

TEST(LocalUpdate, TwoStepsMatchUnrolledSgd)
{
    Matrix a(2, 2);
    a << 2, 0.5, 0.5, 1;
    QuadraticModel model(a);
    Dataset d;
    d.features = Matrix(2, 1);
    d.features << 1, -1;
    d.labels = {0};
    DatasetShard shard{1, {0}};
    std::mt19937_64 rng(3);
    const double eta = 0.1;
    const Vector w0 = (Vector(2) << 0.5, 0.25).finished();
    auto g = local_update(model, d, shard, w0, {1, 2, eta, true}, rng);

    const Vector x = d.features.col(0);
    const Vector g0 = a * (w0 - x);
    const Vector w1 = w0 - eta * g0;
    const Vector g1 = a * (w1 - x);
    const Vector w2 = w1 - eta * g1;
    EXPECT_LT((g.gradient - (w0 - w2) / eta).norm(), 1e-12);
}

TEST(LocalUpdate, SamplingErrors)
{
    QuadraticModel model(Matrix::Identity(1, 1));
    auto d = one_sample(Vector::Zero(1));
    std::mt19937_64 rng(4);
    DatasetShard empty{1, {}};
    EXPECT_THROW(local_update(model, d, empty, Vector::Zero(1), {1, 1, 0.1, true}, rng), DataError);
    DatasetShard one{1, {0}};
    EXPECT_THROW(local_update(model, d, one, Vector::Zero(1), {2, 1, 0.1, true}, rng), DataError);
}

TEST(LocalUpdate, BatchHasNoRepeats)
{
    DatasetShard shard{1, {}};
    for (std::size_t i = 0; i < 50; ++i)
        shard.indices.push_back(i * 3);
    std::mt19937_64 rng(5);
    for (int t = 0; t < 100; ++t) {
        auto b = sample_batch(shard, 20, rng);
        std::sort(b.begin(), b.end());
        EXPECT_EQ(std::adjacent_find(b.begin(), b.end()), b.end());
        for (auto i : b)
            EXPECT_EQ(i % 3, 0u);
    }
}

TEST(LocalUpdate, SingleBatchModeReusesBatch)
{
    std::mt19937_64 gen(6);
    auto q = make_quadratic(1, 3, 0.0, gen);
    std::mt19937_64 rng(7);
    const auto& t = q.task;
    auto g = local_update(t.model(), t.data(), t.shard(1), Vector::Zero(3), {4, 3, 0.1, false}, rng);
    EXPECT_EQ(g.batch_ids.size(), 4u);
    std::mt19937_64 rng2(7);
    auto h = local_update(t.model(), t.data(), t.shard(1), Vector::Zero(3), {4, 3, 0.1, true}, rng2);
    EXPECT_EQ(h.batch_ids.size(), 12u);
}

TEST(Aggregate, MeanAndErrors)
{
    LocalGradient a{1, 0, (Vector(2) << 1, 0).finished(), {}};
    LocalGradient b{2, 0, (Vector(2) << 0, 1).finished(), {}};
    std::vector<LocalGradient> both{a, b};
    EXPECT_EQ(aggregate(both, 2), (Vector(2) << 0.5, 0.5).finished());
    std::vector<LocalGradient> copies(3, a);
    EXPECT_EQ(aggregate(copies, 3), a.gradient);
    EXPECT_THROW(aggregate(both, 3), ContractError);
    LocalGradient c{3, 0, Vector::Zero(3), {}};
    std::vector<LocalGradient> bad{a, c};
    EXPECT_THROW(aggregate(bad, 2), ContractError);
}

TEST(Aggregate, PermutationInvariantAndHomogeneous)
{
    std::mt19937_64 rng(8);
    std::normal_distribution<double> gauss;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<LocalGradient> gs;
        for (int i = 0; i < 5; ++i) {
            Vector v(4);
            for (int j = 0; j < 4; ++j)
                v(j) = gauss(rng);
            gs.push_back({i + 1, 0, v, {}});
        }
        const Vector base = aggregate(gs, 5);
        std::shuffle(gs.begin(), gs.end(), rng);
        EXPECT_LT((aggregate(gs, 5) - base).norm(), 1e-14);
        const double c = gauss(rng);
        for (auto& g : gs)
            g.gradient *= c;
        EXPECT_LT((aggregate(gs, 5) - c * base).norm(), 1e-13);
    }
}

TEST(GlobalUpdate, Arithmetic)
{
    GlobalState s{0, (Vector(2) << 1, 1).finished()};
    auto same = global_update(s, Vector::Zero(2), 0.5);
    EXPECT_EQ(same.w, s.w);
    EXPECT_EQ(same.round, 1);
    auto next = global_update(s, (Vector(2) << 2, 0).finished(), 0.5);
    EXPECT_EQ(next.w, (Vector(2) << 0, 1).finished());
    EXPECT_THROW(global_update(s, (Vector(2) << 1e308, 0).finished(), -1e10), NumericError);
    EXPECT_THROW(global_update(s, Vector::Zero(3), 0.5), ContractError);
}

TEST(GlobalLoss, LogisticAtZeroIsLn2)
{
    SoftmaxRegression model(3, 2);
    std::mt19937_64 rng(9);
    Dataset d = make_gaussian_classes(2, 3, 20, 2.0, 1.0, rng);
    std::vector<std::size_t> all(d.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    EXPECT_NEAR(global_loss(model, Vector::Zero(model.dimension()), d, all), std::log(2.0), 1e-15);
}

TEST(GlobalLoss, WeightedMeanOfLocalLosses)
{
    std::mt19937_64 rng(10);
    Dataset d = make_gaussian_classes(3, 4, 30, 2.0, 1.0, rng);
    auto data = std::make_shared<Dataset>(d);
    auto shards = partition_iid(d, 5, 13, rng);
    shards[0].indices.resize(5); // uneven sizes
    FederatedTask task(std::make_shared<SoftmaxRegression>(4, 3), data, shards);
    std::mt19937_64 init(11);
    Vector w = Vector::Random(task.dimension());
    double weighted = 0.0;
    double total = 0.0;
    for (int n = 1; n <= 5; ++n) {
        weighted += static_cast<double>(task.shard(n).size()) * task.local_loss(n, w);
        total += static_cast<double>(task.shard(n).size());
    }
    EXPECT_NEAR(task.global_loss(w), weighted / total, 1e-13);
}

TEST(GlobalLoss, QuadraticOptimumOfNoiselessHomogeneousTask)
{
    std::mt19937_64 rng(12);
    QuadraticOptions o;
    o.noise_std = 0.0;
    auto q = make_quadratic(4, 5, 0.0, rng, o);
    EXPECT_NEAR(q.task.global_loss(q.optimum), 0.0, 1e-20);
}

TEST(Gradients, MatchFiniteDifferences)
{
    std::mt19937_64 rng(13);
    Dataset cls = make_gaussian_classes(4, 6, 10, 2.0, 1.0, rng);
    std::vector<std::size_t> all(cls.size());
    std::iota(all.begin(), all.end(), std::size_t{0});
    auto quad = make_quadratic(3, 6, 1.0, rng);
    std::vector<std::unique_ptr<Model>> models;
    models.push_back(std::make_unique<SoftmaxRegression>(6, 4));
    models.push_back(std::make_unique<Mlp>(6, 5, 4));
    for (const auto& m : models) {
        for (int p = 0; p < 20; ++p) {
            Vector w = m->initial_parameters(rng) + 0.5 * Vector::Random(m->dimension());
            Vector g;
            m->evaluate(w, cls, all, &g);
            const Vector fd = numeric_gradient(*m, w, cls, all);
            EXPECT_LT((g - fd).norm() / g.norm(), 1e-5) << m->name();
        }
    }
    for (int p = 0; p < 20; ++p) {
        Vector w = 3.0 * Vector::Random(6);
        const auto& all_q = quad.task.all_samples();
        Vector g;
        quad.task.model().evaluate(w, quad.task.data(), all_q, &g);
        const Vector fd = numeric_gradient(quad.task.model(), w, quad.task.data(), all_q);
        EXPECT_LT((g - fd).norm() / g.norm(), 1e-5);
    }
}

TEST(Pipeline, SynchronousQuadraticConverges)
{
    std::mt19937_64 rng(14);
    QuadraticOptions o;
    o.noise_std = 0.0;
    o.eig_min = 1.0;
    o.eig_max = 10.0;
    auto q = make_quadratic(4, 5, 1.0, rng, o);
    SystemConfig cfg;
    cfg.num_devices = 4;
    cfg.group_size = 4;
    cfg.batch_size = 4;
    cfg.step_size = 0.1;
    cfg.horizon = 1'000'000;
    LearnerOptions lo;
    lo.local = {4, 1, 0.1, true};
    FederatedLearner learner(q.task, Vector::Zero(5), lo);
    SimulationOptions so;
    so.round_limit = 200;
    run_timeline(cfg, learner, so);
    EXPECT_LT(q.task.global_gradient(learner.state().w).norm(), 1e-6);
}

TEST(Pipeline, SynchronousEqualsCentralizedSgd)
{
    std::mt19937_64 rng(15);
    auto q = make_quadratic(5, 4, 0.7, rng);
    const double eta = 0.05;
    const int batch = 6;
    const std::uint64_t seed = 99;
    SystemConfig cfg;
    cfg.num_devices = 5;
    cfg.group_size = 5;
    cfg.batch_size = batch;
    cfg.step_size = eta;
    cfg.horizon = 1'000'000;
    LearnerOptions lo;
    lo.local = {batch, 1, eta, true};
    lo.seed = seed;
    lo.keep_history = true;
    const Vector w0 = Vector::Ones(4);
    FederatedLearner learner(q.task, w0, lo);
    SimulationOptions so;
    so.round_limit = 50;
    run_timeline(cfg, learner, so);

    Vector w = w0;
    for (Round k = 0; k < 50; ++k) {
        Vector sum = Vector::Zero(4);
        for (int n = 1; n <= 5; ++n) {
            auto r = batch_rng(seed, n, k);
            const auto b = sample_batch(q.task.shard(n), batch, r);
            Vector g;
            q.task.model().evaluate(w, q.task.data(), b, &g);
            sum += g;
        }
        w -= eta * sum / 5.0;
        EXPECT_LT((w - learner.history()[static_cast<std::size_t>(k + 1)]).norm(), 1e-12);
    }
}

TEST(Pipeline, StaleInformationFlowFollowsClosedForm)
{
    std::mt19937_64 rng(16);
    auto q = make_quadratic(6, 3, 0.5, rng);
    SystemConfig cfg;
    cfg.num_devices = 6;
    cfg.group_size = 2;
    cfg.batch_size = 4;
    cfg.horizon = 1'000'000;
    cfg.with_compute_slots(3);
    LearnerOptions lo;
    lo.local = {4, 1, 0.01, true};
    FederatedLearner learner(q.task, Vector::Zero(3), lo);
    SimulationOptions so;
    so.round_limit = 40;
    auto tl = run_timeline(cfg, learner, so);
    ASSERT_EQ(learner.applied().size(), tl.staleness.size());
    for (std::size_t i = 0; i < tl.staleness.size(); ++i) {
        const auto& a = learner.applied()[i];
        EXPECT_EQ(a.round - a.origin_round, staleness_closed_form(a.round, cfg));
        EXPECT_EQ(a.origin_round, tl.staleness[i].model_round);
    }
    learner.metrics().validate();
    EXPECT_EQ(learner.metrics().rows.size(), 41u);
}

TEST(Checkpoint, RoundTrip)
{
    const auto path = std::filesystem::temp_directory_path() / "tdma_fl_ckpt.bin";
    GlobalState s{17, (Vector(3) << 1.5, -2.25, 1e-300).finished()};
    write_checkpoint(path, s);
    auto back = read_checkpoint(path);
    EXPECT_EQ(back.round, 17);
    EXPECT_EQ(back.w, s.w);
    {
        std::ofstream f(path, std::ios::binary);
        f << "garbage!";
    }
    EXPECT_THROW(read_checkpoint(path), DataError);
    std::filesystem::remove(path);
}
