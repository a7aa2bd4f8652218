#include <gtest/gtest.h>

#include <boost/math/distributions/chi_squared.hpp>

#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "tdma_fl/idx.hpp"
#include "tdma_fl/quadratic.hpp"

using namespace tdma_fl;

namespace {

Dataset labelled(int classes, int per_class)
{
    Dataset d;
    d.num_classes = classes;
    d.features = Matrix::Zero(1, classes * per_class);
    for (int c = 0; c < classes; ++c)
        for (int j = 0; j < per_class; ++j)
            d.labels.push_back(c);
    for (Eigen::Index i = 0; i < d.features.cols(); ++i)
        d.features(0, i) = static_cast<double>(i);
    return d;
}

std::filesystem::path scratch(const std::string& name)
{
    auto dir = std::filesystem::temp_directory_path() / "tdma_fl_tasks";
    std::filesystem::create_directories(dir);
    return dir / name;
}

void write_bytes(const std::filesystem::path& p, const std::vector<unsigned char>& bytes)
{
    std::ofstream out(p, std::ios::binary);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

std::vector<unsigned char> read_bytes(const std::filesystem::path& p)
{
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST(Partition, SingleLabelShardsAreDisjointAndPure)
{
    const auto d = labelled(10, 100);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        std::mt19937_64 rng(seed);
        auto shards = partition_single_label(d, 20, 30, rng);
        ASSERT_EQ(shards.size(), 20u);
        std::set<std::size_t> seen;
        std::size_t total = 0;
        for (std::size_t n = 0; n < shards.size(); ++n) {
            EXPECT_EQ(shards[n].device_id, static_cast<int>(n) + 1);
            EXPECT_EQ(shards[n].size(), 30u);
            std::set<int> labels;
            for (auto i : shards[n].indices) {
                labels.insert(d.labels[i]);
                EXPECT_TRUE(seen.insert(i).second);
            }
            EXPECT_EQ(labels.size(), 1u);
            total += shards[n].size();
        }
        EXPECT_EQ(total, 600u);
    }
}

TEST(Partition, SingleDevice)
{
    const auto d = labelled(3, 5);
    std::mt19937_64 rng(1);
    auto shards = partition_single_label(d, 1, 5, rng);
    ASSERT_EQ(shards.size(), 1u);
    EXPECT_EQ(shards[0].size(), 5u);
}

TEST(Partition, LabelChoiceIsUniform)
{
    // Pools never run dry here, so each device's label is one uniform draw.
    const auto d = labelled(10, 200);
    std::vector<double> counts(10, 0.0);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        std::mt19937_64 rng(seed);
        for (const auto& s : partition_single_label(d, 10, 10, rng))
            counts[static_cast<std::size_t>(d.labels[s.indices[0]])] += 1.0;
    }
    double chi = 0.0;
    for (double c : counts)
        chi += (c - 100.0) * (c - 100.0) / 100.0;
    const double critical = boost::math::quantile(boost::math::chi_squared(9.0), 0.99);
    EXPECT_LT(chi, critical);
}

TEST(Partition, Errors)
{
    std::mt19937_64 rng(2);
    const auto d = labelled(2, 5);
    EXPECT_THROW(partition_single_label(d, 3, 4, rng), DataError); // total 12 > 10 available
    EXPECT_THROW(partition_single_label(d, 3, 3, rng, 50), DataError); // third device finds no pool of 3
    EXPECT_THROW(partition_single_label(d, 0, 3, rng), ConfigError);
    EXPECT_THROW(partition_iid(d, 3, 4, rng), DataError);
}

TEST(Partition, IidShardsCoverDisjointSamples)
{
    const auto d = labelled(4, 25);
    std::mt19937_64 rng(3);
    auto shards = partition_iid(d, 5, 20, rng);
    std::set<std::size_t> seen;
    for (const auto& s : shards)
        for (auto i : s.indices)
            EXPECT_TRUE(seen.insert(i).second);
    EXPECT_EQ(seen.size(), 100u);
}

TEST(Quadratic, HomogeneousTaskHasZeroGamma)
{
    std::mt19937_64 rng(4);
    auto q = make_quadratic(6, 4, 0.0, rng);
    EXPECT_EQ(q.exact.gamma_sq, 0.0);
    for (const auto& u : q.offsets)
        EXPECT_EQ(u.norm(), 0.0);
}

TEST(Quadratic, IdentityCurvatureGammaIsExact)
{
    std::mt19937_64 rng(5);
    QuadraticOptions o;
    o.eig_min = o.eig_max = 1.0;
    auto q = make_quadratic(5, 3, 0.8, rng, o);
    EXPECT_NEAR(q.exact.gamma_sq, 0.64, 1e-12);
    EXPECT_EQ(q.exact.L_smooth, 1.0);
    // Brute force over devices at a random point: max ||grad f_n - grad f||^2.
    const Vector w = Vector::Random(3);
    const Vector g = q.task.global_gradient(w);
    double worst = 0.0;
    for (int n = 1; n <= 5; ++n)
        worst = std::max(worst, (q.task.local_gradient(n, w) - g).squaredNorm());
    EXPECT_NEAR(worst, 0.64, 1e-12);
}

TEST(Quadratic, OptimumSolvesNormalEquations)
{
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 5; ++trial) {
        auto q = make_quadratic(4, 6, 1.5, rng);
        const Matrix& a = q.curvature;
        const auto& d = q.task.data();
        Vector b = Vector::Zero(6);
        for (Eigen::Index i = 0; i < d.features.cols(); ++i)
            b += a * d.features.col(i);
        b /= static_cast<double>(d.features.cols());
        const Vector w = a.ldlt().solve(b);
        EXPECT_LT((w - q.optimum).norm(), 1e-10);
        EXPECT_LT(q.task.global_gradient(q.optimum).norm(), 1e-10);
    }
}

TEST(Quadratic, LossAndGradientMatchPerSampleSums)
{
    std::mt19937_64 rng(7);
    auto q = make_quadratic(3, 4, 1.0, rng);
    const Matrix& a = q.curvature;
    const auto& d = q.task.data();
    for (int trial = 0; trial < 10; ++trial) {
        const Vector w = 2.0 * Vector::Random(4);
        double f = 0.0;
        Vector g = Vector::Zero(4);
        for (Eigen::Index i = 0; i < d.features.cols(); ++i) {
            const Vector r = w - d.features.col(i);
            f += 0.5 * r.dot(a * r);
            g += a * r;
        }
        const double n = static_cast<double>(d.features.cols());
        double loss = 0.0;
        const Vector grad = q.task.global_gradient(w, &loss);
        EXPECT_NEAR(loss, f / n, 1e-10 * std::max(1.0, f / n));
        EXPECT_LT((grad - g / n).norm(), 1e-10);
    }
}

TEST(Quadratic, ExactConstantsDescribeTheSpectrum)
{
    std::mt19937_64 rng(8);
    QuadraticOptions o;
    o.eig_min = 0.1;
    o.eig_max = 3.0;
    auto q = make_quadratic(4, 5, 1.0, rng, o);
    EXPECT_NEAR(q.exact.L_smooth, 3.0, 1e-12);
    EXPECT_NEAR(q.exact.gamma_sq, 1.0, 1e-12);
    EXPECT_EQ(q.exact.provenance, Provenance::exact);
    EXPECT_THROW(make_quadratic(4, 5, -1.0, rng), ConfigError);
}

TEST(Task, RejectsBadShards)
{
    auto data = std::make_shared<Dataset>(labelled(2, 4));
    auto model = std::make_shared<QuadraticModel>(Matrix::Identity(1, 1));
    EXPECT_THROW(FederatedTask(model, data, {{1, {0, 1}}, {2, {1, 2}}}), DataError);
    EXPECT_THROW(FederatedTask(model, data, {{1, {0}}, {2, {}}}), DataError);
    EXPECT_THROW(FederatedTask(model, data, {{2, {0}}}), DataError);
}

TEST(Idx, RoundTrip)
{
    IdxImages img{3, 2, 2, {0, 255, 10, 20, 1, 2, 3, 4, 200, 100, 50, 25}};
    std::vector<unsigned char> labels{7, 0, 3};
    const auto ip = scratch("img.idx");
    const auto lp = scratch("lab.idx");
    write_idx_images(ip, img);
    write_idx_labels(lp, labels);
    auto back = read_idx_images(ip);
    EXPECT_EQ(back.count, 3u);
    EXPECT_EQ(back.rows, 2u);
    EXPECT_EQ(back.pixels, img.pixels);
    EXPECT_EQ(read_idx_labels(lp), labels);
    auto d = load_idx_dataset(ip, lp);
    EXPECT_EQ(d.size(), 3u);
    EXPECT_EQ(d.feature_dim(), 4);
    EXPECT_DOUBLE_EQ(d.features(1, 0), 1.0);
    EXPECT_EQ(d.labels[0], 7);
    EXPECT_EQ(d.num_classes, 10);
}

TEST(Idx, MalformedFiles)
{
    IdxImages img{2, 1, 2, {1, 2, 3, 4}};
    const auto ip = scratch("bad_img.idx");
    const auto lp = scratch("bad_lab.idx");
    write_idx_images(ip, img);
    write_idx_labels(lp, {1, 2, 3});
    EXPECT_THROW(load_idx_dataset(ip, lp), DataError); // count mismatch

    write_bytes(lp, {});
    try {
        read_idx_labels(lp);
        FAIL();
    }
    catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("bad_lab.idx"), std::string::npos);
    }

    auto bytes = read_bytes(ip);
    auto swapped = bytes;
    swapped[3] = 0x01; // label magic on an image file
    write_bytes(ip, swapped);
    EXPECT_THROW(read_idx_images(ip), DataError);

    bytes.pop_back();
    write_bytes(ip, bytes);
    EXPECT_THROW(read_idx_images(ip), DataError);
    EXPECT_THROW(read_idx_images(scratch("missing.idx")), DataError);
}

TEST(Cifar, LoadsRecordsAndRejectsBadSizes)
{
    std::vector<unsigned char> buf(2 * 3073, 51);
    buf[0] = 4;
    buf[3073] = 9;
    const auto p = scratch("batch.bin");
    write_bytes(p, buf);
    auto d = load_cifar10_batches({p, p});
    EXPECT_EQ(d.size(), 4u);
    EXPECT_EQ(d.labels[1], 9);
    EXPECT_DOUBLE_EQ(d.features(0, 0), 0.2);
    buf.pop_back();
    write_bytes(p, buf);
    EXPECT_THROW(load_cifar10_batches({p}), DataError);
}
