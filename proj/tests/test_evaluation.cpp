#include "milab/evaluation.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "milab/dataset.hpp"
#include "milab/models.hpp"

namespace milab {
namespace {

// Classifier whose prediction is a fixed class regardless of input: all
// weights zero, head bias column favors `winner`.
Classifier constant_predictor(int n_classes, int winner, int img = 8) {
    Classifier c = Classifier::make("Conv1", n_classes, 1, img, img, 1);
    for (Tensor* p : c.parameters())
        for (auto& v : p->data) v = 0.0;
    int d1 = c.feat_dim + 1;
    c.head[static_cast<std::int64_t>(winner) * d1 + d1 - 1] = 5.0;
    return c;
}

TEST(AttackAccuracy, AllCorrectGivesHundredWithZeroStd) {
    Classifier eval = constant_predictor(5, 2);
    ReconBatch batch;
    batch.images = Tensor({6, 1, 8, 8});
    batch.targets = std::vector<int>(6, 2);
    batch.groups = {0, 0, 0, 1, 1, 1};
    AccuracyStat s = attack_accuracy(batch, eval, 1);
    EXPECT_DOUBLE_EQ(s.mean, 100.0);
    EXPECT_DOUBLE_EQ(s.stddev, 0.0);
    ASSERT_EQ(s.per_group.size(), 2u);
}

TEST(AttackAccuracy, TopKEqualToClassCountIsHundredByDefinition) {
    Rng rng(5);
    Classifier eval = Classifier::make("Conv1", 5, 1, 8, 8, 3);
    ReconBatch batch;
    batch.images = rng.normal_tensor({10, 1, 8, 8}, 0.0, 0.5);
    batch.targets = std::vector<int>(10);
    for (auto& t : batch.targets) t = static_cast<int>(rng.uniform_int(5));
    batch.groups = std::vector<int>(10, 0);
    EXPECT_DOUBLE_EQ(attack_accuracy(batch, eval, 5).mean, 100.0);
}

TEST(AttackAccuracy, TopFiveAtLeastTopOne) {
    Rng rng(9);
    Classifier eval = Classifier::make("Conv2", 7, 1, 8, 8, 4);
    ReconBatch batch;
    batch.images = rng.normal_tensor({24, 1, 8, 8}, 0.0, 0.8);
    batch.targets.resize(24);
    batch.groups.resize(24);
    for (int i = 0; i < 24; ++i) {
        batch.targets[static_cast<std::size_t>(i)] = static_cast<int>(rng.uniform_int(7));
        batch.groups[static_cast<std::size_t>(i)] = i % 3;
    }
    double top1 = attack_accuracy(batch, eval, 1).mean;
    double top5 = attack_accuracy(batch, eval, 5).mean;
    EXPECT_GE(top5, top1);
}

TEST(AttackAccuracy, EmptyInputIsError) {
    Classifier eval = constant_predictor(3, 0);
    ReconBatch batch;
    EXPECT_THROW(attack_accuracy(batch, eval, 1), std::runtime_error);
}

TEST(AttackAccuracy, StdAcrossGroupsMatchesHandComputation) {
    // one group fully correct, one fully wrong: mean 50, population std 50
    Classifier eval = constant_predictor(4, 1);
    ReconBatch batch;
    batch.images = Tensor({4, 1, 8, 8});
    batch.targets = {1, 1, 0, 0};
    batch.groups = {0, 0, 1, 1};
    AccuracyStat s = attack_accuracy(batch, eval, 1);
    EXPECT_DOUBLE_EQ(s.mean, 50.0);
    EXPECT_DOUBLE_EQ(s.stddev, 50.0);
}

// Feature pickup net: feature 0 equals 10x the max pixel, other features 0.
Classifier pixel_pickup_net() {
    Classifier c = Classifier::make("Conv1", 2, 1, 4, 4, 1);
    for (Tensor* p : c.parameters())
        for (auto& v : p->data) v = 0.0;
    c.blocks[0].w[4] = 1.0;  // identity kernel center
    c.feat.w[0] = 10.0;
    return c;
}

Dataset constant_image_dataset(std::vector<double> pixel_values, std::vector<int> labels) {
    Dataset ds;
    int n = static_cast<int>(pixel_values.size());
    ds.images = Tensor({n, 1, 4, 4});
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 16; ++j)
            ds.images[static_cast<std::int64_t>(i) * 16 + j] = pixel_values[static_cast<std::size_t>(i)];
    ds.labels = std::move(labels);
    ds.class_set = detail::sorted_unique(ds.labels);
    return ds;
}

TEST(KnnDist, IdenticalReconstructionContributesZero) {
    Classifier eval = pixel_pickup_net();
    Dataset priv = constant_image_dataset({0.1, 0.3}, {0, 1});
    Tensor recon = priv.batch({0});
    EXPECT_DOUBLE_EQ(knn_dist(recon, priv, eval, 0), 0.0);
}

TEST(KnnDist, SinglePrivateSampleAtDistanceThree) {
    Classifier eval = pixel_pickup_net();
    Dataset priv = constant_image_dataset({0.1}, {0});
    Dataset recon_src = constant_image_dataset({0.4}, {0});  // feature 4 vs 1
    EXPECT_NEAR(knn_dist(recon_src.images, priv, eval, 0), 3.0, 1e-12);
}

TEST(KnnDist, MissingClassIsError) {
    Classifier eval = pixel_pickup_net();
    Dataset priv = constant_image_dataset({0.1}, {0});
    EXPECT_THROW(knn_dist(priv.images, priv, eval, 1), std::runtime_error);
}

// Exhaustive-pairs oracle on a 10x10 instance, coded independently on raw
// feature matrices.
TEST(KnnDist, MatchesExhaustivePairsOracle) {
    Rng rng(33);
    Classifier eval = Classifier::make("Conv2", 3, 1, 8, 8, 21);
    Dataset priv;
    priv.images = rng.normal_tensor({10, 1, 8, 8}, 0.0, 0.5);
    priv.labels = std::vector<int>(10, 1);
    priv.class_set = {1};
    Tensor recons = rng.normal_tensor({10, 1, 8, 8}, 0.0, 0.5);

    double got = knn_dist(recons, priv, eval, 1);

    Tensor rf = detail::eval_features(eval, recons);
    Tensor pf = detail::eval_features(eval, priv.images);
    double expect = 0.0;
    int d = rf.shape[1];
    for (int i = 0; i < 10; ++i) {
        double best = 1e300;
        for (int j = 0; j < 10; ++j) {
            double acc = 0.0;
            for (int c = 0; c < d; ++c) {
                double diff = rf[i * d + c] - pf[j * d + c];
                acc += diff * diff;
            }
            best = std::min(best, std::sqrt(acc));
        }
        expect += best;
    }
    expect /= 10.0;
    EXPECT_NEAR(got, expect, 1e-9);
}

TEST(KnnDist, PermutationInvariantInBothOrders) {
    Rng rng(44);
    Classifier eval = Classifier::make("Conv1", 2, 1, 8, 8, 2);
    Dataset priv;
    priv.images = rng.normal_tensor({6, 1, 8, 8}, 0.0, 0.4);
    priv.labels = std::vector<int>(6, 0);
    priv.class_set = {0};
    Tensor recons = rng.normal_tensor({4, 1, 8, 8}, 0.0, 0.4);
    double base = knn_dist(recons, priv, eval, 0);

    // shuffle private rows
    Dataset priv2 = priv;
    std::vector<std::int64_t> order{5, 3, 0, 4, 1, 2};
    priv2.images = priv.batch(order);
    EXPECT_NEAR(knn_dist(recons, priv2, eval, 0), base, 1e-12);

    // shuffle reconstruction rows (mean over recons unchanged)
    Tensor shuffled({4, 1, 8, 8});
    std::vector<int> ro{2, 0, 3, 1};
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 64; ++j)
            shuffled[static_cast<std::int64_t>(i) * 64 + j] = recons[static_cast<std::int64_t>(ro[static_cast<std::size_t>(i)]) * 64 + j];
    EXPECT_NEAR(knn_dist(shuffled, priv, eval, 0), base, 1e-12);
}

TEST(OverfitAnalysis, IdenticalModelsSitOnDiagonalWithZeroFraction) {
    Rng rng(55);
    Classifier model = Classifier::make("Conv2", 4, 1, 8, 8, 9);
    Tensor recons = rng.normal_tensor({12, 1, 8, 8}, 0.0, 0.5);
    std::vector<int> targets(12);
    for (auto& t : targets) t = static_cast<int>(rng.uniform_int(4));
    OverfitResult res = overfit_analysis(recons, targets, model, model, 0.5, 0.500001);
    for (const auto& [a, b] : res.pairs) EXPECT_EQ(a, b);
    EXPECT_DOUBLE_EQ(res.fraction_low_high, 0.0);
}

TEST(OverfitAnalysis, DefaultThresholdsAreMedianAndNinetieth) {
    Rng rng(66);
    Classifier a = Classifier::make("Conv1", 3, 1, 8, 8, 1);
    Classifier b = Classifier::make("Conv1", 3, 1, 8, 8, 2);
    Tensor recons = rng.normal_tensor({20, 1, 8, 8}, 0.0, 0.5);
    std::vector<int> targets(20, 1);
    OverfitResult res = overfit_analysis(recons, targets, a, b);
    std::vector<double> la, lb;
    for (const auto& [x, y] : res.pairs) {
        la.push_back(x);
        lb.push_back(y);
    }
    std::sort(la.begin(), la.end());
    std::sort(lb.begin(), lb.end());
    EXPECT_DOUBLE_EQ(res.tau_low, la[9]);   // ceil(0.5*20) = 10th (1-indexed)
    EXPECT_DOUBLE_EQ(res.tau_high, lb[17]);  // ceil(0.9*20) = 18th
}

TEST(AttackReport, InvariantsEnforced) {
    AttackReport r;
    r.top1.mean = 50.0;
    r.top5.mean = 60.0;
    r.knn_dist_mean = 1.0;
    r.check();
    r.top5.mean = 40.0;
    EXPECT_THROW(r.check(), std::runtime_error);
    r.top5.mean = 60.0;
    r.knn_dist_mean = -1.0;
    EXPECT_THROW(r.check(), std::runtime_error);
    r.knn_dist_mean = 0.0;
    nlohmann::json j = r.to_json();
    EXPECT_EQ(j["top1"]["mean"], 50.0);
}

TEST(Pgm, RoundTripHeaderAndPixels) {
    Tensor img({1, 2, 3});
    img[0] = -1.0;  // -> 0
    img[1] = 1.0;   // -> 255
    img[2] = 0.0;   // -> 128 (127.5 rounded)
    auto path = std::filesystem::temp_directory_path() / "milab_test.pgm";
    write_pgm(path, img);
    auto bytes = read_file_bytes(path);
    std::string header(bytes.begin(), bytes.begin() + 9);
    EXPECT_EQ(header, "P5\n3 2\n25");
    EXPECT_EQ(bytes[bytes.size() - 6], 0);
    EXPECT_EQ(bytes[bytes.size() - 5], 255);
    EXPECT_EQ(bytes[bytes.size() - 4], 128);
    std::filesystem::remove(path);
}

}  // namespace
}  // namespace milab
