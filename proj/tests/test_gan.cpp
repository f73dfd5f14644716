#include "milab/gan.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>

#include "milab/dataset.hpp"

namespace milab {
namespace {

namespace fs = std::filesystem;

void zero_params(std::vector<Tensor*> params) {
    for (Tensor* p : params)
        for (auto& v : p->data) v = 0.0;
}

TEST(Gan, ZeroIterationsEqualsSeededInit) {
    Dataset pub = synth_blobs(2, 8, 8, 3);
    GanHyper hyper;
    hyper.iterations = 0;
    hyper.base = 4;
    GanResult r = train_gan(pub, 16, DiscMode::kProbabilistic, hyper, 42);
    Generator fresh = Generator::make(16, 1, 8, 8, 4, 42);
    auto a = r.gen.parameters();
    auto b = fresh.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::int64_t j = 0; j < a[i]->size(); ++j) EXPECT_EQ((*a[i])[j], (*b[i])[j]);
    EXPECT_TRUE(r.trace.empty());
}

TEST(Gan, GeneratorOutputWithinTanhRange) {
    Rng rng(5);
    Generator g = Generator::make(8, 1, 8, 8, 4, 7);
    Tensor z = rng.normal_tensor({16, 8}, 0.0, 3.0);
    Tensor img = g.generate(z);
    for (double v : img.data) {
        EXPECT_LE(v, 1.0);
        EXPECT_GE(v, -1.0);
    }
}

TEST(PriorLoss, ProbabilisticHalfGivesLn2) {
    Discriminator d = Discriminator::make(DiscMode::kProbabilistic, 1, 8, 8, 4, 1);
    zero_params(d.parameters());  // score 0 -> D(x) = 0.5
    Tensor x({1, 1, 8, 8});
    EXPECT_NEAR(prior_loss_value(d, x), std::log(2.0), 1e-12);
}

TEST(PriorLoss, CriticScoreNegated) {
    Discriminator d = Discriminator::make(DiscMode::kCritic, 1, 8, 8, 4, 1);
    zero_params(d.parameters());
    d.out.b[0] = 1.3;  // score identically 1.3
    Tensor x({1, 1, 8, 8});
    EXPECT_NEAR(prior_loss_value(d, x), -1.3, 1e-12);
}

TEST(PriorLoss, ProbabilityNearOneGivesLossNearZeroFromAbove) {
    Discriminator d = Discriminator::make(DiscMode::kProbabilistic, 1, 8, 8, 4, 1);
    zero_params(d.parameters());
    d.out.b[0] = 50.0;  // sigmoid saturates; clamp keeps it below 1
    Tensor x({1, 1, 8, 8});
    double loss = prior_loss_value(d, x);
    EXPECT_GT(loss, 0.0);
    EXPECT_LT(loss, 1e-5);
}

TEST(PriorLoss, MonotoneDecreasingInScoreBothModes) {
    Tensor x({1, 1, 8, 8});
    for (DiscMode mode : {DiscMode::kCritic, DiscMode::kProbabilistic}) {
        Discriminator d = Discriminator::make(mode, 1, 8, 8, 4, 1);
        zero_params(d.parameters());
        double prev = 0.0;
        bool first = true;
        for (double s : {-2.0, -0.5, 0.0, 0.5, 2.0}) {
            d.out.b[0] = s;
            double loss = prior_loss_value(d, x);
            if (!first) EXPECT_LT(loss, prev) << disc_mode_name(mode);
            prev = loss;
            first = false;
        }
    }
}

TEST(Gan, ProbabilisticTrainingLiftsFakeScore) {
    Dataset pub = synth_blobs(2, 100, 8, 11);
    GanHyper hyper;
    hyper.iterations = 150;
    hyper.batch = 16;
    hyper.base = 4;
    GanResult r = train_gan(pub, 8, DiscMode::kProbabilistic, hyper, 19);
    ASSERT_EQ(r.trace.size(), 150u);
    // mean discriminator probability on generated batches ends above 0.3
    double late = 0.0;
    for (std::size_t i = r.trace.size() - 10; i < r.trace.size(); ++i) late += r.trace[i].fake_score;
    late /= 10.0;
    EXPECT_GT(late, 0.3);
    // generator emits in-range images after training
    Rng rng(7);
    Tensor img = r.gen.generate(rng.normal_tensor({8, 8}));
    for (double v : img.data) {
        EXPECT_LE(v, 1.0);
        EXPECT_GE(v, -1.0);
    }
}

TEST(Gan, CriticTrainingRunsAndStaysFinite) {
    Dataset pub = synth_blobs(2, 60, 8, 13);
    GanHyper hyper;
    hyper.iterations = 20;
    hyper.batch = 8;
    hyper.base = 4;
    hyper.critic_steps = 2;
    hyper.d_optim.learning_rate = 1e-4;
    GanHyper h2 = hyper;
    GanResult r = train_gan(pub, 8, DiscMode::kCritic, h2, 23);
    ASSERT_EQ(r.trace.size(), 20u);
    for (const auto& row : r.trace) {
        EXPECT_TRUE(std::isfinite(row.d_loss));
        EXPECT_TRUE(std::isfinite(row.g_loss));
    }
}

TEST(Gan, CheckpointRoundTrip) {
    fs::path dir = fs::temp_directory_path() / "milab_gan_ckpt";
    fs::create_directories(dir);
    Generator g = Generator::make(16, 1, 12, 12, 4, 5);
    Discriminator d = Discriminator::make(DiscMode::kCritic, 1, 12, 12, 4, 6);
    save_generator(g, dir / "g.ckpt", 5);
    save_discriminator(d, dir / "d.ckpt", 6);
    Generator g2 = load_generator(dir / "g.ckpt");
    Discriminator d2 = load_discriminator(dir / "d.ckpt");
    EXPECT_EQ(g2.n_z, 16);
    EXPECT_EQ(d2.mode, DiscMode::kCritic);
    auto a = g.parameters();
    auto b = g2.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::int64_t j = 0; j < a[i]->size(); ++j) EXPECT_EQ((*a[i])[j], (*b[i])[j]);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace milab
