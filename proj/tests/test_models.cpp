#include "milab/models.hpp"

#include <gtest/gtest.h>

#include <filesystem>

#include "milab/dataset.hpp"

namespace milab {
namespace {

namespace fs = std::filesystem;

TEST(Classifier, ZeroWeightNetGivesUnitBiasSlotOnly) {
    Classifier c = Classifier::make("Conv2", 3, 1, 8, 8, 1);
    for (Tensor* p : c.parameters())
        for (auto& v : p->data) v = 0.0;
    Tape t;
    TapeCtx ctx(t);
    Var pt = c.penultimate(ctx, t.constant(Tensor({1, 1, 8, 8})));
    const Tensor& v = t.val(pt);
    ASSERT_EQ(v.shape, (Shape{1, c.feat_dim + 1}));
    for (int j = 0; j < c.feat_dim; ++j) EXPECT_DOUBLE_EQ(v[j], 0.0);
    EXPECT_DOUBLE_EQ(v[c.feat_dim], 1.0);
}

TEST(Classifier, PenultimateAppendsConstantOne) {
    Tape t;
    Var feats = t.constant(Tensor({1, 2}, std::vector<double>{0.2, 0.3}));
    const Tensor& v = t.val(t.append_one_col(feats));
    EXPECT_DOUBLE_EQ(v[0], 0.2);
    EXPECT_DOUBLE_EQ(v[1], 0.3);
    EXPECT_DOUBLE_EQ(v[2], 1.0);
}

// Dual-path oracle: logits computed through W.[p;1] must equal the
// independently computed split route W[:, :d].p + W[:, d].
TEST(Classifier, BiasAugmentationIdentityHoldsForEveryArchitecture) {
    Rng rng(2023);
    for (const char* arch : {"Conv1", "Conv2", "Conv3", "Conv4", "Conv5"}) {
        Classifier c = Classifier::make(arch, 4, 1, 16, 16, 7);
        Tensor x = rng.normal_tensor({2, 1, 16, 16}, 0.0, 0.5);
        Tape t;
        TapeCtx ctx(t);
        Var pt = c.penultimate(ctx, t.constant(x));
        Var lg = c.logits_from_penultimate(ctx, pt);
        const Tensor& ptv = t.val(pt);
        const Tensor& lgv = t.val(lg);
        int d = c.feat_dim;
        for (int i = 0; i < 2; ++i) {
            for (int k = 0; k < c.n_classes; ++k) {
                double manual = c.head[static_cast<std::int64_t>(k) * (d + 1) + d];  // bias column
                for (int j = 0; j < d; ++j)
                    manual += c.head[static_cast<std::int64_t>(k) * (d + 1) + j] *
                              ptv[static_cast<std::int64_t>(i) * (d + 1) + j];
                EXPECT_NEAR(lgv[static_cast<std::int64_t>(i) * c.n_classes + k], manual, 1e-12)
                    << arch;
            }
        }
    }
}

TEST(Classifier, InputShapeMismatchThrows) {
    Classifier c = Classifier::make("Conv2", 3, 1, 8, 8, 1);
    Tape t;
    TapeCtx ctx(t);
    EXPECT_THROW(c.logits(ctx, t.constant(Tensor({1, 1, 10, 10}))), std::runtime_error);
}

TEST(TrainClassifier, ZeroEpochsReturnsSeededInitBitwise) {
    Dataset ds = synth_blobs(3, 10, 8, 11);
    TrainHyper hyper;
    hyper.epochs = 0;
    TrainResult r = train_classifier(ds, "Conv2", hyper, 42);
    Classifier fresh = Classifier::make("Conv2", 3, 1, 8, 8, 42);
    auto a = r.model.parameters();
    auto b = fresh.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        ASSERT_EQ(a[i]->shape, b[i]->shape);
        for (std::int64_t j = 0; j < a[i]->size(); ++j) EXPECT_EQ((*a[i])[j], (*b[i])[j]);
    }
}

TEST(TrainClassifier, RequiresDenseLabels) {
    Dataset ds = synth_blobs(3, 4, 8, 11);
    for (auto& l : ds.labels) l += 5;
    ds.class_set = {5, 6, 7};
    EXPECT_THROW(train_classifier(ds, "Conv2", TrainHyper{}, 1), std::runtime_error);
}

// Train-and-measure oracle: blobs are linearly separable, so even a one-block
// net should saturate holdout accuracy.
TEST(TrainClassifier, OneConvLayerSeparatesBlobs) {
    Dataset ds = synth_blobs(3, 40, 12, 909);
    TrainHyper hyper;
    hyper.epochs = 3;
    hyper.batch = 16;
    TrainResult r = train_classifier(ds, "Conv1", hyper, 5);
    EXPECT_GE(r.final_holdout_acc, 0.99);
}

TEST(TrainClassifier, Conv2ReachesHighAccuracyOnBlobs) {
    Dataset ds = synth_blobs(2, 40, 12, 31);
    TrainHyper hyper;
    hyper.epochs = 3;
    hyper.batch = 16;
    TrainResult r = train_classifier(ds, "Conv2", hyper, 6);
    EXPECT_GE(r.final_holdout_acc, 0.99);
}

TEST(Distill, ZeroEpochsReportsInitializationKl) {
    Dataset pub = synth_blobs(4, 10, 8, 17);
    Classifier teacher = Classifier::make("Conv2", 3, 1, 8, 8, 99);
    DistillConfig cfg;
    cfg.epochs = 0;
    DistillResult r = distill(teacher, pub, "Conv1", cfg, 4);
    Classifier fresh = Classifier::make("Conv1", 3, 1, 8, 8, 4);
    auto a = r.student.parameters();
    auto b = fresh.parameters();
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::int64_t j = 0; j < a[i]->size(); ++j) EXPECT_EQ((*a[i])[j], (*b[i])[j]);
    EXPECT_EQ(r.final_kl, r.initial_kl);
    EXPECT_GT(r.initial_kl, 0.0);
}

TEST(Distill, HoldoutKlDropsByHalf) {
    Dataset ds = synth_blobs(4, 30, 10, 55);
    SplitSpec spec;
    spec.private_classes = {0, 1};
    spec.public_classes = {2, 3};
    SplitResult sr = split_disjoint(ds, spec);

    TrainHyper hyper;
    hyper.epochs = 3;
    hyper.batch = 16;
    Classifier teacher = train_classifier(sr.private_set, "Conv2", hyper, 1).model;

    DistillConfig cfg;
    cfg.epochs = 6;
    cfg.batch = 16;
    DistillResult r = distill(teacher, sr.public_set, "Conv1", cfg, 2);
    EXPECT_LT(r.final_kl, 0.5 * r.initial_kl);
    EXPECT_LT(r.final_kl, r.initial_kl);
}

TEST(Distill, SelfDistillationDrivesKlSmall) {
    Dataset pub = synth_blobs(3, 40, 10, 66);
    Classifier teacher = Classifier::make("Conv2", 2, 1, 10, 10, 123);
    DistillConfig cfg;
    cfg.epochs = 12;
    cfg.batch = 16;
    DistillResult r = distill(teacher, pub, "Conv2", cfg, 5);
    EXPECT_LT(r.final_kl, 0.05);
}

TEST(Distill, TemperatureMustBePositive) {
    Dataset pub = synth_blobs(2, 2, 8, 1);
    Classifier teacher = Classifier::make("Conv1", 2, 1, 8, 8, 1);
    DistillConfig cfg;
    cfg.temperature = 0.0;
    EXPECT_THROW(distill(teacher, pub, "Conv1", cfg, 1), std::runtime_error);
}

TEST(Checkpoint, RoundTripPreservesParamsBitwise) {
    fs::path dir = fs::temp_directory_path() / "milab_ckpt_test";
    fs::create_directories(dir);
    Classifier c = Classifier::make("Conv3", 5, 1, 16, 16, 321);
    save_classifier(c, dir / "model.ckpt", 321);
    Classifier back = load_classifier(dir / "model.ckpt");
    EXPECT_EQ(back.arch_tag, "Conv3");
    auto a = c.parameters();
    auto b = back.parameters();
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i)
        for (std::int64_t j = 0; j < a[i]->size(); ++j) EXPECT_EQ((*a[i])[j], (*b[i])[j]);
    fs::remove_all(dir);
}

}  // namespace
}  // namespace milab
