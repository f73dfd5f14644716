#include "milab/optim.hpp"

#include <gtest/gtest.h>

#include "milab/nn.hpp"
#include "milab/tape.hpp"

namespace milab {
namespace {

TEST(Optimizer, ZeroLearningRateLeavesParamsBitwiseUnchanged) {
    Rng rng(3);
    Tensor p = rng.normal_tensor({4, 4});
    Tensor before = p;
    Tensor g = rng.normal_tensor({4, 4});
    for (OptimKind kind : {OptimKind::kSgdMomentum, OptimKind::kAdam}) {
        OptimConfig cfg;
        cfg.kind = kind;
        cfg.learning_rate = 0.0;
        Optimizer opt(cfg);
        std::vector<Tensor*> params{&p};
        opt.step(params, std::vector<Tensor>{g});
        for (std::int64_t i = 0; i < p.size(); ++i) EXPECT_EQ(p[i], before[i]);
    }
}

TEST(Optimizer, StepNeverChangesShapes) {
    Rng rng(4);
    Tensor p = rng.normal_tensor({3, 2});
    OptimConfig cfg;
    cfg.kind = OptimKind::kAdam;
    cfg.learning_rate = 0.1;
    Optimizer opt(cfg);
    std::vector<Tensor*> params{&p};
    opt.step(params, std::vector<Tensor>{rng.normal_tensor({3, 2})});
    EXPECT_EQ(p.shape, (Shape{3, 2}));
    EXPECT_THROW(opt.step(params, std::vector<Tensor>{rng.normal_tensor({2, 3})}),
                 std::runtime_error);
}

TEST(Optimizer, SgdMomentumMatchesHandComputation) {
    Tensor p({1}, std::vector<double>{1.0});
    OptimConfig cfg;
    cfg.kind = OptimKind::kSgdMomentum;
    cfg.learning_rate = 0.1;
    cfg.momentum = 0.5;
    Optimizer opt(cfg);
    std::vector<Tensor*> params{&p};
    Tensor g({1}, std::vector<double>{2.0});
    opt.step(params, std::vector<Tensor>{g});  // v=2, p=1-0.2=0.8
    EXPECT_NEAR(p[0], 0.8, 1e-15);
    opt.step(params, std::vector<Tensor>{g});  // v=3, p=0.8-0.3=0.5
    EXPECT_NEAR(p[0], 0.5, 1e-15);
}

TEST(Optimizer, AdamDescendsQuadratic) {
    // minimize f(x) = (x - 3)^2 from x = 0
    Tensor x({1}, std::vector<double>{0.0});
    x.requires_grad = true;
    OptimConfig cfg;
    cfg.kind = OptimKind::kAdam;
    cfg.learning_rate = 0.1;
    Optimizer opt(cfg);
    std::vector<Tensor*> params{&x};
    for (int i = 0; i < 300; ++i) {
        Tape t;
        Var xv = t.leaf(x);
        Var d = t.add_scalar(xv, -3.0);
        Var loss = t.sum(t.mul(d, d));
        t.backward(loss);
        opt.step(params, std::vector<Tensor>{t.grad(xv)});
    }
    EXPECT_NEAR(x[0], 3.0, 1e-2);
}

TEST(Optimizer, SgdDescendsQuadratic) {
    Tensor x({1}, std::vector<double>{0.0});
    x.requires_grad = true;
    OptimConfig cfg;
    cfg.kind = OptimKind::kSgdMomentum;
    cfg.learning_rate = 0.05;
    cfg.momentum = 0.9;
    Optimizer opt(cfg);
    std::vector<Tensor*> params{&x};
    for (int i = 0; i < 200; ++i) {
        Tape t;
        Var xv = t.leaf(x);
        Var d = t.add_scalar(xv, -3.0);
        Var loss = t.sum(t.mul(d, d));
        t.backward(loss);
        opt.step(params, std::vector<Tensor>{t.grad(xv)});
    }
    EXPECT_NEAR(x[0], 3.0, 1e-3);
}

}  // namespace
}  // namespace milab
