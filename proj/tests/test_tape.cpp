#include "milab/tape.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "milab/nn.hpp"
#include "milab/tensor.hpp"

namespace milab {
namespace {

Tensor rand_tensor(Rng& rng, Shape s, double scale = 1.0) {
    Tensor t = rng.normal_tensor(s, 0.0, scale);
    t.requires_grad = true;
    return t;
}

TEST(TapeForward, ReluAtNegativeInputIsZero) {
    Tape t;
    Var x = t.constant(Tensor::scalar(-1.0));
    EXPECT_DOUBLE_EQ(t.val(t.relu(x)).item(), 0.0);
}

TEST(TapeForward, SoftmaxOfEqualLogitsIsUniform) {
    Tape t;
    Var x = t.constant(Tensor({1, 2}, std::vector<double>{0.0, 0.0}));
    const Tensor& y = t.val(t.softmax_rows(x));
    EXPECT_DOUBLE_EQ(y[0], 0.5);
    EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(TapeForward, CrossEntropyOfUniformTwoClassIsLn2) {
    Tape t;
    Var logits = t.constant(Tensor({1, 2}, std::vector<double>{0.3, 0.3}));
    Var loss = cross_entropy(t, logits, {1});
    EXPECT_NEAR(t.val(loss).item(), std::log(2.0), 1e-15);
}

TEST(TapeForward, ShapeMismatchNamesPrimitiveAndShapes) {
    Tape t;
    Var a = t.constant(Tensor({2, 3}));
    Var b = t.constant(Tensor({3, 2}));
    try {
        t.add(a, b);
        FAIL() << "expected shape error";
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        EXPECT_NE(msg.find("add"), std::string::npos);
        EXPECT_NE(msg.find("[2,3]"), std::string::npos);
        EXPECT_NE(msg.find("[3,2]"), std::string::npos);
    }
}

TEST(TapeForward, ConvChannelMismatchThrows) {
    Tape t;
    Var x = t.constant(Tensor({1, 3, 8, 8}));
    Var w = t.constant(Tensor({4, 2, 3, 3}));
    EXPECT_THROW(t.conv2d(x, w, 1, 1), std::runtime_error);
}

TEST(TapeForward, DeterministicAcrossWorkerCounts) {
    Rng rng(99);
    Tensor x = rng.normal_tensor({4, 3, 12, 12});
    Tensor w = rng.normal_tensor({8, 3, 3, 3});

    auto run = [&]() {
        Tape t;
        Var y = t.conv2d(t.constant(x), t.constant(w), 1, 1);
        return t.val(y);
    };
    set_worker_count(1);
    Tensor a = run();
    set_worker_count(3);
    Tensor b = run();
    set_worker_count(1);
    ASSERT_EQ(a.size(), b.size());
    for (std::int64_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(TapeBackward, SquareDerivative) {
    Tape t;
    Tensor x0 = Tensor::scalar(3.0);
    x0.requires_grad = true;
    Var x = t.leaf(x0);
    Var y = t.mul(x, x);
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.grad(x).item(), 6.0);
}

TEST(TapeBackward, SoftmaxCrossEntropyGradIsProbMinusOnehot) {
    Tape t;
    Tensor logits({1, 2}, std::vector<double>{0.0, 0.0});
    logits.requires_grad = true;
    Var lv = t.leaf(logits);
    Var loss = cross_entropy(t, lv, {0});
    t.backward(loss);
    const Tensor& g = t.grad(lv);
    EXPECT_NEAR(g[0], -0.5, 1e-15);
    EXPECT_NEAR(g[1], 0.5, 1e-15);
}

TEST(TapeBackward, NonScalarLossRejected) {
    Tape t;
    Tensor x0({2}, std::vector<double>{1.0, 2.0});
    x0.requires_grad = true;
    Var x = t.leaf(x0);
    EXPECT_THROW(t.backward(x), std::runtime_error);
}

TEST(TapeBackward, GradsForUntouchedLeavesAreZero) {
    Tape t;
    Tensor a0 = Tensor::scalar(1.0);
    Tensor b0 = Tensor::scalar(2.0);
    a0.requires_grad = b0.requires_grad = true;
    Var a = t.leaf(a0);
    Var b = t.leaf(b0);
    Var y = t.mul(a, a);
    t.backward(y);
    EXPECT_DOUBLE_EQ(t.grad(b).item(), 0.0);
}

TEST(TapeBackward, TwoLayerConvNetMatchesFiniteDifferences) {
    Rng rng(1234);
    Tensor x = rand_tensor(rng, {2, 1, 6, 6});
    Tensor w1 = rand_tensor(rng, {3, 1, 3, 3}, 0.5);
    Tensor b1 = rand_tensor(rng, {3}, 0.2);
    Tensor w2 = rand_tensor(rng, {2, 3, 3, 3}, 0.5);
    Tensor b2 = rand_tensor(rng, {2}, 0.2);

    GraphFn f = [](Tape& t, const std::vector<Var>& in) {
        Var h = t.add_chan(t.conv2d(in[0], in[1], 1, 1), in[2]);
        h = t.relu(h);
        h = t.maxpool2d(h, 2);
        h = t.add_chan(t.conv2d(h, in[3], 1, 0), in[4]);
        h = t.relu(h);
        Var logits = t.reshape(h, {2, 2});
        return cross_entropy(t, logits, {0, 1});
    };
    double err = grad_check(f, {x, w1, b1, w2, b2}, 1e-5);
    EXPECT_LT(err, 1e-4);
}

TEST(GradCheck, IdentityMapIsExactlyZero) {
    // 0.5 +/- 2^-17 is exactly representable and the difference quotient is
    // exactly 1, so the relative error is exactly zero.
    GraphFn f = [](Tape& t, const std::vector<Var>& in) { return t.sum(in[0]); };
    Tensor x = Tensor::scalar(0.5);
    double err = grad_check(f, {x}, std::ldexp(1.0, -17));
    EXPECT_EQ(err, 0.0);
}

TEST(GradCheck, SmallMlpBelowTolerance) {
    Rng rng(77);
    Tensor x = rand_tensor(rng, {3, 4});
    Tensor w1 = rand_tensor(rng, {5, 4}, 0.7);
    Tensor b1 = rand_tensor(rng, {5}, 0.3);
    Tensor w2 = rand_tensor(rng, {2, 5}, 0.7);
    Tensor b2 = rand_tensor(rng, {2}, 0.3);
    GraphFn f = [](Tape& t, const std::vector<Var>& in) {
        Var h = t.add_rowvec(t.matmul(in[0], t.transpose(in[1])), in[2]);
        h = t.tanh(h);
        Var logits = t.add_rowvec(t.matmul(h, t.transpose(in[3])), in[4]);
        return cross_entropy(t, logits, {0, 1, 0});
    };
    EXPECT_LT(grad_check(f, {x, w1, b1, w2, b2}, 1e-5), 1e-4);
}

TEST(GradCheck, DetectsMisSignedGradient) {
    // The graph flips sign depending on whether its input is a differentiable
    // leaf, which makes the analytic gradient exactly the negation of the true
    // one -- the same failure signature as a mis-signed backward rule.
    GraphFn evil = [](Tape& t, const std::vector<Var>& in) {
        Var y = t.sum(t.mul(in[0], in[0]));
        return t.needs_grad(in[0]) ? t.mul_scalar(y, -1.0) : y;
    };
    Tensor x({3}, std::vector<double>{0.7, -1.2, 0.4});
    EXPECT_GT(grad_check(evil, {x}, 1e-5), 1e-2);
}

TEST(GradCheck, SmoothUnaryPrimitives) {
    Rng rng(2024);
    struct Case {
        const char* name;
        GraphFn f;
        bool positive_only;
    };
    std::vector<Case> cases = {
        {"exp", [](Tape& t, const std::vector<Var>& in) { return t.sum(t.exp(in[0])); }, false},
        {"log", [](Tape& t, const std::vector<Var>& in) { return t.sum(t.log(in[0])); }, true},
        {"sqrt", [](Tape& t, const std::vector<Var>& in) { return t.sum(t.sqrt(in[0])); }, true},
        {"tanh", [](Tape& t, const std::vector<Var>& in) { return t.sum(t.tanh(in[0])); }, false},
        {"sigmoid", [](Tape& t, const std::vector<Var>& in) { return t.sum(t.sigmoid(in[0])); }, false},
        {"softmax", [](Tape& t, const std::vector<Var>& in) {
             return t.sum(t.mul(t.softmax_rows(in[0]), in[0]));
         }, false},
        {"log_softmax", [](Tape& t, const std::vector<Var>& in) {
             return t.sum(t.mul(t.log_softmax_rows(in[0]), in[0]));
         }, false},
    };
    for (const auto& c : cases) {
        for (int rep = 0; rep < 5; ++rep) {
            Tensor x = c.positive_only ? rng.uniform_tensor({2, 4}, 0.5, 2.0)
                                       : rng.normal_tensor({2, 4});
            x.requires_grad = true;
            EXPECT_LT(grad_check(c.f, {x}, 1e-5), 1e-4) << c.name << " rep " << rep;
        }
    }
}

TEST(GradCheck, DivisionAndClampAwayFromEdges) {
    Rng rng(31);
    GraphFn fdiv = [](Tape& t, const std::vector<Var>& in) {
        return t.sum(t.divide(in[0], in[1]));
    };
    Tensor a = rng.normal_tensor({6});
    Tensor b = rng.uniform_tensor({6}, 1.0, 2.0);
    a.requires_grad = b.requires_grad = true;
    EXPECT_LT(grad_check(fdiv, {a, b}, 1e-5), 1e-4);

    GraphFn fclamp = [](Tape& t, const std::vector<Var>& in) {
        return t.sum(t.mul(t.clamp(in[0], -1.0, 1.0), in[0]));
    };
    Tensor c({4}, std::vector<double>{-2.0, -0.5, 0.3, 1.7});
    c.requires_grad = true;
    EXPECT_LT(grad_check(fclamp, {c}, 1e-5), 1e-4);
}

TEST(GradCheck, ConvTransposeAndStructuralOps) {
    Rng rng(88);
    GraphFn f = [](Tape& t, const std::vector<Var>& in) {
        Var up = t.conv2d_input_grad(in[0], in[1], {2, 2, 4, 4}, 2, 1);
        Var pooled = t.maxpool2d(up, 2);
        Var flat = t.reshape(pooled, {2, 8});
        Var aug = t.append_one_col(flat);
        return t.sum(t.mul(aug, aug));
    };
    Tensor g = rand_tensor(rng, {2, 3, 2, 2});
    Tensor w = rand_tensor(rng, {3, 2, 4, 4}, 0.4);
    EXPECT_LT(grad_check(f, {g, w}, 1e-5), 1e-4);
}

TEST(GradCheck, WeightGradPrimitive) {
    Rng rng(55);
    GraphFn f = [](Tape& t, const std::vector<Var>& in) {
        Var gw = t.conv2d_weight_grad(in[0], in[1], {2, 1, 3, 3}, 1, 1);
        return t.sum(t.mul(gw, gw));
    };
    Tensor x = rand_tensor(rng, {2, 1, 5, 5});
    Tensor gy = rand_tensor(rng, {2, 2, 5, 5});
    EXPECT_LT(grad_check(f, {x, gy}, 1e-5), 1e-4);
}

// Gradient-of-gradient: the norm of an input gradient differentiated with
// respect to network weights, the pattern the critic's gradient penalty uses.
TEST(DoubleBackward, GradientNormMatchesFiniteDifferences) {
    Rng rng(4096);
    Tensor x = rng.normal_tensor({2, 1, 4, 4});
    Tensor w = rand_tensor(rng, {2, 1, 3, 3}, 0.6);
    Tensor v = rand_tensor(rng, {1, 8}, 0.6);

    GraphFn f = [&x](Tape& t, const std::vector<Var>& in) {
        Tensor xc = x;
        xc.requires_grad = true;
        Var xv = t.leaf(xc);
        Var h = t.leaky_relu(t.conv2d(xv, in[0], 2, 1), 0.2);
        Var flat = t.reshape(h, {2, 8});
        Var score = t.sum(t.matmul(flat, t.transpose(in[1])));
        auto gs = t.gradients(score, std::vector<Var>{xv});
        return t.sum(t.mul(gs[0], gs[0]));
    };
    EXPECT_LT(grad_check(f, {w, v}, 1e-5), 1e-4);
}

TEST(DoubleBackward, SecondDerivativeOfCube) {
    // d/dx of (d/dx x^3) = 6x, checked at x = 2 -> 12.
    Tape t;
    Tensor x0 = Tensor::scalar(2.0);
    x0.requires_grad = true;
    Var x = t.leaf(x0);
    Var y = t.mul(t.mul(x, x), x);
    auto g1 = t.gradients(y, std::vector<Var>{x});
    EXPECT_NEAR(t.val(g1[0]).item(), 12.0, 1e-12);  // 3x^2
    auto g2 = t.gradients(g1[0], std::vector<Var>{x});
    EXPECT_NEAR(t.val(g2[0]).item(), 12.0, 1e-12);  // 6x
}

}  // namespace
}  // namespace milab
