#include <gtest/gtest.h>

#include <cmath>

#include "nrdm/ops.hpp"
#include "support.hpp"

using namespace nrdm;
using nrdm::testing::random_tensor;

namespace {

Tensor value_of(const std::function<Var(Tape<float>&)>& f) {
    Tape<float> t;
    return t.value(f(t));
}

}  // namespace

TEST(Tensor, ConstructionAndShapeErrors) {
    const Tensor t({2, 3}, 1.5f);
    EXPECT_EQ(t.size(), 6u);
    EXPECT_EQ(t.rank(), 2u);
    EXPECT_EQ(t.dim(1), 3u);
    EXPECT_THROW(t.dim(2), ShapeError);
    EXPECT_THROW(Tensor({2, 0}), ShapeError);
    EXPECT_THROW(Tensor({2, 2}, std::vector<float>(3)), ShapeError);
    EXPECT_THROW(t.reshaped({4}), ShapeError);
    EXPECT_EQ(t.reshaped({3, 2}).shape(), (Shape{3, 2}));
    EXPECT_THROW(t.item(), ShapeError);
    EXPECT_EQ(Tensor::scalar(4.0f).item(), 4.0f);
}

TEST(Tensor, SliceGatherCast) {
    const Tensor t({3, 2}, {0, 1, 2, 3, 4, 5});
    EXPECT_EQ(t.slice(1, 2), Tensor({2, 2}, {2, 3, 4, 5}));
    EXPECT_THROW(t.slice(2, 2), ShapeError);
    const std::vector<std::size_t> idx{2, 0};
    EXPECT_EQ(gather_rows(t, std::span<const std::size_t>(idx)), Tensor({2, 2}, {4, 5, 0, 1}));
    const auto d = t.cast<double>();
    EXPECT_EQ(d[5], 5.0);
    EXPECT_EQ(to_string(Shape{1, 28, 28}), "[1,28,28]");
}

TEST(Conv2d, AllOnesGivesNine) {
    const Tensor out = value_of([](Tape<float>& t) {
        return conv2d(t, t.constant(Tensor({1, 1, 3, 3}, 1.0f)), t.constant(Tensor({1, 1, 3, 3}, 1.0f)),
                      std::nullopt, 1, 0);
    });
    EXPECT_EQ(out.shape(), (Shape{1, 1, 1, 1}));
    EXPECT_EQ(out[0], 9.0f);
}

TEST(Conv2d, ZeroKernelZeroOutputAndGradient) {
    Rng rng(1);
    Tape<float> t;
    const Var x = t.variable(random_tensor<float>({2, 3, 6, 6}, rng));
    const Var y = conv2d(t, x, t.constant(Tensor({4, 3, 3, 3})), std::nullopt, 1, 1);
    for (float v : t.value(y).data()) EXPECT_EQ(v, 0.0f);
    t.backward(sum(t, y));
    const Tensor g = t.grad(x);
    for (float v : g.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Conv2d, OutputExtentFormula) {
    Rng rng(2);
    for (std::size_t h : {5u, 8u, 9u})
        for (std::size_t k : {1u, 3u, 5u})
            for (std::size_t s : {1u, 2u})
                for (std::size_t p : {0u, 1u, 2u}) {
                    if (k > h + 2 * p) continue;
                    const Tensor out = value_of([&](Tape<float>& t) {
                        return conv2d(t, t.constant(Tensor({1, 2, h, h})), t.constant(Tensor({3, 2, k, k})),
                                      std::nullopt, s, p);
                    });
                    const std::size_t e = (h + 2 * p - k) / s + 1;
                    EXPECT_EQ(out.shape(), (Shape{1, 3, e, e}));
                }
}

// Matches a direct sliding-window sum.
TEST(Conv2d, MatchesDirectSum) {
    Rng rng(3);
    const auto x = random_tensor<float>({2, 3, 7, 7}, rng), w = random_tensor<float>({4, 3, 3, 3}, rng),
               b = random_tensor<float>({4}, rng);
    const Tensor out = value_of(
        [&](Tape<float>& t) { return conv2d(t, t.constant(x), t.constant(w), t.constant(b), 2, 1); });
    ASSERT_EQ(out.shape(), (Shape{2, 4, 4, 4}));
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t f = 0; f < 4; ++f)
            for (std::size_t i = 0; i < 4; ++i)
                for (std::size_t j = 0; j < 4; ++j) {
                    double s = b[f];
                    for (std::size_t c = 0; c < 3; ++c)
                        for (std::size_t ki = 0; ki < 3; ++ki)
                            for (std::size_t kj = 0; kj < 3; ++kj) {
                                const long r = static_cast<long>(2 * i + ki) - 1, q = static_cast<long>(2 * j + kj) - 1;
                                if (r < 0 || q < 0 || r >= 7 || q >= 7) continue;
                                s += double(x.at(n, c, std::size_t(r), std::size_t(q))) * w.at(f, c, ki, kj);
                            }
                    EXPECT_NEAR(out.at(n, f, i, j), s, 1e-5);
                }
}

TEST(Conv2d, RejectsChannelMismatch) {
    Tape<float> t;
    try {
        conv2d(t, t.constant(Tensor({1, 3, 5, 5})), t.constant(Tensor({2, 1, 3, 3})), std::nullopt, 1, 0);
        FAIL() << "no throw";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("channels"), std::string::npos) << e.what();
    }
    EXPECT_THROW(conv2d(t, t.constant(Tensor({1, 1, 2, 2})), t.constant(Tensor({1, 1, 5, 5})), std::nullopt, 1, 0),
                 ShapeError);
    EXPECT_THROW(conv2d(t, t.constant(Tensor({1, 1, 5, 5})), t.constant(Tensor({1, 1, 3, 3})), std::nullopt, 0, 0),
                 ShapeError);
}

TEST(Maxpool, ExamplesAndTieRouting) {
    EXPECT_EQ(value_of([](Tape<float>& t) {
                  return maxpool2d(t, t.constant(Tensor({1, 1, 2, 2}, {1, 2, 3, 4})), 2, 2);
              })[0],
              4.0f);
    Tape<float> t;
    const Var x = t.variable(Tensor({1, 1, 4, 4}, 7.0f));
    const Var y = maxpool2d(t, x, 2, 2);
    for (float v : t.value(y).data()) EXPECT_EQ(v, 7.0f);
    t.backward(sum(t, y));
    const Tensor g = t.grad(x);
    // First element of each window in row-major order.
    EXPECT_EQ(g, Tensor({1, 1, 4, 4}, {1, 0, 1, 0, 0, 0, 0, 0, 1, 0, 1, 0, 0, 0, 0, 0}));
    EXPECT_THROW(maxpool2d(t, t.constant(Tensor({1, 1, 2, 2})), 3, 1), ShapeError);
}

TEST(AvgpoolGlobal, Examples) {
    EXPECT_EQ(value_of([](Tape<float>& t) { return avgpool_global(t, t.constant(Tensor({1, 1, 2, 2}, {0, 0, 4, 4}))); }),
              Tensor({1, 1}, {2.0f}));
    const Tensor c = value_of([](Tape<float>& t) { return avgpool_global(t, t.constant(Tensor({2, 3, 5, 5}, 1.25f))); });
    for (float v : c.data()) EXPECT_EQ(v, 1.25f);
}

TEST(Relu, Examples) {
    const Tensor y = value_of([](Tape<float>& t) { return relu(t, t.constant(Tensor({2}, {-1, 2}))); });
    EXPECT_EQ(y, Tensor({2}, {0, 2}));
}

TEST(Dense, KnownProduct) {
    const Tensor y = value_of([](Tape<float>& t) {
        return dense(t, t.constant(Tensor({1, 2}, {1, 2})), t.constant(Tensor({3, 2}, {1, 0, 0, 1, 1, 1})),
                     t.constant(Tensor({3}, {0, 0, 10})));
    });
    EXPECT_EQ(y, Tensor({1, 3}, {1, 2, 13}));
}

TEST(Batchnorm, InferenceIdentityAndEmptyBatch) {
    Rng rng(4);
    const auto x = random_tensor<float>({2, 3, 4, 4}, rng);
    const BatchNormStats<float> stats(3);
    const Tensor y = value_of([&](Tape<float>& t) {
        return batchnorm2d(t, t.constant(x), t.constant(Tensor({3}, 1.0f)), t.constant(Tensor({3})), stats);
    });
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_NEAR(y[i], x[i], 1e-5 * (1 + std::abs(x[i])));
}

TEST(Batchnorm, TrainingNormalisesAndUpdatesRunningStats) {
    Rng rng(5);
    const auto x = random_tensor<float>({4, 2, 3, 3}, rng, 2.0, 6.0);
    BatchNormStats<float> stats(2);
    Tape<float> t;
    const Tensor y = t.value(batchnorm2d(t, t.constant(x), t.constant(Tensor({2}, 1.0f)), t.constant(Tensor({2})),
                                         stats, BatchNormMode::training));
    for (std::size_t c = 0; c < 2; ++c) {
        double mean = 0, xm = 0;
        for (std::size_t n = 0; n < 4; ++n)
            for (std::size_t p = 0; p < 9; ++p) {
                mean += y[(n * 2 + c) * 9 + p] / 36.0;
                xm += x[(n * 2 + c) * 9 + p] / 36.0;
            }
        EXPECT_NEAR(mean, 0.0, 1e-5);
        EXPECT_NEAR(stats.mean[c], 0.1 * xm, 1e-5);
    }
}

TEST(SoftmaxCrossEntropy, Examples) {
    const Tensor uniform = value_of([](Tape<float>& t) {
        const std::vector<int> y{3};
        return softmax_cross_entropy(t, t.constant(Tensor({1, 10})), std::span<const int>(y));
    });
    EXPECT_NEAR(uniform.item(), std::log(10.0), 1e-6);
    double prev = 1e9;
    for (float margin : {1.0f, 5.0f, 10.0f, 15.0f, 80.0f}) {
        Tensor z({1, 3});
        z[1] = margin;
        const std::vector<int> y{1};
        Tape<float> t;
        const double l = t.value(softmax_cross_entropy(t, t.constant(z), std::span<const int>(y))).item();
        if (margin < 50) {
            EXPECT_LT(l, prev);
        }
        EXPECT_TRUE(std::isfinite(l));
        prev = l;
    }
    EXPECT_LT(prev, 1e-6);
    Tape<float> t;
    const std::vector<int> bad{3};
    EXPECT_THROW(softmax_cross_entropy(t, t.constant(Tensor({1, 3})), std::span<const int>(bad)), std::out_of_range);
}

TEST(Mse, Examples) {
    EXPECT_EQ(value_of([](Tape<float>& t) { return mse(t, t.constant(Tensor({1}, {2})), t.constant(Tensor({1}))); })
                  .item(),
              4.0f);
    Rng rng(6);
    const auto a = random_tensor<float>({3, 4}, rng);
    EXPECT_EQ(value_of([&](Tape<float>& t) { return mse(t, t.constant(a), t.constant(a)); }).item(), 0.0f);
    Tape<float> t;
    EXPECT_THROW(mse(t, t.constant(Tensor({2})), t.constant(Tensor({3}))), ShapeError);
}

TEST(Backward, SumGivesOnesAndIndependentGivesZeros) {
    Rng rng(7);
    Tape<float> t;
    const Var x = t.variable(random_tensor<float>({2, 5}, rng));
    t.backward(sum(t, x));
    const Tensor g = t.grad(x);
    for (float v : g.data()) EXPECT_EQ(v, 1.0f);

    Tape<float> u;
    const Var a = u.variable(random_tensor<float>({3}, rng));
    const Var b = u.variable(random_tensor<float>({3}, rng));
    u.backward(sum(u, b));
    const Tensor ga = u.grad(a);
    for (float v : ga.data()) EXPECT_EQ(v, 0.0f);
}

TEST(Backward, RepeatedCallsDoNotAccumulate) {
    Tape<float> t;
    const Var x = t.variable(Tensor({3}, 2.0f));
    const Var l = sum(t, mul(t, x, x));
    t.backward(l);
    t.backward(l);
    EXPECT_EQ(t.grad(x), Tensor({3}, 4.0f));
}

TEST(Backward, RejectsNonScalar) {
    Tape<float> t;
    const Var x = t.variable(Tensor({3}));
    EXPECT_THROW(t.backward(x), ShapeError);
}

TEST(Ops, ShapeMismatchDiagnostics) {
    Tape<float> t;
    EXPECT_THROW(add(t, t.constant(Tensor({2})), t.constant(Tensor({3}))), ShapeError);
    EXPECT_THROW(dense(t, t.constant(Tensor({1, 2})), t.constant(Tensor({3, 4})), std::nullopt), ShapeError);
}
