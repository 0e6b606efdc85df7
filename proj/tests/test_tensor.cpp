#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "embsformer/gradcheck.hpp"
#include "embsformer/rng.hpp"
#include "embsformer/tensor.hpp"

using namespace embs;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
    CounterRng rng(seed);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

Tensor param(Shape shape, std::uint64_t seed) {
    Tensor t = random_tensor(std::move(shape), seed);
    t.set_requires_grad(true);
    return t;
}

void expect_values(const Tensor& t, std::vector<double> expected, double tol = 0.0) {
    ASSERT_EQ(t.size(), expected.size());
    for (std::size_t i = 0; i < expected.size(); ++i) EXPECT_NEAR(t.values()[i], expected[i], tol) << "at " << i;
}

}  // namespace

TEST(Tensor, ConstructionRejectsSizeMismatch) {
    EXPECT_THROW(Tensor({2, 2}, {1, 2, 3}), DimensionError);
    EXPECT_THROW(Tensor({0, 2}, {}), DimensionError);
    EXPECT_EQ(Tensor::zeros({3, 4}).size(), 12u);
}

TEST(Matmul, IdentityAndHandCase) {
    const Tensor eye({2, 2}, {1, 0, 0, 1});
    const Tensor m({2, 2}, {3, -1, 2, 5});
    expect_values(matmul(eye, m), m.values());
    const Tensor a({2, 2}, {1, 2, 3, 4});
    const Tensor ones({2, 1}, {1, 1});
    expect_values(matmul(a, ones), {3, 7});
}

TEST(Matmul, MatchesTripleLoop) {
    for (std::size_t p = 1; p <= 8; p += 3) {
        for (std::size_t q = 1; q <= 8; q += 2) {
            for (std::size_t r = 1; r <= 8; r += 3) {
                const Tensor a = random_tensor({p, q}, p * 100 + q);
                const Tensor b = random_tensor({q, r}, q * 100 + r + 7);
                const Tensor c = matmul(a, b);
                ASSERT_EQ(c.shape(), (Shape{p, r}));
                for (std::size_t i = 0; i < p; ++i) {
                    for (std::size_t j = 0; j < r; ++j) {
                        double s = 0.0;
                        for (std::size_t k = 0; k < q; ++k) s += a.values()[i * q + k] * b.values()[k * r + j];
                        EXPECT_NEAR(c.values()[i * r + j], s, 1e-12);
                    }
                }
            }
        }
    }
}

TEST(Matmul, BatchBroadcast) {
    const Tensor a = random_tensor({3, 2, 4}, 1);
    const Tensor b = random_tensor({4, 5}, 2);
    const Tensor c = matmul(a, b);
    ASSERT_EQ(c.shape(), (Shape{3, 2, 5}));
    for (std::size_t batch = 0; batch < 3; ++batch) {
        const Tensor slab = reshape(slice(a, 0, batch, 1), {2, 4});
        const Tensor ref = matmul(slab, b);
        for (std::size_t i = 0; i < 10; ++i) EXPECT_DOUBLE_EQ(c.values()[batch * 10 + i], ref.values()[i]);
    }
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
    try {
        matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
        FAIL();
    } catch (const DimensionError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find(shape_to_string({2, 3})), std::string::npos) << msg;
        EXPECT_NE(msg.find(shape_to_string({4, 2})), std::string::npos) << msg;
    }
}

TEST(Softmax, SymmetryAndStability) {
    expect_values(softmax(Tensor({3}, {0, 0, 0}), 0), {1.0 / 3, 1.0 / 3, 1.0 / 3}, 1e-15);
    expect_values(softmax(Tensor({2}, {1000, 1000}), 0), {0.5, 0.5});
}

TEST(Softmax, MatchesExpSumOracleAndShiftInvariance) {
    const Tensor x = random_tensor({4, 6}, 11, -5, 5);
    const Tensor y = softmax(x, 1);
    const Tensor shifted = softmax(add(x, Tensor::full({4, 6}, 37.5)), 1);
    for (std::size_t r = 0; r < 4; ++r) {
        double denom = 0.0;
        for (std::size_t c = 0; c < 6; ++c) denom += std::exp(x.values()[r * 6 + c]);
        double row = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            EXPECT_NEAR(y.values()[r * 6 + c], std::exp(x.values()[r * 6 + c]) / denom, 1e-12);
            EXPECT_NEAR(y.values()[r * 6 + c], shifted.values()[r * 6 + c], 1e-9);
            row += y.values()[r * 6 + c];
        }
        EXPECT_NEAR(row, 1.0, 1e-9);
    }
}

TEST(Softmax, LeadingAxis) {
    const Tensor x = random_tensor({3, 2}, 5);
    const Tensor y = softmax(x, 0);
    for (std::size_t c = 0; c < 2; ++c) {
        EXPECT_NEAR(y.at({0, c}) + y.at({1, c}) + y.at({2, c}), 1.0, 1e-12);
    }
}

TEST(Elementwise, BasicsAndBroadcast) {
    expect_values(relu(Tensor({3}, {-1, 0, 2})), {0, 0, 2});
    const Tensor a({2, 2}, {1, 2, 3, 4});
    expect_values(add(a, Tensor({2}, {10, 20})), {11, 22, 13, 24});
    expect_values(sub(a, a), {0, 0, 0, 0});
    expect_values(mul(a, a), {1, 4, 9, 16});
    expect_values(div(a, Tensor({2}, {1, 2})), {1, 1, 3, 2});
    expect_values(scale(a, -2), {-2, -4, -6, -8});
    EXPECT_THROW(div(a, Tensor({2}, {1, 0})), std::domain_error);
    EXPECT_THROW(add(a, Tensor::zeros({3})), DimensionError);
    EXPECT_THROW(add(a, Tensor::zeros({2, 1})), DimensionError);
}

TEST(Reduce, SumAndMean) {
    expect_values(reduce(Tensor::ones({3, 4}), 1, Reduce::Sum), {4, 4, 4});
    const Tensor a({2, 3}, {1, 2, 3, 4, 5, 6});
    expect_values(reduce(a, 0, Reduce::Mean), {2.5, 3.5, 4.5});
    EXPECT_DOUBLE_EQ(sum_all(a).item(), 21.0);
    EXPECT_DOUBLE_EQ(mean_all(a).item(), 3.5);
}

TEST(Layout, PermuteInverseIsIdentity) {
    const Tensor x = random_tensor({2, 3, 4}, 3);
    const Tensor y = permute(x, {2, 0, 1});
    ASSERT_EQ(y.shape(), (Shape{4, 2, 3}));
    EXPECT_DOUBLE_EQ(y.at({3, 1, 2}), x.at({1, 2, 3}));
    const Tensor back = permute(y, {1, 2, 0});
    EXPECT_EQ(back.values(), x.values());
}

TEST(Layout, ReshapeConcatSliceExpand) {
    const Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    EXPECT_THROW(reshape(x, {4}), DimensionError);
    EXPECT_EQ(reshape(x, {3, 2}).shape(), (Shape{3, 2}));
    const std::vector<Tensor> parts{x, Tensor({2, 1}, {7, 8})};
    expect_values(concat(parts, 1), {1, 2, 3, 7, 4, 5, 6, 8});
    expect_values(slice(x, 1, 1, 2), {2, 3, 5, 6});
    EXPECT_THROW(slice(x, 1, 2, 2), DimensionError);
    const Tensor e = expand(Tensor({2}, {1, 2}), 0, 3);
    EXPECT_EQ(e.shape(), (Shape{3, 2}));
    expect_values(e, {1, 2, 1, 2, 1, 2});
    const std::vector<std::size_t> rows{2, 0, 2};
    expect_values(gather_rows(Tensor({3, 2}, {1, 2, 3, 4, 5, 6}), rows), {5, 6, 1, 2, 5, 6});
}

TEST(ConvTime, IdentityKernelAndHandCase) {
    const Tensor x = random_tensor({2, 5, 3}, 4);
    Tensor eye = Tensor::zeros({1, 3, 3});
    for (std::size_t c = 0; c < 3; ++c) eye.mutable_data()[c * 3 + c] = 1.0;
    expect_values(conv_time(x, eye), x.values());
    expect_values(conv_time(Tensor({1, 3, 1}, {1, 2, 3}), Tensor({2, 1, 1}, {1, 1})), {3, 5});
    EXPECT_THROW(conv_time(Tensor::zeros({1, 2, 1}), Tensor::zeros({3, 1, 1})), DimensionError);
}

TEST(ConvTime, MatchesSlidingWindowOracle) {
    const std::size_t B = 3, T = 8, Ci = 4, Co = 5, w = 3;
    const Tensor x = random_tensor({B, T, Ci}, 8);
    const Tensor k = random_tensor({w, Ci, Co}, 9);
    const Tensor y = conv_time(x, k);
    ASSERT_EQ(y.shape(), (Shape{B, T - w + 1, Co}));
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t + w <= T; ++t) {
            for (std::size_t o = 0; o < Co; ++o) {
                double s = 0.0;
                for (std::size_t d = 0; d < w; ++d) {
                    for (std::size_t c = 0; c < Ci; ++c) s += x.at({b, t + d, c}) * k.at({d, c, o});
                }
                EXPECT_NEAR(y.at({b, t, o}), s, 1e-12);
            }
        }
    }
}

TEST(Loss, MseMatchesLoop) {
    EXPECT_DOUBLE_EQ(mse_loss(Tensor::ones({2, 3}), Tensor::ones({2, 3})).item(), 0.0);
    EXPECT_DOUBLE_EQ(mse_loss(Tensor::full({2, 3}, 2.0), Tensor::ones({2, 3})).item(), 1.0);
    const Tensor a = random_tensor({4, 5}, 20);
    const Tensor b = random_tensor({4, 5}, 21);
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t j = 0; j < 5; ++j) {
            const double d = a.at({i, j}) - b.at({i, j});
            s += d * d;
        }
    }
    EXPECT_NEAR(mse_loss(a, b).item(), s / 20.0, 1e-12);
    EXPECT_THROW(mse_loss(a, Tensor::zeros({5, 4})), DimensionError);
}

TEST(Backward, SumAndSquare) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = param({3, 2}, 1);
    backward(sum_all(x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    x.zero_grad();
    backward(sum_all(mul(x, x)));
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], 2.0 * x.values()[i]);
}

TEST(Backward, AddPassesGradientExactly) {
    Tape tape;
    TapeScope scope(tape);
    Tensor a = param({4}, 2);
    Tensor b = param({4}, 3);
    const Tensor w({4}, {0.3, -1.7, 2.5, 1e-3});
    backward(sum_all(mul(add(a, b), w)));
    for (std::size_t i = 0; i < 4; ++i) {
        EXPECT_EQ(a.grad()[i], w.values()[i]);
        EXPECT_EQ(b.grad()[i], w.values()[i]);
    }
}

TEST(Backward, AccumulatesOverConsumersAndSkipsUntracked) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = param({2}, 4);
    Tensor unused = param({2}, 5);
    Tensor constant({2}, {1, 1});
    backward(sum_all(add(x, add(x, constant))));
    for (double g : x.grad()) EXPECT_EQ(g, 2.0);
    EXPECT_FALSE(unused.has_grad());
    EXPECT_FALSE(constant.has_grad());
}

TEST(Backward, RejectsNonScalarLoss) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = param({2}, 4);
    EXPECT_THROW(backward(scale(x, 2.0)), DimensionError);
}

TEST(Backward, NoGradScopeRecordsNothing) {
    Tape tape;
    TapeScope scope(tape);
    Tensor x = param({2}, 4);
    {
        NoGradScope off;
        (void)relu(x);
    }
    EXPECT_EQ(tape.size(), 0u);
    (void)relu(x);
    EXPECT_EQ(tape.size(), 1u);
}

TEST(Storage, F32RoundsResults) {
    const Tensor a = Tensor({1}, {0.1}).to_storage(Storage::F32);
    EXPECT_EQ(a.values()[0], static_cast<double>(0.1f));
    const Tensor b = add(a, Tensor({1}, {0.2}));
    EXPECT_EQ(b.storage(), Storage::F32);
    EXPECT_EQ(b.values()[0], static_cast<double>(static_cast<float>(static_cast<double>(0.1f) + 0.2)));
}

TEST(GradientCheck, TrivialFunctions) {
    const Tensor x = random_tensor({5}, 6);
    EXPECT_LT(gradient_check([](const Tensor& v) { return sum_all(v); }, x), 1e-9);
    EXPECT_LT(gradient_check([](const Tensor& v) { return sum_all(softmax(v, 0)); }, x), 1e-6);
}

TEST(GradientCheck, DetectsNonDeterminism) {
    int calls = 0;
    auto f = [&](const Tensor& v) { return scale(sum_all(v), 1.0 + 1e-3 * (++calls)); };
    EXPECT_THROW(gradient_check(f, random_tensor({3}, 1)), NonDeterministicError);
}

TEST(GradientCheck, EveryOpAcrossSeeds) {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        const Tensor w = random_tensor({3, 4}, seed + 50);
        const Tensor pos = random_tensor({3, 4}, seed + 60, 0.5, 2.0);
        const Tensor k = random_tensor({2, 4, 3}, seed + 70);
        const std::vector<std::pair<std::string, std::function<Tensor(const Tensor&)>>> cases{
            {"add", [&](const Tensor& x) { return sum_all(mul(add(x, w), w)); }},
            {"sub", [&](const Tensor& x) { return sum_all(mul(sub(w, x), w)); }},
            {"mul", [&](const Tensor& x) { return sum_all(mul(x, x)); }},
            {"div", [&](const Tensor& x) { return sum_all(div(x, pos)); }},
            {"div-denominator", [&](const Tensor& x) { return sum_all(div(w, add(mul(x, x), pos))); }},
            {"relu", [&](const Tensor& x) { return sum_all(mul(relu(x), w)); }},
            {"matmul", [&](const Tensor& x) { return sum_all(mul(matmul(x, permute(x, {1, 0})), matmul(w, permute(w, {1, 0})))); }},
            {"softmax", [&](const Tensor& x) { return sum_all(mul(softmax(x, 1), w)); }},
            {"reduce", [&](const Tensor& x) { return sum_all(mul(reduce(x, 0, Reduce::Mean), reduce(w, 0, Reduce::Sum))); }},
            {"concat", [&](const Tensor& x) {
                 const std::vector<Tensor> parts{x, w};
                 return sum_all(mul(concat(parts, 0), concat(parts, 0)));
             }},
            {"conv_time", [&](const Tensor& x) { return sum_all(mul(conv_time(reshape(x, {1, 3, 4}), k), conv_time(reshape(w, {1, 3, 4}), k))); }},
            {"mse", [&](const Tensor& x) { return mse_loss(x, w); }},
        };
        const Tensor x = random_tensor({3, 4}, seed);
        for (const auto& [name, f] : cases) {
            EXPECT_LE(gradient_check(f, x), 1e-4) << name << " seed " << seed;
        }
    }
}

TEST(Tape, ParallelTapesShareLeaves) {
    Tensor w = param({2, 2}, 9);
    Gradients g1, g2;
    {
        Tape tape;
        TapeScope scope(tape);
        g1 = tape.backward(sum_all(matmul(w, Tensor({2, 1}, {1, 2}))));
    }
    {
        Tape tape;
        TapeScope scope(tape);
        g2 = tape.backward(sum_all(matmul(w, Tensor({2, 1}, {3, 4}))));
    }
    expect_values(Tensor({4}, std::vector<double>(g1.of(w).begin(), g1.of(w).end())), {1, 2, 1, 2});
    expect_values(Tensor({4}, std::vector<double>(g2.of(w).begin(), g2.of(w).end())), {3, 4, 3, 4});
    EXPECT_FALSE(w.has_grad());
}
