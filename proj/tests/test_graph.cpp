#include <gtest/gtest.h>

#include <cmath>

#include <Eigen/Eigenvalues>

#include "embsformer/gradcheck.hpp"
#include "embsformer/graph.hpp"
#include "embsformer/rng.hpp"

using namespace embs;

namespace {

Eigen::MatrixXd path2() {
    Eigen::MatrixXd a(2, 2);
    a << 0, 1, 1, 0;
    return a;
}

TrafficGraph random_graph(std::size_t n, std::uint64_t seed, double density = 0.4) {
    CounterRng rng(seed);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (rng.uniform() < density) a(i, j) = a(j, i) = 1.0;
        }
    }
    return TrafficGraph(a);
}

Tensor random_tensor(Shape shape, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(-1.0, 1.0);
    return Tensor(std::move(shape), std::move(v));
}

// cos(k acos x) on [-1, 1], continued by cosh outside (a power-iteration
// lambda_max can leave eigenvalues a hair past the interval).
double chebyshev_t(std::size_t k, double x) {
    const double kk = static_cast<double>(k);
    if (x > 1.0) return std::cosh(kk * std::acosh(x));
    if (x < -1.0) return (k % 2 ? -1.0 : 1.0) * std::cosh(kk * std::acosh(-x));
    return std::cos(kk * std::acos(x));
}

}  // namespace

TEST(TrafficGraph, SymmetrizesAndDropsSelfLoops) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(3, 3);
    a(0, 1) = 2.5;
    a(2, 2) = 1.0;
    const TrafficGraph g(a);
    EXPECT_EQ(g.adjacency()(1, 0), 1.0);
    EXPECT_EQ(g.adjacency()(0, 1), 1.0);
    EXPECT_EQ(g.adjacency()(2, 2), 0.0);
    EXPECT_EQ(g.num_edges(), 1u);
    const TrafficGraph weighted(a, false);
    EXPECT_EQ(weighted.adjacency()(1, 0), 2.5);
    Eigen::MatrixXd neg = Eigen::MatrixXd::Zero(2, 2);
    neg(0, 1) = -1.0;
    EXPECT_THROW(TrafficGraph{neg}, std::invalid_argument);
}

TEST(Laplacian, PathAndEdgeless) {
    const Eigen::MatrixXd l = normalized_laplacian(TrafficGraph(path2()));
    Eigen::MatrixXd expected(2, 2);
    expected << 1, -1, -1, 1;
    EXPECT_LT((l - expected).cwiseAbs().maxCoeff(), 1e-15);
    const Eigen::MatrixXd id = normalized_laplacian(TrafficGraph(Eigen::MatrixXd::Zero(4, 4)));
    EXPECT_EQ(id, Eigen::MatrixXd::Identity(4, 4));
}

TEST(Laplacian, RandomGraphSpectrumInRange) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Eigen::MatrixXd l = normalized_laplacian(random_graph(5, seed));
        EXPECT_LT((l - l.transpose()).cwiseAbs().maxCoeff(), 1e-15);
        const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(l).eigenvalues();
        EXPECT_GE(ev.minCoeff(), -1e-9);
        EXPECT_LE(ev.maxCoeff(), 2.0 + 1e-9);
    }
}

TEST(LambdaMax, KnownCases) {
    EXPECT_NEAR(estimate_lambda_max(normalized_laplacian(TrafficGraph(path2()))), 2.0, 1e-6);
    EXPECT_NEAR(estimate_lambda_max(Eigen::MatrixXd::Identity(3, 3)), 1.0, 1e-12);
    EXPECT_EQ(estimate_lambda_max(Eigen::MatrixXd::Zero(3, 3)), 2.0);
}

TEST(LambdaMax, MatchesEigensolveOnRandomSymmetric) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        CounterRng rng(seed + 100);
        Eigen::MatrixXd m(6, 6);
        for (int i = 0; i < 6; ++i) {
            for (int j = 0; j <= i; ++j) m(i, j) = m(j, i) = rng.uniform(-1, 1);
        }
        const Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(m).eigenvalues();
        const double expected = std::max(std::abs(ev.minCoeff()), std::abs(ev.maxCoeff()));
        EXPECT_NEAR(estimate_lambda_max(m), expected, 1e-6) << "seed " << seed;
    }
}

TEST(Chebyshev, PathCase) {
    const ChebyshevBasis b = chebyshev_basis(normalized_laplacian(TrafficGraph(path2())), 2.0, 3);
    Eigen::MatrixXd lt(2, 2);
    lt << 0, -1, -1, 0;
    EXPECT_EQ(b.scaled_laplacian, lt);
    EXPECT_EQ(b.matrices[0], Eigen::MatrixXd::Identity(2, 2));
    EXPECT_EQ(b.matrices[1], lt);
    EXPECT_EQ(b.matrices[2], Eigen::MatrixXd::Identity(2, 2));
    EXPECT_EQ(chebyshev_basis(lt, 2.0, 1).order(), 1u);
    EXPECT_THROW(chebyshev_basis(lt, 0.0, 2), std::invalid_argument);
    EXPECT_THROW(chebyshev_basis(lt, 2.0, 0), std::invalid_argument);
}

TEST(Chebyshev, RecurrenceAndSpectralOracle) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const TrafficGraph g = random_graph(3 + seed % 6, seed + 10, 0.5);
        const ChebyshevBasis b = build_basis(g, 5);
        const auto& lt = b.scaled_laplacian;
        for (std::size_t k = 2; k < b.order(); ++k) {
            const Eigen::MatrixXd r = b.matrices[k] - (2.0 * lt * b.matrices[k - 1] - b.matrices[k - 2]);
            EXPECT_LE(r.cwiseAbs().maxCoeff(), 1e-10);
        }
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(lt);
        const Eigen::MatrixXd u = es.eigenvectors();
        for (std::size_t k = 0; k < b.order(); ++k) {
            Eigen::VectorXd d = es.eigenvalues();
            for (Eigen::Index i = 0; i < d.size(); ++i) d(i) = chebyshev_t(k, d(i));
            const Eigen::MatrixXd oracle = u * d.asDiagonal() * u.transpose();
            EXPECT_LE((oracle - b.matrices[k]).cwiseAbs().maxCoeff(), 1e-8) << "seed " << seed << " k " << k;
        }
    }
}

TEST(ChebConv, IdentityThetaAndEdgelessReduction) {
    const TrafficGraph edgeless(Eigen::MatrixXd::Zero(3, 3));
    const Tensor x({2, 3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2});
    const Tensor eye({1, 2, 2}, {1, 0, 0, 1});
    EXPECT_EQ(cheb_graph_conv(x, build_basis(edgeless, 1), eye).values(), x.values());

    // L = I and lambda_max = 1, so T_1 = L~ = I
    const ChebyshevBasis b2 = build_basis(edgeless, 2);
    EXPECT_EQ(b2.matrices[1], Eigen::MatrixXd::Identity(3, 3));
    const Tensor theta = random_tensor({2, 2, 3}, 3);
    const Tensor got = cheb_graph_conv(x, b2, theta);
    const Tensor t0 = reshape(slice(theta, 0, 0, 1), {2, 3});
    const Tensor t1 = reshape(slice(theta, 0, 1, 1), {2, 3});
    const Tensor expected = relu(add(matmul(x, t0), matmul(x, t1)));
    for (std::size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got.values()[i], expected.values()[i], 1e-14);
    EXPECT_THROW(cheb_graph_conv(x, b2, random_tensor({3, 2, 3}, 1)), DimensionError);
    EXPECT_THROW(cheb_graph_conv(random_tensor({2, 4, 2}, 1), b2, theta), DimensionError);
}

TEST(ChebConv, MatchesDoubleLoopOracle) {
    const TrafficGraph g = random_graph(4, 42, 0.6);
    const ChebyshevBasis b = build_basis(g, 3);
    const std::size_t T = 2, N = 4, Ci = 3, Co = 2;
    const Tensor x = random_tensor({T, N, Ci}, 1);
    const Tensor theta = random_tensor({3, Ci, Co}, 2);
    const Tensor y = cheb_graph_conv(x, b, theta);
    for (std::size_t t = 0; t < T; ++t) {
        for (std::size_t i = 0; i < N; ++i) {
            for (std::size_t o = 0; o < Co; ++o) {
                double s = 0.0;
                for (std::size_t k = 0; k < 3; ++k) {
                    for (std::size_t j = 0; j < N; ++j) {
                        for (std::size_t c = 0; c < Ci; ++c) {
                            s += b.matrices[k](i, j) * x.at({t, j, c}) * theta.at({k, c, o});
                        }
                    }
                }
                EXPECT_NEAR(y.at({t, i, o}), std::max(s, 0.0), 1e-10);
            }
        }
    }
}

TEST(ChebConv, NoMixingAcrossComponents) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(4, 4);
    a(0, 1) = a(1, 0) = 1.0;
    a(2, 3) = a(3, 2) = 1.0;
    const ChebyshevBasis b = build_basis(TrafficGraph(a), 3);
    const Tensor theta = random_tensor({3, 2, 2}, 5);
    const Tensor x = random_tensor({1, 4, 2}, 6);
    Tensor bumped = x.clone();
    bumped.mutable_data()[0] += 0.5;  // node 0
    bumped.mutable_data()[3] -= 0.5;  // node 1
    const Tensor y0 = cheb_graph_conv(x, b, theta);
    const Tensor y1 = cheb_graph_conv(bumped, b, theta);
    for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(y0.values()[i], y1.values()[i]);
}

TEST(ChebConv, GradientCheck) {
    const ChebyshevBasis b = build_basis(random_graph(4, 7, 0.6), 3);
    const Tensor x = random_tensor({2, 4, 3}, 8);
    Tensor theta = random_tensor({3, 3, 2}, 9);
    EXPECT_LE(gradient_check([&](const Tensor& v) { return sum_all(cheb_graph_conv(v, b, theta)); }, x), 1e-4);
    EXPECT_LE(gradient_check([&](const Tensor& v) { return sum_all(cheb_graph_conv(x, b, v)); }, theta), 1e-4);
}
