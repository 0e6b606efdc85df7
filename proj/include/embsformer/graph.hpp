#pragma once

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

#include "embsformer/tensor.hpp"

namespace embs {

/// Undirected sensor graph. The adjacency is kept symmetric with a zero
/// diagonal; binary unless constructed with weights preserved.
class TrafficGraph {
public:
    TrafficGraph() = default;
    /// Symmetrizes with max(A, A^T), drops self-loops and, when `binarize`,
    /// maps every positive entry to 1. Negative weights are rejected.
    explicit TrafficGraph(Eigen::MatrixXd adjacency, bool binarize = true);

    std::size_t num_nodes() const { return static_cast<std::size_t>(adjacency_.rows()); }
    const Eigen::MatrixXd& adjacency() const { return adjacency_; }
    Eigen::VectorXd degree() const { return adjacency_.rowwise().sum(); }
    std::size_t num_edges() const;

private:
    Eigen::MatrixXd adjacency_;
};

/// I - D^{-1/2} A D^{-1/2}; isolated nodes get an identity row.
Eigen::MatrixXd normalized_laplacian(const TrafficGraph& graph);

/// Power-iteration estimate of the largest eigenvalue magnitude of a symmetric
/// matrix. A zero matrix yields 2.0, the normalized-Laplacian upper bound.
double estimate_lambda_max(const Eigen::MatrixXd& laplacian, int iters = 200, double tol = 1e-9);

/// T_0(L~) ... T_{K-1}(L~) with L~ = (2 / lambda_max) L - I. Immutable once
/// built and shared by every block.
struct ChebyshevBasis {
    double lambda_max = 0.0;
    Eigen::MatrixXd scaled_laplacian;
    std::vector<Eigen::MatrixXd> matrices;
    std::vector<Tensor> tensors;  // same matrices as [N, N] constants

    std::size_t order() const { return matrices.size(); }
    std::size_t num_nodes() const { return static_cast<std::size_t>(scaled_laplacian.rows()); }
};

ChebyshevBasis chebyshev_basis(const Eigen::MatrixXd& laplacian, double lambda_max, std::size_t order);

/// Laplacian, power-iteration lambda_max and basis in one step.
ChebyshevBasis build_basis(const TrafficGraph& graph, std::size_t order);

/// ReLU( sum_k T_k(L~) x_t theta_k ) for every time step t.
/// x [T, N, C_in], theta [K, C_in, C_out] -> [T, N, C_out].
Tensor cheb_graph_conv(const Tensor& x, const ChebyshevBasis& basis, const Tensor& theta);

}  // namespace embs
