#include "embsformer/graph.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "embsformer/rng.hpp"

namespace embs {

TrafficGraph::TrafficGraph(Eigen::MatrixXd adjacency, bool binarize) {
    if (adjacency.rows() != adjacency.cols()) {
        throw DimensionError("adjacency must be square, got " + std::to_string(adjacency.rows()) + "x" +
                             std::to_string(adjacency.cols()));
    }
    if ((adjacency.array() < 0.0).any()) throw std::invalid_argument("adjacency has negative weights");
    adjacency_ = adjacency.cwiseMax(adjacency.transpose());
    adjacency_.diagonal().setZero();
    if (binarize) adjacency_ = (adjacency_.array() > 0.0).cast<double>().matrix();
}

std::size_t TrafficGraph::num_edges() const {
    return static_cast<std::size_t>((adjacency_.array() > 0.0).count()) / 2;
}

Eigen::MatrixXd normalized_laplacian(const TrafficGraph& graph) {
    const Eigen::Index n = graph.adjacency().rows();
    const Eigen::VectorXd degree = graph.degree();
    Eigen::VectorXd inv_sqrt(n);
    for (Eigen::Index i = 0; i < n; ++i) inv_sqrt[i] = degree[i] > 0.0 ? 1.0 / std::sqrt(degree[i]) : 0.0;
    Eigen::MatrixXd laplacian = -(inv_sqrt.asDiagonal() * graph.adjacency() * inv_sqrt.asDiagonal());
    laplacian.diagonal().setOnes();
    return laplacian;
}

double estimate_lambda_max(const Eigen::MatrixXd& laplacian, int iters, double tol) {
    const Eigen::Index n = laplacian.rows();
    if (n == 0 || laplacian.isZero(0.0)) return 2.0;
    // Fixed pseudo-random start; a constant vector is an eigenvector of regular graphs.
    CounterRng rng(0x1a2b3c4dULL);
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v[i] = rng.uniform(0.5, 1.5);
    v.normalize();
    double estimate = 0.0;
    for (int it = 0; it < iters; ++it) {
        Eigen::VectorXd w = laplacian * v;
        const double norm = w.norm();
        if (norm == 0.0) return 2.0;
        const double previous = estimate;
        estimate = norm;
        v = w / norm;
        if (it > 0 && std::abs(estimate - previous) <= tol * std::max(1.0, estimate)) break;
    }
    return estimate;
}

ChebyshevBasis chebyshev_basis(const Eigen::MatrixXd& laplacian, double lambda_max, std::size_t order) {
    if (order == 0) throw std::invalid_argument("chebyshev_basis: order must be at least 1");
    if (!(lambda_max > 0.0)) {
        throw std::invalid_argument("chebyshev_basis: lambda_max must be positive, got " + std::to_string(lambda_max));
    }
    const Eigen::Index n = laplacian.rows();
    ChebyshevBasis basis;
    basis.lambda_max = lambda_max;
    basis.scaled_laplacian = (2.0 / lambda_max) * laplacian - Eigen::MatrixXd::Identity(n, n);
    basis.matrices.push_back(Eigen::MatrixXd::Identity(n, n));
    if (order > 1) basis.matrices.push_back(basis.scaled_laplacian);
    for (std::size_t k = 2; k < order; ++k) {
        basis.matrices.push_back(2.0 * basis.scaled_laplacian * basis.matrices[k - 1] - basis.matrices[k - 2]);
    }
    const auto nodes = static_cast<std::size_t>(n);
    for (const auto& m : basis.matrices) {
        std::vector<double> values(nodes * nodes);
        for (std::size_t i = 0; i < nodes; ++i) {
            for (std::size_t j = 0; j < nodes; ++j) {
                values[i * nodes + j] = m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
            }
        }
        basis.tensors.emplace_back(Shape{nodes, nodes}, std::move(values));
    }
    return basis;
}

ChebyshevBasis build_basis(const TrafficGraph& graph, std::size_t order) {
    const Eigen::MatrixXd laplacian = normalized_laplacian(graph);
    return chebyshev_basis(laplacian, estimate_lambda_max(laplacian), order);
}

Tensor cheb_graph_conv(const Tensor& x, const ChebyshevBasis& basis, const Tensor& theta) {
    if (x.rank() != 3) throw DimensionError("cheb_graph_conv: x must be [T,N,C], got " + shape_to_string(x.shape()));
    if (x.dim(1) != basis.num_nodes()) {
        throw DimensionError("cheb_graph_conv: x " + shape_to_string(x.shape()) + " does not match a basis over " +
                             std::to_string(basis.num_nodes()) + " nodes");
    }
    if (theta.rank() != 3 || theta.dim(0) != basis.order() || theta.dim(1) != x.dim(2)) {
        throw DimensionError("cheb_graph_conv: theta " + shape_to_string(theta.shape()) + " incompatible with order " +
                             std::to_string(basis.order()) + " and x " + shape_to_string(x.shape()));
    }
    // [T_0 x | T_1 x | ... ] along channels, then one product with the stacked theta.
    std::vector<Tensor> terms;
    terms.reserve(basis.order());
    terms.push_back(x);
    for (std::size_t k = 1; k < basis.order(); ++k) terms.push_back(matmul(basis.tensors[k], x));
    const Tensor stacked = basis.order() == 1 ? x : concat(terms, 2);
    const Tensor weights = reshape(theta, {theta.dim(0) * theta.dim(1), theta.dim(2)});
    return relu(matmul(stacked, weights));
}

}  // namespace embs
