#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "embsformer/tensor.hpp"

namespace embs {

/// Thrown when two evaluations of the checked function at the same point differ.
class NonDeterministicError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Relative discrepancy used throughout: |a - c| / max(|a|, |c|, 1e-8).
double relative_error(double analytic, double numeric);

/// Max over elements of x of the relative error between the tape gradient of
/// the scalar f(x) and its central difference with step eps.
double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps = 1e-5);

struct ParamCheck {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;    // at worst_index
    double numeric = 0.0;     // at worst_index
    double loss_scale = 0.0;  // max |f| over the two probes at worst_index
};

/// Same check against every element of each tensor in `params`. The loss
/// closure must read the parameters through these handles; they are perturbed
/// in place and restored exactly.
std::vector<ParamCheck> gradient_check_params(const std::function<Tensor()>& loss,
                                              std::span<const std::pair<std::string, Tensor>> params,
                                              double eps = 1e-5);

// Named checks run by the `gradcheck` command.

struct GradCheckCase {
    std::string name;
    std::function<double()> run;  // returns max relative error
};

struct GradCheckOutcome {
    std::string name;
    double max_rel_error = 0.0;
    bool passed = false;
    double seconds = 0.0;
    std::string error;  // non-empty when the check threw
};

std::vector<GradCheckOutcome> run_gradchecks(std::span<const GradCheckCase> cases, double tolerance = 1e-4);

/// Every differentiable op, the graph convolution, each model component and
/// the full toy model (N=4, m=n=3, one period branch).
std::vector<GradCheckCase> default_gradcheck_suite(std::uint64_t seed = 1);

}  // namespace embs
