#include "embsformer/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <limits>

namespace embs {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

namespace {

double evaluate(const std::function<Tensor()>& loss) {
    NoGradScope off;
    const Tensor value = loss();
    if (value.size() != 1) {
        throw DimensionError("gradient_check: function must be scalar-valued, got " + shape_to_string(value.shape()));
    }
    return value.item();
}

ParamCheck check_one(const std::function<Tensor()>& loss, const std::string& name, Tensor param,
                     std::span<const double> analytic, double eps) {
    ParamCheck result{name, 0.0, 0, 0.0, 0.0, 0.0};
    auto values = param.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double saved = values[i];
        values[i] = saved + eps;
        const double up = evaluate(loss);
        values[i] = saved - eps;
        const double down = evaluate(loss);
        values[i] = saved;
        double numeric = (up - down) / (2.0 * eps);
        // A difference within rounding of f itself carries no slope information.
        const double noise = 4.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down));
        if (std::abs(up - down) <= noise) numeric = 0.0;
        const double a = analytic.empty() ? 0.0 : analytic[i];
        const double err = relative_error(a, numeric);
        if (i == 0 || err > result.max_rel_error) {
            result.max_rel_error = err;
            result.worst_index = i;
            result.analytic = a;
            result.numeric = numeric;
            result.loss_scale = std::max(std::abs(up), std::abs(down));
        }
    }
    return result;
}

}  // namespace

std::vector<ParamCheck> gradient_check_params(const std::function<Tensor()>& loss,
                                              std::span<const std::pair<std::string, Tensor>> params, double eps) {
    const double first = evaluate(loss);
    const double second = evaluate(loss);
    if (std::memcmp(&first, &second, sizeof(double)) != 0) {
        throw NonDeterministicError("gradient_check: repeated evaluation differs (" + std::to_string(first) + " vs " +
                                    std::to_string(second) + ")");
    }
    std::vector<bool> restore;
    for (const auto& [name, p] : params) {
        restore.push_back(p.requires_grad());
        Tensor handle = p;
        handle.set_requires_grad(true);
    }
    Gradients grads;
    {
        Tape tape;
        TapeScope scope(tape);
        const Tensor value = loss();
        grads = tape.backward(value);
    }
    std::vector<ParamCheck> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        out.push_back(check_one(loss, params[i].first, params[i].second, grads.of(params[i].second), eps));
        Tensor handle = params[i].second;
        handle.set_requires_grad(restore[i]);
    }
    return out;
}

double gradient_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    const Tensor point = x.clone();
    const std::pair<std::string, Tensor> param{"x", point};
    const auto checks = gradient_check_params([&] { return f(point); }, std::span(&param, 1), eps);
    return checks.front().max_rel_error;
}

std::vector<GradCheckOutcome> run_gradchecks(std::span<const GradCheckCase> cases, double tolerance) {
    std::vector<GradCheckOutcome> outcomes;
    for (const auto& c : cases) {
        GradCheckOutcome o;
        o.name = c.name;
        const auto start = std::chrono::steady_clock::now();
        try {
            o.max_rel_error = c.run();
            o.passed = o.max_rel_error <= tolerance && std::isfinite(o.max_rel_error);
        } catch (const std::exception& e) {
            o.error = e.what();
            o.passed = false;
        }
        o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        outcomes.push_back(std::move(o));
    }
    return outcomes;
}

}  // namespace embs
