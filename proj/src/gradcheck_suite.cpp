#include <algorithm>
#include <cmath>

#include "embsformer/gradcheck.hpp"
#include "embsformer/graph.hpp"
#include "embsformer/model.hpp"
#include "embsformer/rng.hpp"

namespace embs {

namespace {

Tensor draw(Shape shape, std::uint64_t seed, std::uint64_t stream, double lo = -1.0, double hi = 1.0) {
    CounterRng rng(seed, stream);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = rng.uniform(lo, hi);
    return Tensor(std::move(shape), std::move(v));
}

std::vector<CalendarIndex> draw_calendar(std::size_t length, CounterRng& rng) {
    std::vector<CalendarIndex> out(length);
    for (auto& ci : out) {
        ci.minute_of_day = static_cast<std::uint16_t>(rng.below(1440));
        ci.day_of_week = static_cast<std::uint8_t>(rng.below(7));
        ci.is_holiday = static_cast<std::uint8_t>(rng.below(2));
    }
    return out;
}

std::shared_ptr<const ChebyshevBasis> path_basis(std::size_t nodes, std::size_t k) {
    const auto n = static_cast<Eigen::Index>(nodes);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i + 1 < n; ++i) a(i, i + 1) = a(i + 1, i) = 1.0;
    return std::make_shared<const ChebyshevBasis>(build_basis(TrafficGraph(a), k));
}

// Fixed weighting so the scalar depends on every output element differently.
Tensor weighted_sum(const Tensor& y, std::uint64_t seed) {
    return sum_all(mul(y, draw(y.shape(), seed, 999)));
}

double worst(const std::vector<ParamCheck>& checks) {
    double w = 0.0;
    for (const auto& c : checks) w = std::max(w, c.max_rel_error);
    return w;
}

// Checks the scalar against every tensor in `inputs`.
double check_all(const std::function<Tensor()>& loss, std::vector<std::pair<std::string, Tensor>> inputs) {
    return worst(gradient_check_params(loss, inputs));
}

Affine draw_affine(std::size_t in, std::size_t out, std::uint64_t seed, std::uint64_t stream) {
    return {draw({in, out}, seed, stream), draw({out}, seed, stream + 1)};
}

std::vector<std::pair<std::string, Tensor>> affine_inputs(const std::string& name, const Affine& a) {
    return {{name + ".weight", a.weight}, {name + ".bias", a.bias}};
}

}  // namespace

ToyInstance make_toy_instance(std::uint64_t seed) {
    ModelConfig c;
    c.m = c.n = 3;
    c.nodes = 4;
    c.d_e = c.d_s = c.d_t = c.h_prime = 4;
    c.k_cheb = 3;
    c.periods = {6};
    ToyInstance toy{EMBSFormer(c, path_basis(4, 3), seed), {}};
    WindowSample& s = toy.sample;
    s.recent = draw({c.m, c.nodes, c.features}, seed, 1);
    s.target = draw({c.n, c.nodes}, seed, 2);
    CounterRng rng(seed, 3);
    s.recent_calendar = draw_calendar(c.m, rng);
    s.periods.push_back(draw({c.m + c.n, c.nodes, c.features}, seed, 4));
    s.period_calendar.push_back(draw_calendar(c.m + c.n, rng));
    return toy;
}

bool shift_invariant(std::string_view name) {
    return name.size() >= 8 && name.substr(name.size() - 8) == "key.bias";
}

std::vector<ParamCheck> toy_model_gradcheck(std::uint64_t seed) {
    const ToyInstance toy = make_toy_instance(seed);
    std::vector<NamedTensor> checked;
    for (const auto& p : toy.model.parameters()) {
        if (!shift_invariant(p.first)) checked.push_back(p);
    }
    return gradient_check_params([&] { return mse_loss(toy.model.forward(toy.sample), toy.sample.target); }, checked);
}

std::vector<GradCheckCase> default_gradcheck_suite(std::uint64_t seed) {
    std::vector<GradCheckCase> cases;
    const auto op = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> f, double lo = -1.0,
                        double hi = 1.0) {
        cases.push_back({"op." + name, [=] { return gradient_check(f, draw(shape, seed, 10, lo, hi)); }});
    };
    const Tensor w = draw({3, 4}, seed, 20);
    const Tensor pos = draw({3, 4}, seed, 21, 0.5, 2.0);
    op("add", {3, 4}, [=](const Tensor& x) { return weighted_sum(add(x, w), seed); });
    op("add.broadcast", {4}, [=](const Tensor& x) { return weighted_sum(add(w, x), seed); });
    op("sub", {3, 4}, [=](const Tensor& x) { return weighted_sum(sub(w, x), seed); });
    op("mul", {3, 4}, [=](const Tensor& x) { return weighted_sum(mul(x, x), seed); });
    op("div", {3, 4}, [=](const Tensor& x) { return weighted_sum(div(w, x), seed); }, 0.5, 2.0);
    op("div.numerator", {3, 4}, [=](const Tensor& x) { return weighted_sum(div(x, pos), seed); });
    op("relu", {3, 4}, [=](const Tensor& x) { return weighted_sum(relu(x), seed); });
    op("scale", {3, 4}, [=](const Tensor& x) { return weighted_sum(scale(x, -1.7), seed); });
    op("matmul", {2, 3, 4}, [=](const Tensor& x) { return weighted_sum(matmul(x, permute(w, {1, 0})), seed); });
    op("matmul.batched", {2, 3, 4}, [=](const Tensor& x) { return weighted_sum(matmul(x, permute(x, {0, 2, 1})), seed); });
    op("softmax", {3, 4}, [=](const Tensor& x) { return weighted_sum(softmax(x, 1), seed); });
    op("softmax.leading", {3, 4}, [=](const Tensor& x) { return weighted_sum(softmax(x, 0), seed); });
    op("reduce.sum", {3, 4}, [=](const Tensor& x) { return weighted_sum(reduce(x, 0, Reduce::Sum), seed); });
    op("reduce.mean", {3, 4}, [=](const Tensor& x) { return weighted_sum(reduce(x, 1, Reduce::Mean), seed); });
    op("mean_all", {3, 4}, [=](const Tensor& x) { return mean_all(mul(x, w)); });
    op("permute", {2, 3, 4}, [=](const Tensor& x) { return weighted_sum(permute(x, {2, 0, 1}), seed); });
    op("reshape", {3, 4}, [=](const Tensor& x) { return weighted_sum(reshape(x, {2, 6}), seed); });
    op("concat", {3, 4}, [=](const Tensor& x) {
        const std::vector<Tensor> parts{x, w, x};
        return weighted_sum(concat(parts, 1), seed);
    });
    op("slice", {3, 4}, [=](const Tensor& x) { return weighted_sum(slice(x, 1, 1, 2), seed); });
    op("expand", {3, 4}, [=](const Tensor& x) { return weighted_sum(expand(x, 1, 3), seed); });
    op("gather_rows", {5, 3}, [=](const Tensor& x) {
        const std::vector<std::size_t> idx{4, 0, 4, 2};
        return weighted_sum(gather_rows(x, idx), seed);
    });
    const Tensor kernel = draw({2, 4, 3}, seed, 22);
    op("conv_time", {2, 5, 4}, [=](const Tensor& x) { return weighted_sum(conv_time(x, kernel), seed); });
    op("conv_time.kernel", {2, 4, 3}, [=](const Tensor& k) { return weighted_sum(conv_time(draw({2, 5, 4}, seed, 23), k), seed); });
    op("mse", {3, 4}, [=](const Tensor& x) { return mse_loss(x, w); });

    const auto basis = path_basis(4, 3);
    cases.push_back({"graph.cheb_conv", [=] {
                         const Tensor x = draw({2, 4, 3}, seed, 30);
                         const Tensor theta = draw({3, 3, 2}, seed, 31);
                         return check_all([=] { return weighted_sum(cheb_graph_conv(x, *basis, theta), seed); },
                                          {{"x", x}, {"theta", theta}});
                     }});

    cases.push_back({"model.embedding", [=] {
                         const ToyInstance toy = make_toy_instance(seed);
                         const Embedding& e = toy.model.embedding;
                         const Tensor x = toy.sample.recent.clone();
                         std::vector<std::pair<std::string, Tensor>> in = affine_inputs("data", e.data);
                         in.insert(in.end(), {{"x", x}, {"minute", e.minute}, {"day_of_week", e.day_of_week}, {"holiday", e.holiday}});
                         return check_all([&] { return weighted_sum(e(x, toy.sample.recent_calendar), seed); }, in);
                     }});
    cases.push_back({"model.spatial_attention", [=] {
                         const SpatialAttention sa{draw_affine(4, 3, seed, 40), draw_affine(4, 3, seed, 42), draw_affine(4, 3, seed, 44)};
                         const Tensor e = draw({3, 4, 4}, seed, 46);
                         auto in = affine_inputs("query", sa.query);
                         in.emplace_back("key.weight", sa.key.weight);
                         for (auto& p : affine_inputs("value", sa.value)) in.push_back(p);
                         in.emplace_back("e", e);
                         return check_all([&] { return weighted_sum(sa(e), seed); }, in);
                     }});
    cases.push_back({"model.temporal_attention", [=] {
                         const TemporalAttention ta{draw_affine(4, 3, seed, 50), draw_affine(4, 3, seed, 52), draw_affine(4, 3, seed, 54)};
                         const Tensor e = draw({3, 4, 4}, seed, 56);
                         auto in = affine_inputs("query", ta.query);
                         in.emplace_back("key.weight", ta.key.weight);
                         for (auto& p : affine_inputs("value", ta.value)) in.push_back(p);
                         in.emplace_back("e", e);
                         return check_all([&] { return weighted_sum(ta(e), seed); }, in);
                     }});
    cases.push_back({"model.transition_block", [=] {
                         const ToyInstance toy = make_toy_instance(seed);
                         const TransitionBlock& b = toy.model.blocks.at(0);
                         const Tensor e = draw({3, 4, 4}, seed, 60);
                         std::vector<std::pair<std::string, Tensor>> in{{"e", e}, {"theta", b.theta}, {"conv", b.conv}, {"residual", b.residual}};
                         for (auto& p : affine_inputs("spatial.value", b.spatial.value)) in.push_back(p);
                         for (auto& p : affine_inputs("temporal.value", b.temporal.value)) in.push_back(p);
                         return check_all([&] { return weighted_sum(b(e, toy.model.basis()), seed); }, in);
                     }});
    cases.push_back({"model.readout", [=] {
                         const Readout r{draw({3, 1, 2}, seed, 70), draw({4, 1}, seed, 71)};
                         const Tensor h = draw({3, 4, 4}, seed, 72);
                         return check_all([&] { return weighted_sum(r(h), seed); }, {{"time", r.time}, {"feature", r.feature}, {"h", h}});
                     }});
    cases.push_back({"model.lookup_aligned", [=] {
                         // m = 5, n = 3 exercises the alignment kernels
                         const LookupAttention la{draw_affine(4, 4, seed, 80), draw_affine(4, 4, seed, 82), draw_affine(4, 4, seed, 84),
                                                  draw({3, 4, 4}, seed, 86, -0.5, 0.5), draw({3, 4, 4}, seed, 87, -0.5, 0.5)};
                         const Tensor recent = draw({5, 2, 4}, seed, 88);
                         const Tensor period = draw({8, 2, 4}, seed, 89);
                         auto in = affine_inputs("value", la.value);
                         in.insert(in.end(), {{"align_query", la.align_query}, {"align_key", la.align_key}, {"recent", recent}, {"period", period}});
                         return check_all([&] { return weighted_sum(la(recent, period), seed); }, in);
                     }});
    cases.push_back({"model.generation", [=] {
                         const GenerationBranch g{{}, draw({1, 4, 4}, seed, 90), draw({1, 4, 1}, seed, 91)};
                         const Tensor asr = draw({3, 2, 4}, seed, 92);
                         return check_all([&] { return weighted_sum(g.generate(asr), seed); },
                                          {{"conv_t", g.conv_t}, {"conv_c", g.conv_c}, {"asr", asr}});
                     }});
    cases.push_back({"model.fuse", [=] {
                         const Tensor yr = draw({3, 4}, seed, 100);
                         const Tensor wr = draw({3, 4}, seed, 101);
                         const std::vector<Tensor> yb{draw({3, 4}, seed, 102), draw({3, 4}, seed, 103)};
                         const std::vector<Tensor> wb{draw({3, 4}, seed, 104), draw({3, 4}, seed, 105)};
                         return check_all([&] { return weighted_sum(fuse(&yr, wr, yb, wb), seed); },
                                          {{"y_recent", yr}, {"w_recent", wr}, {"y_branch", yb[0]}, {"w_branch", wb[1]}});
                     }});
    cases.push_back({"model.full_toy", [=] { return worst(toy_model_gradcheck(seed)); }});
    return cases;
}

}  // namespace embs
