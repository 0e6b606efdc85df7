#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "embsformer/checkpoint.hpp"
#include "embsformer/gradcheck.hpp"
#include "embsformer/model.hpp"
#include "embsformer/rng.hpp"

using namespace embs;

namespace {

Tensor random_tensor(Shape shape, std::uint64_t seed, double scale = 1.0) {
    CounterRng rng(seed);
    std::vector<double> v(shape_size(shape));
    for (double& x : v) x = scale * rng.uniform(-1.0, 1.0);
    return Tensor(std::move(shape), std::move(v));
}

std::shared_ptr<const ChebyshevBasis> ring_basis(std::size_t n, std::size_t k) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    for (std::size_t i = 0; i + 1 < n; ++i) a(i, i + 1) = a(i + 1, i) = 1.0;
    return std::make_shared<const ChebyshevBasis>(build_basis(TrafficGraph(a), k));
}

std::shared_ptr<const ChebyshevBasis> edgeless_basis(std::size_t n, std::size_t k) {
    return std::make_shared<const ChebyshevBasis>(
        build_basis(TrafficGraph(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n))), k));
}

WindowSample random_sample(const ModelConfig& c, std::uint64_t seed) {
    WindowSample s;
    s.recent = random_tensor({c.m, c.nodes, c.features}, seed);
    s.target = random_tensor({c.n, c.nodes}, seed + 1);
    CounterRng rng(seed + 2);
    auto calendar = [&](std::size_t len) {
        std::vector<CalendarIndex> out(len);
        for (auto& ci : out) {
            ci.minute_of_day = static_cast<std::uint16_t>(rng.below(1440));
            ci.day_of_week = static_cast<std::uint8_t>(rng.below(7));
            ci.is_holiday = static_cast<std::uint8_t>(rng.below(2));
        }
        return out;
    };
    s.recent_calendar = calendar(c.m);
    for (std::size_t i = 0; i < c.periods.size(); ++i) {
        s.periods.push_back(random_tensor({c.m + c.n, c.nodes, c.features}, seed + 10 + i));
        s.period_calendar.push_back(calendar(c.m + c.n));
    }
    return s;
}

ModelConfig toy_config() {
    ModelConfig c;
    c.m = c.n = 3;
    c.nodes = 4;
    c.d_e = c.d_s = c.d_t = c.h_prime = 4;
    c.k_cheb = 2;
    c.periods = {6};
    return c;
}

void expect_rows_sum_to_one(const Tensor& scores) {
    const std::size_t len = scores.dim(scores.rank() - 1);
    for (std::size_t r = 0; r < scores.size() / len; ++r) {
        double s = 0.0;
        for (std::size_t j = 0; j < len; ++j) s += scores.values()[r * len + j];
        EXPECT_NEAR(s, 1.0, 1e-9);
    }
}

}  // namespace

TEST(ModelConfig, TextRoundTripAndValidation) {
    ModelConfig c = toy_config();
    c.periods = {6, 24};
    c.enable_recent = false;
    EXPECT_EQ(ModelConfig::from_text(c.to_text()), c);
    ModelConfig bad = toy_config();
    bad.enable_recent = bad.enable_period = false;
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = toy_config();
    bad.periods = {5};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    bad = toy_config();
    bad.m = 2;
    bad.periods = {8};
    EXPECT_THROW(bad.validate(), std::invalid_argument);
    EXPECT_THROW(ModelConfig::from_text("m = x"), std::invalid_argument);
    EXPECT_THROW(ModelConfig::from_text("colour = red"), std::invalid_argument);
}

TEST(ModelConfig, ParameterCountFormulaMatchesAllocation) {
    for (std::size_t m : {3, 5}) {
        for (std::size_t branches : {0, 1, 2}) {
            for (bool recent : {true, false}) {
                if (!recent && branches == 0) continue;
                ModelConfig c = toy_config();
                c.m = m;
                c.d_s = 3;
                c.d_t = 5;
                c.h_prime = 6;
                c.blocks = 2;
                c.periods.clear();
                for (std::size_t b = 0; b < branches; ++b) c.periods.push_back(10 + b);
                c.enable_recent = recent;
                const EMBSFormer model(c, ring_basis(4, 2));
                EXPECT_EQ(model.parameter_count(), parameter_count(c));
            }
        }
    }
}

TEST(Embedding, AdditiveDecomposition) {
    ModelConfig c = toy_config();
    c.features = 2;
    EMBSFormer model(c, ring_basis(4, 2));
    Embedding& e = model.embedding;
    for (Tensor t : {e.minute, e.day_of_week, e.holiday}) std::fill(t.mutable_data().begin(), t.mutable_data().end(), 0.0);
    const WindowSample s = random_sample(c, 3);
    const Tensor out = e(s.recent, s.recent_calendar);
    ASSERT_EQ(out.shape(), (Shape{3, 4, 4}));
    const Tensor projected = e.data(s.recent);
    for (std::size_t t = 0; t < 3; ++t) {
        for (std::size_t i = 0; i < 4; ++i) {
            for (std::size_t d = 0; d < 4; ++d) {
                EXPECT_DOUBLE_EQ(out.at({t, i, d}), projected.at({t, i, d}) + e.positional.at({t, d}));
            }
        }
    }
}

TEST(Embedding, IdenticalCalendarGivesIdenticalTerms) {
    ModelConfig c = toy_config();
    const EMBSFormer model(c, ring_basis(4, 2));
    std::vector<CalendarIndex> cal(6, CalendarIndex{600, 2, 0});
    const Tensor zeros = Tensor::zeros({6, 4, 1});
    const Tensor out = model.embedding(zeros, cal);
    // position differs per step, so subtract the positional row and compare
    for (std::size_t d = 0; d < 4; ++d) {
        const double a = out.at({1, 0, d}) - model.embedding.positional.at({1, d});
        const double b = out.at({4, 3, d}) - model.embedding.positional.at({4, d});
        EXPECT_DOUBLE_EQ(a, b);
    }
    cal[2].minute_of_day = 1440;
    EXPECT_THROW(model.embedding(zeros, cal), std::out_of_range);
    ASSERT_EQ(model.embedding(Tensor::zeros({6, 4, 1}), std::vector<CalendarIndex>(6)).shape(), (Shape{6, 4, 4}));
}

TEST(Attention, DegenerateCasesReturnValue) {
    const Affine q{random_tensor({3, 2}, 1), random_tensor({2}, 2)};
    const Affine k{random_tensor({3, 2}, 3), random_tensor({2}, 4)};
    const Affine v{random_tensor({3, 2}, 5), random_tensor({2}, 6)};
    const SpatialAttention spatial{q, k, v};
    const Tensor single_node = random_tensor({4, 1, 3}, 7);
    Tensor scores;
    EXPECT_EQ(spatial(single_node, &scores).values(), v(single_node).values());
    EXPECT_EQ(scores.values(), std::vector<double>(4, 1.0));
    const TemporalAttention temporal{q, k, v};
    const Tensor single_step = random_tensor({1, 5, 3}, 8);
    EXPECT_EQ(temporal(single_step).values(), v(single_step).values());
}

TEST(Attention, SpatialNodeEquivariance) {
    const SpatialAttention sa{{random_tensor({3, 2}, 1), random_tensor({2}, 2)},
                              {random_tensor({3, 2}, 3), random_tensor({2}, 4)},
                              {random_tensor({3, 2}, 5), random_tensor({2}, 6)}};
    const Tensor e = random_tensor({2, 3, 3}, 9);
    const std::vector<std::size_t> perm{2, 0, 1};
    std::vector<double> pv;
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t i : perm) {
            for (std::size_t d = 0; d < 3; ++d) pv.push_back(e.at({t, i, d}));
        }
    }
    const Tensor out = sa(e);
    const Tensor out_p = sa(Tensor({2, 3, 3}, pv));
    for (std::size_t t = 0; t < 2; ++t) {
        for (std::size_t j = 0; j < 3; ++j) {
            for (std::size_t d = 0; d < 2; ++d) EXPECT_NEAR(out_p.at({t, j, d}), out.at({t, perm[j], d}), 1e-14);
        }
    }
}

TEST(Attention, TemporalSharesWeightsAcrossNodes) {
    const TemporalAttention ta{{random_tensor({3, 2}, 1), random_tensor({2}, 2)},
                               {random_tensor({3, 2}, 3), random_tensor({2}, 4)},
                               {random_tensor({3, 2}, 5), random_tensor({2}, 6)}};
    Tensor e = random_tensor({4, 2, 3}, 9);
    auto v = e.mutable_data();
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t d = 0; d < 3; ++d) v[(t * 2 + 1) * 3 + d] = v[(t * 2) * 3 + d];
    }
    Tensor scores;
    const Tensor out = ta(e, &scores);
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t d = 0; d < 2; ++d) EXPECT_EQ(out.at({t, 0, d}), out.at({t, 1, d}));
    }
    expect_rows_sum_to_one(scores);
}

TEST(TransitionBlock, ResidualOnlyWhenBranchZeroed) {
    ModelConfig c = toy_config();
    EMBSFormer model(c, ring_basis(4, 2));
    TransitionBlock& blk = model.blocks[0];
    std::fill(blk.conv.mutable_data().begin(), blk.conv.mutable_data().end(), 0.0);
    const Tensor e = random_tensor({3, 4, 4}, 5);
    const Tensor out = blk(e, model.basis());
    EXPECT_EQ(out.shape(), e.shape());
    EXPECT_EQ(out.values(), pointwise(e, blk.residual).values());
}

TEST(TransitionBlock, EveryWeightReceivesGradient) {
    ModelConfig c = toy_config();
    c.periods.clear();
    const EMBSFormer model(c, ring_basis(4, 2), 3);
    const WindowSample s = random_sample(c, 4);
    Tape tape;
    TapeScope scope(tape);
    const Gradients g = tape.backward(mse_loss(model.forward(s), s.target));
    for (const auto& [name, t] : model.parameters()) {
        if (name.rfind("blocks.", 0) != 0) continue;
        double norm = 0.0;
        for (double x : g.of(t)) norm += x * x;
        EXPECT_GT(norm, 0.0) << name;
    }
}

TEST(Readout, ConstructedKernelsAndShapes) {
    Readout r;
    r.time = Tensor::zeros({4, 1, 4});
    for (std::size_t j = 0; j < 4; ++j) r.time.mutable_data()[j * 4 + j] = 1.0;
    r.feature = Tensor({3, 1}, {1, 0, 0});
    const Tensor h = random_tensor({4, 5, 3}, 1);
    const Tensor y = r(h);
    ASSERT_EQ(y.shape(), (Shape{4, 5}));
    for (std::size_t t = 0; t < 4; ++t) {
        for (std::size_t i = 0; i < 5; ++i) EXPECT_DOUBLE_EQ(y.at({t, i}), h.at({t, i, 0}));
    }
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{12, 12}, {36, 36}, {12, 36}}) {
        Readout ro{random_tensor({m, 1, n}, m), random_tensor({3, 1}, n)};
        EXPECT_EQ(ro(random_tensor({m, 2, 3}, 4)).shape(), (Shape{n, 2}));
    }
    Tensor time = random_tensor({3, 1, 2}, 1);
    Tensor feature = random_tensor({2, 1}, 2);
    const Tensor x = random_tensor({3, 2, 2}, 3);
    EXPECT_LE(gradient_check([&](const Tensor& v) { return sum_all(mul(Readout{time, feature}(v), Tensor::full({2, 2}, 0.7))); }, x), 1e-4);
}

TEST(Lookup, DegenerateSingleStep) {
    LookupAttention la{{random_tensor({2, 3}, 1), random_tensor({3}, 2)},
                       {random_tensor({2, 3}, 3), random_tensor({3}, 4)},
                       {random_tensor({2, 3}, 5), random_tensor({3}, 6)},
                       {},
                       {}};
    const Tensor recent = random_tensor({1, 4, 2}, 7);
    const Tensor period = random_tensor({2, 4, 2}, 8);
    Tensor scores;
    const Tensor asr = la(recent, period, &scores);
    EXPECT_EQ(asr.shape(), (Shape{1, 4, 3}));
    EXPECT_EQ(asr.values(), la.value(slice(period, 0, 1, 1)).values());
    EXPECT_EQ(scores.values(), std::vector<double>(4, 1.0));
}

TEST(Lookup, SharpScoresRetrieveMatchingPseudoFuture) {
    // identity maps with a large query scale: each query step picks the key
    // step equal to itself, so ASR reproduces the pseudo-future row by row
    const std::size_t d = 3, n = 3;
    Tensor eye = Tensor::zeros({d, d});
    for (std::size_t i = 0; i < d; ++i) eye.mutable_data()[i * d + i] = 1.0;
    LookupAttention la{{scale(eye, 200.0), Tensor::zeros({d})}, {eye, Tensor::zeros({d})}, {eye, Tensor::zeros({d})}, {}, {}};
    std::vector<double> rv(n * 1 * d, 0.0);
    for (std::size_t t = 0; t < n; ++t) rv[t * d + t] = 1.0;  // one-hot time codes
    const Tensor recent({n, 1, d}, rv);
    const Tensor future = random_tensor({n, 1, d}, 9);
    const std::vector<Tensor> parts{recent, future};
    const Tensor asr = la(recent, concat(parts, 0));
    for (std::size_t i = 0; i < asr.size(); ++i) EXPECT_NEAR(asr.values()[i], future.values()[i], 1e-12);
}

TEST(Lookup, AlignsWhenWindowsDiffer) {
    ModelConfig c = toy_config();
    c.m = 5;
    c.n = 3;
    c.periods = {8};
    const EMBSFormer model(c, ring_basis(4, 2));
    ForwardTrace trace;
    const Tensor y = model.forward(random_sample(c, 2), &trace);
    EXPECT_EQ(y.shape(), (Shape{3, 4}));
    ASSERT_EQ(trace.lookup.size(), 1u);
    EXPECT_EQ(trace.lookup[0].shape(), (Shape{4, 3, 3}));
    expect_rows_sum_to_one(trace.lookup[0]);
}

TEST(GenerationBranch, IdentityKernelsAndLinearity) {
    GenerationBranch g;
    g.conv_t = Tensor({1, 1, 1}, {1});
    g.conv_c = Tensor({1, 1, 1}, {1});
    const Tensor asr = random_tensor({3, 2, 1}, 1);
    EXPECT_EQ(g.generate(asr).values(), asr.values());
    g.conv_t = random_tensor({1, 4, 4}, 2);
    g.conv_c = random_tensor({1, 4, 1}, 3);
    const Tensor a = random_tensor({3, 2, 4}, 4);
    const Tensor y1 = g.generate(a);
    const Tensor y2 = g.generate(scale(a, 2.0));
    ASSERT_EQ(y1.shape(), (Shape{3, 2}));
    for (std::size_t i = 0; i < y1.size(); ++i) EXPECT_NEAR(y2.values()[i], 2.0 * y1.values()[i], 1e-14);
}

TEST(Fuse, IdentityCasesAndAnalyticGradient) {
    const Tensor yr = random_tensor({3, 2}, 1);
    const Tensor yp = random_tensor({3, 2}, 2);
    const std::vector<Tensor> none;
    EXPECT_EQ(fuse(&yr, Tensor::ones({3, 2}), none, none).values(), yr.values());
    const std::vector<Tensor> one{yp};
    const std::vector<Tensor> w_one{Tensor::ones({3, 2})};
    EXPECT_EQ(fuse(nullptr, Tensor(), one, w_one).values(), yp.values());
    EXPECT_EQ(fuse(&yr, Tensor::zeros({3, 2}), one, w_one).values(), yp.values());
    EXPECT_THROW(fuse(nullptr, Tensor(), none, none), std::invalid_argument);

    Tensor wr = random_tensor({3, 2}, 5);
    wr.set_requires_grad(true);
    const Tensor y = random_tensor({3, 2}, 6);
    Tape tape;
    TapeScope scope(tape);
    const Tensor pred = fuse(&yr, wr, one, w_one);
    const Gradients g = tape.backward(mse_loss(pred, y));
    for (std::size_t i = 0; i < 6; ++i) {
        const double expected = 2.0 / 6.0 * (pred.values()[i] - y.values()[i]) * yr.values()[i];
        EXPECT_NEAR(g.of(wr)[i], expected, 1e-8);
    }
}

TEST(Model, ShapeSweep) {
    for (auto [m, n] : {std::pair<std::size_t, std::size_t>{12, 12}, {36, 36}}) {
        for (std::size_t k : {2, 3}) {
            for (std::size_t branches : {0, 1, 2, 4}) {
                ModelConfig c;
                c.m = m;
                c.n = n;
                c.nodes = 5;
                c.d_e = c.d_s = c.d_t = c.h_prime = 4;
                c.k_cheb = k;
                for (std::size_t b = 0; b < branches; ++b) c.periods.push_back((m + n) * (b + 1));
                const EMBSFormer model(c, ring_basis(5, k));
                EXPECT_EQ(model.forward(random_sample(c, m + k + branches)).shape(), (Shape{n, 5}));
            }
        }
    }
}

TEST(Model, AblationWiringAndDeterminism) {
    ModelConfig c = toy_config();
    c.periods = {6, 9};
    const WindowSample s = random_sample(c, 5);
    const EMBSFormer full(c, ring_basis(4, 2), 1);
    EXPECT_EQ(full.forward(s).values(), full.forward(s).values());

    ModelConfig no_period = c;
    no_period.enable_period = false;
    const EMBSFormer np(no_period, ring_basis(4, 2), 1);
    for (const auto& [name, t] : np.parameters()) {
        EXPECT_EQ(name.find("branches."), std::string::npos);
        EXPECT_EQ(name.find("head.branch"), std::string::npos);
    }
    Tape tape;
    {
        TapeScope scope(tape);
        const Gradients g = tape.backward(mse_loss(np.forward(s), s.target));
        for (const auto& [name, t] : np.parameters()) {
            if (name.rfind("embedding.", 0) == 0 && name != "embedding.minute" && name != "embedding.day_of_week" &&
                name != "embedding.holiday") {
                EXPECT_TRUE(g.contains(t)) << name;
            }
        }
    }

    ModelConfig no_recent = c;
    no_recent.enable_recent = false;
    const EMBSFormer nr(no_recent, ring_basis(4, 2), 1);
    for (const auto& [name, t] : nr.parameters()) {
        EXPECT_EQ(name.find("blocks."), std::string::npos);
        EXPECT_NE(name, "head.recent");
    }
    EXPECT_EQ(nr.forward(s).shape(), (Shape{3, 4}));
    // shared names initialize identically across variants
    EXPECT_EQ(full.parameter("embedding.minute").values(), nr.parameter("embedding.minute").values());
}

TEST(Model, EdgelessNodePermutationEquivariance) {
    ModelConfig c = toy_config();
    c.periods.clear();
    const EMBSFormer model(c, edgeless_basis(4, 2), 2);
    const WindowSample s = random_sample(c, 8);
    const Tensor y = model.forward(s);
    const std::vector<std::size_t> perm{3, 1, 0, 2};
    WindowSample p = s;
    std::vector<double> rv;
    for (std::size_t t = 0; t < c.m; ++t) {
        for (std::size_t i : perm) rv.push_back(s.recent.at({t, i, 0}));
    }
    p.recent = Tensor(s.recent.shape(), rv);
    // the head weights are per node; permute them alongside
    EMBSFormer permuted(c, edgeless_basis(4, 2), 2);
    auto head = permuted.head_recent.mutable_data();
    for (std::size_t j = 0; j < c.n; ++j) {
        for (std::size_t i = 0; i < 4; ++i) head[j * 4 + i] = model.head_recent.at({j, perm[i]});
    }
    const Tensor yp = permuted.forward(p);
    for (std::size_t j = 0; j < c.n; ++j) {
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(yp.at({j, i}), y.at({j, perm[i]}), 1e-12);
    }
}

TEST(Model, AttentionRowsSumToOne) {
    ModelConfig c = toy_config();
    c.periods = {6, 12};
    c.blocks = 2;
    const EMBSFormer model(c, ring_basis(4, 2), 9);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        ForwardTrace trace;
        model.forward(random_sample(c, seed * 7), &trace);
        ASSERT_EQ(trace.blocks.size(), 2u);
        for (const auto& b : trace.blocks) {
            expect_rows_sum_to_one(b.spatial);
            expect_rows_sum_to_one(b.temporal);
        }
        for (const auto& l : trace.lookup) expect_rows_sum_to_one(l);
    }
}

TEST(Model, ToyGradientCheckWithinRoundoff) {
    // The central difference carries about one ulp of |f| over 2 eps; entries
    // whose true gradient sits near 1e-8 cannot do better than that.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        for (const auto& pc : toy_model_gradcheck(seed)) {
            const double rounding = std::numeric_limits<double>::epsilon() * pc.loss_scale / 2e-5;
            const double scale = std::max({std::abs(pc.analytic), std::abs(pc.numeric), 1e-8});
            EXPECT_LE(std::abs(pc.analytic - pc.numeric), 1e-4 * scale + 2.0 * rounding)
                << pc.name << " seed " << seed << " at " << pc.worst_index;
        }
    }
}

TEST(Model, KeyBiasGradientVanishes) {
    const ToyInstance toy = make_toy_instance(3);
    Tape tape;
    TapeScope scope(tape);
    const Gradients g = tape.backward(mse_loss(toy.model.forward(toy.sample), toy.sample.target));
    std::size_t seen = 0;
    for (const auto& [name, t] : toy.model.parameters()) {
        if (!shift_invariant(name)) continue;
        ++seen;
        for (double v : g.of(t)) EXPECT_LE(std::abs(v), 1e-15) << name;
    }
    EXPECT_EQ(seen, 3u);
}

TEST(Checkpoint, ByteIdenticalRoundTrip) {
    ModelConfig c = toy_config();
    const EMBSFormer model(c, ring_basis(4, 2), 4);
    const NormalizationStats norm{{12.5}, {3.25}};
    std::stringstream first;
    write_checkpoint(model, norm, first);
    const std::string bytes = first.str();
    EXPECT_EQ(bytes.substr(0, 5), "EMBS1");
    std::istringstream in(bytes);
    const Checkpoint ck = read_checkpoint(in);
    EXPECT_EQ(ck.config, c);
    EXPECT_EQ(ck.normalizer.mean, norm.mean);
    const EMBSFormer loaded = instantiate(ck, ring_basis(4, 2));
    std::stringstream second;
    write_checkpoint(loaded, ck.normalizer, second);
    EXPECT_EQ(second.str(), bytes);
    const WindowSample s = random_sample(c, 1);
    EXPECT_EQ(loaded.forward(s).values(), model.forward(s).values());
}

TEST(Checkpoint, RejectsCorruption) {
    const EMBSFormer model(toy_config(), ring_basis(4, 2), 4);
    std::stringstream out;
    write_checkpoint(model, NormalizationStats::identity(1), out);
    std::string bytes = out.str();
    std::string bad_magic = bytes;
    bad_magic[0] = 'X';
    std::istringstream a(bad_magic);
    EXPECT_THROW(read_checkpoint(a), CheckpointError);
    std::istringstream b(bytes.substr(0, bytes.size() - 3));
    EXPECT_THROW(read_checkpoint(b), CheckpointError);
    std::istringstream c(bytes);
    const Checkpoint ck = read_checkpoint(c);
    EXPECT_THROW(instantiate(ck, ring_basis(4, 3)), std::invalid_argument);
}
