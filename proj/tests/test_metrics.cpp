#include <gtest/gtest.h>

#include <cmath>

#include "embsformer/metrics.hpp"

using namespace embs;

TEST(Metrics, HandComputedRow) {
    const std::vector<double> p{1.0, 2.0, 4.0, 10.0};
    const std::vector<double> a{2.0, 2.0, 2.0, 8.0};
    const MetricRow r = compute_metrics(p, a);
    EXPECT_DOUBLE_EQ(r.mae, (1.0 + 0.0 + 2.0 + 2.0) / 4.0);
    EXPECT_DOUBLE_EQ(r.rmse, std::sqrt((1.0 + 0.0 + 4.0 + 4.0) / 4.0));
    EXPECT_DOUBLE_EQ(r.mape, 100.0 * (0.5 + 0.0 + 1.0 + 0.25) / 4.0);
    EXPECT_EQ(r.count, 4u);
    EXPECT_EQ(r.masked, 0u);
}

TEST(Metrics, ZeroTargetsMaskedFromMapeOnly) {
    const std::vector<double> p{1.0, 3.0};
    const std::vector<double> a{0.0, 2.0};
    const MetricRow r = compute_metrics(p, a);
    EXPECT_DOUBLE_EQ(r.mae, 1.0);
    EXPECT_DOUBLE_EQ(r.mape, 50.0);
    EXPECT_EQ(r.masked, 1u);
    const std::vector<double> zeros{0.0, 0.0};
    EXPECT_TRUE(std::isnan(compute_metrics(p, zeros).mape));
    EXPECT_THROW(compute_metrics(p, std::vector<double>{1.0}), std::invalid_argument);
}

TEST(Metrics, PerfectPredictionIsZero) {
    const std::vector<double> a{3.0, -1.0, 7.5};
    const MetricRow r = compute_metrics(a, a);
    EXPECT_EQ(r.mae, 0.0);
    EXPECT_EQ(r.rmse, 0.0);
    EXPECT_EQ(r.mape, 0.0);
}

TEST(Metrics, AccumulatorPerStepAndAverage) {
    // horizon 2, 2 nodes, two samples
    MetricsAccumulator acc(2);
    acc.add(std::vector<double>{1, 1, 5, 5}, std::vector<double>{2, 2, 5, 6}, 2);
    acc.add(std::vector<double>{0, 0, 0, 0}, std::vector<double>{1, 1, 2, 2}, 2);
    const auto steps = acc.per_step();
    ASSERT_EQ(steps.size(), 2u);
    EXPECT_DOUBLE_EQ(steps[0].mae, 1.0);
    EXPECT_DOUBLE_EQ(steps[1].mae, (0.0 + 1.0 + 2.0 + 2.0) / 4.0);
    EXPECT_DOUBLE_EQ(acc.average().mae, (4.0 + 5.0) / 8.0);
    EXPECT_EQ(acc.samples(), 2u);
    EXPECT_THROW(acc.add(std::vector<double>{1, 2, 3}, std::vector<double>{1, 2, 3}, 2), std::invalid_argument);
}

TEST(Metrics, JsonRoundTripAndSchema) {
    MetricsAccumulator acc(2);
    acc.add(std::vector<double>{1, 2}, std::vector<double>{0, 4}, 1);
    MetricsReport rep = make_report(acc);
    rep.split = "test";
    rep.config_hash = "abc123";
    rep.seed = 7;
    rep.wall_seconds = 1.5;
    const nlohmann::json j = to_json(rep);
    EXPECT_EQ(j["schema"], "embsformer.metrics/1");
    EXPECT_EQ(j["horizon"], 2);
    EXPECT_EQ(j["per_step"][0]["step"], 1);
    EXPECT_TRUE(j["per_step"][0]["mape"].is_null());
    EXPECT_EQ(j["metadata"]["seed"], 7);
    const MetricsReport back = report_from_json(nlohmann::json::parse(j.dump()));
    EXPECT_EQ(back.per_step.size(), 2u);
    EXPECT_DOUBLE_EQ(back.average.mae, rep.average.mae);
    EXPECT_TRUE(std::isnan(back.per_step[0].mape));
    EXPECT_EQ(back.config_hash, "abc123");
    EXPECT_NE(format_report(rep).find("step"), std::string::npos);
}
