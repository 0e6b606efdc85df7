#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace embs {

/// MAE, RMSE and MAPE (percent) over a set of elements. MAPE skips zero
/// targets; it is NaN when every target was zero.
struct MetricRow {
    double mae = 0.0;
    double rmse = 0.0;
    double mape = 0.0;
    std::size_t count = 0;
    std::size_t masked = 0;  // zero targets left out of MAPE
};

MetricRow compute_metrics(std::span<const double> predicted, std::span<const double> actual);

/// Streams [n, N] prediction/target pairs in raw units.
class MetricsAccumulator {
public:
    explicit MetricsAccumulator(std::size_t horizon);
    void add(std::span<const double> predicted, std::span<const double> actual, std::size_t nodes);
    std::size_t horizon() const { return steps_.size(); }
    std::size_t samples() const { return samples_; }

    std::vector<MetricRow> per_step() const;
    MetricRow average() const;

private:
    struct Sums {
        double abs = 0.0, sq = 0.0, pct = 0.0;
        std::size_t count = 0, pct_count = 0, masked = 0;
        void add(double p, double a);
        MetricRow row() const;
    };
    std::vector<Sums> steps_;
    Sums total_;
    std::size_t samples_ = 0;
};

struct MetricsReport {
    std::vector<MetricRow> per_step;
    MetricRow average;
    std::size_t samples = 0;
    // run metadata
    std::string split;
    std::string config_hash;
    std::uint64_t seed = 0;
    double wall_seconds = 0.0;
};

MetricsReport make_report(const MetricsAccumulator& acc);

nlohmann::json to_json(const MetricRow& row);
nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
/// Human-readable per-step table.
std::string format_report(const MetricsReport& report);

}  // namespace embs
