#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "embsformer/data.hpp"
#include "embsformer/metrics.hpp"
#include "embsformer/model.hpp"
#include "embsformer/training.hpp"

namespace embs {

/// Period lags given in hours -> steps. Throws std::invalid_argument when an
/// hour count is not a whole number of steps.
std::vector<std::size_t> hours_to_steps(const std::vector<double>& hours, int step_minutes);

struct AblationVariant {
    std::string name;
    std::vector<double> period_hours;
    bool recent = true;
};

/// full(8,12,24,168), period(24), period(24,168), w/o-period, w/o-recent.
std::vector<AblationVariant> default_ablation_variants();

struct AblationOptions {
    ModelConfig model;  // m, n, dims, K; periods and path switches come from each variant
    TrainConfig train;
    std::vector<AblationVariant> variants = default_ablation_variants();
    bool baselines = true;  // persistence and historical average rows
};

struct AblationRow {
    std::string name;
    MetricRow test;
    bool learned = true;
    std::size_t parameters = 0;
    std::size_t best_epoch = 0;
    double seconds = 0.0;
};

struct AblationResult {
    std::vector<AblationRow> rows;  // ascending test MAE
    std::size_t test_samples = 0;
    double seconds = 0.0;

    const AblationRow& row(std::string_view name) const;
};

using AblationProgress = std::function<void(const std::string& variant, const EpochRecord&)>;

/// Trains every variant with the same seed, budget and anchors and scores it
/// on the test split in raw units.
AblationResult run_ablation(const RawSeries& series, const TrafficGraph& graph, const HolidaySet& holidays,
                            const AblationOptions& options, const AblationProgress& progress = {});

nlohmann::json to_json(const AblationResult& result);
/// Ranked plain-text table; the best learned variant is marked.
std::string format_ablation(const AblationResult& result);

}  // namespace embs
