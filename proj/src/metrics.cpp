#include "embsformer/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace embs {

void MetricsAccumulator::Sums::add(double p, double a) {
    const double err = p - a;
    abs += std::abs(err);
    sq += err * err;
    ++count;
    if (a == 0.0) {
        ++masked;
    } else {
        pct += std::abs(err / a);
        ++pct_count;
    }
}

MetricRow MetricsAccumulator::Sums::row() const {
    MetricRow r;
    r.count = count;
    r.masked = masked;
    if (count == 0) throw std::invalid_argument("metrics: no elements");
    const double c = static_cast<double>(count);
    r.mae = abs / c;
    r.rmse = std::sqrt(sq / c);
    r.mape = pct_count ? 100.0 * pct / static_cast<double>(pct_count) : std::numeric_limits<double>::quiet_NaN();
    return r;
}

MetricRow compute_metrics(std::span<const double> predicted, std::span<const double> actual) {
    if (predicted.size() != actual.size()) throw std::invalid_argument("metrics: prediction/target length mismatch");
    if (predicted.empty()) throw std::invalid_argument("metrics: empty input");
    MetricsAccumulator acc(1);
    acc.add(predicted, actual, predicted.size());
    return acc.average();
}

MetricsAccumulator::MetricsAccumulator(std::size_t horizon) : steps_(horizon) {
    if (horizon == 0) throw std::invalid_argument("metrics: horizon must be positive");
}

void MetricsAccumulator::add(std::span<const double> predicted, std::span<const double> actual, std::size_t nodes) {
    if (predicted.size() != actual.size() || predicted.size() != steps_.size() * nodes) {
        throw std::invalid_argument("metrics: expected " + std::to_string(steps_.size()) + "x" + std::to_string(nodes) +
                                    " values, got " + std::to_string(predicted.size()) + " and " +
                                    std::to_string(actual.size()));
    }
    for (std::size_t j = 0; j < steps_.size(); ++j) {
        for (std::size_t i = 0; i < nodes; ++i) {
            const std::size_t k = j * nodes + i;
            steps_[j].add(predicted[k], actual[k]);
            total_.add(predicted[k], actual[k]);
        }
    }
    ++samples_;
}

std::vector<MetricRow> MetricsAccumulator::per_step() const {
    std::vector<MetricRow> out;
    for (const auto& s : steps_) out.push_back(s.row());
    return out;
}

MetricRow MetricsAccumulator::average() const { return total_.row(); }

MetricsReport make_report(const MetricsAccumulator& acc) {
    if (acc.samples() == 0) throw std::invalid_argument("metrics: empty sample set");
    MetricsReport r;
    r.per_step = acc.per_step();
    r.average = acc.average();
    r.samples = acc.samples();
    return r;
}

namespace {

nlohmann::json number_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

double number_from(const nlohmann::json& j) {
    return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

MetricRow row_from_json(const nlohmann::json& j) {
    MetricRow r;
    r.mae = number_from(j.at("mae"));
    r.rmse = number_from(j.at("rmse"));
    r.mape = number_from(j.at("mape"));
    r.count = j.at("count").get<std::size_t>();
    r.masked = j.at("masked_zero_targets").get<std::size_t>();
    return r;
}

}  // namespace

nlohmann::json to_json(const MetricRow& row) {
    return {{"mae", number_or_null(row.mae)},
            {"rmse", number_or_null(row.rmse)},
            {"mape", number_or_null(row.mape)},
            {"count", row.count},
            {"masked_zero_targets", row.masked}};
}

nlohmann::json to_json(const MetricsReport& report) {
    nlohmann::json steps = nlohmann::json::array();
    for (std::size_t j = 0; j < report.per_step.size(); ++j) {
        nlohmann::json row = to_json(report.per_step[j]);
        row["step"] = j + 1;
        steps.push_back(std::move(row));
    }
    return {{"schema", "embsformer.metrics/1"},
            {"horizon", report.per_step.size()},
            {"samples", report.samples},
            {"average", to_json(report.average)},
            {"per_step", std::move(steps)},
            {"metadata",
             {{"split", report.split},
              {"config_hash", report.config_hash},
              {"seed", report.seed},
              {"wall_seconds", report.wall_seconds}}}};
}

MetricsReport report_from_json(const nlohmann::json& j) {
    if (j.value("schema", "") != "embsformer.metrics/1") throw std::invalid_argument("metrics JSON: unknown schema");
    MetricsReport r;
    r.samples = j.at("samples").get<std::size_t>();
    r.average = row_from_json(j.at("average"));
    for (const auto& row : j.at("per_step")) r.per_step.push_back(row_from_json(row));
    if (r.per_step.size() != j.at("horizon").get<std::size_t>()) {
        throw std::invalid_argument("metrics JSON: per_step length differs from horizon");
    }
    const auto& meta = j.at("metadata");
    r.split = meta.at("split").get<std::string>();
    r.config_hash = meta.at("config_hash").get<std::string>();
    r.seed = meta.at("seed").get<std::uint64_t>();
    r.wall_seconds = meta.at("wall_seconds").get<double>();
    return r;
}

std::string format_report(const MetricsReport& report) {
    std::string out = " step        MAE       RMSE    MAPE(%)\n";
    char line[128];
    auto emit = [&](const char* label, const MetricRow& r) {
        std::snprintf(line, sizeof(line), "%5s %10.4f %10.4f %10.4f\n", label, r.mae, r.rmse, r.mape);
        out += line;
    };
    for (std::size_t j = 0; j < report.per_step.size(); ++j) emit(std::to_string(j + 1).c_str(), report.per_step[j]);
    emit("avg", report.average);
    return out;
}

}  // namespace embs
