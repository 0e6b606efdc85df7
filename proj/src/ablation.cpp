#include "embsformer/ablation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace embs {

std::vector<std::size_t> hours_to_steps(const std::vector<double>& hours, int step_minutes) {
    if (step_minutes <= 0) throw std::invalid_argument("period hours: step_minutes must be positive");
    std::vector<std::size_t> steps;
    for (double h : hours) {
        const double s = h * 60.0 / step_minutes;
        if (!(h > 0.0) || std::abs(s - std::round(s)) > 1e-9) {
            std::ostringstream msg;
            msg << "period of " << h << " h is not a whole number of " << step_minutes << "-minute steps";
            throw std::invalid_argument(msg.str());
        }
        steps.push_back(static_cast<std::size_t>(std::llround(s)));
    }
    return steps;
}

std::vector<AblationVariant> default_ablation_variants() {
    return {{"full", {8, 12, 24, 168}, true},
            {"period(24)", {24}, true},
            {"period(24,168)", {24, 168}, true},
            {"w/o-period", {}, true},
            {"w/o-recent", {8, 12, 24, 168}, false}};
}

const AblationRow& AblationResult::row(std::string_view name) const {
    for (const auto& r : rows) {
        if (r.name == name) return r;
    }
    throw std::out_of_range("ablation: no row named " + std::string(name));
}

AblationResult run_ablation(const RawSeries& series, const TrafficGraph& graph, const HolidaySet& holidays,
                            const AblationOptions& options, const AblationProgress& progress) {
    if (series.features == 0 || series.nodes != graph.num_nodes()) {
        throw std::invalid_argument("ablation: series has " + std::to_string(series.nodes) + " nodes, graph has " +
                                    std::to_string(graph.num_nodes()));
    }
    const auto start = std::chrono::steady_clock::now();
    const ModelConfig& base = options.model;
    const SplitRanges split = chronological_split(series.steps);
    const NormalizationStats norm = fit_normalizer(series, split.train);
    const RawSeries normalized = norm.apply(series);
    const auto calendar = calendar_features(series, holidays);
    const auto basis = std::make_shared<const ChebyshevBasis>(build_basis(graph, base.k_cheb));

    // the longest lag anywhere in the grid fixes the first usable anchor for all
    std::size_t history = 0;
    for (const auto& v : options.variants) {
        for (std::size_t s : hours_to_steps(v.period_hours, series.step_minutes)) history = std::max(history, s);
    }
    const auto windows = [&](const std::vector<std::size_t>& periods, IndexRange range) {
        WindowSpec spec{base.m, base.n, periods, history};
        return make_windows(normalized, calendar, range, spec);
    };

    AblationResult result;
    for (const auto& v : options.variants) {
        const auto v_start = std::chrono::steady_clock::now();
        ModelConfig cfg = base;
        cfg.nodes = series.nodes;
        cfg.features = series.features;
        cfg.periods = hours_to_steps(v.period_hours, series.step_minutes);
        cfg.enable_recent = v.recent;
        cfg.enable_period = !cfg.periods.empty();
        cfg.validate();
        const auto train_set = windows(cfg.periods, split.train);
        const auto val_set = windows(cfg.periods, split.val);
        const auto test_set = windows(cfg.periods, split.test);
        EMBSFormer model(cfg, basis, options.train.seed);
        const TrainResult tr = train(model, train_set, val_set, norm, options.train, [&](const EpochRecord& e) {
            if (progress) progress(v.name, e);
        });
        AblationRow row;
        row.name = v.name;
        row.test = evaluate(model, test_set, norm, options.train.threads).average;
        row.parameters = model.parameter_count();
        row.best_epoch = tr.best_epoch;
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - v_start).count();
        result.test_samples = test_set.size();
        result.rows.push_back(std::move(row));
    }

    if (options.baselines) {
        const auto recent_only = windows({}, split.test);
        AblationRow persistence;
        persistence.name = "persistence";
        persistence.learned = false;
        persistence.test =
            evaluate([&](const WindowSample& s) { return persistence_baseline(s, base.n); }, recent_only, norm).average;
        result.rows.push_back(persistence);

        // same time yesterday and last week, when the step size allows it
        std::vector<std::size_t> ha_lags;
        for (double h : {24.0, 168.0}) {
            const double s = h * 60.0 / series.step_minutes;
            if (std::abs(s - std::round(s)) < 1e-9 && s >= base.m + base.n && static_cast<std::size_t>(s) <= history) {
                ha_lags.push_back(static_cast<std::size_t>(s));
            }
        }
        if (!ha_lags.empty()) {
            const auto with_periods = windows(ha_lags, split.test);
            AblationRow ha;
            ha.name = "historical-average";
            ha.learned = false;
            ha.test = evaluate([&](const WindowSample& s) { return historical_average_baseline(s, base.m, base.n); },
                               with_periods, norm)
                          .average;
            result.rows.push_back(ha);
        }
    }

    std::stable_sort(result.rows.begin(), result.rows.end(),
                     [](const AblationRow& a, const AblationRow& b) { return a.test.mae < b.test.mae; });
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return result;
}

namespace {

const AblationRow* best_learned(const AblationResult& result) {
    for (const auto& r : result.rows) {
        if (r.learned) return &r;
    }
    return nullptr;
}

}  // namespace

nlohmann::json to_json(const AblationResult& result) {
    nlohmann::json rows = nlohmann::json::array();
    const AblationRow* best = best_learned(result);
    std::size_t rank = 1;
    for (const auto& r : result.rows) {
        nlohmann::json j = to_json(r.test);
        j["rank"] = rank++;
        j["variant"] = r.name;
        j["learned"] = r.learned;
        j["best"] = &r == best;
        if (r.learned) {
            j["parameters"] = r.parameters;
            j["best_epoch"] = r.best_epoch;
            j["seconds"] = r.seconds;
        }
        rows.push_back(std::move(j));
    }
    return {{"schema", "embsformer.ablation/1"},
            {"test_samples", result.test_samples},
            {"seconds", result.seconds},
            {"rows", rows}};
}

std::string format_ablation(const AblationResult& result) {
    const AblationRow* best = best_learned(result);
    std::ostringstream out;
    out << std::left << std::setw(5) << "rank" << std::setw(22) << "variant" << std::right << std::setw(10) << "MAE"
        << std::setw(10) << "RMSE" << std::setw(10) << "MAPE%" << std::setw(10) << "params" << std::setw(9) << "secs"
        << "\n";
    std::size_t rank = 1;
    out << std::fixed << std::setprecision(3);
    for (const auto& r : result.rows) {
        const std::string name = r.name + (&r == best ? " *" : "");
        out << std::left << std::setw(5) << rank++ << std::setw(22) << name << std::right << std::setw(10) << r.test.mae
            << std::setw(10) << r.test.rmse << std::setw(10) << r.test.mape;
        if (r.learned) {
            out << std::setw(10) << r.parameters << std::setw(9) << std::setprecision(1) << r.seconds
                << std::setprecision(3);
        }
        out << "\n";
    }
    out << result.test_samples << " test windows, " << std::setprecision(1) << result.seconds << " s total\n";
    return out.str();
}

}  // namespace embs
