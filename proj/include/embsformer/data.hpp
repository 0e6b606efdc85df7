#pragma once

#include <array>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "embsformer/graph.hpp"
#include "embsformer/tensor.hpp"

namespace embs {

/// Malformed or unusable input data. Messages cite the offending location.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using TimePoint = std::chrono::sys_time<std::chrono::minutes>;

/// Accepts YYYY-MM-DDTHH:MM[:SS] (a space also separates date and time) and
/// a bare YYYY-MM-DD. Seconds must be zero.
TimePoint parse_timestamp(std::string_view text);
std::string format_timestamp(TimePoint t);
std::chrono::sys_days parse_date(std::string_view text);

/// Readings laid out [T, N, F], feature 0 being flow.
struct RawSeries {
    std::size_t steps = 0;
    std::size_t nodes = 0;
    std::size_t features = 0;
    std::vector<double> values;
    TimePoint start{};
    int step_minutes = 5;

    double at(std::size_t t, std::size_t node, std::size_t feature = 0) const {
        return values[(t * nodes + node) * features + feature];
    }
    TimePoint timestamp(std::size_t t) const {
        return start + std::chrono::minutes(static_cast<long long>(t) * step_minutes);
    }
};

/// `#meta,n_nodes=<N>,n_features=<F>,step_minutes=<s>,start=<ISO-8601>` then one
/// row of N*F node-major values per time step.
RawSeries parse_readings(std::istream& in);
RawSeries load_readings(const std::filesystem::path& path);
void write_readings(const RawSeries& series, std::ostream& out);

/// Edge list `from,to,cost` with a header row and 0-based ids. Duplicates are
/// idempotent, self-loops dropped. An empty list yields an edgeless graph and
/// a warning appended to `warnings`.
TrafficGraph parse_adjacency(std::istream& in, std::size_t n_nodes, bool binarize = true,
                             std::vector<std::string>* warnings = nullptr);
TrafficGraph load_adjacency(const std::filesystem::path& path, std::size_t n_nodes, bool binarize = true,
                            std::vector<std::string>* warnings = nullptr);
void write_adjacency(const TrafficGraph& graph, std::ostream& out);

using HolidaySet = std::set<std::chrono::sys_days>;
/// One YYYY-MM-DD per line; blank lines and `#` comments ignored.
HolidaySet parse_holidays(std::istream& in);
HolidaySet load_holidays(const std::filesystem::path& path);

struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool contains(std::size_t t) const { return t >= begin && t < end; }
    friend bool operator==(const IndexRange&, const IndexRange&) = default;
};

struct SplitRanges {
    IndexRange train, val, test;
};

/// Contiguous train/val/test ranges; the first two take floor(ratio * T) and
/// the test range takes the remainder.
SplitRanges chronological_split(std::size_t total_steps, std::array<double, 3> ratios = {6.0, 2.0, 2.0});

struct NormalizationStats {
    std::vector<double> mean;
    std::vector<double> std;

    double apply(double value, std::size_t feature = 0) const { return (value - mean[feature]) / std[feature]; }
    double invert(double value, std::size_t feature = 0) const { return value * std[feature] + mean[feature]; }
    RawSeries apply(const RawSeries& series) const;
    RawSeries invert(const RawSeries& series) const;

    static NormalizationStats identity(std::size_t features);
};

/// Per-feature mean and population std over `train` only.
NormalizationStats fit_normalizer(const RawSeries& series, IndexRange train);

struct CalendarIndex {
    std::uint16_t minute_of_day = 0;  // [0, 1439]
    std::uint8_t day_of_week = 0;     // 0 = Monday
    std::uint8_t is_holiday = 0;
    friend bool operator==(const CalendarIndex&, const CalendarIndex&) = default;
};

inline constexpr std::size_t kMinutesPerDay = 1440;

CalendarIndex calendar_at(TimePoint t, const HolidaySet& holidays);
std::vector<CalendarIndex> calendar_features(const RawSeries& series, const HolidaySet& holidays = {});

struct WindowSpec {
    std::size_t m = 12;  // recent steps
    std::size_t n = 12;  // horizon
    std::vector<std::size_t> periods;  // lags in steps, ascending, each >= m + n
    /// Drop anchors as if a period of this many steps were present. Lets
    /// variants with different period sets share one anchor set.
    std::size_t min_history = 0;
};

/// One training example anchored at `anchor` (the last observed step).
struct WindowSample {
    std::size_t anchor = 0;
    Tensor recent;                // [m, N, F], steps anchor-m+1 .. anchor
    std::vector<Tensor> periods;  // each [m+n, N, F], ending P_i steps before anchor+n
    Tensor target;                // [n, N], feature 0 of anchor+1 .. anchor+n
    std::vector<CalendarIndex> recent_calendar;
    std::vector<std::vector<CalendarIndex>> period_calendar;
};

/// First step of period branch `lag` for anchor t: t + n - lag - (m + n) + 1.
/// Signed so callers can detect underflow.
inline long long period_window_start(std::size_t anchor, std::size_t m, std::size_t lag) {
    return static_cast<long long>(anchor) - static_cast<long long>(lag) - static_cast<long long>(m) + 1;
}

/// Anchors whose targets lie in `split` and whose every input block lies in
/// the series, ascending.
std::vector<std::size_t> window_anchors(std::size_t total_steps, IndexRange split, const WindowSpec& spec);

WindowSample extract_window(const RawSeries& series, std::span<const CalendarIndex> calendar, std::size_t anchor,
                            const WindowSpec& spec);

/// Throws DataError when the split yields no anchor.
std::vector<WindowSample> make_windows(const RawSeries& series, std::span<const CalendarIndex> calendar,
                                       IndexRange split, const WindowSpec& spec);

// Synthetic periodic traffic.

enum class GraphModel : std::uint8_t { Ring, Grid, Random };
GraphModel parse_graph_model(std::string_view name);
std::string_view to_string(GraphModel model);

struct SynthOptions {
    std::size_t nodes = 20;
    std::size_t days = 30;
    int step_minutes = 5;
    double daily_amplitude = 100.0;
    double weekly_amplitude = 40.0;
    double noise_std = 5.0;
    double coupling = 0.3;  // weight of the neighbour mean
    GraphModel graph = GraphModel::Ring;
    std::uint64_t seed = 0;
    TimePoint start = std::chrono::sys_days{std::chrono::year{2023} / std::chrono::April / 3};  // a Monday
};

struct SyntheticData {
    RawSeries series;  // F = 1
    TrafficGraph graph;
};

/// flow = base + daily profile + weekend modulation, mixed with the neighbour
/// mean, plus Gaussian noise. Deterministic per seed.
SyntheticData synth_generate(const SynthOptions& options);

}  // namespace embs
