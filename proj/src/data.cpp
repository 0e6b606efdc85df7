#include "embsformer/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numbers>
#include <ostream>
#include <sstream>

#include "embsformer/rng.hpp"

namespace embs {

namespace {

using namespace std::chrono;

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
    std::vector<std::string_view> fields;
    std::size_t pos = 0;
    while (true) {
        const std::size_t comma = line.find(',', pos);
        fields.push_back(trim(line.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos)));
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    return fields;
}

template <typename T>
bool parse_number(std::string_view text, T& out) {
    text = trim(text);
    if (!text.empty() && text.front() == '+') text.remove_prefix(1);
    const char* end = text.data() + text.size();
    auto [ptr, ec] = std::from_chars(text.data(), end, out);
    return ec == std::errc() && ptr == end && !text.empty();
}

int parse_field(std::string_view text, std::size_t offset, std::size_t len, std::string_view what) {
    int value = 0;
    if (offset + len > text.size() || !parse_number(text.substr(offset, len), value)) {
        throw DataError("invalid timestamp '" + std::string(text) + "' (" + std::string(what) + ")");
    }
    return value;
}

}  // namespace

// ---------------------------------------------------------------------------
// timestamps

sys_days parse_date(std::string_view text) {
    text = trim(text);
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') {
        throw DataError("invalid date '" + std::string(text) + "', expected YYYY-MM-DD");
    }
    const year_month_day ymd{year{parse_field(text, 0, 4, "year")},
                             month{static_cast<unsigned>(parse_field(text, 5, 2, "month"))},
                             day{static_cast<unsigned>(parse_field(text, 8, 2, "day"))}};
    if (!ymd.ok()) throw DataError("invalid calendar date '" + std::string(text) + "'");
    return sys_days{ymd};
}

TimePoint parse_timestamp(std::string_view text) {
    text = trim(text);
    const sys_days date = parse_date(text.substr(0, std::min<std::size_t>(10, text.size())));
    if (text.size() == 10) return TimePoint{date};
    if (text.size() < 16 || (text[10] != 'T' && text[10] != ' ') || text[13] != ':') {
        throw DataError("invalid timestamp '" + std::string(text) + "', expected YYYY-MM-DDTHH:MM[:SS]");
    }
    const int hh = parse_field(text, 11, 2, "hour");
    const int mm = parse_field(text, 14, 2, "minute");
    int ss = 0;
    if (text.size() > 16) {
        if (text.size() != 19 || text[16] != ':') throw DataError("invalid timestamp '" + std::string(text) + "'");
        ss = parse_field(text, 17, 2, "second");
    }
    if (hh > 23 || mm > 59 || ss != 0) {
        throw DataError("timestamp '" + std::string(text) + "' out of range (seconds must be 0)");
    }
    return TimePoint{date} + hours{hh} + minutes{mm};
}

std::string format_timestamp(TimePoint t) {
    const sys_days date = floor<days>(t);
    const year_month_day ymd{date};
    const auto minute_of_day = (t - date).count();
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%04d-%02u-%02uT%02lld:%02lld:00", static_cast<int>(ymd.year()),
                  static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()),
                  static_cast<long long>(minute_of_day / 60), static_cast<long long>(minute_of_day % 60));
    return buf;
}

// ---------------------------------------------------------------------------
// readings

RawSeries parse_readings(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("readings: empty input, expected #meta header");
    const auto header = split_commas(trim(line));
    if (header.empty() || header.front() != "#meta") {
        throw DataError("readings: first line must start with '#meta', got '" + line + "'");
    }
    std::map<std::string, std::string, std::less<>> meta;
    for (std::size_t i = 1; i < header.size(); ++i) {
        const auto eq = header[i].find('=');
        if (eq == std::string_view::npos) throw DataError("readings: malformed header field '" + std::string(header[i]) + "'");
        meta[std::string(trim(header[i].substr(0, eq)))] = std::string(trim(header[i].substr(eq + 1)));
    }
    auto require = [&](std::string_view key) -> const std::string& {
        auto it = meta.find(key);
        if (it == meta.end()) throw DataError("readings: header is missing '" + std::string(key) + "'");
        return it->second;
    };
    RawSeries series;
    long long nodes = 0, features = 0, step = 0;
    if (!parse_number(require("n_nodes"), nodes) || nodes <= 0) throw DataError("readings: invalid n_nodes");
    if (!parse_number(require("n_features"), features) || features <= 0) throw DataError("readings: invalid n_features");
    if (!parse_number(require("step_minutes"), step) || step <= 0) throw DataError("readings: invalid step_minutes");
    series.nodes = static_cast<std::size_t>(nodes);
    series.features = static_cast<std::size_t>(features);
    series.step_minutes = static_cast<int>(step);
    series.start = parse_timestamp(require("start"));

    const std::size_t width = series.nodes * series.features;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view row = trim(line);
        if (row.empty()) continue;
        const auto fields = split_commas(row);
        if (fields.size() != width) {
            throw DataError("readings: row t=" + std::to_string(series.steps) + " (line " + std::to_string(line_no) +
                            ") has " + std::to_string(fields.size()) + " values, expected " + std::to_string(width));
        }
        for (std::size_t k = 0; k < width; ++k) {
            const std::size_t node = k / series.features;
            const std::size_t feature = k % series.features;
            double v = 0.0;
            if (!parse_number(fields[k], v)) {
                throw DataError("readings: non-numeric value '" + std::string(fields[k]) + "' at t=" +
                                std::to_string(series.steps) + ", node=" + std::to_string(node) +
                                ", feature=" + std::to_string(feature));
            }
            if (!std::isfinite(v)) {
                throw DataError("readings: non-finite value at t=" + std::to_string(series.steps) + ", node=" +
                                std::to_string(node) + ", feature=" + std::to_string(feature));
            }
            series.values.push_back(v);
        }
        ++series.steps;
    }
    if (series.steps == 0) throw DataError("readings: no data rows");
    return series;
}

RawSeries load_readings(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("readings: cannot open " + path.string());
    return parse_readings(in);
}

void write_readings(const RawSeries& series, std::ostream& out) {
    out << "#meta,n_nodes=" << series.nodes << ",n_features=" << series.features
        << ",step_minutes=" << series.step_minutes << ",start=" << format_timestamp(series.start) << '\n';
    const std::size_t width = series.nodes * series.features;
    char buf[64];
    std::string row;
    for (std::size_t t = 0; t < series.steps; ++t) {
        row.clear();
        for (std::size_t k = 0; k < width; ++k) {
            if (k) row.push_back(',');
            auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), series.values[t * width + k]);
            row.append(buf, ptr);
        }
        row.push_back('\n');
        out << row;
    }
}

// ---------------------------------------------------------------------------
// adjacency / holidays

TrafficGraph parse_adjacency(std::istream& in, std::size_t n_nodes, bool binarize, std::vector<std::string>* warnings) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n_nodes), static_cast<Eigen::Index>(n_nodes));
    std::string line;
    std::size_t line_no = 0;
    std::size_t edges = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string_view row = trim(line);
        if (row.empty()) continue;
        const auto fields = split_commas(row);
        long long from = 0, to = 0;
        double cost = 1.0;
        if (line_no == 1 && !parse_number(fields[0], from)) continue;  // header
        if (fields.size() < 2 || fields.size() > 3) {
            throw DataError("adjacency: line " + std::to_string(line_no) + " must be from,to[,cost]");
        }
        if (!parse_number(fields[0], from) || !parse_number(fields[1], to) ||
            (fields.size() == 3 && !parse_number(fields[2], cost))) {
            throw DataError("adjacency: non-numeric field on line " + std::to_string(line_no) + ": '" + line + "'");
        }
        if (from < 0 || to < 0 || static_cast<std::size_t>(from) >= n_nodes || static_cast<std::size_t>(to) >= n_nodes) {
            throw DataError("adjacency: node id out of range on line " + std::to_string(line_no) + " (n_nodes=" +
                            std::to_string(n_nodes) + ")");
        }
        if (cost < 0.0) throw DataError("adjacency: negative cost on line " + std::to_string(line_no));
        if (from == to) continue;
        const double w = binarize ? 1.0 : cost;
        a(from, to) = std::max(a(from, to), w);
        a(to, from) = std::max(a(to, from), w);
        ++edges;
    }
    if (edges == 0 && warnings) warnings->push_back("adjacency: no edges found; graph has no connections");
    return TrafficGraph(std::move(a), binarize);
}

TrafficGraph load_adjacency(const std::filesystem::path& path, std::size_t n_nodes, bool binarize,
                            std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw DataError("adjacency: cannot open " + path.string());
    return parse_adjacency(in, n_nodes, binarize, warnings);
}

void write_adjacency(const TrafficGraph& graph, std::ostream& out) {
    out << "from,to,cost\n";
    const auto& a = graph.adjacency();
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
        for (Eigen::Index j = i + 1; j < a.cols(); ++j) {
            if (a(i, j) > 0.0) out << i << ',' << j << ',' << a(i, j) << '\n';
        }
    }
}

HolidaySet parse_holidays(std::istream& in) {
    HolidaySet out;
    std::string line;
    while (std::getline(in, line)) {
        const std::string_view row = trim(line);
        if (row.empty() || row.front() == '#') continue;
        out.insert(parse_date(row));
    }
    return out;
}

HolidaySet load_holidays(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("holidays: cannot open " + path.string());
    return parse_holidays(in);
}

// ---------------------------------------------------------------------------
// split / normalization / calendar

SplitRanges chronological_split(std::size_t total_steps, std::array<double, 3> ratios) {
    if (total_steps < 10) {
        throw DataError("chronological_split: need at least 10 steps, got " + std::to_string(total_steps));
    }
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (!(ratios[0] > 0 && ratios[1] > 0 && ratios[2] > 0)) throw DataError("chronological_split: ratios must be positive");
    // Rounding guard: 0.6 * 100 must give 60, not 59.
    auto portion = [&](double r) {
        return static_cast<std::size_t>(std::floor(static_cast<double>(total_steps) * r / sum + 1e-9));
    };
    const std::size_t train = portion(ratios[0]);
    const std::size_t val = portion(ratios[1]);
    return {{0, train}, {train, train + val}, {train + val, total_steps}};
}

RawSeries NormalizationStats::apply(const RawSeries& series) const {
    RawSeries out = series;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const std::size_t f = i % out.features;
        out.values[i] = (out.values[i] - mean[f]) / std[f];
    }
    return out;
}

RawSeries NormalizationStats::invert(const RawSeries& series) const {
    RawSeries out = series;
    for (std::size_t i = 0; i < out.values.size(); ++i) {
        const std::size_t f = i % out.features;
        out.values[i] = out.values[i] * std[f] + mean[f];
    }
    return out;
}

NormalizationStats NormalizationStats::identity(std::size_t features) {
    return {std::vector<double>(features, 0.0), std::vector<double>(features, 1.0)};
}

NormalizationStats fit_normalizer(const RawSeries& series, IndexRange train) {
    if (train.size() == 0 || train.end > series.steps) throw DataError("fit_normalizer: invalid training range");
    NormalizationStats stats;
    stats.mean.assign(series.features, 0.0);
    stats.std.assign(series.features, 0.0);
    const double count = static_cast<double>(train.size() * series.nodes);
    for (std::size_t t = train.begin; t < train.end; ++t) {
        for (std::size_t node = 0; node < series.nodes; ++node) {
            for (std::size_t f = 0; f < series.features; ++f) stats.mean[f] += series.at(t, node, f);
        }
    }
    for (double& m : stats.mean) m /= count;
    for (std::size_t t = train.begin; t < train.end; ++t) {
        for (std::size_t node = 0; node < series.nodes; ++node) {
            for (std::size_t f = 0; f < series.features; ++f) {
                const double d = series.at(t, node, f) - stats.mean[f];
                stats.std[f] += d * d;
            }
        }
    }
    for (std::size_t f = 0; f < series.features; ++f) {
        stats.std[f] = std::sqrt(stats.std[f] / count);
        if (!(stats.std[f] > 1e-12)) {
            throw DataError("fit_normalizer: feature " + std::to_string(f) + " is constant over the training range");
        }
    }
    return stats;
}

CalendarIndex calendar_at(TimePoint t, const HolidaySet& holidays) {
    const sys_days date = floor<days>(t);
    CalendarIndex c;
    c.minute_of_day = static_cast<std::uint16_t>((t - date).count());
    c.day_of_week = static_cast<std::uint8_t>(weekday{date}.iso_encoding() - 1);
    c.is_holiday = holidays.count(date) ? 1 : 0;
    return c;
}

std::vector<CalendarIndex> calendar_features(const RawSeries& series, const HolidaySet& holidays) {
    std::vector<CalendarIndex> out(series.steps);
    for (std::size_t t = 0; t < series.steps; ++t) out[t] = calendar_at(series.timestamp(t), holidays);
    return out;
}

// ---------------------------------------------------------------------------
// windows

namespace {

void validate_spec(const WindowSpec& spec) {
    if (spec.m == 0 || spec.n == 0) throw std::invalid_argument("window spec: m and n must be positive");
    for (std::size_t i = 0; i < spec.periods.size(); ++i) {
        if (spec.periods[i] < spec.m + spec.n) {
            throw std::invalid_argument("window spec: period " + std::to_string(spec.periods[i]) +
                                        " is shorter than m+n=" + std::to_string(spec.m + spec.n));
        }
        if (i > 0 && spec.periods[i] <= spec.periods[i - 1]) {
            throw std::invalid_argument("window spec: periods must be strictly ascending");
        }
    }
}

}  // namespace

std::vector<std::size_t> window_anchors(std::size_t total_steps, IndexRange split, const WindowSpec& spec) {
    validate_spec(spec);
    std::size_t history = spec.min_history;
    if (!spec.periods.empty()) history = std::max(history, spec.periods.back());
    // recent needs t >= m-1; the longest period needs t - lag - m + 1 >= 0
    std::size_t first = spec.m - 1 + history;
    if (split.begin > 0) first = std::max(first, split.begin - 1);
    const std::size_t end = std::min(split.end, total_steps);
    std::vector<std::size_t> anchors;
    for (std::size_t t = first; t + spec.n < end; ++t) anchors.push_back(t);
    return anchors;
}

WindowSample extract_window(const RawSeries& series, std::span<const CalendarIndex> calendar, std::size_t anchor,
                            const WindowSpec& spec) {
    validate_spec(spec);
    const std::size_t N = series.nodes;
    const std::size_t F = series.features;
    const std::size_t row = N * F;
    if (calendar.size() != series.steps) throw DataError("extract_window: calendar length differs from series");
    auto block = [&](long long start, std::size_t length) {
        if (start < 0 || static_cast<std::size_t>(start) + length > series.steps) {
            throw DataError("extract_window: block [" + std::to_string(start) + ", " +
                            std::to_string(start + static_cast<long long>(length)) + ") outside the series");
        }
        const auto s = static_cast<std::size_t>(start);
        std::vector<double> values(series.values.begin() + static_cast<std::ptrdiff_t>(s * row),
                                   series.values.begin() + static_cast<std::ptrdiff_t>((s + length) * row));
        return Tensor({length, N, F}, std::move(values));
    };
    auto cal = [&](long long start, std::size_t length) {
        const auto s = static_cast<std::size_t>(start);
        return std::vector<CalendarIndex>(calendar.begin() + static_cast<std::ptrdiff_t>(s),
                                          calendar.begin() + static_cast<std::ptrdiff_t>(s + length));
    };

    WindowSample sample;
    sample.anchor = anchor;
    const long long recent_start = static_cast<long long>(anchor) - static_cast<long long>(spec.m) + 1;
    sample.recent = block(recent_start, spec.m);
    sample.recent_calendar = cal(recent_start, spec.m);
    for (std::size_t lag : spec.periods) {
        const long long start = period_window_start(anchor, spec.m, lag);
        sample.periods.push_back(block(start, spec.m + spec.n));
        sample.period_calendar.push_back(cal(start, spec.m + spec.n));
    }
    if (anchor + spec.n >= series.steps) throw DataError("extract_window: target runs past the series end");
    std::vector<double> target(spec.n * N);
    for (std::size_t j = 0; j < spec.n; ++j) {
        for (std::size_t node = 0; node < N; ++node) target[j * N + node] = series.at(anchor + 1 + j, node, 0);
    }
    sample.target = Tensor({spec.n, N}, std::move(target));
    return sample;
}

std::vector<WindowSample> make_windows(const RawSeries& series, std::span<const CalendarIndex> calendar,
                                       IndexRange split, const WindowSpec& spec) {
    const auto anchors = window_anchors(series.steps, split, spec);
    if (anchors.empty()) {
        throw DataError("make_windows: no valid anchors in [" + std::to_string(split.begin) + ", " +
                        std::to_string(split.end) + ") for m=" + std::to_string(spec.m) + ", n=" +
                        std::to_string(spec.n));
    }
    std::vector<WindowSample> out;
    out.reserve(anchors.size());
    for (std::size_t t : anchors) out.push_back(extract_window(series, calendar, t, spec));
    return out;
}

// ---------------------------------------------------------------------------
// synthetic data

GraphModel parse_graph_model(std::string_view name) {
    if (name == "ring") return GraphModel::Ring;
    if (name == "grid") return GraphModel::Grid;
    if (name == "random") return GraphModel::Random;
    throw std::invalid_argument("unknown graph model '" + std::string(name) + "' (ring|grid|random)");
}

std::string_view to_string(GraphModel model) {
    switch (model) {
        case GraphModel::Ring: return "ring";
        case GraphModel::Grid: return "grid";
        case GraphModel::Random: return "random";
    }
    return "?";
}

namespace {

TrafficGraph synth_graph(std::size_t n, GraphModel model, CounterRng& rng) {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
    auto link = [&](std::size_t i, std::size_t j) {
        if (i == j) return;
        a(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = 1.0;
        a(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = 1.0;
    };
    switch (model) {
        case GraphModel::Ring:
            for (std::size_t i = 0; i + 1 < n; ++i) link(i, i + 1);
            if (n > 2) link(n - 1, 0);
            for (std::size_t i = 0; i < n; ++i) {
                if (rng.uniform() < 0.15) link(i, rng.below(n));
            }
            break;
        case GraphModel::Grid: {
            const auto cols = static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(n))));
            for (std::size_t i = 0; i < n; ++i) {
                if ((i + 1) % cols != 0 && i + 1 < n) link(i, i + 1);
                if (i + cols < n) link(i, i + cols);
            }
            break;
        }
        case GraphModel::Random: {
            // two nearest neighbours of uniform points in the unit square
            std::vector<std::pair<double, double>> pts(n);
            for (auto& p : pts) p = {rng.uniform(), rng.uniform()};
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<std::pair<double, std::size_t>> dist;
                for (std::size_t j = 0; j < n; ++j) {
                    if (j == i) continue;
                    const double dx = pts[i].first - pts[j].first;
                    const double dy = pts[i].second - pts[j].second;
                    dist.emplace_back(dx * dx + dy * dy, j);
                }
                std::sort(dist.begin(), dist.end());
                for (std::size_t k = 0; k < std::min<std::size_t>(2, dist.size()); ++k) link(i, dist[k].second);
            }
            break;
        }
    }
    return TrafficGraph(std::move(a));
}

}  // namespace

SyntheticData synth_generate(const SynthOptions& o) {
    if (o.nodes == 0 || o.days == 0) throw std::invalid_argument("synth: nodes and days must be positive");
    if (o.step_minutes <= 0 || kMinutesPerDay % static_cast<std::size_t>(o.step_minutes) != 0) {
        throw std::invalid_argument("synth: step_minutes must divide 1440");
    }
    if (o.weekly_amplitude != 0.0 && o.days < 15) {
        throw std::invalid_argument("synth: a weekly component needs at least 15 days");
    }
    CounterRng rng(o.seed, 1);
    SyntheticData out;
    out.graph = synth_graph(o.nodes, o.graph, rng);

    const std::size_t per_day = kMinutesPerDay / static_cast<std::size_t>(o.step_minutes);
    const std::size_t steps = o.days * per_day;
    struct NodeShape {
        double base, scale, phase, phase2;
    };
    std::vector<NodeShape> shapes(o.nodes);
    for (auto& s : shapes) {
        s.scale = rng.uniform(0.7, 1.3);
        s.phase = rng.uniform(-0.4, 0.4);
        s.phase2 = rng.uniform(-0.6, 0.6);
        s.base = 50.0 + 2.0 * (o.daily_amplitude + o.weekly_amplitude) * rng.uniform(1.0, 1.5) + 5.0 * o.noise_std;
    }

    const double two_pi = 2.0 * std::numbers::pi;
    std::vector<double> clean(steps * o.nodes);
    for (std::size_t t = 0; t < steps; ++t) {
        const TimePoint when = o.start + std::chrono::minutes(static_cast<long long>(t) * o.step_minutes);
        const CalendarIndex cal = calendar_at(when, {});
        const double tau = static_cast<double>(cal.minute_of_day) / static_cast<double>(kMinutesPerDay);
        const bool weekend = cal.day_of_week >= 5;
        for (std::size_t i = 0; i < o.nodes; ++i) {
            const NodeShape& s = shapes[i];
            const double profile = -std::cos(two_pi * tau + s.phase) + 0.35 * std::sin(2.0 * two_pi * tau + s.phase2);
            double v = s.base + o.daily_amplitude * s.scale * profile;
            if (weekend) v -= o.weekly_amplitude * s.scale * 0.5 * (1.0 + profile);
            clean[t * o.nodes + i] = v;
        }
    }

    // neighbour mixing
    const auto& adj = out.graph.adjacency();
    RawSeries& series = out.series;
    series.steps = steps;
    series.nodes = o.nodes;
    series.features = 1;
    series.step_minutes = o.step_minutes;
    series.start = o.start;
    series.values.assign(steps * o.nodes, 0.0);
    CounterRng noise(o.seed, 2);
    for (std::size_t t = 0; t < steps; ++t) {
        const double* row = clean.data() + t * o.nodes;
        for (std::size_t i = 0; i < o.nodes; ++i) {
            double neighbour = 0.0;
            double count = 0.0;
            for (std::size_t j = 0; j < o.nodes; ++j) {
                if (adj(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) > 0.0) {
                    neighbour += row[j];
                    count += 1.0;
                }
            }
            double v = row[i];
            if (count > 0.0) v = (1.0 - o.coupling) * row[i] + o.coupling * neighbour / count;
            if (o.noise_std > 0.0) v += o.noise_std * noise.normal();
            series.values[t * o.nodes + i] = v;
        }
    }
    return out;
}

}  // namespace embs
