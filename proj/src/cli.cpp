#include "embsformer/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "embsformer/checkpoint.hpp"
#include "embsformer/gradcheck.hpp"
#include "embsformer/metrics.hpp"

namespace embs {

namespace fs = std::filesystem;

namespace {

// Every recognized key with its default. Commands adjust a few values.
const std::vector<std::pair<std::string, std::string>>& key_table() {
    static const std::vector<std::pair<std::string, std::string>> table{
        {"seed", "0"},
        {"threads", "1"},
        {"out", "runs"},
        {"readings", ""},
        {"adjacency", ""},
        {"holidays", ""},
        {"checkpoint", ""},
        {"split", "test"},
        {"anchor_from", ""},
        {"anchor_count", ""},
        {"horizon", "short"},
        {"m", ""},
        {"n", ""},
        {"d_e", "16"},
        {"d_s", "16"},
        {"d_t", "16"},
        {"h_prime", "16"},
        {"k_cheb", "3"},
        {"blocks", "1"},
        {"periods", "24,168"},
        {"enable_recent", "true"},
        {"enable_period", "true"},
        {"learning_rate", "0.001"},
        {"batch_size", "16"},
        {"epochs", "100"},
        {"clip_norm", "0"},
        {"nodes", "20"},
        {"days", "30"},
        {"step_minutes", "5"},
        {"daily_amplitude", "100"},
        {"weekly_amplitude", "40"},
        {"noise_std", "5"},
        {"coupling", "0.3"},
        {"graph", "ring"},
    };
    return table;
}

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_list(std::string_view s) {
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= s.size()) {
        const auto comma = s.find(',', pos);
        const auto end = comma == std::string_view::npos ? s.size() : comma;
        const std::string item = trim(s.substr(pos, end - pos));
        if (!item.empty()) out.push_back(item);
        if (comma == std::string_view::npos) break;
        pos = comma + 1;
    }
    return out;
}

template <typename T>
T parse_as(std::string_view key, const std::string& text) {
    T value{};
    const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
        throw std::invalid_argument("config: " + std::string(key) + " = '" + text + "' is not a valid number");
    }
    return value;
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, std::string_view content) {
    if (fs::exists(path)) throw std::runtime_error("refusing to overwrite " + path.string());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << content;
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string format_number(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

}  // namespace

// ---------------------------------------------------------------------------
// RunConfig

RunConfig RunConfig::defaults(std::string_view command) {
    RunConfig c;
    for (const auto& [k, v] : key_table()) c.values_[k] = v;
    if (command == "ablation") {
        c.values_["nodes"] = "15";
        c.values_["step_minutes"] = "15";
        c.values_["noise_std"] = "10";
        c.values_["d_e"] = c.values_["d_s"] = c.values_["d_t"] = c.values_["h_prime"] = "8";
        c.values_["epochs"] = "10";
    }
    return c;
}

void RunConfig::merge_text(std::string_view text, std::string_view origin) {
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        auto end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        if (trim(line).empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw std::invalid_argument(std::string(origin) + ":" + std::to_string(line_no) + ": expected 'key = value'");
        }
        try {
            set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument(std::string(origin) + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
}

void RunConfig::merge_file(const fs::path& path) { merge_text(read_file(path), path.string()); }

void RunConfig::set(std::string_view key, std::string value) {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
    it->second = std::move(value);
}

void RunConfig::set_assignment(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw std::invalid_argument("--set expects key=value, got '" + std::string(assignment) + "'");
    set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

bool RunConfig::has(std::string_view key) const {
    const auto it = values_.find(key);
    return it != values_.end() && !it->second.empty();
}

const std::string& RunConfig::get(std::string_view key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw std::invalid_argument("unknown config key '" + std::string(key) + "'");
    return it->second;
}

std::string RunConfig::text() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
}

std::uint64_t RunConfig::get_u64(std::string_view key) const { return parse_as<std::uint64_t>(key, get(key)); }
std::size_t RunConfig::get_size(std::string_view key) const { return parse_as<std::size_t>(key, get(key)); }
double RunConfig::get_double(std::string_view key) const { return parse_as<double>(key, get(key)); }

bool RunConfig::get_bool(std::string_view key) const {
    const std::string& v = get(key);
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw std::invalid_argument("config: " + std::string(key) + " = '" + v + "' is not a boolean");
}

std::vector<double> RunConfig::get_doubles(std::string_view key) const {
    std::vector<double> out;
    for (const auto& item : split_list(get(key))) out.push_back(parse_as<double>(key, item));
    return out;
}

ModelConfig model_config_from(const RunConfig& config, const RawSeries& series) {
    ModelConfig c;
    const std::string& horizon = config.get("horizon");
    if (horizon == "short") {
        c.m = c.n = 12;
    } else if (horizon == "long") {
        c.m = c.n = 36;
    } else {
        throw std::invalid_argument("config: horizon must be 'short' or 'long', got '" + horizon + "'");
    }
    if (config.has("m")) c.m = config.get_size("m");
    if (config.has("n")) c.n = config.get_size("n");
    c.nodes = series.nodes;
    c.features = series.features;
    c.d_e = config.get_size("d_e");
    c.d_s = config.get_size("d_s");
    c.d_t = config.get_size("d_t");
    c.h_prime = config.get_size("h_prime");
    c.k_cheb = config.get_size("k_cheb");
    c.blocks = config.get_size("blocks");
    c.enable_recent = config.get_bool("enable_recent");
    c.enable_period = config.get_bool("enable_period");
    if (c.enable_period) c.periods = hours_to_steps(config.get_doubles("periods"), series.step_minutes);
    c.validate();
    return c;
}

TrainConfig train_config_from(const RunConfig& config) {
    TrainConfig t;
    t.learning_rate = config.get_double("learning_rate");
    t.batch_size = config.get_size("batch_size");
    t.epochs = config.get_size("epochs");
    t.clip_norm = config.get_double("clip_norm");
    t.seed = config.get_u64("seed");
    t.threads = config.get_size("threads");
    t.validate();
    return t;
}

SynthOptions synth_options_from(const RunConfig& config) {
    SynthOptions o;
    o.nodes = config.get_size("nodes");
    o.days = config.get_size("days");
    o.step_minutes = static_cast<int>(config.get_size("step_minutes"));
    o.daily_amplitude = config.get_double("daily_amplitude");
    o.weekly_amplitude = config.get_double("weekly_amplitude");
    o.noise_std = config.get_double("noise_std");
    o.coupling = config.get_double("coupling");
    o.graph = parse_graph_model(config.get("graph"));
    o.seed = config.get_u64("seed");
    return o;
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : bytes) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    std::ostringstream out;
    out << std::hex << std::setw(16) << std::setfill('0') << h;
    return out.str();
}

std::string dataset_hash(const RunConfig& config) {
    std::string all;
    for (const char* key : {"readings", "adjacency", "holidays"}) {
        all += key;
        all += '\0';
        if (config.has(key)) all += read_file(config.get(key));
        all += '\0';
    }
    return fnv1a_hex(all);
}

fs::path create_run_dir(const fs::path& out, std::string_view prefix) {
    fs::create_directories(out);
    const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm utc{};
    gmtime_r(&now, &utc);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%d-%H%M%S", &utc);
    const std::string base = std::string(prefix) + "-" + stamp;
    for (int k = 1;; ++k) {
        const fs::path candidate = out / (k == 1 ? base : base + "-" + std::to_string(k));
        if (fs::create_directory(candidate)) return candidate;
    }
}

// ---------------------------------------------------------------------------
// commands

namespace {

struct Dataset {
    RawSeries series;
    TrafficGraph graph;
    HolidaySet holidays;
};

Dataset load_dataset(const RunConfig& config, std::ostream& err) {
    if (!config.has("readings")) throw std::invalid_argument("no readings file given (--readings or readings = ...)");
    if (!config.has("adjacency")) throw std::invalid_argument("no adjacency file given (--adjacency or adjacency = ...)");
    Dataset d;
    d.series = load_readings(config.get("readings"));
    std::vector<std::string> warnings;
    d.graph = load_adjacency(config.get("adjacency"), d.series.nodes, true, &warnings);
    for (const auto& w : warnings) err << "warning: " << w << "\n";
    if (config.has("holidays")) d.holidays = load_holidays(config.get("holidays"));
    return d;
}

IndexRange split_range(const SplitRanges& split, const std::string& name) {
    if (name == "train") return split.train;
    if (name == "val") return split.val;
    if (name == "test") return split.test;
    throw std::invalid_argument("split must be train, val or test, got '" + name + "'");
}

std::string run_json(std::string_view command, const RunConfig& config, std::string_view config_hash,
                     const nlohmann::json& extra = nlohmann::json::object()) {
    nlohmann::json j{{"command", command},
                     {"seed", config.get_u64("seed")},
                     {"threads", config.get_size("threads")},
                     {"config_hash", config_hash},
                     {"dataset_hash", dataset_hash(config)}};
    j.update(extra);
    return j.dump(2) + "\n";
}

int cmd_synth(const RunConfig& config, std::ostream& out) {
    const SynthOptions o = synth_options_from(config);
    const SyntheticData data = synth_generate(o);
    const fs::path dir = config.get("out");
    fs::create_directories(dir);
    std::ostringstream readings, adjacency;
    write_readings(data.series, readings);
    write_adjacency(data.graph, adjacency);
    write_file(dir / "readings.csv", readings.str());
    write_file(dir / "adjacency.csv", adjacency.str());
    write_file(dir / "config.txt", config.text());
    out << "wrote " << (dir / "readings.csv").string() << " and " << (dir / "adjacency.csv").string() << "\n";
    out << "T = " << data.series.steps << ", N = " << data.series.nodes << ", F = " << data.series.features
        << ", edges = " << data.graph.num_edges() << "\n";
    return 0;
}

int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    const Dataset d = load_dataset(config, err);
    const ModelConfig mc = model_config_from(config, d.series);
    const TrainConfig tc = train_config_from(config);

    const SplitRanges split = chronological_split(d.series.steps);
    const NormalizationStats norm = fit_normalizer(d.series, split.train);
    const RawSeries normalized = norm.apply(d.series);
    const auto calendar = calendar_features(d.series, d.holidays);
    const WindowSpec spec{mc.m, mc.n, mc.branch_count() ? mc.periods : std::vector<std::size_t>{}, 0};
    const auto train_set = make_windows(normalized, calendar, split.train, spec);
    const auto val_set = make_windows(normalized, calendar, split.val, spec);
    const auto test_set = make_windows(normalized, calendar, split.test, spec);
    const auto basis = std::make_shared<const ChebyshevBasis>(build_basis(d.graph, mc.k_cheb));
    EMBSFormer model(mc, basis, tc.seed);
    out << "training " << model.parameter_count() << " parameters on " << train_set.size() << " windows ("
        << val_set.size() << " val, " << test_set.size() << " test), m = " << mc.m << ", n = " << mc.n << ", "
        << mc.branch_count() << " period branch(es)\n";

    const TrainResult result = train(model, train_set, val_set, norm, tc, [&](const EpochRecord& e) {
        out << "epoch " << e.epoch << "  train_loss " << format_number(e.train_loss) << "  val_mae "
            << format_number(e.val_mae) << "\n";
    });

    const std::string config_text = config.text();
    const std::string config_hash = fnv1a_hex(config_text);
    MetricsReport report = evaluate(model, test_set, norm, tc.threads);
    report.split = "test";
    report.config_hash = config_hash;
    report.seed = tc.seed;
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const fs::path dir = create_run_dir(config.get("out"), "train");
    write_file(dir / "config.txt", config_text);
    std::ostringstream ckpt, trace;
    write_checkpoint(model, norm, ckpt);
    write_file(dir / "checkpoint.embs", ckpt.str());
    write_loss_trace(result.trace, trace);
    write_file(dir / "loss_trace.csv", trace.str());
    write_file(dir / "metrics.json", to_json(report).dump(2) + "\n");
    write_file(dir / "run.json", run_json("train", config, config_hash,
                                          {{"best_epoch", result.best_epoch}, {"best_val_mae", result.best_val_mae}}));
    out << "best epoch " << result.best_epoch << " (val MAE " << format_number(result.best_val_mae) << ")\n";
    out << format_report(report);
    out << "run directory: " << dir.string() << "\n";
    return 0;
}

struct LoadedModel {
    Checkpoint checkpoint;
    std::optional<EMBSFormer> model;
    RawSeries normalized;
    std::vector<CalendarIndex> calendar;
    WindowSpec spec;
};

LoadedModel load_model(const RunConfig& config, const Dataset& d) {
    if (!config.has("checkpoint")) throw std::invalid_argument("no checkpoint given (--checkpoint)");
    LoadedModel lm;
    lm.checkpoint = load_checkpoint(config.get("checkpoint"));
    const ModelConfig& mc = lm.checkpoint.config;
    if (mc.nodes != d.series.nodes || mc.features != d.series.features) {
        throw CheckpointError("checkpoint was trained on N = " + std::to_string(mc.nodes) + ", F = " +
                              std::to_string(mc.features) + " but the dataset has N = " +
                              std::to_string(d.series.nodes) + ", F = " + std::to_string(d.series.features));
    }
    lm.model.emplace(instantiate(lm.checkpoint, std::make_shared<const ChebyshevBasis>(build_basis(d.graph, mc.k_cheb))));
    lm.normalized = lm.checkpoint.normalizer.apply(d.series);
    lm.calendar = calendar_features(d.series, d.holidays);
    lm.spec = WindowSpec{mc.m, mc.n, mc.branch_count() ? mc.periods : std::vector<std::size_t>{}, 0};
    return lm;
}

int cmd_evaluate(const RunConfig& config, std::ostream& out, std::ostream& err) {
    const auto start = std::chrono::steady_clock::now();
    const Dataset d = load_dataset(config, err);
    const LoadedModel lm = load_model(config, d);
    const std::string split_name = config.get("split");
    const IndexRange range = split_range(chronological_split(d.series.steps), split_name);
    const auto samples = make_windows(lm.normalized, lm.calendar, range, lm.spec);
    const std::string config_text = config.text();
    MetricsReport report = evaluate(*lm.model, samples, lm.checkpoint.normalizer, config.get_size("threads"));
    report.split = split_name;
    report.config_hash = fnv1a_hex(config_text);
    report.seed = config.get_u64("seed");
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

    const fs::path dir = create_run_dir(config.get("out"), "evaluate");
    write_file(dir / "config.txt", config_text);
    write_file(dir / "metrics.json", to_json(report).dump(2) + "\n");
    write_file(dir / "run.json", run_json("evaluate", config, report.config_hash));
    out << format_report(report);
    out << "metrics: " << (dir / "metrics.json").string() << "\n";
    return 0;
}

int cmd_predict(const RunConfig& config, std::ostream& out, std::ostream& err) {
    const Dataset d = load_dataset(config, err);
    const LoadedModel lm = load_model(config, d);
    const std::size_t T = d.series.steps;
    std::vector<std::size_t> anchors;
    if (config.has("anchor_from")) {
        const std::size_t from = config.get_size("anchor_from");
        const std::size_t count = config.has("anchor_count") ? config.get_size("anchor_count") : 1;
        const auto valid = window_anchors(T, IndexRange{0, T}, lm.spec);
        for (std::size_t a = from; a < from + count; ++a) {
            if (!std::binary_search(valid.begin(), valid.end(), a)) {
                const std::string span = valid.empty() ? std::string("none")
                                                       : std::to_string(valid.front()) + ".." + std::to_string(valid.back());
                throw std::out_of_range("anchor " + std::to_string(a) + " is out of range (valid anchors: " + span + ")");
            }
            anchors.push_back(a);
        }
    } else {
        anchors = window_anchors(T, split_range(chronological_split(T), config.get("split")), lm.spec);
    }
    if (anchors.empty()) throw std::out_of_range("no anchors to predict");

    const ModelConfig& mc = lm.checkpoint.config;
    std::ostringstream csv;
    csv << "anchor_timestamp,node,step,predicted,actual\n";
    for (std::size_t a : anchors) {
        const WindowSample s = extract_window(lm.normalized, lm.calendar, a, lm.spec);
        const Tensor y = lm.model->forward(s);
        const std::string stamp = format_timestamp(d.series.timestamp(a));
        for (std::size_t i = 0; i < mc.nodes; ++i) {
            for (std::size_t j = 0; j < mc.n; ++j) {
                csv << stamp << ',' << i << ',' << j + 1 << ','
                    << format_number(lm.checkpoint.normalizer.invert(y.at({j, i}), 0)) << ','
                    << format_number(d.series.at(a + 1 + j, i, 0)) << '\n';
            }
        }
    }
    const fs::path dir = create_run_dir(config.get("out"), "predict");
    write_file(dir / "config.txt", config.text());
    write_file(dir / "predictions.csv", csv.str());
    out << anchors.size() << " anchor(s), " << anchors.size() * mc.nodes * mc.n << " rows: "
        << (dir / "predictions.csv").string() << "\n";
    return 0;
}

int cmd_gradcheck(const RunConfig& config, std::ostream& out) {
    const auto start = std::chrono::steady_clock::now();
    const auto cases = default_gradcheck_suite(config.get_u64("seed"));
    const auto outcomes = run_gradchecks(cases);
    std::size_t failed = 0, ops = 0;
    for (const auto& o : outcomes) {
        if (o.name.rfind("op.", 0) == 0) ++ops;
        out << std::left << std::setw(28) << o.name << std::right << std::setw(12) << std::scientific
            << std::setprecision(3) << o.max_rel_error << "  " << (o.passed ? "PASS" : "FAIL");
        if (!o.error.empty()) out << "  " << o.error;
        out << "\n";
        failed += o.passed ? 0 : 1;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << std::defaultfloat << outcomes.size() << " checks (" << ops << " ops), " << failed << " failed, tolerance 1e-4, "
        << std::fixed << std::setprecision(2) << secs << " s\n";
    return failed == 0 ? 0 : 1;
}

int cmd_ablation(const RunConfig& config, std::ostream& out, std::ostream& err) {
    Dataset d;
    if (config.has("readings")) {
        d = load_dataset(config, err);
    } else {
        const SyntheticData s = synth_generate(synth_options_from(config));
        d.series = s.series;
        d.graph = s.graph;
        out << "synthetic data: T = " << d.series.steps << ", N = " << d.series.nodes << ", step "
            << d.series.step_minutes << " min\n";
    }
    AblationOptions options;
    RunConfig model_keys = config;
    model_keys.set("enable_period", "false");  // periods come from the variants
    options.model = model_config_from(model_keys, d.series);
    options.train = train_config_from(config);
    const AblationResult result = run_ablation(d.series, d.graph, d.holidays, options, [&](const std::string& v, const EpochRecord& e) {
        out << v << " epoch " << e.epoch << "  train_loss " << format_number(e.train_loss) << "  val_mae "
            << format_number(e.val_mae) << "\n";
    });
    const std::string table = format_ablation(result);
    const std::string config_text = config.text();
    const fs::path dir = create_run_dir(config.get("out"), "ablation");
    write_file(dir / "config.txt", config_text);
    write_file(dir / "ablation.txt", table);
    write_file(dir / "ablation.json", to_json(result).dump(2) + "\n");
    write_file(dir / "run.json", run_json("ablation", config, fnv1a_hex(config_text)));
    out << table << "run directory: " << dir.string() << "\n";
    return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"EMBSFormer traffic forecasting"};
    app.require_subcommand(1);
    std::string config_path;
    std::map<std::string, std::string> flags;
    std::vector<std::string> assignments;
    const auto flag = [&](CLI::App* on, const std::string& name, const std::string& key, const std::string& help) {
        on->add_option_function<std::string>(name, [&flags, key](const std::string& v) { flags[key] = v; }, help);
    };
    app.add_option("--config", config_path, "flat key = value config file");
    flag(&app, "--seed", "seed", "random seed (default 0)");
    flag(&app, "--out", "out", "output directory");
    flag(&app, "--threads", "threads", "worker threads (default 1)");
    app.add_option("--set", assignments, "override any config key: key=value")->allow_extra_args(false);

    const auto data_flags = [&](CLI::App* sub) {
        flag(sub, "--readings", "readings", "readings CSV");
        flag(sub, "--adjacency", "adjacency", "adjacency CSV");
        flag(sub, "--holidays", "holidays", "holiday dates, one per line");
    };
    const auto model_flags = [&](CLI::App* sub) {
        flag(sub, "--horizon", "horizon", "short (m = n = 12) or long (m = n = 36)");
        flag(sub, "--periods", "periods", "period lags in hours, comma separated");
        flag(sub, "--epochs", "epochs", "training epochs");
    };

    CLI::App* synth = app.add_subcommand("synth", "write a synthetic periodic dataset");
    flag(synth, "--nodes", "nodes", "sensor count");
    flag(synth, "--days", "days", "length in days");
    flag(synth, "--step-minutes", "step_minutes", "sampling interval");
    flag(synth, "--graph", "graph", "ring, grid or random");
    flag(synth, "--noise", "noise_std", "noise standard deviation");

    CLI::App* train_cmd = app.add_subcommand("train", "train a model and write a run directory");
    data_flags(train_cmd);
    model_flags(train_cmd);

    CLI::App* evaluate_cmd = app.add_subcommand("evaluate", "score a checkpoint on a split");
    data_flags(evaluate_cmd);
    flag(evaluate_cmd, "--checkpoint", "checkpoint", "checkpoint file");
    flag(evaluate_cmd, "--split", "split", "train, val or test");

    CLI::App* predict_cmd = app.add_subcommand("predict", "export predictions as CSV");
    data_flags(predict_cmd);
    flag(predict_cmd, "--checkpoint", "checkpoint", "checkpoint file");
    flag(predict_cmd, "--split", "split", "split whose anchors are exported when no range is given");
    flag(predict_cmd, "--from", "anchor_from", "first anchor step index");
    flag(predict_cmd, "--count", "anchor_count", "number of consecutive anchors");

    CLI::App* gradcheck_cmd = app.add_subcommand("gradcheck", "run the gradient check suite");

    CLI::App* ablation_cmd = app.add_subcommand("ablation", "train the ablation grid and rank it");
    data_flags(ablation_cmd);
    model_flags(ablation_cmd);

    for (CLI::App* sub : {synth, train_cmd, evaluate_cmd, predict_cmd, gradcheck_cmd, ablation_cmd}) sub->fallthrough();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e, out, err);
    }

    const std::string command = app.get_subcommands().front()->get_name();
    try {
        RunConfig config = RunConfig::defaults(command);
        if (!config_path.empty()) config.merge_file(config_path);
        for (const auto& [k, v] : flags) config.set(k, v);
        for (const auto& a : assignments) config.set_assignment(a);
        if (command == "synth") return cmd_synth(config, out);
        if (command == "train") return cmd_train(config, out, err);
        if (command == "evaluate") return cmd_evaluate(config, out, err);
        if (command == "predict") return cmd_predict(config, out, err);
        if (command == "gradcheck") return cmd_gradcheck(config, out);
        return cmd_ablation(config, out, err);
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace embs
