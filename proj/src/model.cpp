#include "embsformer/model.hpp"

#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <stdexcept>

#include "embsformer/rng.hpp"

namespace embs {

// ---------------------------------------------------------------------------
// config

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
    };
    positive(m, "m");
    positive(n, "n");
    positive(nodes, "nodes");
    positive(features, "features");
    positive(d_e, "d_e");
    positive(d_s, "d_s");
    positive(d_t, "d_t");
    positive(h_prime, "h_prime");
    positive(k_cheb, "k_cheb");
    if (enable_recent) positive(blocks, "blocks");
    if (!enable_recent && !enable_period) {
        throw std::invalid_argument("model config: enable_recent and enable_period cannot both be false");
    }
    if (!enable_recent && periods.empty()) {
        throw std::invalid_argument("model config: enable_recent=false needs at least one period");
    }
    for (std::size_t i = 0; i < periods.size(); ++i) {
        if (periods[i] < m + n) {
            throw std::invalid_argument("model config: period " + std::to_string(periods[i]) + " is shorter than m+n=" +
                                        std::to_string(m + n));
        }
        if (i > 0 && periods[i] <= periods[i - 1]) {
            throw std::invalid_argument("model config: periods must be strictly ascending");
        }
    }
    if (branch_count() > 0 && m < n) {
        throw std::invalid_argument("model config: generation branches need m >= n (got m=" + std::to_string(m) +
                                    ", n=" + std::to_string(n) + ")");
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "m = " << m << "\nn = " << n << "\nnodes = " << nodes << "\nfeatures = " << features << "\nd_e = " << d_e
       << "\nd_s = " << d_s << "\nd_t = " << d_t << "\nh_prime = " << h_prime << "\nk_cheb = " << k_cheb
       << "\nblocks = " << blocks << "\nperiods = ";
    for (std::size_t i = 0; i < periods.size(); ++i) os << (i ? "," : "") << periods[i];
    os << "\nenable_recent = " << (enable_recent ? "true" : "false")
       << "\nenable_period = " << (enable_period ? "true" : "false") << '\n';
    return os.str();
}

namespace {

std::size_t parse_size(const std::string& key, std::string_view v) {
    std::size_t out = 0;
    auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || v.empty()) {
        throw std::invalid_argument("model config: '" + key + "' expects an unsigned integer, got '" + std::string(v) + "'");
    }
    return out;
}

bool parse_bool(const std::string& key, std::string_view v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("model config: '" + key + "' expects true/false, got '" + std::string(v) + "'");
}

std::string_view strip(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

}  // namespace

ModelConfig ModelConfig::from_text(std::string_view text) {
    ModelConfig c;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
        const std::string_view row = strip(line);
        if (row.empty() || row.front() == '#') continue;
        const auto eq = row.find('=');
        if (eq == std::string_view::npos) throw std::invalid_argument("model config: malformed line '" + line + "'");
        const std::string key(strip(row.substr(0, eq)));
        const std::string_view v = strip(row.substr(eq + 1));
        if (key == "m") c.m = parse_size(key, v);
        else if (key == "n") c.n = parse_size(key, v);
        else if (key == "nodes") c.nodes = parse_size(key, v);
        else if (key == "features") c.features = parse_size(key, v);
        else if (key == "d_e") c.d_e = parse_size(key, v);
        else if (key == "d_s") c.d_s = parse_size(key, v);
        else if (key == "d_t") c.d_t = parse_size(key, v);
        else if (key == "h_prime") c.h_prime = parse_size(key, v);
        else if (key == "k_cheb") c.k_cheb = parse_size(key, v);
        else if (key == "blocks") c.blocks = parse_size(key, v);
        else if (key == "enable_recent") c.enable_recent = parse_bool(key, v);
        else if (key == "enable_period") c.enable_period = parse_bool(key, v);
        else if (key == "periods") {
            c.periods.clear();
            std::size_t pos = 0;
            while (pos < v.size()) {
                const auto comma = v.find(',', pos);
                const auto item = strip(v.substr(pos, comma == std::string_view::npos ? v.npos : comma - pos));
                if (!item.empty()) c.periods.push_back(parse_size(key, item));
                if (comma == std::string_view::npos) break;
                pos = comma + 1;
            }
        } else {
            throw std::invalid_argument("model config: unknown key '" + key + "'");
        }
    }
    return c;
}

std::size_t parameter_count(const ModelConfig& c) {
    std::size_t total = c.features * c.d_e + c.d_e + (kMinutesPerDay + 7 + 2) * c.d_e;
    if (c.enable_recent) {
        const std::size_t block = 3 * (c.d_e * c.d_s + c.d_s) + 3 * (c.d_s * c.d_t + c.d_t) +
                                  c.k_cheb * c.d_t * c.h_prime + c.h_prime * c.d_e + c.d_e * c.d_e;
        total += c.blocks * block + c.m * c.n + c.d_e + c.n * c.nodes;
    }
    const std::size_t h = c.h_prime;
    std::size_t branch = 3 * (c.d_e * h + h) + h * h + h + c.n * c.nodes;
    if (c.m != c.n) branch += 2 * (c.m - c.n + 1) * h * h;
    total += c.branch_count() * branch;
    return total;
}

// ---------------------------------------------------------------------------
// components

Tensor Affine::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* scores) {
    const double inv = 1.0 / std::sqrt(static_cast<double>(q.dim(q.rank() - 1)));
    const Tensor s = softmax(scale(matmul(q, permute(k, {0, 2, 1})), inv), 2);
    if (scores) *scores = s;
    return matmul(s, v);
}

Tensor pointwise(const Tensor& x, const Tensor& kernel) {
    if (kernel.rank() != 3 || kernel.dim(0) != 1) {
        throw DimensionError("pointwise: kernel must be [1, C_in, C_out], got " + shape_to_string(kernel.shape()));
    }
    return matmul(x, reshape(kernel, {kernel.dim(1), kernel.dim(2)}));
}

Tensor positional_table(std::size_t length, std::size_t d) {
    std::vector<double> v(length * d);
    for (std::size_t p = 0; p < length; ++p) {
        for (std::size_t i = 0; i < d; ++i) {
            const double rate = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(p) * rate;
            v[p * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
    return Tensor({length, d}, std::move(v));
}

Tensor Embedding::operator()(const Tensor& x, std::span<const CalendarIndex> calendar, std::size_t offset) const {
    if (x.rank() != 3) throw DimensionError("embed: x must be [L, N, F], got " + shape_to_string(x.shape()));
    const std::size_t length = x.dim(0);
    if (calendar.size() != length) {
        throw DimensionError("embed: " + std::to_string(calendar.size()) + " calendar entries for " +
                             std::to_string(length) + " steps");
    }
    if (offset + length > positional.dim(0)) {
        throw DimensionError("embed: positions " + std::to_string(offset) + ".." + std::to_string(offset + length) +
                             " exceed the table of " + std::to_string(positional.dim(0)));
    }
    std::vector<std::size_t> minutes(length), days(length), holidays(length);
    for (std::size_t t = 0; t < length; ++t) {
        if (calendar[t].minute_of_day >= kMinutesPerDay || calendar[t].day_of_week > 6 || calendar[t].is_holiday > 1) {
            throw std::out_of_range("embed: calendar index out of range at step " + std::to_string(t));
        }
        minutes[t] = calendar[t].minute_of_day;
        days[t] = calendar[t].day_of_week;
        holidays[t] = calendar[t].is_holiday;
    }
    const Tensor time_terms = add(add(add(gather_rows(minute, minutes), gather_rows(day_of_week, days)),
                                      gather_rows(holiday, holidays)),
                                  slice(positional, 0, offset, length));
    return add(data(x), expand(time_terms, 1, x.dim(1)));
}

Tensor SpatialAttention::operator()(const Tensor& e, Tensor* scores) const {
    return scaled_attention(query(e), key(e), value(e), scores);
}

Tensor TemporalAttention::operator()(const Tensor& e, Tensor* scores) const {
    const Tensor node_major = permute(e, {1, 0, 2});
    return permute(scaled_attention(query(node_major), key(node_major), value(node_major), scores), {1, 0, 2});
}

Tensor TransitionBlock::operator()(const Tensor& e, const ChebyshevBasis& basis, TransitionScores* scores) const {
    const Tensor s = spatial(e, scores ? &scores->spatial : nullptr);
    const Tensor t = temporal(s, scores ? &scores->temporal : nullptr);
    return add(pointwise(e, residual), pointwise(cheb_graph_conv(t, basis, theta), conv));
}

Tensor Readout::operator()(const Tensor& h) const {
    const std::size_t m = h.dim(0), N = h.dim(1), d = h.dim(2);
    const std::size_t n = time.dim(2);
    if (time.dim(0) != m) {
        throw DimensionError("readout: time kernel " + shape_to_string(time.shape()) + " does not fit input " +
                             shape_to_string(h.shape()));
    }
    const Tensor series = reshape(permute(h, {1, 2, 0}), {N * d, m, 1});
    const Tensor stepped = permute(reshape(conv_time(series, time), {N, d, n}), {2, 0, 1});  // [n, N, d]
    return reshape(matmul(stepped, feature), {n, N});
}

Tensor LookupAttention::operator()(const Tensor& recent, const Tensor& period, Tensor* scores) const {
    const std::size_t m = recent.dim(0);
    if (period.dim(0) <= m) {
        throw DimensionError("lookup: branch window " + shape_to_string(period.shape()) + " is not longer than m=" +
                             std::to_string(m));
    }
    const std::size_t n = period.dim(0) - m;
    Tensor q = permute(query(recent), {1, 0, 2});                     // [N, m, h']
    Tensor k = permute(key(slice(period, 0, 0, m)), {1, 0, 2});       // [N, m, h']
    const Tensor v = permute(value(slice(period, 0, m, n)), {1, 0, 2});  // [N, n, h']
    if (m != n) {
        q = conv_time(q, align_query);
        k = conv_time(k, align_key);
    }
    return permute(scaled_attention(q, k, v, scores), {1, 0, 2});
}

Tensor GenerationBranch::generate(const Tensor& asr) const {
    const Tensor y = pointwise(pointwise(asr, conv_t), conv_c);  // [n, N, 1]
    return reshape(y, {y.dim(0), y.dim(1)});
}

Tensor fuse(const Tensor* recent, const Tensor& w_recent, std::span<const Tensor> branches,
            std::span<const Tensor> w_branches) {
    if (!recent && branches.empty()) throw std::invalid_argument("fuse: no recent output and no period branches");
    if (branches.size() != w_branches.size()) throw std::invalid_argument("fuse: branch/weight count mismatch");
    Tensor out;
    bool started = false;
    if (recent) {
        out = mul(w_recent, *recent);
        started = true;
    }
    const double norm = 1.0 / static_cast<double>(branches.size());
    for (std::size_t i = 0; i < branches.size(); ++i) {
        const Tensor term = mul(w_branches[i], scale(branches[i], norm));
        out = started ? add(out, term) : term;
        started = true;
    }
    return out;
}

// ---------------------------------------------------------------------------
// model

namespace {

std::uint64_t name_stream(std::string_view name) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : name) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
    return h;
}

class Builder {
public:
    Builder(std::uint64_t seed, std::vector<NamedTensor>& out) : seed_(seed), out_(out) {}

    Tensor uniform(const std::string& name, Shape shape, double bound) {
        CounterRng rng(seed_, name_stream(name));
        std::vector<double> v(shape_size(shape));
        for (double& x : v) x = rng.uniform(-bound, bound);
        return add_param(name, Tensor(std::move(shape), std::move(v)));
    }
    Tensor fan_in(const std::string& name, Shape shape, std::size_t fan) {
        return uniform(name, std::move(shape), 1.0 / std::sqrt(static_cast<double>(fan)));
    }
    Tensor constant(const std::string& name, Shape shape, double value) {
        return add_param(name, Tensor::full(std::move(shape), value));
    }
    Affine affine(const std::string& name, std::size_t in, std::size_t out) {
        return {fan_in(name + ".weight", {in, out}, in), constant(name + ".bias", {out}, 0.0)};
    }

private:
    Tensor add_param(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        out_.emplace_back(name, t);
        return t;
    }
    std::uint64_t seed_;
    std::vector<NamedTensor>& out_;
};

}  // namespace

EMBSFormer::EMBSFormer(ModelConfig config, std::shared_ptr<const ChebyshevBasis> basis, std::uint64_t seed)
    : config_(std::move(config)), basis_(std::move(basis)) {
    config_.validate();
    const ModelConfig& c = config_;
    if (!basis_) throw std::invalid_argument("EMBSFormer: missing Chebyshev basis");
    if (basis_->num_nodes() != c.nodes || basis_->order() != c.k_cheb) {
        throw std::invalid_argument("EMBSFormer: basis has " + std::to_string(basis_->num_nodes()) + " nodes and order " +
                                    std::to_string(basis_->order()) + ", config wants " + std::to_string(c.nodes) +
                                    " and " + std::to_string(c.k_cheb));
    }
    Builder b(seed, params_);
    const double table_bound = 1.0 / std::sqrt(static_cast<double>(c.d_e));
    embedding.data = b.affine("embedding.data", c.features, c.d_e);
    embedding.minute = b.uniform("embedding.minute", {kMinutesPerDay, c.d_e}, table_bound);
    embedding.day_of_week = b.uniform("embedding.day_of_week", {7, c.d_e}, table_bound);
    embedding.holiday = b.uniform("embedding.holiday", {2, c.d_e}, table_bound);
    embedding.positional = positional_table(c.m + c.n, c.d_e);

    const std::size_t count = c.branch_count();
    const double head_init = 1.0 / static_cast<double>(1 + count);
    if (c.enable_recent) {
        for (std::size_t i = 0; i < c.blocks; ++i) {
            const std::string p = "blocks." + std::to_string(i) + ".";
            TransitionBlock blk;
            blk.spatial = {b.affine(p + "spatial.query", c.d_e, c.d_s), b.affine(p + "spatial.key", c.d_e, c.d_s),
                           b.affine(p + "spatial.value", c.d_e, c.d_s)};
            blk.temporal = {b.affine(p + "temporal.query", c.d_s, c.d_t), b.affine(p + "temporal.key", c.d_s, c.d_t),
                            b.affine(p + "temporal.value", c.d_s, c.d_t)};
            blk.theta = b.fan_in(p + "theta", {c.k_cheb, c.d_t, c.h_prime}, c.k_cheb * c.d_t);
            blk.conv = b.fan_in(p + "conv", {1, c.h_prime, c.d_e}, c.h_prime);
            blk.residual = b.fan_in(p + "residual", {1, c.d_e, c.d_e}, c.d_e);
            blocks.push_back(std::move(blk));
        }
        readout.time = b.fan_in("readout.time", {c.m, 1, c.n}, c.m);
        readout.feature = b.fan_in("readout.feature", {c.d_e, 1}, c.d_e);
        head_recent = b.constant("head.recent", {c.n, c.nodes}, head_init);
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::string p = "branches." + std::to_string(i) + ".";
        const std::size_t h = c.h_prime;
        GenerationBranch br;
        br.lookup.query = b.affine(p + "lookup.query", c.d_e, h);
        br.lookup.key = b.affine(p + "lookup.key", c.d_e, h);
        br.lookup.value = b.affine(p + "lookup.value", c.d_e, h);
        if (c.m != c.n) {
            const std::size_t w = c.m - c.n + 1;
            br.lookup.align_query = b.fan_in(p + "lookup.align_query", {w, h, h}, w * h);
            br.lookup.align_key = b.fan_in(p + "lookup.align_key", {w, h, h}, w * h);
        }
        br.conv_t = b.fan_in(p + "conv_t", {1, h, h}, h);
        br.conv_c = b.fan_in(p + "conv_c", {1, h, 1}, h);
        branches.push_back(std::move(br));
    }
    for (std::size_t i = 0; i < count; ++i) {
        head_branches.push_back(b.constant("head.branch." + std::to_string(i), {c.n, c.nodes}, head_init));
    }
}

Tensor EMBSFormer::forward(const WindowSample& sample, ForwardTrace* trace) const {
    const ModelConfig& c = config_;
    const Shape recent_shape{c.m, c.nodes, c.features};
    if (sample.recent.shape() != recent_shape) {
        throw DimensionError("forward: recent block " + shape_to_string(sample.recent.shape()) + ", model expects " +
                             shape_to_string(recent_shape));
    }
    const std::size_t count = c.branch_count();
    if (sample.periods.size() < count) {
        throw DimensionError("forward: sample has " + std::to_string(sample.periods.size()) + " period blocks, model needs " +
                             std::to_string(count));
    }
    if (trace) *trace = ForwardTrace{};
    const Tensor e_recent = embedding(sample.recent, sample.recent_calendar);

    Tensor y_recent;
    if (c.enable_recent) {
        Tensor h = e_recent;
        for (const TransitionBlock& blk : blocks) {
            TransitionScores* s = nullptr;
            if (trace) s = &trace->blocks.emplace_back();
            h = blk(h, *basis_, s);
        }
        y_recent = readout(h);
        if (trace) trace->recent_output = y_recent;
    }

    std::vector<Tensor> outputs;
    for (std::size_t i = 0; i < count; ++i) {
        const Shape period_shape{c.m + c.n, c.nodes, c.features};
        if (sample.periods[i].shape() != period_shape) {
            throw DimensionError("forward: period block " + std::to_string(i) + " is " +
                                 shape_to_string(sample.periods[i].shape()) + ", model expects " +
                                 shape_to_string(period_shape));
        }
        const Tensor e_period = embedding(sample.periods[i], sample.period_calendar[i]);
        Tensor scores;
        const Tensor asr = branches[i].lookup(e_recent, e_period, trace ? &scores : nullptr);
        outputs.push_back(branches[i].generate(asr));
        if (trace) {
            trace->lookup.push_back(scores);
            trace->branch_outputs.push_back(outputs.back());
        }
    }
    return fuse(c.enable_recent ? &y_recent : nullptr, head_recent, outputs, head_branches);
}

Tensor EMBSFormer::parameter(std::string_view name) const {
    for (const auto& [n, t] : params_) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter named '" + std::string(name) + "'");
}

std::size_t EMBSFormer::parameter_count() const {
    std::size_t total = 0;
    for (const auto& [n, t] : params_) total += t.size();
    return total;
}

void EMBSFormer::copy_from(const EMBSFormer& other) {
    if (!(other.config_ == config_)) throw std::invalid_argument("copy_from: configs differ");
    restore(other.snapshot());
}

std::vector<std::vector<double>> EMBSFormer::snapshot() const {
    std::vector<std::vector<double>> out;
    out.reserve(params_.size());
    for (const auto& [n, t] : params_) out.push_back(t.values());
    return out;
}

void EMBSFormer::restore(const std::vector<std::vector<double>>& values) {
    if (values.size() != params_.size()) throw std::invalid_argument("restore: parameter count mismatch");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        Tensor t = params_[i].second;
        if (values[i].size() != t.size()) throw std::invalid_argument("restore: size mismatch for " + params_[i].first);
        std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
    }
}

}  // namespace embs
