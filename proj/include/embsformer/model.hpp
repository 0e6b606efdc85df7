#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embsformer/data.hpp"
#include "embsformer/gradcheck.hpp"
#include "embsformer/graph.hpp"
#include "embsformer/tensor.hpp"

namespace embs {

struct ModelConfig {
    std::size_t m = 12;
    std::size_t n = 12;
    std::size_t nodes = 0;
    std::size_t features = 1;
    std::size_t d_e = 16;
    std::size_t d_s = 16;
    std::size_t d_t = 16;
    std::size_t h_prime = 16;
    std::size_t k_cheb = 3;
    std::size_t blocks = 1;
    std::vector<std::size_t> periods;  // steps
    bool enable_recent = true;
    bool enable_period = true;

    std::size_t branch_count() const { return enable_period ? periods.size() : 0; }
    /// Throws std::invalid_argument naming the offending field.
    void validate() const;
    /// `key = value` lines, stable order.
    std::string to_text() const;
    static ModelConfig from_text(std::string_view text);
    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Closed form of the trainable parameter count; see README.
std::size_t parameter_count(const ModelConfig& config);

using NamedTensor = std::pair<std::string, Tensor>;

/// x W + b over the last axis. weight [in, out], bias [out].
struct Affine {
    Tensor weight;
    Tensor bias;
    Tensor operator()(const Tensor& x) const;
};

/// softmax(q k^T / sqrt(d)) v with a leading batch axis:
/// q [B, Lq, d], k [B, Lk, d], v [B, Lk, d_v] -> [B, Lq, d_v].
Tensor scaled_attention(const Tensor& q, const Tensor& k, const Tensor& v, Tensor* scores = nullptr);

/// Width-1 convolution: kernel [1, C_in, C_out] applied to the last axis.
Tensor pointwise(const Tensor& x, const Tensor& kernel);

/// Sine/cosine table [length, d].
Tensor positional_table(std::size_t length, std::size_t d);

struct Embedding {
    Affine data;
    Tensor minute;       // [1440, d_e]
    Tensor day_of_week;  // [7, d_e]
    Tensor holiday;      // [2, d_e]
    Tensor positional;   // [m + n, d_e], fixed

    /// x [L, N, F] -> [L, N, d_e]; positions start at `offset`.
    Tensor operator()(const Tensor& x, std::span<const CalendarIndex> calendar, std::size_t offset = 0) const;
};

/// Attention across nodes, independently per time step. [m, N, d_in] -> [m, N, d].
struct SpatialAttention {
    Affine query, key, value;
    Tensor operator()(const Tensor& e, Tensor* scores = nullptr) const;
};

/// Attention across time, independently per node. [m, N, d_in] -> [m, N, d].
struct TemporalAttention {
    Affine query, key, value;
    Tensor operator()(const Tensor& e, Tensor* scores = nullptr) const;
};

struct TransitionScores {
    Tensor spatial;   // [m, N, N]
    Tensor temporal;  // [N, m, m]
};

/// residual(E) + conv(gcn(temporal(spatial(E)))). [m, N, d_e] -> [m, N, d_e].
struct TransitionBlock {
    SpatialAttention spatial;
    TemporalAttention temporal;
    Tensor theta;     // [K, d_t, h']
    Tensor conv;      // [1, h', d_e]
    Tensor residual;  // [1, d_e, d_e]

    Tensor operator()(const Tensor& e, const ChebyshevBasis& basis, TransitionScores* scores = nullptr) const;
};

/// [m, N, d_e] -> [n, N]: full-width time kernel m -> n, then d_e -> 1.
struct Readout {
    Tensor time;     // [m, 1, n]
    Tensor feature;  // [d_e, 1]
    Tensor operator()(const Tensor& h) const;
};

/// Query from the recent embedding, key from the branch's first m steps,
/// value from its last n steps. Returns ASR [n, N, h'].
struct LookupAttention {
    Affine query, key, value;
    Tensor align_query;  // [m - n + 1, h', h'], absent when m == n
    Tensor align_key;

    Tensor operator()(const Tensor& recent, const Tensor& period, Tensor* scores = nullptr) const;
};

struct GenerationBranch {
    LookupAttention lookup;
    Tensor conv_t;  // [1, h', h']
    Tensor conv_c;  // [1, h', 1]

    /// ASR [n, N, h'] -> [n, N].
    Tensor generate(const Tensor& asr) const;
};

/// W_r * recent + sum_i W_p^i * (branch_i / count). Pass nullptr for an
/// absent recent path. Throws std::invalid_argument when nothing is present.
Tensor fuse(const Tensor* recent, const Tensor& w_recent, std::span<const Tensor> branches,
            std::span<const Tensor> w_branches);

/// Attention maps of one forward pass.
struct ForwardTrace {
    std::vector<TransitionScores> blocks;
    std::vector<Tensor> lookup;  // per branch, [N, n, n]
    Tensor recent_output;        // Y_R, when present
    std::vector<Tensor> branch_outputs;
};

class EMBSFormer {
public:
    EMBSFormer(ModelConfig config, std::shared_ptr<const ChebyshevBasis> basis, std::uint64_t seed = 0);
    // Copies would alias the parameter buffers.
    EMBSFormer(const EMBSFormer&) = delete;
    EMBSFormer& operator=(const EMBSFormer&) = delete;
    EMBSFormer(EMBSFormer&&) = default;
    EMBSFormer& operator=(EMBSFormer&&) = default;

    const ModelConfig& config() const { return config_; }
    const ChebyshevBasis& basis() const { return *basis_; }
    std::shared_ptr<const ChebyshevBasis> shared_basis() const { return basis_; }

    /// [n, N] prediction on the normalized scale.
    Tensor forward(const WindowSample& sample, ForwardTrace* trace = nullptr) const;

    /// Every trainable tensor with its dotted path, in a fixed order. The
    /// handles alias the live parameters.
    const std::vector<NamedTensor>& parameters() const { return params_; }
    Tensor parameter(std::string_view name) const;
    std::size_t parameter_count() const;

    /// Copies values from `other` (same config) into this model's tensors.
    void copy_from(const EMBSFormer& other);
    /// Snapshot of every parameter value.
    std::vector<std::vector<double>> snapshot() const;
    void restore(const std::vector<std::vector<double>>& values);

    Embedding embedding;
    std::vector<TransitionBlock> blocks;
    Readout readout;
    Tensor head_recent;  // [n, N]
    std::vector<GenerationBranch> branches;
    std::vector<Tensor> head_branches;  // [n, N] each

private:
    ModelConfig config_;
    std::shared_ptr<const ChebyshevBasis> basis_;
    std::vector<NamedTensor> params_;
};

/// Full model on N=4, m=n=3, d=4, K=3, one branch of period 6, with a
/// random sample drawn from `seed`.
struct ToyInstance {
    EMBSFormer model;
    WindowSample sample;
};
ToyInstance make_toy_instance(std::uint64_t seed);
/// True for attention key biases: they shift every score in a softmax row
/// equally, so their exact gradient is zero.
bool shift_invariant(std::string_view name);
/// Per-parameter check of the toy instance's MSE loss, key biases excluded.
std::vector<ParamCheck> toy_model_gradcheck(std::uint64_t seed);

}  // namespace embs
