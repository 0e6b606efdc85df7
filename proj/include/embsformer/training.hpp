#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "embsformer/data.hpp"
#include "embsformer/metrics.hpp"
#include "embsformer/model.hpp"

namespace embs {

/// Raised on NaN/Inf losses or gradients.
class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct TrainConfig {
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    std::size_t epochs = 100;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    double clip_norm = 0.0;  // global-norm clipping; 0 disables
    std::size_t threads = 1;

    void validate() const;
};

/// Bias-corrected Adam over a fixed parameter list.
class Adam {
public:
    Adam(std::vector<NamedTensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    /// grads[i] matches params[i]; an empty entry means a zero gradient.
    /// Throws DivergenceError naming the parameter on a non-finite gradient,
    /// before any parameter is touched.
    void step(const std::vector<std::vector<double>>& grads);

    std::uint64_t steps() const { return t_; }
    double learning_rate() const { return lr_; }
    void set_learning_rate(double lr) { lr_ = lr; }
    const std::vector<std::vector<double>>& first_moment() const { return m_; }
    const std::vector<std::vector<double>>& second_moment() const { return v_; }

private:
    std::vector<NamedTensor> params_;
    double lr_, beta1_, beta2_, eps_;
    std::vector<std::vector<double>> m_, v_;
    std::uint64_t t_ = 0;
};

struct BatchGradients {
    std::vector<std::vector<double>> grads;  // per model parameter, mean over the batch
    double loss = 0.0;                       // mean per-sample MSE
};

/// Forward/backward of every sample on its own tape; per-sample gradients are
/// summed in sample order, so the result does not depend on `threads`.
BatchGradients batch_gradients(const EMBSFormer& model, std::span<const WindowSample* const> batch,
                               std::size_t threads = 1);

struct EpochRecord {
    std::size_t epoch = 0;  // 1-based
    double train_loss = 0.0;
    double val_mae = 0.0;
};

struct TrainResult {
    std::vector<EpochRecord> trace;
    std::size_t best_epoch = 0;  // 0 = initialization kept
    double best_val_mae = 0.0;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Trains in place and leaves `model` holding the parameters of the epoch
/// with the lowest validation MAE (raw units).
TrainResult train(EMBSFormer& model, std::span<const WindowSample> train_set, std::span<const WindowSample> val_set,
                  const NormalizationStats& normalizer, const TrainConfig& config, const EpochCallback& on_epoch = {});

/// Normalized-scale predictions [n, N].
std::vector<Tensor> predict(const EMBSFormer& model, std::span<const WindowSample> samples, std::size_t threads = 1);

using Predictor = std::function<Tensor(const WindowSample&)>;

/// Metrics in raw units: predictions and targets are denormalized with the
/// feature-0 statistics.
MetricsReport evaluate(const Predictor& predictor, std::span<const WindowSample> samples,
                       const NormalizationStats& normalizer);
MetricsReport evaluate(const EMBSFormer& model, std::span<const WindowSample> samples,
                       const NormalizationStats& normalizer, std::size_t threads = 1);

/// Last recent step of feature 0 repeated over the horizon.
Tensor persistence_baseline(const WindowSample& sample, std::size_t n);
/// Mean of the period branches' pseudo-futures (feature 0). Throws when the
/// sample has no period block.
Tensor historical_average_baseline(const WindowSample& sample, std::size_t m, std::size_t n);

/// Writes `epoch,train_loss,val_mae` rows.
void write_loss_trace(std::span<const EpochRecord> trace, std::ostream& out);

}  // namespace embs
