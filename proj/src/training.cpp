#include "embsformer/training.hpp"

#include <charconv>
#include <cmath>
#include <ostream>
#include <thread>

#include "embsformer/rng.hpp"

namespace embs {

void TrainConfig::validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning_rate must be positive");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be positive");
    if (epochs == 0) throw std::invalid_argument("train config: epochs must be positive");
    if (threads == 0) throw std::invalid_argument("train config: threads must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) {
        throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
    }
    if (clip_norm < 0.0) throw std::invalid_argument("train config: clip_norm must be non-negative");
}

// ---------------------------------------------------------------------------
// Adam

Adam::Adam(std::vector<NamedTensor> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto& [name, t] : params_) {
        m_.emplace_back(t.size(), 0.0);
        v_.emplace_back(t.size(), 0.0);
    }
}

void Adam::step(const std::vector<std::vector<double>>& grads) {
    if (grads.size() != params_.size()) throw std::invalid_argument("adam: gradient list does not match parameters");
    for (std::size_t i = 0; i < grads.size(); ++i) {
        if (!grads[i].empty() && grads[i].size() != params_[i].second.size()) {
            throw std::invalid_argument("adam: gradient size mismatch for " + params_[i].first);
        }
        for (std::size_t k = 0; k < grads[i].size(); ++k) {
            if (!std::isfinite(grads[i][k])) {
                throw DivergenceError("adam: non-finite gradient in " + params_[i].first + "[" + std::to_string(k) + "]");
            }
        }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto values = params_[i].second.mutable_data();
        auto& m = m_[i];
        auto& v = v_[i];
        for (std::size_t k = 0; k < values.size(); ++k) {
            const double g = grads[i].empty() ? 0.0 : grads[i][k];
            m[k] = beta1_ * m[k] + (1.0 - beta1_) * g;
            v[k] = beta2_ * v[k] + (1.0 - beta2_) * g * g;
            const double update = lr_ * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
            values[k] -= update;
        }
    }
}

// ---------------------------------------------------------------------------
// gradients

namespace {

struct SampleGrad {
    Gradients grads;
    double loss = 0.0;
};

SampleGrad sample_gradient(const EMBSFormer& model, const WindowSample& sample) {
    Tape tape;
    TapeScope scope(tape);
    const Tensor loss = mse_loss(model.forward(sample), sample.target);
    SampleGrad out;
    out.loss = loss.item();
    out.grads = tape.backward(loss);
    return out;
}

template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
    threads = std::min(threads, count);
    if (threads <= 1) {
        for (std::size_t i = 0; i < count; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < count; i += threads) fn(i);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors) {
        if (e) std::rethrow_exception(e);
    }
}

}  // namespace

BatchGradients batch_gradients(const EMBSFormer& model, std::span<const WindowSample* const> batch,
                               std::size_t threads) {
    if (batch.empty()) throw std::invalid_argument("batch_gradients: empty batch");
    std::vector<SampleGrad> per_sample(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) { per_sample[i] = sample_gradient(model, *batch[i]); });

    const auto& params = model.parameters();
    BatchGradients out;
    out.grads.resize(params.size());
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
        std::vector<double> acc(params[p].second.size(), 0.0);
        for (const SampleGrad& s : per_sample) {
            const auto g = s.grads.of(params[p].second);
            for (std::size_t k = 0; k < g.size(); ++k) acc[k] += g[k];
        }
        for (double& x : acc) x *= inv;
        out.grads[p] = std::move(acc);
    }
    for (const SampleGrad& s : per_sample) out.loss += s.loss;
    out.loss *= inv;
    return out;
}

// ---------------------------------------------------------------------------
// prediction / evaluation

std::vector<Tensor> predict(const EMBSFormer& model, std::span<const WindowSample> samples, std::size_t threads) {
    std::vector<Tensor> out(samples.size());
    parallel_for(samples.size(), threads, [&](std::size_t i) {
        NoGradScope off;
        out[i] = model.forward(samples[i]);
    });
    return out;
}

namespace {

MetricsReport evaluate_predictions(std::span<const Tensor> predictions, std::span<const WindowSample> samples,
                                   const NormalizationStats& normalizer) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
    const std::size_t n = samples.front().target.dim(0);
    const std::size_t N = samples.front().target.dim(1);
    MetricsAccumulator acc(n);
    std::vector<double> pred(n * N), actual(n * N);
    for (std::size_t s = 0; s < samples.size(); ++s) {
        if (predictions[s].shape() != samples[s].target.shape()) {
            throw DimensionError("evaluate: prediction " + shape_to_string(predictions[s].shape()) + " vs target " +
                                 shape_to_string(samples[s].target.shape()));
        }
        for (std::size_t k = 0; k < n * N; ++k) {
            pred[k] = normalizer.invert(predictions[s].values()[k], 0);
            actual[k] = normalizer.invert(samples[s].target.values()[k], 0);
        }
        acc.add(pred, actual, N);
    }
    return make_report(acc);
}

}  // namespace

MetricsReport evaluate(const Predictor& predictor, std::span<const WindowSample> samples,
                       const NormalizationStats& normalizer) {
    std::vector<Tensor> predictions;
    predictions.reserve(samples.size());
    for (const auto& s : samples) predictions.push_back(predictor(s));
    return evaluate_predictions(predictions, samples, normalizer);
}

MetricsReport evaluate(const EMBSFormer& model, std::span<const WindowSample> samples,
                       const NormalizationStats& normalizer, std::size_t threads) {
    if (samples.empty()) throw std::invalid_argument("evaluate: empty sample set");
    return evaluate_predictions(predict(model, samples, threads), samples, normalizer);
}

Tensor persistence_baseline(const WindowSample& sample, std::size_t n) {
    const std::size_t m = sample.recent.dim(0), N = sample.recent.dim(1), F = sample.recent.dim(2);
    std::vector<double> out(n * N);
    for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t i = 0; i < N; ++i) out[j * N + i] = sample.recent.values()[((m - 1) * N + i) * F];
    }
    return Tensor({n, N}, std::move(out));
}

Tensor historical_average_baseline(const WindowSample& sample, std::size_t m, std::size_t n) {
    if (sample.periods.empty()) throw std::invalid_argument("historical average: sample has no period block");
    const std::size_t N = sample.recent.dim(1), F = sample.recent.dim(2);
    std::vector<double> out(n * N, 0.0);
    for (const Tensor& p : sample.periods) {
        for (std::size_t j = 0; j < n; ++j) {
            for (std::size_t i = 0; i < N; ++i) out[j * N + i] += p.values()[((m + j) * N + i) * F];
        }
    }
    for (double& v : out) v /= static_cast<double>(sample.periods.size());
    return Tensor({n, N}, std::move(out));
}

// ---------------------------------------------------------------------------
// training loop

TrainResult train(EMBSFormer& model, std::span<const WindowSample> train_set, std::span<const WindowSample> val_set,
                  const NormalizationStats& normalizer, const TrainConfig& config, const EpochCallback& on_epoch) {
    config.validate();
    if (train_set.empty() || val_set.empty()) throw std::invalid_argument("train: need at least one train and one validation sample");
    TrainResult result;
    result.best_val_mae = evaluate(model, val_set, normalizer, config.threads).average.mae;
    if (config.epochs == 0) return result;

    Adam adam(model.parameters(), config.learning_rate, config.beta1, config.beta2, config.adam_eps);
    auto best = model.snapshot();
    std::vector<const WindowSample*> batch;
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        const auto order = shuffled_indices(train_set.size(), config.seed, epoch);
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            batch.clear();
            for (std::size_t k = start; k < std::min(order.size(), start + config.batch_size); ++k) {
                batch.push_back(&train_set[order[k]]);
            }
            BatchGradients g = batch_gradients(model, batch, config.threads);
            if (!std::isfinite(g.loss)) {
                throw DivergenceError("train: loss became non-finite in epoch " + std::to_string(epoch));
            }
            if (config.clip_norm > 0.0) {
                double sq = 0.0;
                for (const auto& v : g.grads) {
                    for (double x : v) sq += x * x;
                }
                const double norm = std::sqrt(sq);
                if (norm > config.clip_norm) {
                    const double f = config.clip_norm / norm;
                    for (auto& v : g.grads) {
                        for (double& x : v) x *= f;
                    }
                }
            }
            adam.step(g.grads);
            loss_sum += g.loss * static_cast<double>(batch.size());
        }
        EpochRecord rec{epoch, loss_sum / static_cast<double>(train_set.size()),
                        evaluate(model, val_set, normalizer, config.threads).average.mae};
        if (!std::isfinite(rec.train_loss) || !std::isfinite(rec.val_mae)) {
            throw DivergenceError("train: non-finite loss or validation MAE in epoch " + std::to_string(epoch));
        }
        result.trace.push_back(rec);
        if (rec.val_mae < result.best_val_mae) {
            result.best_val_mae = rec.val_mae;
            result.best_epoch = epoch;
            best = model.snapshot();
        }
        if (on_epoch) on_epoch(rec);
    }
    model.restore(best);
    return result;
}

void write_loss_trace(std::span<const EpochRecord> trace, std::ostream& out) {
    out << "epoch,train_loss,val_mae\n";
    char buf[64];
    for (const auto& r : trace) {
        out << r.epoch << ',';
        auto [p1, e1] = std::to_chars(buf, buf + sizeof(buf), r.train_loss);
        out.write(buf, p1 - buf) << ',';
        auto [p2, e2] = std::to_chars(buf, buf + sizeof(buf), r.val_mae);
        out.write(buf, p2 - buf) << '\n';
    }
}

}  // namespace embs
