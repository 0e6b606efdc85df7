#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace embs {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Raised for any shape incompatibility. The message names every shape involved.
class DimensionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Storage precision. Values always live in doubles; F32 rounds every produced
/// value to the nearest float so memory dumps and comparisons behave like
/// single precision. Gradient checks always run in F64.
enum class Storage : std::uint8_t { F64, F32 };

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until a backward pass deposits one
    bool requires_grad = false;
    Storage storage = Storage::F64;
    std::uint64_t tape_id = 0;  // 0 for leaves
    std::size_t node = 0;
};

}  // namespace detail

/// Dense row-major n-dimensional array of doubles.
///
/// A Tensor is a cheap handle; copies alias the same buffer. Ops never mutate
/// their inputs, so sharing is safe for concurrent reads. Use clone() for an
/// independent copy. Parameters are the only tensors mutated in place
/// (optimizer steps and finite-difference perturbation).
class Tensor {
public:
    Tensor();
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor ones(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t size() const { return impl_->data.size(); }

    std::span<const double> data() const { return impl_->data; }
    std::span<double> mutable_data() { return impl_->data; }
    const std::vector<double>& values() const { return impl_->data; }

    double item() const;
    double at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool on);

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad() { impl_->grad.clear(); }

    Storage storage() const { return impl_->storage; }
    Tensor to_storage(Storage storage) const;

    /// Deep copy, detached from any tape.
    Tensor clone() const;
    /// Shares data, drops tape membership and requires_grad.
    Tensor detach() const;

    bool same(const Tensor& other) const { return impl_ == other.impl_; }
    const detail::TensorImpl* id() const { return impl_.get(); }
    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;

    friend class Tape;
};

void backward(const Tensor& loss);

/// Gradient buffers for the leaves reached by one backward pass.
class Gradients {
public:
    /// Empty span when `t` received no gradient.
    std::span<const double> of(const Tensor& t) const;
    bool contains(const Tensor& t) const;
    std::size_t size() const { return leaves_.size(); }

private:
    std::unordered_map<const detail::TensorImpl*, std::vector<double>> leaves_;
    friend class Tape;
    friend void backward(const Tensor& loss);
};

/// Receives the gradient of the loss with respect to each op input.
/// slot(i) is nullptr when input i does not need a gradient.
class GradSlots {
public:
    explicit GradSlots(std::span<double* const> slots) : slots_(slots) {}
    double* slot(std::size_t i) const { return slots_[i]; }

private:
    std::span<double* const> slots_;
};

using BackwardFn = std::function<void(std::span<const double> grad_out, const GradSlots& grad_in)>;

/// Ordered record of the differentiable ops executed during one forward pass.
///
/// Activate a tape on the current thread with TapeScope. Ops executed while a
/// tape is active record a node whenever one of their inputs is tracked (a
/// requires_grad leaf or an output recorded earlier on the same tape). A tape
/// is confined to its thread and is meant to be discarded after backward.
class Tape {
public:
    Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    std::size_t size() const { return nodes_.size(); }
    std::uint64_t id() const { return id_; }
    std::string_view op_name(std::size_t node) const { return nodes_.at(node).op; }

    /// Reverse sweep from a scalar loss. Leaf gradients are returned rather than
    /// written into the leaves so several tapes can share parameters.
    Gradients backward(const Tensor& loss) const;

    /// Records `out` as produced by `op` from `inputs` when a tape is active and
    /// any input is tracked. Exposed so tests and extensions can add custom ops.
    static void record(std::string_view op, Tensor& out, std::initializer_list<Tensor> inputs,
                       BackwardFn backward);
    static void record(std::string_view op, Tensor& out, std::vector<Tensor> inputs, BackwardFn backward);

    static Tape* active();

private:
    struct Node {
        std::string_view op;
        std::vector<Tensor> inputs;
        BackwardFn backward;
        std::size_t output_size;
    };

    bool tracks(const Tensor& t) const;

    std::uint64_t id_;
    std::vector<Node> nodes_;

    friend class TapeScope;
};

/// Makes `tape` the active tape of this thread for the scope's lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;
    ~TapeScope();

private:
    Tape* previous_;
};

/// Suspends recording on this thread.
class NoGradScope {
public:
    NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;
    ~NoGradScope();

private:
    Tape* previous_;
};

/// Backward over the active tape; accumulates (sums) gradients into the
/// `grad` buffer of every requires_grad leaf the loss depends on.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Ops. Elementwise binary ops accept equal shapes, or one operand whose shape
// is a trailing suffix of the other's (broadcast over leading dimensions only).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
/// Throws std::domain_error on an exact zero in `b`.
Tensor div(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, double c);

/// [..., p, q] x [..., q, r] -> [..., p, r]; leading batch dims broadcast
/// numpy-style (missing or size-1 dims repeat).
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor softmax(const Tensor& x, std::size_t axis);

enum class Reduce : std::uint8_t { Sum, Mean };
/// Removes `axis`.
Tensor reduce(const Tensor& x, std::size_t axis, Reduce kind);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor permute(const Tensor& x, std::span<const std::size_t> axes);
Tensor permute(const Tensor& x, std::initializer_list<std::size_t> axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(std::span<const Tensor> xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
/// Inserts a new axis of extent `count` at `axis`, repeating the input.
Tensor expand(const Tensor& x, std::size_t axis, std::size_t count);
/// Rows of a [V, D] table -> [indices.size(), D].
Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices);

/// Valid correlation along time: x [B, T, C_in], kernel [w, C_in, C_out]
/// -> [B, T - w + 1, C_out].
Tensor conv_time(const Tensor& x, const Tensor& kernel);

/// Mean squared error over all elements.
Tensor mse_loss(const Tensor& prediction, const Tensor& target);

}  // namespace embs
