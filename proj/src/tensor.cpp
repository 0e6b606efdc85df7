#include "embsformer/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Core>

namespace embs {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

Eigen::Index idx(std::size_t v) { return static_cast<Eigen::Index>(v); }

}  // namespace

std::size_t shape_size(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ')';
    return os.str();
}

namespace {

std::atomic<std::uint64_t> next_tape_id{1};
thread_local Tape* current_tape = nullptr;

[[noreturn]] void dim_error(std::string_view op, const std::string& detail) {
    throw DimensionError(std::string(op) + ": " + detail);
}

// F32 storage propagates: any F32 input rounds the result.
void finish(Tensor& out, std::initializer_list<const Tensor*> inputs) {
    const bool narrow = std::any_of(inputs.begin(), inputs.end(),
                                    [](const Tensor* t) { return t->storage() == Storage::F32; });
    if (!narrow) return;
    for (double& v : out.mutable_data()) v = static_cast<double>(static_cast<float>(v));
    out.impl()->storage = Storage::F32;
}

void accumulate(double* dst, std::span<const double> src) {
    if (!dst) return;
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) : impl_(std::make_shared<detail::TensorImpl>()) {
    for (std::size_t d : shape) {
        if (d == 0) throw DimensionError("tensor dimensions must be positive, got " + shape_to_string(shape));
    }
    if (shape_size(shape) != values.size()) {
        throw DimensionError("shape " + shape_to_string(shape) + " needs " + std::to_string(shape_size(shape)) +
                             " values, got " + std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }
Tensor Tensor::ones(Shape shape) { return full(std::move(shape), 1.0); }

Tensor Tensor::full(Shape shape, double value) {
    const std::size_t n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= rank()) dim_error("dim", "axis " + std::to_string(axis) + " out of range for " + shape_to_string(shape()));
    return impl_->shape[axis];
}

double Tensor::item() const {
    if (size() != 1) throw DimensionError("item() needs a single element, shape is " + shape_to_string(shape()));
    return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
    if (index.size() != rank()) dim_error("at", "index rank mismatch for " + shape_to_string(shape()));
    std::size_t flat = 0;
    std::size_t axis = 0;
    for (std::size_t i : index) {
        if (i >= impl_->shape[axis]) dim_error("at", "index out of range for " + shape_to_string(shape()));
        flat = flat * impl_->shape[axis] + i;
        ++axis;
    }
    return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
    impl_->requires_grad = on;
    return *this;
}

Tensor Tensor::to_storage(Storage storage) const {
    Tensor out = clone();
    out.impl_->storage = storage;
    if (storage == Storage::F32) {
        for (double& v : out.impl_->data) v = static_cast<double>(static_cast<float>(v));
    }
    return out;
}

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->storage = impl_->storage;
    impl->requires_grad = impl_->requires_grad && impl_->tape_id == 0;
    return Tensor(std::move(impl));
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;
    impl->storage = impl_->storage;
    return Tensor(std::move(impl));
}

// ---------------------------------------------------------------------------
// Gradients / Tape

std::span<const double> Gradients::of(const Tensor& t) const {
    auto it = leaves_.find(t.id());
    if (it == leaves_.end()) return {};
    return it->second;
}

bool Gradients::contains(const Tensor& t) const { return leaves_.count(t.id()) != 0; }

Tape::Tape() : id_(next_tape_id.fetch_add(1)) {}

Tape* Tape::active() { return current_tape; }

bool Tape::tracks(const Tensor& t) const {
    const auto& impl = *t.impl_;
    return impl.requires_grad && (impl.tape_id == 0 || impl.tape_id == id_);
}

void Tape::record(std::string_view op, Tensor& out, std::initializer_list<Tensor> inputs, BackwardFn backward) {
    record(op, out, std::vector<Tensor>(inputs), std::move(backward));
}

void Tape::record(std::string_view op, Tensor& out, std::vector<Tensor> inputs, BackwardFn backward) {
    Tape* tape = current_tape;
    if (!tape) return;
    const bool any = std::any_of(inputs.begin(), inputs.end(), [&](const Tensor& t) { return tape->tracks(t); });
    if (!any) return;
    out.impl_->requires_grad = true;
    out.impl_->tape_id = tape->id_;
    out.impl_->node = tape->nodes_.size();
    tape->nodes_.push_back(Node{op, std::move(inputs), std::move(backward), out.size()});
}

Gradients Tape::backward(const Tensor& loss) const {
    if (loss.size() != 1) {
        throw DimensionError("backward: loss must be a scalar, got shape " + shape_to_string(loss.shape()));
    }
    Gradients result;
    if (!tracks(loss)) return result;
    if (loss.impl_->tape_id == 0) {
        result.leaves_[loss.id()] = {1.0};
        return result;
    }

    std::vector<std::vector<double>> node_grads(nodes_.size());
    node_grads[loss.impl_->node] = {1.0};
    std::vector<double*> slots;
    for (std::size_t i = loss.impl_->node + 1; i-- > 0;) {
        if (node_grads[i].empty()) continue;
        const Node& node = nodes_[i];
        slots.assign(node.inputs.size(), nullptr);
        for (std::size_t k = 0; k < node.inputs.size(); ++k) {
            const auto& in = *node.inputs[k].impl_;
            if (!in.requires_grad) continue;
            std::vector<double>* buffer = nullptr;
            if (in.tape_id == id_) {
                buffer = &node_grads[in.node];
            } else if (in.tape_id == 0) {
                buffer = &result.leaves_[&in];
            } else {
                continue;
            }
            if (buffer->empty()) buffer->assign(in.data.size(), 0.0);
            slots[k] = buffer->data();
        }
        node.backward(node_grads[i], GradSlots(slots));
        std::vector<double>().swap(node_grads[i]);
    }
    return result;
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

void backward(const Tensor& loss) {
    Tape* tape = Tape::active();
    if (!tape) throw std::logic_error("backward: no active tape on this thread");
    Gradients grads = tape->backward(loss);
    for (auto& [impl, g] : grads.leaves_) {
        auto* leaf = const_cast<detail::TensorImpl*>(impl);
        if (leaf->grad.empty()) {
            leaf->grad = std::move(g);
        } else {
            for (std::size_t i = 0; i < g.size(); ++i) leaf->grad[i] += g[i];
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

enum class Binary { Add, Sub, Mul, Div };

constexpr std::string_view binary_name(Binary kind) {
    switch (kind) {
        case Binary::Add: return "add";
        case Binary::Sub: return "sub";
        case Binary::Mul: return "mul";
        case Binary::Div: return "div";
    }
    return "?";
}

bool is_suffix(const Shape& small, const Shape& big) {
    if (small.size() > big.size()) return false;
    return std::equal(small.begin(), small.end(), big.end() - static_cast<std::ptrdiff_t>(small.size()));
}

Tensor binary(const Tensor& a, const Tensor& b, Binary kind) {
    const std::string_view name = binary_name(kind);
    Shape out_shape;
    if (is_suffix(b.shape(), a.shape())) {
        out_shape = a.shape();
    } else if (is_suffix(a.shape(), b.shape())) {
        out_shape = b.shape();
    } else {
        dim_error(name, "incompatible shapes " + shape_to_string(a.shape()) + " and " + shape_to_string(b.shape()));
    }
    const std::size_t n = shape_size(out_shape);
    const std::size_t na = a.size();
    const std::size_t nb = b.size();
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    if (kind == Binary::Div) {
        for (std::size_t j = 0; j < nb; ++j) {
            if (pb[j] == 0.0) throw std::domain_error("div: exact zero in divisor at flat index " + std::to_string(j));
        }
    }
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = pa[i % na];
        const double y = pb[i % nb];
        switch (kind) {
            case Binary::Add: out[i] = x + y; break;
            case Binary::Sub: out[i] = x - y; break;
            case Binary::Mul: out[i] = x * y; break;
            case Binary::Div: out[i] = x / y; break;
        }
    }
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&a, &b});
    Tape::record(name, result, {a, b}, [a, b, kind, na, nb](std::span<const double> g, const GradSlots& slots) {
        double* ga = slots.slot(0);
        double* gb = slots.slot(1);
        const double* pa = a.data().data();
        const double* pb = b.data().data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            const std::size_t ia = i % na;
            const std::size_t ib = i % nb;
            switch (kind) {
                case Binary::Add:
                    if (ga) ga[ia] += g[i];
                    if (gb) gb[ib] += g[i];
                    break;
                case Binary::Sub:
                    if (ga) ga[ia] += g[i];
                    if (gb) gb[ib] -= g[i];
                    break;
                case Binary::Mul:
                    if (ga) ga[ia] += g[i] * pb[ib];
                    if (gb) gb[ib] += g[i] * pa[ia];
                    break;
                case Binary::Div:
                    if (ga) ga[ia] += g[i] / pb[ib];
                    if (gb) gb[ib] -= g[i] * pa[ia] / (pb[ib] * pb[ib]);
                    break;
            }
        }
    });
    return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, Binary::Div); }

Tensor relu(const Tensor& x) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
    Tensor result(x.shape(), std::move(out));
    finish(result, {&x});
    Tape::record("relu", result, {x}, [x](std::span<const double> g, const GradSlots& slots) {
        double* gx = slots.slot(0);
        if (!gx) return;
        const auto in = x.data();
        // subgradient 0 at the kink
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (in[i] > 0.0) gx[i] += g[i];
        }
    });
    return result;
}

Tensor scale(const Tensor& x, double c) {
    std::vector<double> out(x.size());
    const auto in = x.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = in[i] * c;
    Tensor result(x.shape(), std::move(out));
    finish(result, {&x});
    Tape::record("scale", result, {x}, [c](std::span<const double> g, const GradSlots& slots) {
        double* gx = slots.slot(0);
        if (!gx) return;
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * c;
    });
    return result;
}

// ---------------------------------------------------------------------------
// matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() < 2 || b.rank() < 2) {
        dim_error("matmul", "operands need rank >= 2, got " + shape_to_string(a.shape()) + " and " +
                                shape_to_string(b.shape()));
    }
    const std::size_t p = a.dim(a.rank() - 2);
    const std::size_t q = a.dim(a.rank() - 1);
    const std::size_t r = b.dim(b.rank() - 1);
    if (b.dim(b.rank() - 2) != q) {
        dim_error("matmul", "inner dimensions differ: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
    }
    const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
    const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
    const std::size_t batch_rank = std::max(batch_a.size(), batch_b.size());
    Shape batch(batch_rank);
    for (std::size_t i = 0; i < batch_rank; ++i) {
        const std::size_t da = i + batch_a.size() >= batch_rank ? batch_a[i + batch_a.size() - batch_rank] : 1;
        const std::size_t db = i + batch_b.size() >= batch_rank ? batch_b[i + batch_b.size() - batch_rank] : 1;
        if (da != db && da != 1 && db != 1) {
            dim_error("matmul", "batch dimensions not broadcast-compatible: " + shape_to_string(a.shape()) + " x " +
                                    shape_to_string(b.shape()));
        }
        batch[i] = std::max(da, db);
    }
    const std::size_t nbatch = shape_size(batch);

    // flat offsets of each output batch entry into a and b
    auto offsets_for = [&](const Shape& own, std::size_t matrix_size) {
        std::vector<std::size_t> offsets(nbatch);
        std::vector<std::size_t> index(batch_rank, 0);
        for (std::size_t n = 0; n < nbatch; ++n) {
            std::size_t flat = 0;
            for (std::size_t i = 0; i < own.size(); ++i) {
                const std::size_t out_axis = i + batch_rank - own.size();
                const std::size_t idx = own[i] == 1 ? 0 : index[out_axis];
                flat = flat * own[i] + idx;
            }
            offsets[n] = flat * matrix_size;
            for (std::size_t ax = batch_rank; ax-- > 0;) {
                if (++index[ax] < batch[ax]) break;
                index[ax] = 0;
            }
        }
        return offsets;
    };
    auto off_a = offsets_for(batch_a, p * q);
    auto off_b = offsets_for(batch_b, q * r);

    Shape out_shape = batch;
    out_shape.push_back(p);
    out_shape.push_back(r);
    // A 2-D right operand is shared by every batch entry: fold the batch into rows.
    std::size_t groups = nbatch, rows = p;
    if (batch_b.empty()) {
        groups = 1;
        rows = nbatch * p;
        off_a.assign(1, 0);
        off_b.assign(1, 0);
    }
    std::vector<double> out(nbatch * p * r, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (std::size_t n = 0; n < groups; ++n) {
        MatMap C(out.data() + n * rows * r, idx(rows), idx(r));
        C.noalias() = ConstMatMap(pa + off_a[n], idx(rows), idx(q)) * ConstMatMap(pb + off_b[n], idx(q), idx(r));
    }
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&a, &b});
    Tape::record("matmul", result, {a, b},
                 [a, b, rows, q, r, groups, off_a = std::move(off_a), off_b = std::move(off_b)](
                     std::span<const double> g, const GradSlots& slots) {
                     double* ga = slots.slot(0);
                     double* gb = slots.slot(1);
                     const double* pa = a.data().data();
                     const double* pb = b.data().data();
                     for (std::size_t n = 0; n < groups; ++n) {
                         const ConstMatMap G(g.data() + n * rows * r, idx(rows), idx(r));
                         if (ga) {
                             MatMap(ga + off_a[n], idx(rows), idx(q)).noalias() +=
                                 G * ConstMatMap(pb + off_b[n], idx(q), idx(r)).transpose();
                         }
                         if (gb) {
                             MatMap(gb + off_b[n], idx(q), idx(r)).noalias() +=
                                 ConstMatMap(pa + off_a[n], idx(rows), idx(q)).transpose() * G;
                         }
                     }
                 });
    return result;
}

// ---------------------------------------------------------------------------
// softmax / reductions

namespace {

struct AxisSplit {
    std::size_t outer;
    std::size_t length;
    std::size_t inner;
};

AxisSplit split_at(const Shape& shape, std::size_t axis, std::string_view op) {
    if (axis >= shape.size()) {
        dim_error(op, "axis " + std::to_string(axis) + " invalid for shape " + shape_to_string(shape));
    }
    AxisSplit s{1, shape[axis], 1};
    for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
    for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, std::size_t axis) {
    const AxisSplit s = split_at(x.shape(), axis, "softmax");
    const double* in = x.data().data();
    std::vector<double> out(x.size());
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t k = 0; k < s.inner; ++k) {
            const std::size_t base = o * s.length * s.inner + k;
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t l = 0; l < s.length; ++l) peak = std::max(peak, in[base + l * s.inner]);
            double total = 0.0;
            for (std::size_t l = 0; l < s.length; ++l) {
                const double e = std::exp(in[base + l * s.inner] - peak);
                out[base + l * s.inner] = e;
                total += e;
            }
            for (std::size_t l = 0; l < s.length; ++l) out[base + l * s.inner] /= total;
        }
    }
    Tensor result(x.shape(), std::move(out));
    finish(result, {&x});
    const Tensor y = result.detach();
    Tape::record("softmax", result, {x}, [y, s](std::span<const double> g, const GradSlots& slots) {
        double* gx = slots.slot(0);
        if (!gx) return;
        const double* py = y.data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            for (std::size_t k = 0; k < s.inner; ++k) {
                const std::size_t base = o * s.length * s.inner + k;
                double dot = 0.0;
                for (std::size_t l = 0; l < s.length; ++l) dot += g[base + l * s.inner] * py[base + l * s.inner];
                for (std::size_t l = 0; l < s.length; ++l) {
                    const std::size_t i = base + l * s.inner;
                    gx[i] += py[i] * (g[i] - dot);
                }
            }
        }
    });
    return result;
}

Tensor reduce(const Tensor& x, std::size_t axis, Reduce kind) {
    const AxisSplit s = split_at(x.shape(), axis, "reduce");
    Shape out_shape = x.shape();
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(axis));
    const double factor = kind == Reduce::Mean ? 1.0 / static_cast<double>(s.length) : 1.0;
    const double* in = x.data().data();
    std::vector<double> out(s.outer * s.inner, 0.0);
    for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t l = 0; l < s.length; ++l) {
            const double* row = in + (o * s.length + l) * s.inner;
            double* dst = out.data() + o * s.inner;
            for (std::size_t k = 0; k < s.inner; ++k) dst[k] += row[k];
        }
    }
    if (factor != 1.0) {
        for (double& v : out) v *= factor;
    }
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&x});
    Tape::record(kind == Reduce::Mean ? "reduce_mean" : "reduce_sum", result, {x},
                 [s, factor](std::span<const double> g, const GradSlots& slots) {
                     double* gx = slots.slot(0);
                     if (!gx) return;
                     for (std::size_t o = 0; o < s.outer; ++o) {
                         for (std::size_t l = 0; l < s.length; ++l) {
                             double* dst = gx + (o * s.length + l) * s.inner;
                             const double* src = g.data() + o * s.inner;
                             for (std::size_t k = 0; k < s.inner; ++k) dst[k] += src[k] * factor;
                         }
                     }
                 });
    return result;
}

Tensor sum_all(const Tensor& x) { return reduce(reshape(x, {x.size()}), 0, Reduce::Sum); }
Tensor mean_all(const Tensor& x) { return reduce(reshape(x, {x.size()}), 0, Reduce::Mean); }

// ---------------------------------------------------------------------------
// layout

Tensor permute(const Tensor& x, std::initializer_list<std::size_t> axes) {
    return permute(x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Tensor permute(const Tensor& x, std::span<const std::size_t> axes) {
    const std::size_t rank = x.rank();
    std::vector<bool> seen(rank, false);
    if (axes.size() != rank) {
        dim_error("permute", "axes list of length " + std::to_string(axes.size()) + " for shape " +
                                 shape_to_string(x.shape()));
    }
    for (std::size_t a : axes) {
        if (a >= rank || seen[a]) dim_error("permute", "axes are not a permutation for " + shape_to_string(x.shape()));
        seen[a] = true;
    }
    std::vector<std::size_t> in_strides(rank, 1);
    for (std::size_t i = rank; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.dim(i);
    Shape out_shape(rank);
    for (std::size_t i = 0; i < rank; ++i) out_shape[i] = x.dim(axes[i]);

    const std::size_t n = x.size();
    std::vector<std::size_t> source(n);
    std::vector<std::size_t> index(rank, 0);
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t src = 0;
        for (std::size_t i = 0; i < rank; ++i) src += index[i] * in_strides[axes[i]];
        source[flat] = src;
        for (std::size_t ax = rank; ax-- > 0;) {
            if (++index[ax] < out_shape[ax]) break;
            index[ax] = 0;
        }
    }
    const double* in = x.data().data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = in[source[i]];
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&x});
    Tape::record("permute", result, {x},
                 [source = std::move(source)](std::span<const double> g, const GradSlots& slots) {
                     double* gx = slots.slot(0);
                     if (!gx) return;
                     for (std::size_t i = 0; i < g.size(); ++i) gx[source[i]] += g[i];
                 });
    return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
    if (shape_size(shape) != x.size()) {
        dim_error("reshape", "cannot reshape " + shape_to_string(x.shape()) + " into " + shape_to_string(shape));
    }
    Tensor result(std::move(shape), x.values());
    finish(result, {&x});
    Tape::record("reshape", result, {x}, [](std::span<const double> g, const GradSlots& slots) {
        accumulate(slots.slot(0), g);
    });
    return result;
}

Tensor concat(std::span<const Tensor> xs, std::size_t axis) {
    if (xs.empty()) throw DimensionError("concat: no inputs");
    const Shape& first = xs.front().shape();
    if (axis >= first.size()) dim_error("concat", "axis out of range for " + shape_to_string(first));
    std::vector<std::size_t> lengths;
    std::size_t total = 0;
    for (const Tensor& t : xs) {
        Shape a = t.shape();
        Shape b = first;
        if (a.size() != b.size()) dim_error("concat", "rank mismatch " + shape_to_string(a) + " vs " + shape_to_string(b));
        a[axis] = 0;
        b[axis] = 0;
        if (a != b) {
            dim_error("concat", "shapes " + shape_to_string(t.shape()) + " and " + shape_to_string(first) +
                                    " differ off the concat axis");
        }
        lengths.push_back(t.dim(axis));
        total += t.dim(axis);
    }
    Shape out_shape = first;
    out_shape[axis] = total;
    const AxisSplit s = split_at(out_shape, axis, "concat");
    std::vector<double> out(shape_size(out_shape));
    std::size_t offset = 0;
    for (std::size_t t = 0; t < xs.size(); ++t) {
        const double* in = xs[t].data().data();
        for (std::size_t o = 0; o < s.outer; ++o) {
            std::copy_n(in + o * lengths[t] * s.inner, lengths[t] * s.inner,
                        out.data() + (o * total + offset) * s.inner);
        }
        offset += lengths[t];
    }
    Tensor result(std::move(out_shape), std::move(out));
    const bool narrow = std::any_of(xs.begin(), xs.end(), [](const Tensor& t) { return t.storage() == Storage::F32; });
    if (narrow) result = result.to_storage(Storage::F32);
    std::vector<Tensor> inputs(xs.begin(), xs.end());
    Tape::record("concat", result, std::move(inputs),
                 [lengths, total, s](std::span<const double> g, const GradSlots& slots) {
                     std::size_t offset = 0;
                     for (std::size_t t = 0; t < lengths.size(); ++t) {
                         if (double* gx = slots.slot(t)) {
                             for (std::size_t o = 0; o < s.outer; ++o) {
                                 const double* src = g.data() + (o * total + offset) * s.inner;
                                 double* dst = gx + o * lengths[t] * s.inner;
                                 for (std::size_t k = 0; k < lengths[t] * s.inner; ++k) dst[k] += src[k];
                             }
                         }
                         offset += lengths[t];
                     }
                 });
    return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
    const AxisSplit s = split_at(x.shape(), axis, "slice");
    if (length == 0 || start + length > s.length) {
        dim_error("slice", "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                               ") outside axis " + std::to_string(axis) + " of " + shape_to_string(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape[axis] = length;
    std::vector<double> out(s.outer * length * s.inner);
    const double* in = x.data().data();
    for (std::size_t o = 0; o < s.outer; ++o) {
        std::copy_n(in + (o * s.length + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
    }
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&x});
    Tape::record("slice", result, {x}, [s, start, length](std::span<const double> g, const GradSlots& slots) {
        double* gx = slots.slot(0);
        if (!gx) return;
        for (std::size_t o = 0; o < s.outer; ++o) {
            const double* src = g.data() + o * length * s.inner;
            double* dst = gx + (o * s.length + start) * s.inner;
            for (std::size_t k = 0; k < length * s.inner; ++k) dst[k] += src[k];
        }
    });
    return result;
}

Tensor expand(const Tensor& x, std::size_t axis, std::size_t count) {
    if (axis > x.rank() || count == 0) {
        dim_error("expand", "cannot insert axis " + std::to_string(axis) + " of extent " + std::to_string(count) +
                                " into " + shape_to_string(x.shape()));
    }
    std::size_t outer = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    const std::size_t inner = x.size() / outer;
    Shape out_shape = x.shape();
    out_shape.insert(out_shape.begin() + static_cast<std::ptrdiff_t>(axis), count);
    std::vector<double> out(x.size() * count);
    const double* in = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t c = 0; c < count; ++c) std::copy_n(in + o * inner, inner, out.data() + (o * count + c) * inner);
    }
    Tensor result(std::move(out_shape), std::move(out));
    finish(result, {&x});
    Tape::record("expand", result, {x}, [outer, inner, count](std::span<const double> g, const GradSlots& slots) {
        double* gx = slots.slot(0);
        if (!gx) return;
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t c = 0; c < count; ++c) {
                const double* src = g.data() + (o * count + c) * inner;
                for (std::size_t k = 0; k < inner; ++k) gx[o * inner + k] += src[k];
            }
        }
    });
    return result;
}

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
    if (table.rank() != 2) dim_error("gather_rows", "table must be rank 2, got " + shape_to_string(table.shape()));
    if (indices.empty()) dim_error("gather_rows", "empty index list");
    const std::size_t rows = table.dim(0);
    const std::size_t width = table.dim(1);
    std::vector<double> out(indices.size() * width);
    const double* in = table.data().data();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows) {
            throw std::out_of_range("gather_rows: index " + std::to_string(indices[i]) + " outside table of " +
                                    std::to_string(rows) + " rows");
        }
        std::copy_n(in + indices[i] * width, width, out.data() + i * width);
    }
    Tensor result({indices.size(), width}, std::move(out));
    finish(result, {&table});
    Tape::record("gather_rows", result, {table},
                 [idx = std::vector<std::size_t>(indices.begin(), indices.end()), width](std::span<const double> g,
                                                                                         const GradSlots& slots) {
                     double* gt = slots.slot(0);
                     if (!gt) return;
                     for (std::size_t i = 0; i < idx.size(); ++i) {
                         for (std::size_t k = 0; k < width; ++k) gt[idx[i] * width + k] += g[i * width + k];
                     }
                 });
    return result;
}

Tensor conv_time(const Tensor& x, const Tensor& kernel) {
    if (x.rank() != 3 || kernel.rank() != 3) {
        dim_error("conv_time", "expects x [B,T,C_in] and kernel [w,C_in,C_out], got " + shape_to_string(x.shape()) +
                                   " and " + shape_to_string(kernel.shape()));
    }
    const std::size_t B = x.dim(0), T = x.dim(1), Cin = x.dim(2);
    const std::size_t w = kernel.dim(0), Cout = kernel.dim(2);
    if (kernel.dim(1) != Cin) {
        dim_error("conv_time", "channel mismatch between " + shape_to_string(x.shape()) + " and kernel " +
                                   shape_to_string(kernel.shape()));
    }
    if (w > T) {
        dim_error("conv_time", "kernel width " + std::to_string(w) + " exceeds sequence length " + std::to_string(T) +
                                   " (" + shape_to_string(x.shape()) + ")");
    }
    const std::size_t To = T - w + 1;
    std::vector<double> out(B * To * Cout, 0.0);
    const double* px = x.data().data();
    const double* pk = kernel.data().data();
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t t = 0; t < To; ++t) {
            double* dst = out.data() + (b * To + t) * Cout;
            for (std::size_t s = 0; s < w; ++s) {
                const double* row = px + (b * T + t + s) * Cin;
                const double* ks = pk + s * Cin * Cout;
                for (std::size_t c = 0; c < Cin; ++c) {
                    const double v = row[c];
                    const double* kc = ks + c * Cout;
                    for (std::size_t o = 0; o < Cout; ++o) dst[o] += v * kc[o];
                }
            }
        }
    }
    Tensor result({B, To, Cout}, std::move(out));
    finish(result, {&x, &kernel});
    Tape::record("conv_time", result, {x, kernel},
                 [x, kernel, B, T, Cin, w, Cout, To](std::span<const double> g, const GradSlots& slots) {
                     double* gx = slots.slot(0);
                     double* gk = slots.slot(1);
                     const double* px = x.data().data();
                     const double* pk = kernel.data().data();
                     for (std::size_t b = 0; b < B; ++b) {
                         for (std::size_t t = 0; t < To; ++t) {
                             const double* go = g.data() + (b * To + t) * Cout;
                             for (std::size_t s = 0; s < w; ++s) {
                                 const std::size_t row = (b * T + t + s) * Cin;
                                 for (std::size_t c = 0; c < Cin; ++c) {
                                     const double* kc = pk + (s * Cin + c) * Cout;
                                     if (gx) {
                                         double acc = 0.0;
                                         for (std::size_t o = 0; o < Cout; ++o) acc += go[o] * kc[o];
                                         gx[row + c] += acc;
                                     }
                                     if (gk) {
                                         const double v = px[row + c];
                                         double* gkc = gk + (s * Cin + c) * Cout;
                                         for (std::size_t o = 0; o < Cout; ++o) gkc[o] += v * go[o];
                                     }
                                 }
                             }
                         }
                     }
                 });
    return result;
}

Tensor mse_loss(const Tensor& prediction, const Tensor& target) {
    if (prediction.shape() != target.shape()) {
        dim_error("mse_loss", "prediction " + shape_to_string(prediction.shape()) + " vs target " +
                                  shape_to_string(target.shape()));
    }
    const std::size_t n = prediction.size();
    const double* p = prediction.data().data();
    const double* y = target.data().data();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = p[i] - y[i];
        total += d * d;
    }
    Tensor result = Tensor::scalar(total / static_cast<double>(n));
    finish(result, {&prediction, &target});
    Tape::record("mse_loss", result, {prediction, target},
                 [prediction, target, n](std::span<const double> g, const GradSlots& slots) {
                     double* gp = slots.slot(0);
                     double* gy = slots.slot(1);
                     const double* p = prediction.data().data();
                     const double* y = target.data().data();
                     const double c = 2.0 * g[0] / static_cast<double>(n);
                     for (std::size_t i = 0; i < n; ++i) {
                         const double d = c * (p[i] - y[i]);
                         if (gp) gp[i] += d;
                         if (gy) gy[i] -= d;
                     }
                 });
    return result;
}

}  // namespace embs
