#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "unitmod/core.hpp"

UNITMOD_BEGIN_NAMESPACE

using Shape = std::vector<int>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl;
class Tensor;

/// A recorded operation. Holds the inputs it was applied to; `backward` reads
/// the gradient of the produced tensor and accumulates into input gradients.
class Node {
public:
    virtual ~Node() = default;
    virtual void backward(TensorImpl& out) = 0;
    virtual const char* name() const = 0;

    std::vector<Tensor> inputs;
};

struct TensorImpl {
    Shape shape;
    std::vector<real> data;
    std::vector<real> grad;
    bool requires_grad = false;
    std::shared_ptr<Node> grad_fn;
};

/// Dense row-major array with optional gradient tracking.
///
/// Copying a Tensor copies the handle, not the storage: both copies refer to
/// the same buffer and the same place in the autodiff graph. Use `clone()` for
/// an independent copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, real fill = 0);
    Tensor(Shape shape, std::vector<real> values);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape), real(0)); }
    static Tensor ones(Shape shape) { return Tensor(std::move(shape), real(1)); }
    static Tensor scalar(real v) { return Tensor(Shape{1}, v); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const;
    int dim(int axis) const;
    int ndim() const { return static_cast<int>(shape().size()); }
    std::int64_t numel() const;

    std::span<real> data();
    std::span<const real> data() const;
    real& operator[](std::int64_t i) { return impl_->data[static_cast<std::size_t>(i)]; }
    real operator[](std::int64_t i) const { return impl_->data[static_cast<std::size_t>(i)]; }
    real item() const;

    bool requires_grad() const { return impl_ && impl_->requires_grad; }
    /// Marks a leaf tensor as a gradient target. Throws on non-leaf tensors.
    Tensor& set_requires_grad(bool on = true);
    bool is_leaf() const { return !impl_ || !impl_->grad_fn; }

    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    /// Empty span when no gradient has been accumulated.
    std::span<const real> grad() const;
    /// Gradient buffer, allocated (zero-filled) on first access.
    std::span<real> grad_accumulator();
    void zero_grad();

    /// Reverse-mode sweep from a single-element tensor. Leaf gradients
    /// accumulate across calls; intermediate gradients are recomputed.
    void backward() const;

    Tensor detach() const;
    Tensor clone() const;
    Tensor reshape(Shape shape) const;

    const char* op_name() const;
    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
    TensorImpl* impl() const { return impl_.get(); }

private:
    friend Tensor make_op(const char*, Shape, std::vector<real>, std::vector<Tensor>,
                          std::function<void(TensorImpl&)>);
    std::shared_ptr<TensorImpl> impl_;
};

/// Thread-local switch for graph recording.
class GradMode {
public:
    static bool enabled();
    static void set(bool on);
};

class NoGradGuard {
public:
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

/// Builds the output of a differentiable operation. The backward callback is
/// recorded only when grad mode is on and at least one input needs gradients;
/// it receives the output impl (whose `grad` is populated) and must add into
/// the gradient accumulators of the inputs that require them.
Tensor make_op(const char* name, Shape shape, std::vector<real> values,
               std::vector<Tensor> inputs, std::function<void(TensorImpl&)> backward);

/// Accumulator for `t` if it takes part in differentiation, else an empty span.
std::span<real> grad_target(Tensor& t);

UNITMOD_END_NAMESPACE
