#include "unitmod/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

UNITMOD_BEGIN_NAMESPACE

namespace {

thread_local bool g_grad_enabled = true;

class LambdaNode final : public Node {
public:
    LambdaNode(const char* name, std::function<void(TensorImpl&)> fn)
        : name_(name), fn_(std::move(fn)) {}
    void backward(TensorImpl& out) override { fn_(out); }
    const char* name() const override { return name_; }

private:
    const char* name_;
    std::function<void(TensorImpl&)> fn_;
};

void check_shape(const Shape& shape) {
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (shape[i] < 0) {
            throw DimensionError("negative extent on axis " + std::to_string(i) + " of shape " +
                                 shape_str(shape));
        }
    }
}

}  // namespace

std::int64_t shape_numel(const Shape& shape) {
    std::int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

Tensor::Tensor(Shape shape, real fill) : impl_(std::make_shared<TensorImpl>()) {
    check_shape(shape);
    impl_->data.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<real> values) : impl_(std::make_shared<TensorImpl>()) {
    check_shape(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape)) {
        throw DimensionError("tensor of shape " + shape_str(shape) + " needs " +
                             std::to_string(shape_numel(shape)) + " values, got " +
                             std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
}

const Shape& Tensor::shape() const {
    static const Shape kEmpty;
    return impl_ ? impl_->shape : kEmpty;
}

int Tensor::dim(int axis) const {
    const Shape& s = shape();
    if (axis < 0) axis += static_cast<int>(s.size());
    if (axis < 0 || axis >= static_cast<int>(s.size())) {
        throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                             shape_str(s));
    }
    return s[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return impl_ ? static_cast<std::int64_t>(impl_->data.size()) : 0; }

std::span<real> Tensor::data() { return impl_->data; }
std::span<const real> Tensor::data() const { return impl_->data; }

real Tensor::item() const {
    if (numel() != 1) {
        throw ContractError("item() on tensor of shape " + shape_str(shape()));
    }
    return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (!is_leaf()) throw ContractError("set_requires_grad on a non-leaf tensor");
    impl_->requires_grad = on;
    return *this;
}

std::span<const real> Tensor::grad() const {
    if (!impl_) return {};
    return impl_->grad;
}

std::span<real> Tensor::grad_accumulator() {
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), real(0));
    return impl_->grad;
}

void Tensor::zero_grad() {
    if (impl_) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
}

void Tensor::backward() const {
    if (!impl_ || numel() != 1) {
        throw ContractError("backward() requires a single-element loss, got shape " +
                            shape_str(shape()));
    }
    if (!impl_->requires_grad) {
        throw ContractError("backward() on a loss that is not connected to any tracked tensor");
    }

    // Iterative post-order DFS gives a topological order (inputs before outputs).
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    std::vector<std::pair<TensorImpl*, std::size_t>> stack;
    stack.emplace_back(impl_.get(), 0);
    visited.insert(impl_.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (node->grad_fn && next < node->grad_fn->inputs.size()) {
            TensorImpl* child = node->grad_fn->inputs[next++].impl();
            if (child && child->requires_grad && visited.insert(child).second) {
                stack.emplace_back(child, 0);
            }
            continue;
        }
        order.push_back(node);
        stack.pop_back();
    }

    for (TensorImpl* t : order) {
        if (t->grad_fn) t->grad.assign(t->data.size(), real(0));
    }
    if (impl_->grad.empty()) impl_->grad.assign(1, real(0));
    impl_->grad[0] += real(1);

    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* t = *it;
        if (t->grad_fn) t->grad_fn->backward(*t);
    }
}

Tensor Tensor::detach() const {
    Tensor out(impl_->shape, impl_->data);
    return out;
}

Tensor Tensor::clone() const {
    Tensor out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad && is_leaf();
    out.impl_->grad = impl_->grad;
    return out;
}

Tensor Tensor::reshape(Shape shape) const {
    if (shape_numel(shape) != numel()) {
        throw DimensionError("cannot reshape " + shape_str(this->shape()) + " to " +
                             shape_str(shape));
    }
    Tensor self = *this;
    return make_op("reshape", std::move(shape), impl_->data, {self}, [self](TensorImpl& out) mutable {
        auto g = grad_target(self);
        if (g.empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += out.grad[i];
    });
}

const char* Tensor::op_name() const {
    if (!impl_ || !impl_->grad_fn) return "leaf";
    return impl_->grad_fn->name();
}

Tensor make_op(const char* name, Shape shape, std::vector<real> values, std::vector<Tensor> inputs,
               std::function<void(TensorImpl&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!GradMode::enabled()) return out;
    const bool track = std::any_of(inputs.begin(), inputs.end(),
                                   [](const Tensor& t) { return t.requires_grad(); });
    if (!track) return out;
    auto node = std::make_shared<LambdaNode>(name, std::move(backward));
    node->inputs = std::move(inputs);
    out.impl_->requires_grad = true;
    out.impl_->grad_fn = std::move(node);
    return out;
}

std::span<real> grad_target(Tensor& t) {
    if (!t.requires_grad()) return {};
    return t.grad_accumulator();
}

UNITMOD_END_NAMESPACE
