#include "tensor/tensor.hpp"

#include "common/error.hpp"
#include "common/parallel.hpp"

#include <atomic>
#include <mutex>
#include <unordered_set>

namespace bimors {

std::size_t shape_numel(const Shape& shape) noexcept {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

std::string shape_str(const Shape& shape) {
    std::string out = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(shape[i]);
    }
    return out + "]";
}

NoGradGuard::NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }

NoGradGuard::~NoGradGuard() { detail::grad_mode_flag() = previous_; }

bool grad_enabled() noexcept { return detail::grad_mode_flag(); }

namespace {

std::shared_ptr<detail::Node> make_leaf(Shape shape, std::vector<float> values, bool requires_grad) {
    for (auto d : shape)
        if (d == 0) fail(ErrorCode::shape, "tensor dimensions must be positive, got " + shape_str(shape));
    if (shape.empty()) fail(ErrorCode::shape, "tensor rank must be at least 1");
    if (shape_numel(shape) != values.size())
        fail(ErrorCode::shape, "shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                                   " values, got " + std::to_string(values.size()));
    auto node = std::make_shared<detail::Node>();
    node->shape = std::move(shape);
    node->value = std::move(values);
    node->requires_grad = requires_grad;
    return node;
}

const detail::Node& checked(const std::shared_ptr<detail::Node>& node) {
    if (!node) fail(ErrorCode::contract, "use of an undefined tensor");
    return *node;
}

std::mutex g_corrupt_mutex;
std::string g_corrupt_op;
std::atomic<bool> g_corrupt_active{false};

} // namespace

Tensor Tensor::constant(Shape shape, std::vector<float> values) {
    return from_node(make_leaf(std::move(shape), std::move(values), false));
}

Tensor Tensor::parameter(Shape shape, std::vector<float> values) {
    return from_node(make_leaf(std::move(shape), std::move(values), true));
}

Tensor Tensor::zeros(Shape shape) {
    const auto n = shape_numel(shape);
    return constant(std::move(shape), std::vector<float>(n, 0.0f));
}

Tensor Tensor::scalar(float value) { return constant({1}, {value}); }

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
}

const Shape& Tensor::shape() const { return checked(node_).shape; }

std::size_t Tensor::dim(int axis) const {
    const auto& s = shape();
    const int r = static_cast<int>(s.size());
    const int a = axis < 0 ? r + axis : axis;
    if (a < 0 || a >= r) fail(ErrorCode::index, "axis " + std::to_string(axis) + " out of range for " + shape_str(s));
    return s[static_cast<std::size_t>(a)];
}

std::span<const float> Tensor::data() const { return checked(node_).value; }

std::span<float> Tensor::mutable_data() {
    checked(node_);
    if (!node_->is_leaf) fail(ErrorCode::contract, std::string("in-place write to non-leaf tensor from op ") + node_->op);
    return node_->value;
}

float Tensor::item() const {
    const auto& n = checked(node_);
    if (n.value.size() != 1) fail(ErrorCode::contract, "item() on tensor of shape " + shape_str(n.shape));
    return n.value[0];
}

bool Tensor::requires_grad() const { return checked(node_).requires_grad; }

bool Tensor::is_leaf() const { return checked(node_).is_leaf; }

bool Tensor::has_grad() const { return !checked(node_).grad.empty(); }

std::span<const float> Tensor::grad() const {
    const auto& n = checked(node_);
    if (n.grad.empty()) fail(ErrorCode::contract, std::string("tensor from op ") + n.op + " has no gradient");
    return n.grad;
}

std::span<float> Tensor::mutable_grad() {
    checked(node_);
    if (node_->grad.empty()) fail(ErrorCode::contract, std::string("tensor from op ") + node_->op + " has no gradient");
    return node_->grad;
}

void Tensor::zero_grad() {
    checked(node_);
    node_->grad.assign(node_->value.size(), 0.0f);
}

void Tensor::clear_grad() {
    checked(node_);
    node_->grad.clear();
    node_->grad.shrink_to_fit();
}

const char* Tensor::op_name() const { return checked(node_).op; }

Tensor Tensor::detach() const {
    const auto& n = checked(node_);
    return constant(n.shape, n.value);
}

std::size_t backward(const Tensor& loss) {
    const auto& root = loss.node();
    checked(root);
    if (root->value.size() != 1)
        fail(ErrorCode::contract, "backward requires a single-element loss, got shape " + shape_str(root->shape));
    if (!root->requires_grad) fail(ErrorCode::contract, "backward on a tensor that does not require grad");

    // Iterative post-order DFS; inputs visited in declaration order so the
    // resulting order, and therefore every accumulation, is deterministic.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->inputs.size()) {
            detail::Node* child = node->inputs[next++].get();
            if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    std::string corrupt_op;
    if (g_corrupt_active.load()) {
        std::lock_guard lock(g_corrupt_mutex);
        corrupt_op = g_corrupt_op;
    }

    // Intermediate buffers restart from zero so a second pass over the same
    // graph accumulates into leaves exactly once more.
    for (detail::Node* node : order)
        if (!node->is_leaf) node->grad.assign(node->value.size(), 0.0f);

    root->grad_buffer()[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        detail::Node* node = *it;
        if (node->is_leaf || !node->backward) continue;
        if (!corrupt_op.empty() && corrupt_op == node->op)
            for (auto& g : node->grad) g *= 1.25f;
        node->backward(*node);
    }
    return order.size();
}

namespace testing {

void corrupt_backward(std::string_view op) {
    std::lock_guard lock(g_corrupt_mutex);
    g_corrupt_op = std::string(op);
    g_corrupt_active.store(!g_corrupt_op.empty());
}

} // namespace testing

} // namespace bimors
