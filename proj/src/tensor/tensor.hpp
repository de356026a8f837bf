#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace bimors {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape) noexcept;
std::string shape_str(const Shape& shape);

namespace detail {

// One value in the dynamic graph. Inputs are held strongly so the graph
// lives as long as its outputs; nothing points forward, so dropping the loss
// releases every intermediate.
struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad; // empty until the first accumulation
    bool requires_grad = false;
    bool is_leaf = true;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    float* grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), 0.0f);
        return grad.data();
    }
};

} // namespace detail

// Ops executed while a guard is alive on the current thread record no graph.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled() noexcept;

// Dense row-major f32 tensor with value semantics for the handle and shared
// ownership of the underlying graph node.
class Tensor {
public:
    Tensor() = default;

    static Tensor constant(Shape shape, std::vector<float> values);
    static Tensor parameter(Shape shape, std::vector<float> values);
    static Tensor zeros(Shape shape);
    static Tensor scalar(float value);

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const;
    std::size_t rank() const { return shape().size(); }
    // Negative indices count from the back.
    std::size_t dim(int axis) const;
    std::size_t numel() const { return data().size(); }

    std::span<const float> data() const;
    // Only leaves may be written in place (optimizer updates, initialization).
    std::span<float> mutable_data();
    float item() const;

    bool requires_grad() const;
    bool is_leaf() const;
    bool has_grad() const;
    std::span<const float> grad() const;
    std::span<float> mutable_grad();
    // Allocates (or resets) a zero gradient buffer.
    void zero_grad();
    void clear_grad();
    const char* op_name() const;

    // Constant copy of the current values, outside any graph.
    Tensor detach() const;

    const std::shared_ptr<detail::Node>& node() const { return node_; }
    static Tensor from_node(std::shared_ptr<detail::Node> node);

private:
    std::shared_ptr<detail::Node> node_;
};

// Reverse pass from a single-element tensor. Leaf gradients accumulate
// across calls; every reachable requires_grad node ends with a populated
// buffer. Returns the number of graph nodes processed.
std::size_t backward(const Tensor& loss);

namespace testing {
// Scales the gradient flowing into every node produced by `op` (empty string
// disables). Negative control for the gradient checker.
void corrupt_backward(std::string_view op);
} // namespace testing

} // namespace bimors
