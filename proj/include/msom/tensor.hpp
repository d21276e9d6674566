#pragma once

// Dense float32 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle onto a shared node. Operations record a node on
// the thread's active Tape whenever a Tape is active and at least one input
// requires a gradient; otherwise they run in plain inference mode.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "msom/error.hpp"

namespace msom {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

struct Node {
    Shape shape;
    std::vector<float> value;
    std::vector<float> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> inputs;
    std::function<void(Node&)> backward;

    std::vector<float>& ensure_grad();
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, float value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<float> values, bool requires_grad = false);
    static Tensor scalar(float value);

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->value.size(); }

    std::span<const float> data() const { return node_->value; }
    // Mutable access is meant for leaves (parameters, inputs) only.
    std::span<float> mutable_data() { return node_->value; }
    float item() const;
    float at(std::initializer_list<std::size_t> index) const;

    bool requires_grad() const { return node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const { return !node_->grad.empty(); }
    std::span<const float> grad() const { return node_->grad; }
    void zero_grad() { node_->grad.clear(); }

    // Detached deep copy of the value.
    Tensor clone() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

// Append-only record of differentiable operations. Backward visits nodes in
// reverse append order exactly once and then clears the tape.
class Tape {
public:
    void record(std::shared_ptr<Node> node) { nodes_.push_back(std::move(node)); }
    std::size_t size() const { return nodes_.size(); }
    bool empty() const { return nodes_.empty(); }
    void clear() { nodes_.clear(); }
    void backward(const Tensor& loss);

private:
    std::vector<std::shared_ptr<Node>> nodes_;
};

Tape* active_tape();

// Makes `tape` the active tape of the calling thread for the scope lifetime.
class TapeScope {
public:
    explicit TapeScope(Tape& tape);
    ~TapeScope();
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* previous_;
};

// Backward on the active tape.
void backward(const Tensor& loss);

// Finite-checks on every backward rule. Defaults to the MSOM_DEBUG_FINITE
// environment variable.
void set_debug_checks(bool on);
bool debug_checks();

namespace detail {
bool should_record(std::initializer_list<const Tensor*> inputs);
bool should_record(std::span<const Tensor> inputs);
// Builds a result node; when `record` is set the node captures its inputs and
// backward rule and is appended to the active tape.
Tensor make_result(Shape shape, std::vector<float> value, bool record,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward,
                   const char* op);
}  // namespace detail

// Elementwise binary ops broadcast the lower-rank operand when its shape is a
// trailing suffix of the other operand's shape (a scalar always qualifies).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float factor);
Tensor add_scalar(const Tensor& a, float value);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor square(const Tensor& a);
Tensor rsqrt(const Tensor& a);

// a [..., K] x b [K, N] -> [..., N]
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a, std::size_t axis);
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
Tensor permute(const Tensor& a, const std::vector<std::size_t>& order);
Tensor transpose(const Tensor& a, std::size_t axis0, std::size_t axis1);
Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& a, std::size_t axis, std::size_t start, std::size_t length);
Tensor pad_zeros(const Tensor& a, std::size_t axis, std::size_t before, std::size_t after);

// x [B, Cin, H, W], weight [Cout, Cin, k, k] with odd k, bias [Cout] or
// undefined. Stride 1, zero "same" padding.
Tensor conv2d(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

// x [B, L, C], weight [C, k], bias [C] or undefined. Causal: output t sees
// inputs t-k+1 .. t (left zero padding of k-1).
Tensor depthwise_conv1d(const Tensor& x, const Tensor& weight, const Tensor& bias = {});

Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log_softmax(const Tensor& a, std::size_t axis);

// x [N, D] -> [M, D] with out[m] = x[index[m]].
Tensor gather_rows(const Tensor& x, std::span<const std::int64_t> index);

// x [N, D] -> [n_segments, D]; row s is the mean of rows with segment id s.
// Segments with no rows yield zero rows.
Tensor segment_mean(const Tensor& x, std::span<const std::int64_t> segment,
                    std::size_t n_segments);

}  // namespace msom
