#pragma once

// Minimal tape-free reverse-mode differentiation over dense 64-bit tensors.
//
// Every op returns a Var that remembers its inputs and a backward closure.
// Var::backward() orders the reachable graph topologically and runs the
// closures in reverse, accumulating into Node::grad. Only the fixed set of
// ops the U-ViT needs is provided; each has a handwritten adjoint.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "uvit/tensor.hpp"

namespace uvit::ad {

struct Node;
using NodePtr = std::shared_ptr<Node>;

struct Node {
    Tensor value;
    Tensor grad;  // empty until something flows into it
    bool requires_grad = false;
    std::vector<NodePtr> inputs;
    // Receives the node itself so closures never own their output.
    std::function<void(Node&)> backward;

    Tensor& grad_buffer();
    void accumulate(const Tensor& g);
};

class Var {
public:
    Var() = default;
    explicit Var(Tensor value, bool requires_grad = false);

    static Var parameter(Tensor value) { return Var(std::move(value), true); }
    static Var constant(Tensor value) { return Var(std::move(value), false); }

    bool defined() const { return node_ != nullptr; }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    const Shape& shape() const { return node_->value.shape(); }
    std::int64_t dim(std::int64_t axis) const { return node_->value.dim(axis); }
    bool requires_grad() const { return node_ && node_->requires_grad; }

    // Gradient accumulated by the last backward(); zeros if nothing reached it.
    const Tensor& grad() const;
    void zero_grad();

    // Seeds d(self)/d(self) = 1; self must hold exactly one element.
    void backward() const;

    const NodePtr& node() const { return node_; }

private:
    explicit Var(NodePtr node) : node_(std::move(node)) {}
    friend Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

    NodePtr node_;
};

// Builds an op result. The backward closure is dropped when no input needs a
// gradient or when recording is disabled.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

bool grad_enabled();

class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

// ---- ops ------------------------------------------------------------------
// 2-D ops treat the leading dims as rows: a [.., K] tensor is rows x K.

// y = x W^T + b, W is [out, in], b is [out] or undefined.
Var linear(const Var& x, const Var& weight, const Var& bias = {});
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var gelu(const Var& x);
// Layer norm over the last dim with variance epsilon 1e-6; gain/bias optional.
Var layer_norm(const Var& x, const Var& gain = {}, const Var& bias = {});
// [M, K1] ++ [M, K2] -> [M, K1 + K2]
Var concat_cols(const Var& a, const Var& b);
// Stacks row blocks that share the column count.
Var concat_rows(std::span<const Var> parts);
// out[i, :] = table[index[i], :]; rows of the result have the table's width.
Var gather_rows(const Var& table, std::vector<std::int64_t> index);
// Flat element gather; out.flat[i] = x.flat[index[i]], result shaped as given.
Var gather(const Var& x, std::vector<std::int64_t> index, Shape out_shape);
Var reshape(const Var& x, Shape shape);

// Multi-head softmax self-attention over a ragged token batch.
// qkv is [M, 3D] (query | key | value column blocks); row_offsets has one
// entry per sequence plus a terminating M. Scale is 1/sqrt(D / heads).
Var self_attention(const Var& qkv, std::span<const std::int64_t> row_offsets, std::int64_t heads);

// Same-padded stride-1 convolution over NHWC input [B, H, W, Cin].
// weight is [Cout, k, k, Cin] with odd k; bias [Cout] or undefined.
Var conv2d(const Var& x, const Var& weight, const Var& bias = {});

// mean((pred - target)^2) over all elements.
Var mse(const Var& pred, const Tensor& target);

}  // namespace uvit::ad
