#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Var is a handle to a node in a dynamically built graph. Leaves either own
// their value or alias an external tensor (a parameter living in a ParamSet);
// aliasing leaves never copy weights. Calling backward() on a scalar node runs
// the graph in reverse topological order and accumulates gradients into every
// node that requires them.

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "ftlab/tensor.hpp"

namespace ftlab::ag {

template <typename T>
struct Node {
    Tensor<T> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    const Tensor<T>& value() const { return external ? *external : owned; }
    Tensor<T>& grad_buf() {
        if (grad.empty() && value().numel() > 0) grad = Tensor<T>(value().shape());
        return grad;
    }
};

template <typename T>
class Var {
public:
    Var() = default;
    explicit Var(std::shared_ptr<Node<T>> n) : node_(std::move(n)) {}

    static Var constant(Tensor<T> value) {
        auto n = std::make_shared<Node<T>>();
        n->owned = std::move(value);
        return Var(std::move(n));
    }
    static Var param(Tensor<T> value) {
        auto v = constant(std::move(value));
        v.node_->requires_grad = true;
        return v;
    }
    /// Leaf aliasing `value`, which must outlive the graph.
    static Var alias(const Tensor<T>& value, bool requires_grad) {
        auto n = std::make_shared<Node<T>>();
        n->external = &value;
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    bool valid() const { return static_cast<bool>(node_); }
    const Tensor<T>& value() const { return node_->value(); }
    const Shape& shape() const { return value().shape(); }
    std::int64_t dim(std::size_t i) const { return value().dim(i); }
    bool requires_grad() const { return node_->requires_grad; }
    /// Accumulated gradient, or nullptr when none reached this node.
    const Tensor<T>* grad() const { return node_->grad.empty() ? nullptr : &node_->grad; }
    T item() const { return value()[0]; }
    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

/// Seeds d(root)/d(root) = 1 and propagates. `root` must hold a single element.
template <typename T>
void backward(const Var<T>& root);

// Elementwise / broadcasting
template <typename T> Var<T> add(const Var<T>& a, const Var<T>& b);
/// x + p where p's shape equals a suffix of x's shape.
template <typename T> Var<T> add_broadcast(const Var<T>& x, const Var<T>& p);
template <typename T> Var<T> mul(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> scale(const Var<T>& x, T s);
template <typename T> Var<T> gelu(const Var<T>& x);
template <typename T> Var<T> relu(const Var<T>& x);

// Dense layers. x: [..., in], w: [in, out], b: [out] (may be invalid Var for no bias).
template <typename T> Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps);
/// Multi-head softmax self-attention core. qkv: [B, T, 3d] packed q|k|v -> [B, T, d].
template <typename T> Var<T> attention(const Var<T>& qkv, int heads);

// Token manipulation on [B, T, d] sequences.
/// Prepends one shared token (shape [d]) to every sequence.
template <typename T> Var<T> prepend_token(const Var<T>& x, const Var<T>& token);
template <typename T> Var<T> concat_tokens(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> slice_tokens(const Var<T>& x, std::int64_t start, std::int64_t count);
/// out[b, j] = x[b, index[b][j]].
template <typename T> Var<T> gather_tokens(const Var<T>& x, const std::vector<std::vector<std::int64_t>>& index);
/// Inverse of gather: a [B, total, d] sequence with x[b, j] placed at index[b][j] and
/// `fill` (shape [d]) everywhere else.
template <typename T>
Var<T> scatter_tokens(const Var<T>& x, const Var<T>& fill, const std::vector<std::vector<std::int64_t>>& index,
                      std::int64_t total);
/// Mean over tokens [start, T) -> [B, d].
template <typename T> Var<T> mean_tokens(const Var<T>& x, std::int64_t start);
/// [B, 1, d] or any [B, ..., d] with one middle element -> [B, d]; general reshape otherwise.
template <typename T> Var<T> reshape(const Var<T>& x, Shape shape);
/// Concatenates two [R, da] and [R, db] matrices along the last axis.
template <typename T> Var<T> concat_last(const Var<T>& a, const Var<T>& b);
template <typename T> Var<T> l2_normalize(const Var<T>& x, T eps);

// Image-space ops for the segmentation decoder. Layout [B, C, H, W].
/// [B, g*g, C] -> [B, C, g, g].
template <typename T> Var<T> tokens_to_grid(const Var<T>& x, std::int64_t grid);
/// Same-padded stride-1 convolution; w: [Cout, Cin, k, k], b: [Cout].
template <typename T> Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b);
template <typename T> Var<T> upsample2x(const Var<T>& x);
template <typename T> Var<T> concat_channels(const Var<T>& a, const Var<T>& b);

// Reductions and losses (all return a single-element tensor).
template <typename T> Var<T> sum(const Var<T>& x);
/// Mean over queries of -log softmax of the positive logit against shared negatives.
template <typename T> Var<T> infonce(const Var<T>& q, const Var<T>& k_pos, const Var<T>& k_neg, T tau);
/// In-batch variant: the positive of query i is key i; every other key is a negative.
template <typename T> Var<T> infonce_in_batch(const Var<T>& q, const Var<T>& k, T tau);
/// Mean per-element binary cross-entropy on logits.
template <typename T> Var<T> bce_with_logits(const Var<T>& logits, const Tensor<T>& targets);
/// pred: [B, P, D]; mask: B*P bytes (1 = masked). Per-sample mean over masked patches of the
/// per-patch pixel MSE, then mean over the batch.
template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Tensor<T>& target, const std::vector<std::uint8_t>& mask);
/// 1 - soft Dice of sigmoid(logits) against a binary target, averaged over the batch.
template <typename T> Var<T> dice_loss(const Var<T>& logits, const Tensor<T>& target, T smooth);

}  // namespace ftlab::ag
