#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mrg {

using Shape = std::vector<std::size_t>;
using Mask = std::vector<std::uint8_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  // Adds this node's adjoint into parents[i]->grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    return grad;
  }
};

/// Dense row-major array participating in reverse-mode differentiation.
///
/// Copies share the underlying node, so a parameter handle held by a module
/// and the same handle inside a recorded graph refer to one buffer.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> values() const { return node_->value; }
  std::span<T> mutable_values() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const { return node_->value.at(r * cols() + c); }
  T item() const;

  bool requires_grad() const { return node_->requires_grad; }
  const char* op() const { return node_->op; }
  void zero_grad() { node_->grad.assign(node_->value.size(), T(0)); }
  void clear_grad() { node_->grad.clear(); }

  /// Reverse pass from a scalar root. Leaf gradients accumulate across calls.
  void backward() const;
  /// Reverse pass seeded with an upstream gradient of this tensor's shape.
  void backward(std::span<const T> seed) const;

  /// Same values, detached from any recorded graph.
  Tensor detach() const;

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// ---- differentiable operations --------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// x[m×n] + b[1×n] broadcast over rows. The only broadcasting op.
template <typename T> Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias);
template <typename T> Tensor<T> scale(const Tensor<T>& x, T s);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T s);
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, std::size_t axis);
template <typename T> Tensor<T> concat(std::span<const Tensor<T>> parts, std::size_t axis);
template <typename T> Tensor<T> slice(const Tensor<T>& x, std::size_t axis, std::size_t start, std::size_t length);
template <typename T> Tensor<T> transpose(const Tensor<T>& x);
template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
/// Row lookup; gradient scatters back into the selected rows only.
template <typename T> Tensor<T> gather_rows(const Tensor<T>& table, std::span<const std::size_t> rows);
/// Mean over `axis` of a matrix, counting only positions where mask != 0.
/// Keeps the reduced axis with extent 1.
template <typename T> Tensor<T> mean_pool(const Tensor<T>& x, std::size_t axis, const Mask& mask);
/// Row-wise layer normalization with affine gain/bias of shape [1×n].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps);
template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
/// Sum over rows of -log softmax(logits[r])[targets[r]].
template <typename T> Tensor<T> nll_loss(const Tensor<T>& logits, std::span<const std::size_t> targets);
/// Mean binary cross-entropy of sigmoid(logits) over positions with mask != 0.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const std::uint8_t> targets, const Mask& mask);

template <typename T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts, std::size_t axis) {
  std::vector<Tensor<T>> v(parts);
  return concat<T>(std::span<const Tensor<T>>(v), axis);
}

/// Additive logit mask: 0 where mask != 0, -1e9 elsewhere, repeated over rows.
template <typename T> Tensor<T> mask_bias(const Mask& mask, std::size_t rows);
/// Multiplicative row mask [rows×cols], each row all ones or all zeros.
template <typename T> Tensor<T> row_mask(const Mask& mask, std::size_t cols);

inline constexpr double kMaskedLogit = -1e9;

/// While alive, operations on this thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

namespace testing {
/// Corrupts the adjoint of every node whose op name matches until cleared.
void inject_adjoint_fault(std::string op);
void clear_adjoint_fault();
}  // namespace testing

}  // namespace mrg
