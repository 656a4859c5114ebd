#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "m3d/error.hpp"

// Dense row-major tensor with reverse-mode autodiff on an explicit tape.
//
// A Tape installs itself as the active tape for the current thread on
// construction. While a tape is active, ops whose inputs are grad-tracked
// record a backward closure; Tape::backward replays the closures in reverse
// construction order. Gradients live in the tape, not in the tensor, so
// parameters can be shared read-only across concurrent forward passes as
// long as each thread uses its own tape.

namespace m3d {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

// Opt-in debug mode: scan every op output for NaN/Inf and throw NumericError
// naming the op. Off by default (it touches every element).
void set_check_finite(bool enabled);
bool check_finite_enabled();

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> val;
  bool tracked = false;
};

}  // namespace detail

template <class T>
class Tape;

template <class T>
class Tensor {
 public:
  using Node = detail::Node<T>;

  Tensor() = default;

  static Tensor zeros(Shape shape, bool tracked = false);
  static Tensor full(Shape shape, T value, bool tracked = false);
  static Tensor from(Shape shape, std::vector<T> values, bool tracked = false);
  static Tensor scalar(T value, bool tracked = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t size(std::size_t axis) const { return node_->shape[axis]; }
  std::size_t numel() const { return node_->val.size(); }

  bool tracked() const { return node_->tracked; }
  void set_tracked(bool tracked) { node_->tracked = tracked; }

  std::span<const T> data() const { return node_->val; }
  std::span<T> mutable_data() { return node_->val; }

  T item() const;  // scalar tensors only

  // Deep copy of values; the copy starts untracked.
  Tensor clone() const;

  std::shared_ptr<Node> node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}
  std::shared_ptr<Node> node_;

  template <class U>
  friend Tensor<U> make_tensor(Shape, std::vector<U>, bool);
};

template <class T>
Tensor<T> make_tensor(Shape shape, std::vector<T> values, bool tracked);

template <class T>
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  // Runs the recorded closures in reverse order, seeding d(loss)/d(loss)=1.
  // loss must be a scalar; calling backward twice on one tape is an error.
  void backward(const Tensor<T>& loss);

  // Gradient of the last backward() w.r.t. t. Zeros if t never received one.
  std::vector<T> grad(const Tensor<T>& t) const;

  std::size_t num_steps() const { return steps_.size(); }
  bool consumed() const { return consumed_; }

  // Op-side interface.
  void record(std::function<void()> fn);
  std::vector<T>& grad_buf(const detail::Node<T>* n);
  const std::vector<T>* find_grad(const detail::Node<T>* n) const;

 private:
  std::vector<std::function<void()>> steps_;
  std::unordered_map<const detail::Node<T>*, std::vector<T>> grads_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

// ---- elementwise / unary ----
template <class T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> divide(const Tensor<T>& a, const Tensor<T>& b);
template <class T> Tensor<T> add_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> mul_scalar(const Tensor<T>& a, T c);
template <class T> Tensor<T> neg(const Tensor<T>& a);
template <class T> Tensor<T> exp(const Tensor<T>& a);
template <class T> Tensor<T> sqrt(const Tensor<T>& a);
template <class T> Tensor<T> recip(const Tensor<T>& a);
template <class T> Tensor<T> softplus(const Tensor<T>& a);
template <class T> Tensor<T> silu(const Tensor<T>& a);
template <class T> Tensor<T> gelu(const Tensor<T>& a);
template <class T> Tensor<T> relu(const Tensor<T>& a);

// x * s with s broadcast over x's trailing axes; s.shape must equal the
// leading axes of x.shape.
template <class T> Tensor<T> mul_prefix(const Tensor<T>& x, const Tensor<T>& s);

// ---- linear algebra ----
template <class T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// ---- normalization / attention pieces ----
template <class T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma,
                    const Tensor<T>& beta, T eps);
template <class T> Tensor<T> softmax(const Tensor<T>& x, std::size_t axis);

// ---- structural ----
template <class T> Tensor<T> flip(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> concat(const Tensor<T>& a, const Tensor<T>& b, std::size_t axis);
template <class T>
Tensor<T> gather(const Tensor<T>& x, const std::vector<std::size_t>& indices, std::size_t axis);
template <class T> Tensor<T> reshape(const Tensor<T>& x, Shape new_shape);
template <class T> Tensor<T> permute(const Tensor<T>& x, const std::vector<std::size_t>& perm);

// ---- reductions ----
template <class T> Tensor<T> reduce_sum(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> reduce_mean(const Tensor<T>& x, std::size_t axis);
// Population variance (1/n), matching the normalization ops built on it.
template <class T> Tensor<T> reduce_var(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> reduce_max(const Tensor<T>& x, std::size_t axis);
template <class T> Tensor<T> sum_all(const Tensor<T>& x);

// ---- losses / regularization ----
template <class T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t label);
template <class T>
Tensor<T> dropout(const Tensor<T>& x, T rate, std::mt19937_64& rng, bool training);

// ---- sequence ops ----
// Depthwise causal conv over axis 0 of x: y[t,c] = b[c] + sum_j w[c,j] x[t-j,c].
template <class T>
Tensor<T> conv1d_depthwise_causal(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

}  // namespace m3d
