#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "gcnforge/rng.hpp"

namespace gcnforge {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Dense row-major array of doubles. Tensor is a handle: copies share the same
// storage, which is how parameters are referenced from the tape and how the
// output projection is tied to the token embedding. Use clone() for a deep
// copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // Product of all leading dims / size of the last dim.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data();
  std::span<const double> data() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool has_grad() const;
  // Allocates a zero-filled gradient buffer if absent. Gradient accumulation
  // is allowed through any handle, including const ones.
  std::span<double> grad() const;
  void zero_grad();

  Tensor clone() const;
  bool shares_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  const Impl& impl() const;
  Impl& impl();

  std::shared_ptr<Impl> impl_;
};

// Dynamic reverse-mode tape. Every op computes its output eagerly; when the
// tape is recording and at least one input requires a gradient, the op is
// appended together with its backward rule. Entries are appended in
// evaluation order, so replaying them in reverse is a valid topological
// order. A tape and the tensors it produced belong to a single thread.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // [m,k] x [k,n] -> [m,n]
  Tensor matmul(const Tensor& a, const Tensor& b);
  // [m,k] x [n,k]^T -> [m,n]
  Tensor matmul_nt(const Tensor& a, const Tensor& b);
  // b either matches a's shape or a's trailing dims (broadcast over leading rows).
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  Tensor exp(const Tensor& a);
  Tensor clamp(const Tensor& a, double lo, double hi);
  Tensor minimum(const Tensor& a, const Tensor& b);
  Tensor sum(const Tensor& a);
  Tensor mean(const Tensor& a);
  // sum_i weights[i] * a[i]; the weights are constants.
  Tensor weighted_sum(const Tensor& a, std::span<const double> weights);

  Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
  Tensor gather_rows(const Tensor& a, std::span<const std::size_t> rows);
  // Rank-2 only; axis 0 or 1 (-1 means the last axis).
  Tensor softmax(const Tensor& a, int axis);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
  // tanh approximation
  Tensor gelu(const Tensor& x);
  Tensor reshape(const Tensor& x, Shape shape);
  Tensor transpose(const Tensor& x);
  Tensor concat(std::span<const Tensor> parts, std::size_t axis);
  Tensor dropout(const Tensor& x, double p, Rng& rng);

  // Multi-head causal self-attention over packed sequences. qkv is [n, 3d]
  // holding the query, key and value projections side by side; segments are
  // the lengths of the packed sequences (summing to n). Attention never
  // crosses a segment boundary.
  Tensor causal_attention(const Tensor& qkv, std::size_t n_heads,
                          std::span<const std::size_t> segments);

  // Mean next-token cross entropy over rows whose mask is non-zero.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                       std::span<const std::uint8_t> mask);
  // log softmax(logits[i])[targets[i]] for every row, shape [n].
  Tensor token_logprobs(const Tensor& logits, std::span<const int> targets);
  // Entropy of softmax(logits[i]) per row, shape [n].
  Tensor entropy(const Tensor& logits);

  // Populates grad() of every requires_grad tensor reachable from loss.
  // Gradients accumulate into existing buffers.
  void backward(const Tensor& loss);

 private:
  struct Node {
    const char* op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  void record(const char* op, std::vector<Tensor> inputs, const Tensor& output,
              std::function<void()> backward);

  bool recording_;
  std::vector<Node> nodes_;
};

// Throws NumericError naming `what` if any element of t is NaN or infinite.
void require_finite(const Tensor& t, std::string_view what);

}  // namespace gcnforge
