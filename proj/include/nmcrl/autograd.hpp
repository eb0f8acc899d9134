#pragma once

// Minimal reverse-mode differentiation over dense double tensors.
//
// Every op records its inputs and a hand-written backward rule; calling
// backward() on a scalar result walks the graph in reverse topological order.
// Tensors are row-major. Linear maps use the [in, out] weight layout, i.e.
// y = x * W + b.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace nmcrl {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Tensor {
  Shape shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0);
  Tensor(Shape s, std::vector<double> values);

  std::size_t size() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  std::size_t dim(std::size_t i) const { return shape.at(i); }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  std::span<double> row(std::size_t i, std::size_t width) { return {data.data() + i * width, width}; }
  std::span<const double> row(std::size_t i, std::size_t width) const {
    return {data.data() + i * width, width};
  }

  static Tensor identity(std::size_t n);
};

namespace ad {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  Tensor& ensure_grad();
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape; }
  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  // Gradient accumulated by backward(); zero-filled tensor if none yet.
  const Tensor& grad() const;
  void zero_grad();

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& shared() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction for its lifetime (evaluation mode).
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

// Seeds d(root)/d(root) = 1 and propagates. Root must hold a single element.
void backward(const Var& root);

// --- elementwise -----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double s);
Var gelu(const Var& x);
Var sigmoid(const Var& x);
Var square(const Var& x);

// alpha (one element) * a + (1 - alpha) * b
Var lerp(const Var& alpha, const Var& a, const Var& b);

// --- shape -----------------------------------------------------------------
Var reshape(const Var& x, Shape shape);
// [B, T, H*dh] -> [B*H, T, dh]
Var split_heads(const Var& x, std::size_t heads);
// [B*H, T, dh] -> [B, T, H*dh]
Var merge_heads(const Var& x, std::size_t heads);
// Stack two [m, d] and [n, d] matrices into [m+n, d].
Var concat_rows(const Var& a, const Var& b);

// --- reductions --------------------------------------------------------------
Var sum_all(const Var& x);
// Mean over one axis; the axis is removed from the result shape.
Var mean_axis(const Var& x, std::size_t axis);

// --- linear algebra ----------------------------------------------------------
// x[..., in] * w[in, out] (+ b[out])
Var linear(const Var& x, const Var& w);
Var linear(const Var& x, const Var& w, const Var& b);
// a[m, k] * b[k, n]
Var matmul(const Var& a, const Var& b);
// a[m, k] * b[n, k]^T
Var matmul_nt(const Var& a, const Var& b);
// Adds row r[1, d] (or [d]) to every row of x[..., d].
Var add_row(const Var& x, const Var& r);

// Scaled dot-product attention per group:
// softmax(q k^T * scale) v, q[G, Tq, d], k[G, Tk, d], v[G, Tk, dv].
// When attention != nullptr the row-stochastic weights [G, Tq, Tk] are copied out.
Var attention(const Var& q, const Var& k, const Var& v, double scale, Tensor* attention = nullptr);

// --- normalisation / activations over the last axis ------------------------
Var softmax_last(const Var& x);
// gain/bias may be undefined Vars for a plain normalisation.
Var layer_norm_last(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
Var l2_normalize_last(const Var& x, double eps = 1e-12);

// x[B, C, N] * w[B, C] broadcast over N
Var scale_channels(const Var& x, const Var& w);
// x[B, C, N] * g[B, N] broadcast over C
Var scale_columns(const Var& x, const Var& g);

// Per-sample channel mixing: y_i = M[ids_i] * x_i, x[B, C, L], M[S, C, C].
Var subject_mix(const Var& x, const Var& mats, std::span<const int> ids);

// Inverted dropout; identity when p == 0.
Var dropout(const Var& x, double p, std::mt19937_64& rng);

// mean_i [ logsumexp_j logits[i, j] - logits[i, target_i] ], logits[B, N]
Var cross_entropy(const Var& logits, std::span<const std::size_t> targets);

}  // namespace ad
}  // namespace nmcrl
