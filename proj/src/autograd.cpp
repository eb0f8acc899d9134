#include "nmcrl/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "nmcrl/errors.hpp"

namespace nmcrl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, double fill) : shape(std::move(s)), data(shape_size(shape), fill) {}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  require(data.size() == shape_size(shape), "tensor data does not match shape " + shape_str(shape));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t[i * n + i] = 1.0;
  return t;
}

namespace ad {

Tensor& Node::ensure_grad() {
  if (grad.data.size() != value.data.size()) grad = Tensor(value.shape, 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

const Tensor& Var::grad() const { return node_->ensure_grad(); }

void Var::zero_grad() {
  auto& g = node_->ensure_grad();
  std::fill(g.data.begin(), g.data.end(), 0.0);
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

namespace {

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> rule) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  if (!g_grad_enabled) return Var(std::move(n));
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return Var(std::move(n));
  n->requires_grad = true;
  for (const auto& in : inputs) {
    if (in.defined()) n->parents.push_back(in.shared());
  }
  n->backward = std::move(rule);
  return Var(std::move(n));
}

// Gradient slot for an input if it participates in differentiation.
Tensor* grad_of(Node* n) { return (n && n->requires_grad) ? &n->ensure_grad() : nullptr; }

}  // namespace

void backward(const Var& root) {
  require(root.value().size() == 1, "backward() needs a scalar root, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) n->backward(*n);
  }
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    for (Node* p : {an, bn}) {
      if (Tensor* g = grad_of(p)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    if (Tensor* g = grad_of(an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = grad_of(bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.shape() == b.shape(), "mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    if (Tensor* g = grad_of(an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bn->value[i];
    }
    if (Tensor* g = grad_of(bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * an->value[i];
    }
  });
}

Var square(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data) v *= v;
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += 2.0 * xn->value[i] * self.grad[i];
    }
  });
}

Var scale(const Var& x, double s) {
  Tensor out = x.value();
  for (auto& v : out.data) v *= s;
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, s](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += s * self.grad[i];
    }
  });
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Tensor out = x.value();
  for (auto& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = xn->value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
        const double pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
        (*g)[i] += self.grad[i] * (cdf + v * pdf);
      }
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = x.value();
  for (auto& v : out.data) v = v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double y = self.value[i];
        (*g)[i] += self.grad[i] * y * (1.0 - y);
      }
    }
  });
}

Var lerp(const Var& alpha, const Var& a, const Var& b) {
  require(alpha.value().size() == 1, "lerp: alpha must be a scalar");
  require(a.shape() == b.shape(), "lerp: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const double t = alpha.value()[0];
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = t * a.value()[i] + (1.0 - t) * b.value()[i];
  Node *tn = alpha.node(), *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {alpha, a, b}, [tn, an, bn](Node& self) {
    const double t = tn->value[0];
    if (Tensor* g = grad_of(an)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += t * self.grad[i];
    }
    if (Tensor* g = grad_of(bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += (1.0 - t) * self.grad[i];
    }
    if (Tensor* g = grad_of(tn)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < self.grad.size(); ++i) acc += self.grad[i] * (an->value[i] - bn->value[i]);
      (*g)[0] += acc;
    }
  });
}

// --- shape -------------------------------------------------------------------

Var reshape(const Var& x, Shape shape) {
  require(shape_size(shape) == x.value().size(),
          "reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  Tensor out(std::move(shape), x.value().data);
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
  });
}

namespace {

// Index map shared by split/merge: element (b, t, h, e) of [B, T, H*dh]
// sits at ((b*H + h)*T + t)*dh + e in [B*H, T, dh].
template <typename F>
void for_each_head_index(std::size_t B, std::size_t T, std::size_t H, std::size_t dh, F&& f) {
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T; ++t)
      for (std::size_t h = 0; h < H; ++h)
        for (std::size_t e = 0; e < dh; ++e)
          f(((b * T + t) * H + h) * dh + e, ((b * H + h) * T + t) * dh + e);
}

}  // namespace

Var split_heads(const Var& x, std::size_t heads) {
  require(x.value().rank() == 3 && heads > 0 && x.shape()[2] % heads == 0,
          "split_heads: bad shape " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0], T = x.shape()[1], dh = x.shape()[2] / heads;
  Tensor out({B * heads, T, dh});
  for_each_head_index(B, T, heads, dh, [&](std::size_t src, std::size_t dst) { out[dst] = x.value()[src]; });
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, B, T, heads, dh](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for_each_head_index(B, T, heads, dh, [&](std::size_t src, std::size_t dst) { (*g)[src] += self.grad[dst]; });
    }
  });
}

Var merge_heads(const Var& x, std::size_t heads) {
  require(x.value().rank() == 3 && heads > 0 && x.shape()[0] % heads == 0,
          "merge_heads: bad shape " + shape_str(x.shape()));
  const std::size_t B = x.shape()[0] / heads, T = x.shape()[1], dh = x.shape()[2];
  Tensor out({B, T, heads * dh});
  for_each_head_index(B, T, heads, dh, [&](std::size_t dst, std::size_t src) { out[dst] = x.value()[src]; });
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, B, T, heads, dh](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for_each_head_index(B, T, heads, dh, [&](std::size_t dst, std::size_t src) { (*g)[src] += self.grad[dst]; });
    }
  });
}

Var concat_rows(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[1] == b.shape()[1],
          "concat_rows: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor out({a.shape()[0] + b.shape()[0], a.shape()[1]});
  std::copy(a.value().data.begin(), a.value().data.end(), out.data.begin());
  std::copy(b.value().data.begin(), b.value().data.end(), out.data.begin() + a.value().size());
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn](Node& self) {
    const std::size_t na = an->value.size();
    if (Tensor* g = grad_of(an)) {
      for (std::size_t i = 0; i < na; ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = grad_of(bn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[na + i];
    }
  });
}

// --- reductions ----------------------------------------------------------------

Var sum_all(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  Node* xn = x.node();
  return make_result(Tensor({1}, s), {x}, [xn](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (auto& v : g->data) v += self.grad[0];
    }
  });
}

Var mean_axis(const Var& x, std::size_t axis) {
  const Shape& s = x.shape();
  require(axis < s.size(), "mean_axis: axis out of range for " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape os;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) os.push_back(s[i]);
  if (os.empty()) os.push_back(1);
  Tensor out(os, 0.0);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += x.value()[(o * n + k) * inner + i] * inv;
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, outer, n, inner, inv](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t k = 0; k < n; ++k)
          for (std::size_t i = 0; i < inner; ++i) (*g)[(o * n + k) * inner + i] += self.grad[o * inner + i] * inv;
    }
  });
}

// --- linear algebra --------------------------------------------------------------

namespace {

Var linear_impl(const Var& x, const Var& w, const Var* b) {
  require(w.value().rank() == 2, "linear: weight must be 2-D, got " + shape_str(w.shape()));
  const std::size_t in = w.shape()[0], out_dim = w.shape()[1];
  require(!x.shape().empty() && x.shape().back() == in,
          "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (b) require(b->value().size() == out_dim, "linear: bias size mismatch");
  const std::size_t rows = x.value().size() / in;
  Shape os = x.shape();
  os.back() = out_dim;
  Tensor out(os);
  {
    CMapMat X(x.value().data.data(), rows, in);
    CMapMat W(w.value().data.data(), in, out_dim);
    MapMat Y(out.data.data(), rows, out_dim);
    Y.noalias() = X * W;
    if (b) {
      Eigen::Map<const Eigen::RowVectorXd> bv(b->value().data.data(), out_dim);
      Y.rowwise() += bv;
    }
  }
  Node *xn = x.node(), *wn = w.node(), *bn = b ? b->node() : nullptr;
  std::vector<Var> inputs{x, w};
  if (b) inputs.push_back(*b);
  return make_result(std::move(out), inputs, [xn, wn, bn, rows, in, out_dim](Node& self) {
    CMapMat dY(self.grad.data.data(), rows, out_dim);
    if (Tensor* g = grad_of(xn)) {
      MapMat dX(g->data.data(), rows, in);
      dX.noalias() += dY * CMapMat(wn->value.data.data(), in, out_dim).transpose();
    }
    if (Tensor* g = grad_of(wn)) {
      MapMat dW(g->data.data(), in, out_dim);
      dW.noalias() += CMapMat(xn->value.data.data(), rows, in).transpose() * dY;
    }
    if (Tensor* g = grad_of(bn)) {
      Eigen::Map<Eigen::RowVectorXd> db(g->data.data(), out_dim);
      db += dY.colwise().sum();
    }
  });
}

}  // namespace

Var linear(const Var& x, const Var& w) { return linear_impl(x, w, nullptr); }
Var linear(const Var& x, const Var& w, const Var& b) { return linear_impl(x, w, &b); }

Var matmul(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[1] == b.shape()[0],
          "matmul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return linear(a, b);
}

Var matmul_nt(const Var& a, const Var& b) {
  require(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[1] == b.shape()[1],
          "matmul_nt: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  Tensor out({m, n});
  MapMat(out.data.data(), m, n).noalias() =
      CMapMat(a.value().data.data(), m, k) * CMapMat(b.value().data.data(), n, k).transpose();
  Node *an = a.node(), *bn = b.node();
  return make_result(std::move(out), {a, b}, [an, bn, m, k, n](Node& self) {
    CMapMat dY(self.grad.data.data(), m, n);
    if (Tensor* g = grad_of(an)) {
      MapMat(g->data.data(), m, k).noalias() += dY * CMapMat(bn->value.data.data(), n, k);
    }
    if (Tensor* g = grad_of(bn)) {
      MapMat(g->data.data(), n, k).noalias() += dY.transpose() * CMapMat(an->value.data.data(), m, k);
    }
  });
}

Var add_row(const Var& x, const Var& r) {
  const std::size_t d = r.value().size();
  require(!x.shape().empty() && x.shape().back() == d,
          "add_row: " + shape_str(x.shape()) + " vs " + shape_str(r.shape()));
  Tensor out = x.value();
  const std::size_t rows = out.size() / d;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < d; ++j) out[i * d + j] += r.value()[j];
  Node *xn = x.node(), *rn = r.node();
  return make_result(std::move(out), {x, r}, [xn, rn, rows, d](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    }
    if (Tensor* g = grad_of(rn)) {
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < d; ++j) (*g)[j] += self.grad[i * d + j];
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, double scale, Tensor* attn_out) {
  require(q.value().rank() == 3 && k.value().rank() == 3 && v.value().rank() == 3, "attention: inputs must be 3-D");
  const std::size_t G = q.shape()[0], Tq = q.shape()[1], d = q.shape()[2];
  const std::size_t Tk = k.shape()[1], dv = v.shape()[2];
  require(k.shape()[0] == G && v.shape()[0] == G && k.shape()[2] == d && v.shape()[1] == Tk,
          "attention: q " + shape_str(q.shape()) + " k " + shape_str(k.shape()) + " v " + shape_str(v.shape()));

  auto weights = std::make_shared<Tensor>(Shape{G, Tq, Tk});
  Tensor out({G, Tq, dv});
  for (std::size_t g = 0; g < G; ++g) {
    CMapMat Q(q.value().data.data() + g * Tq * d, Tq, d);
    CMapMat K(k.value().data.data() + g * Tk * d, Tk, d);
    CMapMat V(v.value().data.data() + g * Tk * dv, Tk, dv);
    MapMat A(weights->data.data() + g * Tq * Tk, Tq, Tk);
    A.noalias() = (Q * K.transpose()) * scale;
    for (std::size_t i = 0; i < Tq; ++i) {
      const double mx = A.row(i).maxCoeff();
      A.row(i) = (A.row(i).array() - mx).exp();
      A.row(i) /= A.row(i).sum();
    }
    MapMat(out.data.data() + g * Tq * dv, Tq, dv).noalias() = A * V;
  }
  if (attn_out) *attn_out = *weights;

  Node *qn = q.node(), *kn = k.node(), *vn = v.node();
  return make_result(std::move(out), {q, k, v}, [qn, kn, vn, weights, G, Tq, Tk, d, dv, scale](Node& self) {
    Tensor* gq = grad_of(qn);
    Tensor* gk = grad_of(kn);
    Tensor* gv = grad_of(vn);
    RowMat dA(Tq, Tk), dS(Tq, Tk);
    for (std::size_t g = 0; g < G; ++g) {
      CMapMat A(weights->data.data() + g * Tq * Tk, Tq, Tk);
      CMapMat dO(self.grad.data.data() + g * Tq * dv, Tq, dv);
      CMapMat Q(qn->value.data.data() + g * Tq * d, Tq, d);
      CMapMat K(kn->value.data.data() + g * Tk * d, Tk, d);
      CMapMat V(vn->value.data.data() + g * Tk * dv, Tk, dv);
      if (gv) MapMat(gv->data.data() + g * Tk * dv, Tk, dv).noalias() += A.transpose() * dO;
      if (!gq && !gk) continue;
      dA.noalias() = dO * V.transpose();
      for (std::size_t i = 0; i < Tq; ++i) {
        const double dot = dA.row(i).dot(A.row(i));
        dS.row(i) = A.row(i).array() * (dA.row(i).array() - dot);
      }
      dS *= scale;
      if (gq) MapMat(gq->data.data() + g * Tq * d, Tq, d).noalias() += dS * K;
      if (gk) MapMat(gk->data.data() + g * Tk * d, Tk, d).noalias() += dS.transpose() * Q;
    }
  });
}

// --- normalisation / activations -------------------------------------------------

Var softmax_last(const Var& x) {
  require(!x.shape().empty(), "softmax_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r, n);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (auto& v : row) s += (v = std::exp(v - mx));
    for (auto& v : row) v /= s;
  }
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, rows, n](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * self.value[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          (*g)[r * n + j] += self.value[r * n + j] * (self.grad[r * n + j] - dot);
      }
    }
  });
}

Var layer_norm_last(const Var& x, const Var& gain, const Var& bias, double eps) {
  require(!x.shape().empty(), "layer_norm_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  if (gain.defined()) require(gain.value().size() == n, "layer_norm_last: gain size mismatch");
  if (bias.defined()) require(bias.value().size() == n, "layer_norm_last: bias size mismatch");

  auto xhat = std::make_shared<Tensor>(x.shape());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    auto in = x.value().row(r, n);
    double mean = 0.0;
    for (double v : in) mean += v;
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : in) var += (v - mean) * (v - mean);
    var /= static_cast<double>(n);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t j = 0; j < n; ++j) {
      const double h = (in[j] - mean) * is;
      (*xhat)[r * n + j] = h;
      double y = h;
      if (gain.defined()) y *= gain.value()[j];
      if (bias.defined()) y += bias.value()[j];
      out[r * n + j] = y;
    }
  }
  Node *xn = x.node(), *gn = gain.defined() ? gain.node() : nullptr, *bn = bias.defined() ? bias.node() : nullptr;
  std::vector<Var> inputs{x};
  if (gain.defined()) inputs.push_back(gain);
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [xn, gn, bn, xhat, inv_std, rows, n](Node& self) {
    Tensor* gx = grad_of(xn);
    Tensor* gg = grad_of(gn);
    Tensor* gb = grad_of(bn);
    std::vector<double> dh(n);
    for (std::size_t r = 0; r < rows; ++r) {
      double mean_dh = 0.0, mean_dh_h = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double dy = self.grad[r * n + j];
        const double h = (*xhat)[r * n + j];
        if (gg) (*gg)[j] += dy * h;
        if (gb) (*gb)[j] += dy;
        dh[j] = gn ? dy * gn->value[j] : dy;
        mean_dh += dh[j];
        mean_dh_h += dh[j] * h;
      }
      if (!gx) continue;
      mean_dh /= static_cast<double>(n);
      mean_dh_h /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double h = (*xhat)[r * n + j];
        (*gx)[r * n + j] += (*inv_std)[r] * (dh[j] - mean_dh - h * mean_dh_h);
      }
    }
  });
}

Var l2_normalize_last(const Var& x, double eps) {
  require(!x.shape().empty(), "l2_normalize_last: scalar input");
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.value().size() / n;
  auto norms = std::make_shared<std::vector<double>>(rows);
  Tensor out = x.value();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r, n);
    double s = 0.0;
    for (double v : row) s += v * v;
    const double nr = std::max(std::sqrt(s), eps);
    (*norms)[r] = nr;
    for (auto& v : row) v /= nr;
  }
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, norms, rows, n](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += self.grad[r * n + j] * self.value[r * n + j];
        for (std::size_t j = 0; j < n; ++j)
          (*g)[r * n + j] += (self.grad[r * n + j] - self.value[r * n + j] * dot) / (*norms)[r];
      }
    }
  });
}

Var scale_channels(const Var& x, const Var& w) {
  require(x.value().rank() == 3 && w.value().rank() == 2 && w.shape()[0] == x.shape()[0] &&
              w.shape()[1] == x.shape()[1],
          "scale_channels: " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  const std::size_t BC = x.shape()[0] * x.shape()[1], N = x.shape()[2];
  Tensor out = x.value();
  for (std::size_t r = 0; r < BC; ++r)
    for (std::size_t j = 0; j < N; ++j) out[r * N + j] *= w.value()[r];
  Node *xn = x.node(), *wn = w.node();
  return make_result(std::move(out), {x, w}, [xn, wn, BC, N](Node& self) {
    Tensor* gx = grad_of(xn);
    Tensor* gw = grad_of(wn);
    for (std::size_t r = 0; r < BC; ++r) {
      for (std::size_t j = 0; j < N; ++j) {
        const double dy = self.grad[r * N + j];
        if (gx) (*gx)[r * N + j] += dy * wn->value[r];
        if (gw) (*gw)[r] += dy * xn->value[r * N + j];
      }
    }
  });
}

Var scale_columns(const Var& x, const Var& g) {
  require(x.value().rank() == 3 && g.value().rank() == 2 && g.shape()[0] == x.shape()[0] &&
              g.shape()[1] == x.shape()[2],
          "scale_columns: " + shape_str(x.shape()) + " vs " + shape_str(g.shape()));
  const std::size_t B = x.shape()[0], C = x.shape()[1], N = x.shape()[2];
  Tensor out = x.value();
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t j = 0; j < N; ++j) out[(b * C + c) * N + j] *= g.value()[b * N + j];
  Node *xn = x.node(), *gn = g.node();
  return make_result(std::move(out), {x, g}, [xn, gn, B, C, N](Node& self) {
    Tensor* gx = grad_of(xn);
    Tensor* gg = grad_of(gn);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t c = 0; c < C; ++c)
        for (std::size_t j = 0; j < N; ++j) {
          const std::size_t i = (b * C + c) * N + j;
          if (gx) (*gx)[i] += self.grad[i] * gn->value[b * N + j];
          if (gg) (*gg)[b * N + j] += self.grad[i] * xn->value[i];
        }
  });
}

Var subject_mix(const Var& x, const Var& mats, std::span<const int> ids) {
  require(x.value().rank() == 3 && mats.value().rank() == 3, "subject_mix: expected x[B,C,L] and M[S,C,C]");
  const std::size_t B = x.shape()[0], C = x.shape()[1], L = x.shape()[2], S = mats.shape()[0];
  require(mats.shape()[1] == C && mats.shape()[2] == C,
          "subject_mix: M " + shape_str(mats.shape()) + " vs x " + shape_str(x.shape()));
  require(ids.size() == B, "subject_mix: need one subject id per sample");
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= S)
      throw std::out_of_range("subject id " + std::to_string(id) + " outside [0, " + std::to_string(S) + ")");
  }
  std::vector<int> sid(ids.begin(), ids.end());
  Tensor out({B, C, L});
  for (std::size_t b = 0; b < B; ++b) {
    MapMat(out.data.data() + b * C * L, C, L).noalias() =
        CMapMat(mats.value().data.data() + sid[b] * C * C, C, C) * CMapMat(x.value().data.data() + b * C * L, C, L);
  }
  Node *xn = x.node(), *mn = mats.node();
  return make_result(std::move(out), {x, mats}, [xn, mn, sid, B, C, L](Node& self) {
    Tensor* gx = grad_of(xn);
    Tensor* gm = grad_of(mn);
    for (std::size_t b = 0; b < B; ++b) {
      CMapMat dY(self.grad.data.data() + b * C * L, C, L);
      if (gx) {
        MapMat(gx->data.data() + b * C * L, C, L).noalias() +=
            CMapMat(mn->value.data.data() + sid[b] * C * C, C, C).transpose() * dY;
      }
      if (gm) {
        MapMat(gm->data.data() + sid[b] * C * C, C, C).noalias() +=
            dY * CMapMat(xn->value.data.data() + b * C * L, C, L).transpose();
      }
    }
  });
}

Var dropout(const Var& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  require(p < 1.0, "dropout: p must be < 1");
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  std::bernoulli_distribution keep(1.0 - p);
  const double s = 1.0 / (1.0 - p);
  Tensor out = x.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = keep(rng) ? s : 0.0;
    out[i] *= (*mask)[i];
  }
  Node* xn = x.node();
  return make_result(std::move(out), {x}, [xn, mask](Node& self) {
    if (Tensor* g = grad_of(xn)) {
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * (*mask)[i];
    }
  });
}

Var cross_entropy(const Var& logits, std::span<const std::size_t> targets) {
  require(logits.value().rank() == 2 && targets.size() == logits.shape()[0],
          "cross_entropy: logits " + shape_str(logits.shape()) + " vs " + std::to_string(targets.size()) + " targets");
  const std::size_t B = logits.shape()[0], N = logits.shape()[1];
  auto probs = std::make_shared<Tensor>(logits.value());
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  double loss = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    require(tgt[i] < N, "cross_entropy: target out of range");
    auto row = probs->row(i, N);
    const double mx = *std::max_element(row.begin(), row.end());
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    loss += lse - row[tgt[i]];
    for (auto& v : row) v = std::exp(v - lse);
  }
  loss /= static_cast<double>(B);
  Node* ln = logits.node();
  return make_result(Tensor({1}, loss), {logits}, [ln, probs, tgt, B, N](Node& self) {
    if (Tensor* g = grad_of(ln)) {
      const double s = self.grad[0] / static_cast<double>(B);
      for (std::size_t i = 0; i < B; ++i) {
        for (std::size_t j = 0; j < N; ++j) (*g)[i * N + j] += s * (*probs)[i * N + j];
        (*g)[i * N + tgt[i]] -= s;
      }
    }
  });
}

}  // namespace ad
}  // namespace nmcrl
