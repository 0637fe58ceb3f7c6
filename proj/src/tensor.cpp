#include "rsmooth/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace rsmooth {

namespace {

std::atomic<std::uint64_t> g_next_node_id{1};

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

detail::NodePtr new_node(Shape shape, std::vector<double> values, const char* op) {
  auto node = std::make_shared<detail::TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  node->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  return node;
}

Tensor make_op(Shape shape, std::vector<double> values, const char* op,
               std::vector<Tensor> inputs,
               std::function<void(const detail::TensorNode&)> backprop) {
  auto node = new_node(std::move(shape), std::move(values), op);
  bool needs_grad = false;
  for (const Tensor& t : inputs) needs_grad = needs_grad || t.requires_grad();
  if (needs_grad) {
    node->requires_grad = true;
    node->parents.reserve(inputs.size());
    for (const Tensor& t : inputs) node->parents.push_back(t.node());
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

void accumulate(const detail::NodePtr& parent, std::size_t index, double value) {
  if (parent->requires_grad) parent->grad[index] += value;
}

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw std::invalid_argument(std::string(who) + ": undefined tensor");
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(who) + ": shape mismatch");
  }
}

// Shared implementation for elementwise binary ops that also support a
// rank-2 left operand with a rank-1 right operand broadcast across rows.
enum class Broadcast { kNone, kRow };

Broadcast binary_mode(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() == b.shape()) return Broadcast::kNone;
  if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.numel()) return Broadcast::kRow;
  throw std::invalid_argument(std::string(who) + ": incompatible shapes");
}

}  // namespace

Tensor Tensor::from_values(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("Tensor: shape does not match number of values");
  }
  auto node = new_node(std::move(shape), std::move(values), "leaf");
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), 0.0);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> v(shape_numel(shape), value);
  return from_values(std::move(shape), std::move(v), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const {
  check_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const {
  check_defined(*this, "numel");
  return node_->numel();
}

std::size_t Tensor::rows() const { return rank() == 2 ? shape()[0] : 1; }

std::size_t Tensor::cols() const {
  if (rank() == 2) return shape()[1];
  if (rank() == 1) return shape()[0];
  return 1;
}

const std::vector<double>& Tensor::values() const {
  check_defined(*this, "values");
  return node_->values;
}

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor is not a scalar");
  return node_->values[0];
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

bool Tensor::has_grad() const {
  return node_ && node_->grad.size() == node_->numel();
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("grad: no gradient present; run backward first");
  return node_->grad;
}

Tensor Tensor::detach() const {
  check_defined(*this, "detach");
  return from_values(node_->shape, node_->values, false);
}

const char* Tensor::op_kind() const {
  check_defined(*this, "op_kind");
  return node_->op;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_defined(a, "add");
  check_defined(b, "add");
  const Broadcast mode = binary_mode(a, b, "add");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  if (mode == Broadcast::kNone) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  } else {
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % c];
  }
  return make_op(a.shape(), std::move(out), "add", {a, b},
                 [mode, c = a.cols()](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const auto& pb = self.parents[1];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i]);
                     accumulate(pb, mode == Broadcast::kNone ? i : i % c, self.grad[i]);
                   }
                 });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_defined(a, "sub");
  check_defined(b, "sub");
  const Broadcast mode = binary_mode(a, b, "sub");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  if (mode == Broadcast::kNone) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  } else {
    const std::size_t c = a.cols();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % c];
  }
  return make_op(a.shape(), std::move(out), "sub", {a, b},
                 [mode, c = a.cols()](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const auto& pb = self.parents[1];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i]);
                     accumulate(pb, mode == Broadcast::kNone ? i : i % c, -self.grad[i]);
                   }
                 });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_defined(a, "mul");
  check_defined(b, "mul");
  check_same_shape(a, b, "mul");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return make_op(a.shape(), std::move(out), "mul", {a, b},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const auto& pb = self.parents[1];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i] * pb->values[i]);
                     accumulate(pb, i, self.grad[i] * pa->values[i]);
                   }
                 });
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_defined(a, "div");
  check_defined(b, "div");
  check_same_shape(a, b, "div");
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] / bv[i];
  return make_op(a.shape(), std::move(out), "div", {a, b},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const auto& pb = self.parents[1];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     const double binv = 1.0 / pb->values[i];
                     accumulate(pa, i, self.grad[i] * binv);
                     accumulate(pb, i, -self.grad[i] * pa->values[i] * binv * binv);
                   }
                 });
}

Tensor add_scalar(const Tensor& a, double s) {
  check_defined(a, "add_scalar");
  std::vector<double> out(a.values());
  for (double& v : out) v += s;
  return make_op(a.shape(), std::move(out), "add_scalar", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i]);
                   }
                 });
}

Tensor mul_scalar(const Tensor& a, double s) {
  check_defined(a, "mul_scalar");
  std::vector<double> out(a.values());
  for (double& v : out) v *= s;
  return make_op(a.shape(), std::move(out), "mul_scalar", {a},
                 [s](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i] * s);
                   }
                 });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw std::invalid_argument("matmul: needs [r,k] x [k,c]");
  }
  const std::size_t r = a.shape()[0];
  const std::size_t k = a.shape()[1];
  const std::size_t c = b.shape()[1];
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<double> out(r * c, 0.0);
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = av[i * k + kk];
      const double* brow = bv.data() + kk * c;
      double* orow = out.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) orow[j] += aik * brow[j];
    }
  }
  return make_op({r, c}, std::move(out), "matmul", {a, b},
                 [r, k, c](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const auto& pb = self.parents[1];
                   const auto& g = self.grad;
                   if (pa->requires_grad) {
                     for (std::size_t i = 0; i < r; ++i) {
                       for (std::size_t j = 0; j < c; ++j) {
                         const double gij = g[i * c + j];
                         const double* bcol = pb->values.data() + j;
                         double* garow = pa->grad.data() + i * k;
                         for (std::size_t kk = 0; kk < k; ++kk) {
                           garow[kk] += gij * bcol[kk * c];
                         }
                       }
                     }
                   }
                   if (pb->requires_grad) {
                     for (std::size_t i = 0; i < r; ++i) {
                       const double* arow = pa->values.data() + i * k;
                       const double* grow = g.data() + i * c;
                       for (std::size_t kk = 0; kk < k; ++kk) {
                         const double aik = arow[kk];
                         double* gbrow = pb->grad.data() + kk * c;
                         for (std::size_t j = 0; j < c; ++j) gbrow[j] += aik * grow[j];
                       }
                     }
                   }
                 });
}

Tensor max_with_zero(const Tensor& a) {
  check_defined(a, "max_with_zero");
  std::vector<double> out(a.values());
  for (double& v : out) v = v > 0.0 ? v : 0.0;
  return make_op(a.shape(), std::move(out), "max_with_zero", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     if (pa->values[i] > 0.0) accumulate(pa, i, self.grad[i]);
                   }
                 });
}

Tensor relu(const Tensor& a) { return max_with_zero(a); }

Tensor tanh(const Tensor& a) {
  check_defined(a, "tanh");
  std::vector<double> out(a.values());
  for (double& v : out) v = std::tanh(v);
  return make_op(a.shape(), std::move(out), "tanh", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     const double y = self.values[i];
                     accumulate(pa, i, self.grad[i] * (1.0 - y * y));
                   }
                 });
}

Tensor exp(const Tensor& a) {
  check_defined(a, "exp");
  std::vector<double> out(a.values());
  for (double& v : out) v = std::exp(v);
  return make_op(a.shape(), std::move(out), "exp", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i] * self.values[i]);
                   }
                 });
}

Tensor log(const Tensor& a) {
  check_defined(a, "log");
  std::vector<double> out(a.values());
  for (double& v : out) v = std::log(v);
  return make_op(a.shape(), std::move(out), "log", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i] / pa->values[i]);
                   }
                 });
}

Tensor clamp_prob(const Tensor& a) {
  check_defined(a, "clamp_prob");
  constexpr double lo = kProbEps;
  constexpr double hi = 1.0 - kProbEps;
  std::vector<double> out(a.values());
  for (double& v : out) v = std::min(std::max(v, lo), hi);
  return make_op(a.shape(), std::move(out), "clamp_prob", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     const double x = pa->values[i];
                     if (x > lo && x < hi) accumulate(pa, i, self.grad[i]);
                   }
                 });
}

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_op(Shape{}, {total}, "sum", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const double g = self.grad[0];
                   for (std::size_t i = 0; i < pa->numel(); ++i) accumulate(pa, i, g);
                 });
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  const std::size_t n = a.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  double total = 0.0;
  for (double v : a.values()) total += v;
  return make_op(Shape{}, {total / static_cast<double>(n)}, "mean", {a},
                 [n](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   const double g = self.grad[0] / static_cast<double>(n);
                   for (std::size_t i = 0; i < pa->numel(); ++i) accumulate(pa, i, g);
                 });
}

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.numel()) {
    throw std::invalid_argument("reshape: element count mismatch");
  }
  return make_op(std::move(shape), a.values(), "reshape", {a},
                 [](const detail::TensorNode& self) {
                   const auto& pa = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pa, i, self.grad[i]);
                   }
                 });
}

Tensor gather_class(const Tensor& z, const std::vector<int>& classes) {
  check_defined(z, "gather_class");
  const Tensor zz = z.rank() == 1 ? reshape(z, {1, z.numel()}) : z;
  if (zz.rank() != 2) throw std::invalid_argument("gather_class: rank must be 1 or 2");
  const std::size_t b = zz.shape()[0];
  const std::size_t c = zz.shape()[1];
  if (classes.size() != b) {
    throw std::invalid_argument("gather_class: one class index per row required");
  }
  std::vector<double> out(b);
  const auto& v = zz.values();
  for (std::size_t i = 0; i < b; ++i) {
    const int cls = classes[i];
    if (cls < 0 || static_cast<std::size_t>(cls) >= c) {
      throw std::invalid_argument("gather_class: class index out of range");
    }
    out[i] = v[i * c + static_cast<std::size_t>(cls)];
  }
  Tensor picked = make_op({b}, std::move(out), "gather_class", {zz},
                          [c, classes](const detail::TensorNode& self) {
                            const auto& pz = self.parents[0];
                            for (std::size_t i = 0; i < self.grad.size(); ++i) {
                              accumulate(pz, i * c + static_cast<std::size_t>(classes[i]),
                                         self.grad[i]);
                            }
                          });
  if (z.rank() == 1) return reshape(picked, Shape{});
  return picked;
}

Tensor softmax_beta(const Tensor& u, double beta) {
  check_defined(u, "softmax_beta");
  if (!(beta > 0.0)) throw std::invalid_argument("softmax_beta: beta must be positive");
  if (u.rank() != 1 && u.rank() != 2) {
    throw std::invalid_argument("softmax_beta: rank must be 1 or 2");
  }
  const std::size_t b = u.rows();
  const std::size_t c = u.rank() == 2 ? u.shape()[1] : u.numel();
  const auto& v = u.values();
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = v.data() + i * c;
    double mx = row[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    double* orow = out.data() + i * c;
    for (std::size_t j = 0; j < c; ++j) {
      orow[j] = std::exp(beta * (row[j] - mx));
      denom += orow[j];
    }
    for (std::size_t j = 0; j < c; ++j) orow[j] /= denom;
  }
  return make_op(u.shape(), std::move(out), "softmax_beta", {u},
                 [b, c, beta](const detail::TensorNode& self) {
                   const auto& pu = self.parents[0];
                   for (std::size_t i = 0; i < b; ++i) {
                     const double* s = self.values.data() + i * c;
                     const double* g = self.grad.data() + i * c;
                     double dot = 0.0;
                     for (std::size_t j = 0; j < c; ++j) dot += g[j] * s[j];
                     for (std::size_t j = 0; j < c; ++j) {
                       accumulate(pu, i * c + j, beta * s[j] * (g[j] - dot));
                     }
                   }
                 });
}

Tensor norm_icdf(const Tensor& u) {
  check_defined(u, "norm_icdf");
  std::vector<double> out(u.values());
  for (double& v : out) v = norm_icdf(v);
  return make_op(u.shape(), std::move(out), "norm_icdf", {u},
                 [](const detail::TensorNode& self) {
                   const auto& pu = self.parents[0];
                   for (std::size_t i = 0; i < self.grad.size(); ++i) {
                     accumulate(pu, i, self.grad[i] / norm_pdf(self.values[i]));
                   }
                 });
}

Tensor stop_gradient(const Tensor& a) {
  check_defined(a, "stop_gradient");
  auto node = new_node(a.shape(), a.values(), "stop_gradient");
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  if (!loss.requires_grad()) return;

  // Collect every reachable tensor that participates in gradient flow.
  std::vector<detail::TensorNode*> nodes;
  std::unordered_set<const detail::TensorNode*> seen;
  std::vector<detail::TensorNode*> stack{loss.node().get()};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    detail::TensorNode* cur = stack.back();
    stack.pop_back();
    nodes.push_back(cur);
    for (const auto& p : cur->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Creation ids are a topological order: inputs always precede consumers.
  std::sort(nodes.begin(), nodes.end(),
            [](const detail::TensorNode* a, const detail::TensorNode* b) {
              return a->id > b->id;
            });
  for (detail::TensorNode* n : nodes) n->grad.assign(n->numel(), 0.0);
  loss.node()->grad[0] = 1.0;
  for (detail::TensorNode* n : nodes) {
    if (n->backprop) n->backprop(*n);
  }
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step) {
  if (!(step > 0.0)) throw std::invalid_argument("grad_check: step must be positive");
  check_defined(point, "grad_check");
  Tensor x = Tensor::from_values(point.shape(), point.values(), true);
  Tensor y = f(x);
  if (y.numel() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  backward(y);
  std::vector<double> analytic(point.numel(), 0.0);
  if (x.has_grad()) analytic = x.grad();
  double worst = 0.0;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    std::vector<double> vp = point.values();
    std::vector<double> vm = point.values();
    vp[i] += step;
    vm[i] -= step;
    const double fp = f(Tensor::from_values(point.shape(), std::move(vp))).item();
    const double fm = f(Tensor::from_values(point.shape(), std::move(vm))).item();
    const double fd = (fp - fm) / (2.0 * step);
    const double err = std::abs(analytic[i] - fd) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

Tensor sample_gaussian(RngStream& stream, Shape shape, double sigma) {
  if (sigma < 0.0) throw std::invalid_argument("sample_gaussian: sigma must be >= 0");
  std::vector<double> v(shape_numel(shape), 0.0);
  if (sigma > 0.0) {
    for (double& x : v) x = sigma * stream.next_gaussian();
  }
  return Tensor::from_values(std::move(shape), std::move(v));
}

}  // namespace rsmooth
