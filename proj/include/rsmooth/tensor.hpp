#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rsmooth/stats.hpp"

namespace rsmooth {

using Shape = std::vector<std::size_t>;

/// Probabilities are clamped to [kProbEps, 1 - kProbEps] before entering
/// log or the normal quantile, which makes domain violations impossible
/// by construction.
constexpr double kProbEps = 1e-6;

namespace detail {

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  bool requires_grad = false;
  std::vector<double> grad;  // sized and filled only by backward
  std::uint64_t id = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(const TensorNode&)> backprop;

  std::size_t numel() const { return values.size(); }
};

using NodePtr = std::shared_ptr<TensorNode>;

}  // namespace detail

/// Dense float64 array with reverse-mode automatic differentiation.
/// Values are immutable after creation; only grad is ever written, and
/// only by backward(). Operations record their inputs, and creation
/// order is a topological order of the implicit graph, which backward
/// walks in exact reverse. All reductions use a fixed order, so
/// identical graphs and inputs produce bit-identical gradients.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from_values(Shape shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Row/column counts; rows() of a rank-1 tensor is 1.
  std::size_t rows() const;
  std::size_t cols() const;
  const std::vector<double>& values() const;
  double item() const;  // requires numel() == 1
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;  // requires has_grad()
  /// Same values, no graph history, requires_grad = false.
  Tensor detach() const;
  const char* op_kind() const;

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  detail::NodePtr node_;
};

// Elementwise arithmetic. add/sub also accept a rank-1 right operand
// against a rank-2 left operand, broadcast across rows.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);

Tensor relu(const Tensor& a);
/// Hinge kernel; identical to relu, kept as its own name for call sites
/// that mean max{u, 0} rather than an activation.
Tensor max_with_zero(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
/// Clamp into [kProbEps, 1 - kProbEps]; gradient is 1 strictly inside
/// the interval and 0 where the value was clamped.
Tensor clamp_prob(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

/// Reinterpret values with a new shape of equal element count.
Tensor reshape(const Tensor& a, Shape shape);

/// Row i of the result is z[i, classes[i]]. For a rank-1 z, classes must
/// hold a single index and the result is a scalar.
Tensor gather_class(const Tensor& z, const std::vector<int>& classes);

/// Row-wise softmax of beta * u, computed with the max-subtraction trick.
Tensor softmax_beta(const Tensor& u, double beta);

/// Elementwise standard normal quantile with local derivative
/// 1 / pdf(icdf(u)). Inputs must already be clamped into (0, 1).
Tensor norm_icdf(const Tensor& u);

/// Identity on values; blocks all gradient flow.
Tensor stop_gradient(const Tensor& a);

/// Reverse-mode sweep from a scalar loss. Sizes and zeroes the grad of
/// every reachable tensor that requires grad, then accumulates into them
/// in exact reverse creation order. Fan-out adds contributions.
void backward(const Tensor& loss);

/// Max over coordinates of |analytic - central_difference| / max(1, |analytic|)
/// for a deterministic scalar-valued f.
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point,
                  double step);

/// Tensor of iid N(0, sigma^2) draws taken from the stream in flat index
/// order; sigma = 0 gives exact zeros.
Tensor sample_gaussian(RngStream& stream, Shape shape, double sigma);

}  // namespace rsmooth
