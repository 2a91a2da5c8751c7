#pragma once

// Minimal reverse-mode differentiation over Tensors.
//
// A Graph records every op eagerly (values are computed on construction) and
// replays the recorded backward closures in reverse on backward(). One graph
// is built per image; parameter gradients accumulate across graphs into
// Parameter::grad until the optimizer consumes them.

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "calseg/tensor.hpp"

namespace calseg {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape as value

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}
  void zero_grad() { grad.fill(0.0); }
};

struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&)>;

  /// Leaf that never receives a gradient.
  Var constant(Tensor value);
  /// Leaf whose gradient is kept in the graph (read it with grad()).
  Var variable(Tensor value);
  /// Leaf bound to a parameter; backward() adds its gradient into p.grad.
  Var parameter(Parameter& p);

  /// Records an op result. `backward` reads grad(result) and adds into the
  /// parents' gradients; it is only invoked when some parent needs a gradient.
  Var record(Tensor value, std::initializer_list<Var> parents, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> parents, BackwardFn backward);

  const Tensor& value(Var v) const { return nodes_.at(v.id).value; }
  bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

  /// Gradient buffer of v, allocated (zeroed) on first access.
  Tensor& grad(Var v);

  /// Seeds d(root)/d(root) = seed for a single-element root and propagates.
  void backward(Var root, double seed = 1.0);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    bool grad_allocated = false;
    Parameter* parameter = nullptr;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
};

/// Differentiable ops. Feature maps are {C, H, W}; latent vectors are {L}.
namespace ops {

/// Stride-1 "same" convolution. weight {Cout, Cin, K, K}, bias {Cout}.
Var conv2d(Graph& g, Var x, Var weight, Var bias);
/// Convolution without bias term.
Var conv2d(Graph& g, Var x, Var weight);
Var relu(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var avg_pool2(Graph& g, Var x);
Var upsample2(Graph& g, Var x);
/// Channel concatenation of {Ca, H, W} and {Cb, H, W}.
Var concat_channels(Graph& g, Var a, Var b);
/// {L} -> {L, H, W}, every pixel holding the vector.
Var broadcast_spatial(Graph& g, Var z, int height, int width);
/// {C, H, W} -> {C}
Var global_mean(Graph& g, Var x);
/// Elements [begin, begin + count) of a flat tensor, as {count}.
Var slice(Graph& g, Var x, int begin, int count);
/// Elementwise clamp; zero gradient outside [lo, hi].
Var clamp(Graph& g, Var x, double lo, double hi);
Var reshape(Graph& g, Var x, Shape shape);

/// mean + exp(log_variance / 2) * noise
Var reparameterize(Graph& g, Var mean, Var log_variance, const Tensor& noise);
/// means * (1 + sqrt(exp(log_alpha)) * noise)
Var multiplicative_noise(Graph& g, Var means, Var log_alpha, const Tensor& noise);

/// Sum over elements of BCE(sigmoid(logits), target); target values in [0, 1].
Var bce_with_logits_sum(Graph& g, Var logits, const Tensor& target);
/// KL(N(mq, exp(lq)) || N(mp, exp(lp))) summed over dimensions.
Var gaussian_kl(Graph& g, Var mean_q, Var logvar_q, Var mean_p, Var logvar_p);
/// Sparse variational dropout KL approximation summed over entries.
Var dropout_kl(Graph& g, Var log_alpha);
/// Mean over pixels of -[t log p + (1 - t) log(1 - p)], p clamped to [eps, 1 - eps].
Var cross_entropy_mean(Graph& g, Var probability, const Tensor& target, double eps);

/// Elementwise mean of equally shaped tensors.
Var average(Graph& g, std::span<const Var> xs);
/// sum_i coeff_i * x_i for single-element inputs.
Var weighted_sum(Graph& g, std::span<const std::pair<double, Var>> terms);

}  // namespace ops

}  // namespace calseg
