#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "idforget/params.hpp"
#include "idforget/tensor.hpp"

// Reverse-mode differentiation over a tape of matrix-valued nodes.
//
// Every value on the tape is viewed as a batch x width matrix (a 1-D tensor
// is a single row). Nodes are appended in evaluation order, so walking the
// tape backwards is a valid topological order for the backward pass.
namespace idf::ad {

struct Var {
  std::size_t id = 0;
};

class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, std::size_t node)>;

  // Leaf that receives gradients.
  Var variable(Tensor value);
  // Leaf excluded from differentiation.
  Var constant(Tensor value);

  const Tensor& value(Var v) const { return nodes_[v.id].value; }
  // Gradient accumulated at `v` by the last backward pass (zeros if unreached).
  Tensor grad(Var v) const;
  bool requires_grad(Var v) const { return nodes_[v.id].requires_grad; }
  const std::string& op_name(Var v) const { return nodes_[v.id].op; }
  std::size_t size() const noexcept { return nodes_.size(); }

  // Seeds d(root)/d(root) = 1; root must hold exactly one element.
  void backward(Var root);
  // Seeds the root gradient with `seed` (a vector-Jacobian product).
  void backward(Var root, const Tensor& seed);
  void zero_grad();

  // Appends a node. `backward` may be empty for forward-only operations; the
  // backward pass then throws UnsupportedOpError if a gradient reaches it.
  Var push(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward);

  // Used inside backward rules.
  const Tensor& value_at(std::size_t id) const { return nodes_[id].value; }
  const Tensor& grad_at(std::size_t id) const { return nodes_[id].grad; }
  const std::vector<std::size_t>& inputs_of(std::size_t id) const { return nodes_[id].inputs; }
  bool requires_grad_at(std::size_t id) const { return nodes_[id].requires_grad; }
  // Accumulation buffer for node `id`, allocated on first use.
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    std::string op;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  std::vector<Node> nodes_;
};

using ParamVars = std::map<std::string, Var>;

// Places every tensor of `params` on the tape, as variables or constants.
ParamVars bind(Graph& g, const ParamSet& params, bool trainable);
// Collects gradients for `vars` into a ParamSet with the same names.
ParamSet gradients(const Graph& g, const ParamVars& vars);

// --- primitives -----------------------------------------------------------
// x: B x in, weight: out x in, bias: out  ->  B x out
Var affine(Graph& g, Var x, Var weight, Var bias);
Var leaky_relu(Graph& g, Var x, double slope);
Var tanh(Graph& g, Var x);
Var sigmoid(Graph& g, Var x);
Var add(Graph& g, Var a, Var b);
Var sub(Graph& g, Var a, Var b);
Var mul(Graph& g, Var a, Var b);
// a * x + b, elementwise with scalar a, b.
Var affine_scalar(Graph& g, Var x, double a, double b);
// x: B x n, row: n; adds `row` to every row of x.
Var add_row(Graph& g, Var x, Var row);
// Sum / mean over all entries -> 1 x 1.
Var sum(Graph& g, Var x);
Var mean(Graph& g, Var x);
// Mean over all entries of (a - b)^2 -> 1 x 1.
Var mse(Graph& g, Var a, Var b);
// Row-wise inner product / L2 norm -> B x 1.
Var dot_rows(Graph& g, Var a, Var b);
Var norm_rows(Graph& g, Var x);
// Row-wise x / ||x||. Throws DegenerateDirectionError if a row norm <= min_norm.
Var normalize_rows(Graph& g, Var x, double min_norm = 1e-12);
// Row-wise cosine similarity -> B x 1.
Var cosine_rows(Graph& g, Var a, Var b);
// Treats each row as a height x width image and circularly shifts its columns
// right by shifts[row] (a permutation, so the backward rule is the inverse).
Var shift_columns(Graph& g, Var x, std::size_t height, std::size_t width, std::span<const int> shifts);
// Elementwise map with no backward rule. Fine in forward-only graphs;
// differentiating through it raises UnsupportedOpError.
Var map_forward_only(Graph& g, Var x, std::string name, const std::function<double(double)>& fn);

// --- whole-function gradients ---------------------------------------------

struct GradResult {
  double value = 0.0;
  ParamSet grads;
};

using ScalarFn = std::function<Var(Graph&, const ParamVars&)>;

// Evaluates f on a fresh tape with `params` as variables and returns the
// value with d f / d params. Throws ShapeError if f is not scalar-valued.
GradResult grad_scalar(const ScalarFn& f, const ParamSet& params);

}  // namespace idf::ad
