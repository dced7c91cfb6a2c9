#include "idforget/autodiff.hpp"

#include <cmath>

#include "idforget/errors.hpp"

namespace idf::ad {

Var Graph::variable(Tensor value) {
  require_finite(value, "variable");
  nodes_.push_back(Node{"variable", std::move(value), {}, {}, {}, true});
  return Var{nodes_.size() - 1};
}

Var Graph::constant(Tensor value) {
  require_finite(value, "constant");
  nodes_.push_back(Node{"constant", std::move(value), {}, {}, {}, false});
  return Var{nodes_.size() - 1};
}

Tensor Graph::grad(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape(), 0.0);
  return n.grad;
}

Var Graph::push(std::string op, Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  if (!value.all_finite()) throw NumericalError("non-finite output from '" + op + "'");
  bool needs = false;
  for (std::size_t in : inputs) needs = needs || nodes_[in].requires_grad;
  nodes_.push_back(Node{std::move(op), std::move(value), {}, std::move(inputs), std::move(backward), needs});
  return Var{nodes_.size() - 1};
}

void Graph::zero_grad() {
  for (Node& n : nodes_) n.grad = Tensor();
}

void Graph::backward(Var root) {
  if (nodes_[root.id].value.size() != 1) {
    throw ShapeError("backward: output of '" + nodes_[root.id].op + "' is not scalar (shape " +
                     shape_string(nodes_[root.id].value.shape()) + ")");
  }
  backward(root, Tensor(nodes_[root.id].value.shape(), 1.0));
}

void Graph::backward(Var root, const Tensor& seed) {
  if (seed.size() != nodes_[root.id].value.size()) throw ShapeError("backward: seed size mismatch");
  zero_grad();
  if (!nodes_[root.id].requires_grad) return;
  Tensor& g0 = grad_buffer(root.id);
  for (std::size_t i = 0; i < seed.size(); ++i) g0[i] = seed[i];
  for (std::size_t id = root.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || n.inputs.empty()) continue;
    if (!n.backward) throw UnsupportedOpError("no gradient rule for operation '" + n.op + "'");
    n.backward(*this, id);
  }
  for (const Node& n : nodes_) {
    if (!n.grad.empty() && !n.grad.all_finite()) throw NumericalError("non-finite gradient at '" + n.op + "'");
  }
}

ParamVars bind(Graph& g, const ParamSet& params, bool trainable) {
  ParamVars vars;
  for (const auto& [name, t] : params) vars.emplace(name, trainable ? g.variable(t) : g.constant(t));
  return vars;
}

ParamSet gradients(const Graph& g, const ParamVars& vars) {
  ParamSet out;
  for (const auto& [name, v] : vars) out.set(name, g.grad(v));
  return out;
}

namespace {

void require_equal_shape(const Graph& g, Var a, Var b, const char* op) {
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  if (x.rows() != y.rows() || x.cols() != y.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(y.shape()));
  }
}

// Output matrix shaped rows x cols; keeps 1-D shape for single-row inputs.
Tensor make_output(const Tensor& like, std::size_t rows, std::size_t cols) {
  if (like.ndim() == 1 && rows == 1) return Tensor({cols}, 0.0);
  return Tensor({rows, cols}, 0.0);
}

Tensor scalar_tensor(double v) { return Tensor({1}, v); }

template <class Deriv>
Var unary_elementwise(Graph& g, Var x, std::string name, double (*fn)(double, double), double param, Deriv deriv) {
  const Tensor& in = g.value(x);
  Tensor out = in;
  for (double& v : out.values()) v = fn(v, param);
  return g.push(std::move(name), std::move(out), {x.id}, [deriv, param](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const Tensor& gy = gr.grad_at(self);
    const Tensor& xv = gr.value_at(xi);
    const Tensor& yv = gr.value_at(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * deriv(xv[i], yv[i], param);
  });
}

}  // namespace

Var affine(Graph& g, Var x, Var weight, Var bias) {
  const Tensor& X = g.value(x);
  const Tensor& W = g.value(weight);
  const Tensor& b = g.value(bias);
  const std::size_t batch = X.rows(), in = X.cols(), out = W.rows();
  if (W.ndim() != 2 || W.cols() != in) {
    throw ShapeError("affine: weight " + shape_string(W.shape()) + " incompatible with input width " +
                     std::to_string(in));
  }
  if (b.size() != out) throw ShapeError("affine: bias length " + std::to_string(b.size()) + " != " + std::to_string(out));
  Tensor Y = make_output(X, batch, out);
  for (std::size_t r = 0; r < batch; ++r) {
    const double* xr = X.data() + r * in;
    double* yr = Y.data() + r * out;
    for (std::size_t o = 0; o < out; ++o) {
      const double* wo = W.data() + o * in;
      // Independent partial sums keep the inner loop pipelined.
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t i = 0;
      for (; i + 4 <= in; i += 4) {
        s0 += wo[i] * xr[i];
        s1 += wo[i + 1] * xr[i + 1];
        s2 += wo[i + 2] * xr[i + 2];
        s3 += wo[i + 3] * xr[i + 3];
      }
      for (; i < in; ++i) s0 += wo[i] * xr[i];
      yr[o] = b[o] + ((s0 + s1) + (s2 + s3));
    }
  }
  return g.push("affine", std::move(Y), {x.id, weight.id, bias.id}, [](Graph& gr, std::size_t self) {
    const auto& ins = gr.inputs_of(self);
    const Tensor& gy = gr.grad_at(self);
    const Tensor& Xv = gr.value_at(ins[0]);
    const Tensor& Wv = gr.value_at(ins[1]);
    const std::size_t batch = Xv.rows(), in = Xv.cols(), out = Wv.rows();
    if (gr.requires_grad_at(ins[0])) {
      Tensor& gx = gr.grad_buffer(ins[0]);
      for (std::size_t r = 0; r < batch; ++r) {
        double* gxr = gx.data() + r * in;
        const double* gyr = gy.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
          const double go = gyr[o];
          if (go == 0.0) continue;
          const double* wo = Wv.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) gxr[i] += go * wo[i];
        }
      }
    }
    if (gr.requires_grad_at(ins[1])) {
      Tensor& gw = gr.grad_buffer(ins[1]);
      for (std::size_t r = 0; r < batch; ++r) {
        const double* xr = Xv.data() + r * in;
        const double* gyr = gy.data() + r * out;
        for (std::size_t o = 0; o < out; ++o) {
          const double go = gyr[o];
          if (go == 0.0) continue;
          double* gwo = gw.data() + o * in;
          for (std::size_t i = 0; i < in; ++i) gwo[i] += go * xr[i];
        }
      }
    }
    if (gr.requires_grad_at(ins[2])) {
      Tensor& gb = gr.grad_buffer(ins[2]);
      for (std::size_t r = 0; r < batch; ++r) {
        for (std::size_t o = 0; o < out; ++o) gb[o] += gy[r * out + o];
      }
    }
  });
}

Var leaky_relu(Graph& g, Var x, double slope) {
  return unary_elementwise(
      g, x, "leaky_relu", [](double v, double s) { return v > 0.0 ? v : s * v; }, slope,
      [](double xv, double, double s) { return xv > 0.0 ? 1.0 : s; });
}

Var tanh(Graph& g, Var x) {
  return unary_elementwise(
      g, x, "tanh", [](double v, double) { return std::tanh(v); }, 0.0,
      [](double, double yv, double) { return 1.0 - yv * yv; });
}

Var sigmoid(Graph& g, Var x) {
  return unary_elementwise(
      g, x, "sigmoid",
      [](double v, double) {
        // Stable for large |v|.
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      0.0, [](double, double yv, double) { return yv * (1.0 - yv); });
}

Var affine_scalar(Graph& g, Var x, double a, double b) {
  Tensor out = g.value(x);
  for (double& v : out.values()) v = a * v + b;
  return g.push("affine_scalar", std::move(out), {x.id}, [a](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const Tensor& gy = gr.grad_at(self);
    Tensor& gx = gr.grad_buffer(xi);
    for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += a * gy[i];
  });
}

namespace {

enum class Binary { add, sub, mul };

Var binary(Graph& g, Var a, Var b, Binary kind, const char* name) {
  require_equal_shape(g, a, b, name);
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Binary::add: out[i] = x[i] + y[i]; break;
      case Binary::sub: out[i] = x[i] - y[i]; break;
      case Binary::mul: out[i] = x[i] * y[i]; break;
    }
  }
  return g.push(name, std::move(out), {a.id, b.id}, [kind](Graph& gr, std::size_t self) {
    const auto& ins = gr.inputs_of(self);
    const Tensor& gy = gr.grad_at(self);
    for (int side = 0; side < 2; ++side) {
      const std::size_t id = ins[static_cast<std::size_t>(side)];
      if (!gr.requires_grad_at(id)) continue;
      Tensor& gx = gr.grad_buffer(id);
      const Tensor& other = gr.value_at(ins[static_cast<std::size_t>(1 - side)]);
      for (std::size_t i = 0; i < gy.size(); ++i) {
        switch (kind) {
          case Binary::add: gx[i] += gy[i]; break;
          case Binary::sub: gx[i] += side == 0 ? gy[i] : -gy[i]; break;
          case Binary::mul: gx[i] += gy[i] * other[i]; break;
        }
      }
    }
  });
}

}  // namespace

Var add(Graph& g, Var a, Var b) { return binary(g, a, b, Binary::add, "add"); }
Var sub(Graph& g, Var a, Var b) { return binary(g, a, b, Binary::sub, "sub"); }
Var mul(Graph& g, Var a, Var b) { return binary(g, a, b, Binary::mul, "mul"); }

Var add_row(Graph& g, Var x, Var row) {
  const Tensor& X = g.value(x);
  const Tensor& r = g.value(row);
  if (r.size() != X.cols()) {
    throw ShapeError("add_row: row length " + std::to_string(r.size()) + " != width " + std::to_string(X.cols()));
  }
  Tensor out = X;
  const std::size_t n = X.cols();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += r[i % n];
  return g.push("add_row", std::move(out), {x.id, row.id}, [](Graph& gr, std::size_t self) {
    const auto& ins = gr.inputs_of(self);
    const Tensor& gy = gr.grad_at(self);
    if (gr.requires_grad_at(ins[0])) {
      Tensor& gx = gr.grad_buffer(ins[0]);
      for (std::size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i];
    }
    if (gr.requires_grad_at(ins[1])) {
      Tensor& gr_row = gr.grad_buffer(ins[1]);
      const std::size_t n = gr_row.size();
      for (std::size_t i = 0; i < gy.size(); ++i) gr_row[i % n] += gy[i];
    }
  });
}

Var sum(Graph& g, Var x) {
  double s = 0.0;
  for (double v : g.value(x).values()) s += v;
  return g.push("sum", scalar_tensor(s), {x.id}, [](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const double gy = gr.grad_at(self)[0];
    for (double& v : gr.grad_buffer(xi).values()) v += gy;
  });
}

Var mean(Graph& g, Var x) {
  const double n = static_cast<double>(g.value(x).size());
  return affine_scalar(g, sum(g, x), 1.0 / n, 0.0);
}

Var mse(Graph& g, Var a, Var b) {
  require_equal_shape(g, a, b, "mse");
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    s += d * d;
  }
  return g.push("mse", scalar_tensor(s / n), {a.id, b.id}, [n](Graph& gr, std::size_t self) {
    const auto& ins = gr.inputs_of(self);
    const double gy = gr.grad_at(self)[0];
    const Tensor& xv = gr.value_at(ins[0]);
    const Tensor& yv = gr.value_at(ins[1]);
    const double k = 2.0 * gy / n;
    if (gr.requires_grad_at(ins[0])) {
      Tensor& gx = gr.grad_buffer(ins[0]);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += k * (xv[i] - yv[i]);
    }
    if (gr.requires_grad_at(ins[1])) {
      Tensor& gyb = gr.grad_buffer(ins[1]);
      for (std::size_t i = 0; i < gyb.size(); ++i) gyb[i] -= k * (xv[i] - yv[i]);
    }
  });
}

Var dot_rows(Graph& g, Var a, Var b) {
  require_equal_shape(g, a, b, "dot_rows");
  const Tensor& x = g.value(a);
  const Tensor& y = g.value(b);
  const std::size_t rows = x.rows(), n = x.cols();
  Tensor out({rows, 1}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += x[r * n + i] * y[r * n + i];
    out[r] = s;
  }
  return g.push("dot_rows", std::move(out), {a.id, b.id}, [](Graph& gr, std::size_t self) {
    const auto& ins = gr.inputs_of(self);
    const Tensor& gy = gr.grad_at(self);
    for (int side = 0; side < 2; ++side) {
      const std::size_t id = ins[static_cast<std::size_t>(side)];
      if (!gr.requires_grad_at(id)) continue;
      const Tensor& other = gr.value_at(ins[static_cast<std::size_t>(1 - side)]);
      Tensor& gx = gr.grad_buffer(id);
      const std::size_t n = other.cols();
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i / n] * other[i];
    }
  });
}

Var norm_rows(Graph& g, Var x) {
  const Tensor& X = g.value(x);
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor out({rows, 1}, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += X[r * n + i] * X[r * n + i];
    out[r] = std::sqrt(s);
  }
  return g.push("norm_rows", std::move(out), {x.id}, [](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const Tensor& gy = gr.grad_at(self);
    const Tensor& Xv = gr.value_at(xi);
    const Tensor& nv = gr.value_at(self);
    Tensor& gx = gr.grad_buffer(xi);
    const std::size_t n = Xv.cols();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double len = nv[i / n];
      // Subgradient 0 at the origin.
      if (len > 0.0) gx[i] += gy[i / n] * Xv[i] / len;
    }
  });
}

Var normalize_rows(Graph& g, Var x, double min_norm) {
  const Tensor& X = g.value(x);
  const std::size_t rows = X.rows(), n = X.cols();
  Tensor out = X;
  std::vector<double> lengths(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += X[r * n + i] * X[r * n + i];
    lengths[r] = std::sqrt(s);
    if (!(lengths[r] > min_norm)) {
      throw DegenerateDirectionError("normalize_rows: row " + std::to_string(r) + " has norm " +
                                     format_double(lengths[r]));
    }
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] /= lengths[r];
  }
  return g.push("normalize_rows", std::move(out), {x.id}, [lengths](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const Tensor& gy = gr.grad_at(self);
    const Tensor& u = gr.value_at(self);
    Tensor& gx = gr.grad_buffer(xi);
    const std::size_t n = u.cols();
    // d(x/|x|) = (I - u u^T) / |x|
    for (std::size_t r = 0; r < lengths.size(); ++r) {
      double proj = 0.0;
      for (std::size_t i = 0; i < n; ++i) proj += gy[r * n + i] * u[r * n + i];
      for (std::size_t i = 0; i < n; ++i) gx[r * n + i] += (gy[r * n + i] - proj * u[r * n + i]) / lengths[r];
    }
  });
}

Var cosine_rows(Graph& g, Var a, Var b) {
  return dot_rows(g, normalize_rows(g, a), normalize_rows(g, b));
}

Var shift_columns(Graph& g, Var x, std::size_t height, std::size_t width, std::span<const int> shifts) {
  const Tensor& X = g.value(x);
  const std::size_t rows = X.rows();
  if (X.cols() != height * width) {
    throw ShapeError("shift_columns: row width " + std::to_string(X.cols()) + " != " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
  if (shifts.size() != rows) throw ShapeError("shift_columns: one shift per row required");
  std::vector<std::size_t> offsets(rows);
  const auto w = static_cast<long>(width);
  for (std::size_t r = 0; r < rows; ++r) {
    offsets[r] = static_cast<std::size_t>(((shifts[r] % w) + w) % w);
  }
  Tensor out = X;
  const std::size_t n = height * width;
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t y = 0; y < height; ++y) {
      for (std::size_t c = 0; c < width; ++c) {
        out[r * n + y * width + (c + offsets[r]) % width] = X[r * n + y * width + c];
      }
    }
  }
  return g.push("shift_columns", std::move(out), {x.id}, [height, width, offsets](Graph& gr, std::size_t self) {
    const std::size_t xi = gr.inputs_of(self)[0];
    if (!gr.requires_grad_at(xi)) return;
    const Tensor& gy = gr.grad_at(self);
    Tensor& gx = gr.grad_buffer(xi);
    const std::size_t n = height * width;
    for (std::size_t r = 0; r < offsets.size(); ++r) {
      for (std::size_t y = 0; y < height; ++y) {
        for (std::size_t c = 0; c < width; ++c) {
          gx[r * n + y * width + c] += gy[r * n + y * width + (c + offsets[r]) % width];
        }
      }
    }
  });
}

Var map_forward_only(Graph& g, Var x, std::string name, const std::function<double(double)>& fn) {
  Tensor out = g.value(x);
  for (double& v : out.values()) v = fn(v);
  return g.push(std::move(name), std::move(out), {x.id}, {});
}

GradResult grad_scalar(const ScalarFn& f, const ParamSet& params) {
  Graph g;
  const ParamVars vars = bind(g, params, true);
  const Var out = f(g, vars);
  if (g.value(out).size() != 1) {
    throw ShapeError("grad_scalar: function output has shape " + shape_string(g.value(out).shape()) +
                     ", expected a scalar");
  }
  g.backward(out);
  return GradResult{g.value(out)[0], gradients(g, vars)};
}

}  // namespace idf::ad
