#include "idforget/mlp.hpp"

#include <cmath>

#include "idforget/errors.hpp"

namespace idf {

std::string layer_weight_name(const std::string& prefix, std::size_t layer) {
  return prefix + "fc" + std::to_string(layer) + ".weight";
}

std::string layer_bias_name(const std::string& prefix, std::size_t layer) {
  return prefix + "fc" + std::to_string(layer) + ".bias";
}

ParamSet init_mlp(const MlpArch& arch, std::mt19937_64& rng, const std::string& prefix) {
  if (arch.widths.size() < 2) throw ConfigError("MLP needs at least input and output widths");
  ParamSet params;
  std::normal_distribution<double> normal(0.0, 1.0);
  for (std::size_t k = 0; k < arch.layers(); ++k) {
    const std::size_t in = arch.widths[k], out = arch.widths[k + 1];
    const bool last = k + 1 == arch.layers();
    const double gain = last ? 1.0 : 2.0 / (1.0 + arch.slope * arch.slope);
    const double stddev = std::sqrt(gain / static_cast<double>(in));
    Tensor w({out, in});
    for (double& x : w.values()) x = stddev * normal(rng);
    params.set(layer_weight_name(prefix, k), std::move(w));
    params.set(layer_bias_name(prefix, k), Tensor({out}, 0.0));
  }
  return params;
}

namespace {

void check_layer(const Tensor& w, const Tensor& b, std::size_t in, std::size_t out, std::size_t k,
                 std::size_t input_cols) {
  const std::string layer = "layer fc" + std::to_string(k);
  if (w.ndim() != 2 || w.shape()[0] != out || w.shape()[1] != in) {
    throw ShapeError(layer + ": weight shape " + shape_string(w.shape()) + " does not match architecture [" +
                     std::to_string(out) + "," + std::to_string(in) + "]");
  }
  if (b.size() != out) throw ShapeError(layer + ": bias length " + std::to_string(b.size()) + " != " + std::to_string(out));
  if (input_cols != in) {
    throw ShapeError(layer + ": input width " + std::to_string(input_cols) + " != expected " + std::to_string(in));
  }
}

const ad::Var& lookup(const ad::ParamVars& params, const std::string& name, std::size_t k) {
  auto it = params.find(name);
  if (it == params.end()) throw ShapeError("layer fc" + std::to_string(k) + ": missing parameter '" + name + "'");
  return it->second;
}

}  // namespace

ad::Var forward_mlp(ad::Graph& g, const ad::ParamVars& params, ad::Var input, const MlpArch& arch,
                    const std::string& prefix) {
  ad::Var h = input;
  for (std::size_t k = 0; k < arch.layers(); ++k) {
    const ad::Var w = lookup(params, layer_weight_name(prefix, k), k);
    const ad::Var b = lookup(params, layer_bias_name(prefix, k), k);
    check_layer(g.value(w), g.value(b), arch.widths[k], arch.widths[k + 1], k, g.value(h).cols());
    h = ad::affine(g, h, w, b);
    if (k + 1 < arch.layers()) h = ad::leaky_relu(g, h, arch.slope);
  }
  return h;
}

Tensor forward_mlp(const ParamSet& params, const Tensor& input, const MlpArch& arch, const std::string& prefix) {
  ad::Graph g;
  ad::ParamVars vars;
  for (std::size_t k = 0; k < arch.layers(); ++k) {
    for (const auto& name : {layer_weight_name(prefix, k), layer_bias_name(prefix, k)}) {
      if (!params.contains(name)) throw ShapeError("layer fc" + std::to_string(k) + ": missing parameter '" + name + "'");
      vars.emplace(name, g.constant(params.at(name)));
    }
  }
  const ad::Var out = forward_mlp(g, vars, g.constant(input), arch, prefix);
  return g.value(out);
}

}  // namespace idf
