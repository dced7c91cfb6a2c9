#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "idforget/autodiff.hpp"
#include "idforget/params.hpp"

namespace idf {

// Fully connected network: affine layers with leaky-ReLU between them and a
// linear final layer. widths = {input, hidden..., output}.
struct MlpArch {
  std::vector<std::size_t> widths;
  double slope = 0.2;

  std::size_t input_width() const { return widths.front(); }
  std::size_t output_width() const { return widths.back(); }
  std::size_t layers() const { return widths.size() - 1; }
};

// Layer k is stored as "<prefix>fc<k>.weight" (out x in) and "<prefix>fc<k>.bias".
std::string layer_weight_name(const std::string& prefix, std::size_t layer);
std::string layer_bias_name(const std::string& prefix, std::size_t layer);

// He-normal weights for hidden layers, LeCun-normal for the output layer,
// zero biases.
ParamSet init_mlp(const MlpArch& arch, std::mt19937_64& rng, const std::string& prefix = "");

// Taped forward pass over a batch (rows of `input`).
ad::Var forward_mlp(ad::Graph& g, const ad::ParamVars& params, ad::Var input, const MlpArch& arch,
                    const std::string& prefix = "");

// Plain forward pass. A 1-D input yields a 1-D output; a matrix input is
// processed row by row. Shape problems raise ShapeError naming the layer.
Tensor forward_mlp(const ParamSet& params, const Tensor& input, const MlpArch& arch,
                   const std::string& prefix = "");

}  // namespace idf
