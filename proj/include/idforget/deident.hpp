#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "idforget/autodiff.hpp"
#include "idforget/mlp.hpp"
#include "idforget/params.hpp"
#include "idforget/tensor.hpp"
#include "idforget/world.hpp"

namespace idf {

// T: latent-space MLP D -> 64 -> 64 -> D.
struct DeIdentNet {
  ParamSet params;
  MlpArch arch;

  // Raw output T(v) for one latent or for rows of latents.
  Tensor transform(const Tensor& v) const;
};

DeIdentNet make_deident_net(std::size_t latent_dim, std::uint64_t seed);
// Wraps loaded parameters, inferring the layer widths.
DeIdentNet deident_net_from_params(ParamSet params);

struct DeIdentConfig {
  // Displacement. In identity radii (mean ||w_u - w_bar|| over the forget
  // set) unless d_absolute is set.
  double d = 1.0;
  bool d_absolute = false;
  double lambda_mse = 0.01;
  double lambda_per = 1.0;
  double lambda_id = 0.1;
  std::size_t epochs = 200;
  double lr = 1e-4;
  std::size_t batch = 2;
  std::uint64_t seed = 0;

  void validate() const;
};

// w_id = w_u - w_bar.
Tensor id_vector(const Tensor& w_u, const Tensor& w_bar);

// w_t = w_bar - d * T(w_id) / ||T(w_id)||. Throws DegenerateDirectionError
// when ||T(w_id)|| <= 1e-12.
Tensor deident_target(const DeIdentNet& net, const Tensor& w_u, const Tensor& w_bar, double d);
// Same rule applied to a given raw direction instead of the net output.
Tensor displaced_target(const Tensor& direction, const Tensor& w_bar, double d);
// Taped version over rows of latents; the net parameters come from `net_vars`.
ad::Var deident_target(ad::Graph& g, const ad::ParamVars& net_vars, const MlpArch& arch, const Tensor& latents,
                       const Tensor& w_bar, double d);

// Mean ||w - w_bar|| over rows of `latents`: the identity radius.
double identity_radius(const Tensor& latents, const Tensor& w_bar);
// Converts a displacement given in identity radii to latent units.
double resolve_distance(double value, bool absolute, double radius);

struct DeIdentWeights {
  double mse = 0.01;
  double per = 1.0;
  double id = 0.1;
};

// Pieces of the de-identification objective for one batch.
// mean over rows of  w.mse*MSE(F(w_u),F(w_t)) - w.per*L_per(x_u, x_t) - w.id*L_id(x_u, x_t)
// with x_t = R(F(w_t); 0) and L_id = 1 - cos of embeddings.
ad::Var deident_objective(ad::Graph& g, const ad::ParamVars& net_vars, const MlpArch& net_arch,
                          const PretrainedModels& models, const Renderer& renderer, const Tensor& latents,
                          const Tensor& images, const Tensor& w_bar, double d, const DeIdentWeights& weights);

struct DeIdentTrainResult {
  DeIdentNet net;
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  double d = 0.0;                  // displacement actually used, latent units
};

// Trains T on the latents of `forget_ids` (pose-0 images as x_u) with every
// pretrained model frozen. A degenerate direction aborts with the epoch index.
DeIdentTrainResult train_deident(const World& world, const PretrainedModels& models, std::span<const int> forget_ids,
                                 const DeIdentConfig& cfg);

}  // namespace idf
