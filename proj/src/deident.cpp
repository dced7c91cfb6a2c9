#include "idforget/deident.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "idforget/adam.hpp"
#include "idforget/errors.hpp"
#include "idforget/rng.hpp"

namespace idf {

namespace {
constexpr double kMinDirectionNorm = 1e-12;
constexpr std::size_t kHidden = 64;
}  // namespace

Tensor DeIdentNet::transform(const Tensor& v) const { return forward_mlp(params, v, arch); }

DeIdentNet make_deident_net(std::size_t latent_dim, std::uint64_t seed) {
  DeIdentNet net;
  net.arch.widths = {latent_dim, kHidden, kHidden, latent_dim};
  Rng rng = derive_stream(seed, "deident.init");
  net.params = init_mlp(net.arch, rng);
  return net;
}

DeIdentNet deident_net_from_params(ParamSet params) {
  DeIdentNet net;
  net.arch = infer_arch(params);
  if (net.arch.input_width() != net.arch.output_width()) {
    throw ShapeError("de-identification net must map D -> D");
  }
  net.params = std::move(params);
  return net;
}

void DeIdentConfig::validate() const {
  if (!std::isfinite(d)) throw ConfigError("deident: d must be finite");
  if (lambda_mse < 0 || lambda_per < 0 || lambda_id < 0) throw ConfigError("deident: lambdas must be >= 0");
  if (epochs < 1) throw ConfigError("deident: epochs must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("deident: lr must be > 0");
  if (batch < 1) throw ConfigError("deident: batch must be >= 1");
}

Tensor id_vector(const Tensor& w_u, const Tensor& w_bar) {
  if (w_u.size() != w_bar.size()) {
    throw ShapeError("id_vector: length " + std::to_string(w_u.size()) + " vs " + std::to_string(w_bar.size()));
  }
  return w_u - w_bar;
}

Tensor displaced_target(const Tensor& direction, const Tensor& w_bar, double d) {
  if (direction.size() != w_bar.size()) throw ShapeError("deident_target: direction length differs from latent");
  const double n = norm(direction);
  if (!(n > kMinDirectionNorm)) {
    throw DegenerateDirectionError("deident_target: transformed identity vector has norm " + format_double(n));
  }
  Tensor out = w_bar;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= d * direction[i] / n;
  return out;
}

Tensor deident_target(const DeIdentNet& net, const Tensor& w_u, const Tensor& w_bar, double d) {
  const Tensor w_id = id_vector(w_u, w_bar).reshaped({w_u.size()});
  return displaced_target(net.transform(w_id), w_bar.reshaped({w_bar.size()}), d);
}

ad::Var deident_target(ad::Graph& g, const ad::ParamVars& net_vars, const MlpArch& arch, const Tensor& latents,
                       const Tensor& w_bar, double d) {
  const Tensor rows = latents.as_matrix();
  if (rows.cols() != w_bar.size()) throw ShapeError("deident_target: latent width differs from mean latent");
  Tensor ids = rows;
  for (std::size_t r = 0; r < ids.rows(); ++r) {
    for (std::size_t c = 0; c < ids.cols(); ++c) ids(r, c) -= w_bar[c];
  }
  const ad::Var t = forward_mlp(g, net_vars, g.constant(ids), arch);
  const ad::Var unit = ad::normalize_rows(g, t, kMinDirectionNorm);
  return ad::add_row(g, ad::affine_scalar(g, unit, -d, 0.0), g.constant(w_bar.reshaped({w_bar.size()})));
}

double identity_radius(const Tensor& latents, const Tensor& w_bar) {
  const Tensor rows = latents.as_matrix();
  if (rows.rows() == 0) throw ConfigError("identity_radius: empty latent set");
  double total = 0.0;
  for (std::size_t r = 0; r < rows.rows(); ++r) total += norm(id_vector(rows.row(r), w_bar.reshaped({w_bar.size()})));
  return total / static_cast<double>(rows.rows());
}

double resolve_distance(double value, bool absolute, double radius) { return absolute ? value : value * radius; }

ad::Var deident_objective(ad::Graph& g, const ad::ParamVars& net_vars, const MlpArch& net_arch,
                          const PretrainedModels& models, const Renderer& renderer, const Tensor& latents,
                          const Tensor& images, const Tensor& w_bar, double d, const DeIdentWeights& weights) {
  const Tensor w_u = latents.as_matrix();
  const Tensor x_u = images.as_matrix();
  if (w_u.rows() != x_u.rows()) throw ShapeError("deident_objective: latent and image counts differ");
  const std::size_t n = w_u.rows();

  // Source side is fixed; only the target depends on T.
  const Tensor f_u = models.features(w_u);
  const Tensor p_u = models.perceive(x_u);
  const Tensor e_u = models.embed(x_u);

  const ad::ParamVars gen = ad::bind(g, models.generator, false);
  const ad::ParamVars per = ad::bind(g, models.perceptual, false);
  const ad::ParamVars emb = ad::bind(g, models.embedder, false);

  const ad::Var w_t = deident_target(g, net_vars, net_arch, w_u, w_bar, d);
  const ad::Var f_t = forward_mlp(g, gen, w_t, models.generator_arch);
  const std::vector<int> pose0(n, 0);
  const ad::Var x_t = renderer.render(g, f_t, pose0);
  const ad::Var p_t = forward_mlp(g, per, x_t, models.perceptual_arch);
  const ad::Var e_t = models.embed(g, emb, x_t);

  const ad::Var l_mse = ad::mse(g, f_t, g.constant(f_u));
  const ad::Var l_per = ad::mse(g, p_t, g.constant(p_u));
  const ad::Var l_id = ad::affine_scalar(g, ad::mean(g, ad::dot_rows(g, e_t, g.constant(e_u))), -1.0, 1.0);

  ad::Var total = ad::affine_scalar(g, l_mse, weights.mse, 0.0);
  total = ad::add(g, total, ad::affine_scalar(g, l_per, -weights.per, 0.0));
  return ad::add(g, total, ad::affine_scalar(g, l_id, -weights.id, 0.0));
}

DeIdentTrainResult train_deident(const World& world, const PretrainedModels& models, std::span<const int> forget_ids,
                                 const DeIdentConfig& cfg) {
  cfg.validate();
  if (forget_ids.empty()) throw ConfigError("train_deident: empty forget set");
  const Tensor all_latents = identity_latents(world, models);
  const Tensor w_bar = mean_latent_rows(all_latents);
  std::vector<Tensor> rows;
  for (int id : forget_ids) {
    world.record(id);
    rows.push_back(all_latents.row(static_cast<std::size_t>(id)));
  }
  const Tensor w_u = Tensor::stack(rows);
  const Tensor x_u = world.images(forget_ids, 0);

  DeIdentTrainResult result;
  result.d = resolve_distance(cfg.d, cfg.d_absolute, identity_radius(w_u, w_bar));
  result.net = make_deident_net(world.spec.latent_dim, cfg.seed);
  const DeIdentWeights weights{cfg.lambda_mse, cfg.lambda_per, cfg.lambda_id};

  AdamState state = make_adam_state(result.net.params);
  Rng shuffle = derive_stream(cfg.seed, "deident.shuffle");
  std::vector<std::size_t> order(w_u.rows());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle);
    double epoch_total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch);
      std::vector<Tensor> bw, bx;
      for (std::size_t i = start; i < stop; ++i) {
        bw.push_back(w_u.row(order[i]));
        bx.push_back(x_u.row(order[i]));
      }
      try {
        ad::Graph g;
        const ad::ParamVars vars = ad::bind(g, result.net.params, true);
        const ad::Var loss = deident_objective(g, vars, result.net.arch, models, world.renderer, Tensor::stack(bw),
                                               Tensor::stack(bx), w_bar, result.d, weights);
        g.backward(loss);
        epoch_total += g.value(loss)[0];
        adam_step(result.net.params, ad::gradients(g, vars), state, cfg.lr);
      } catch (const DegenerateDirectionError& e) {
        throw DegenerateDirectionError("train_deident aborted at epoch " + std::to_string(epoch) + ": " + e.what());
      } catch (const NumericalError& e) {
        throw NumericalError("train_deident aborted at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      ++batches;
    }
    result.epoch_loss.push_back(epoch_total / static_cast<double>(batches));
  }
  return result;
}

}  // namespace idf
