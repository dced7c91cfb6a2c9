#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "idforget/autodiff.hpp"
#include "idforget/deident.hpp"
#include "idforget/params.hpp"
#include "idforget/rng.hpp"
#include "idforget/tensor.hpp"
#include "idforget/world.hpp"

namespace idf {

enum class Method { ours, guide, ours_v1, ours_v2, ours_v3 };

std::string method_name(Method m);
// Accepts "ours", "guide", "ours-v1", "ours-v2", "ours-v3".
Method parse_method(const std::string& text);
// True for the variants that use a trained de-identification net.
bool uses_deident(Method m);

struct UnlearnConfig {
  double lambda_mse = 0.01;
  double lambda_per = 1.0;
  double lambda_id = 0.1;
  double lambda_nei = 0.1;
  double lambda_ewc = 50.0;
  // alpha_max, alpha_r and d are in identity radii unless distances_absolute.
  double alpha_max = 0.6;
  double alpha_r = 1.2;
  std::size_t probes_per_id = 1;
  double d = 1.0;
  bool distances_absolute = false;
  std::size_t steps = 400;
  double lr = 1e-4;
  Method method = Method::ours;
  bool empirical_fisher = false;
  std::uint64_t seed = 0;
  // Extra key=value pairs recorded in manifests after the fields above.
  std::vector<std::pair<std::string, std::string>> echo;

  void validate() const;
  // Stable key=value listing used in manifests.
  std::vector<std::pair<std::string, std::string>> entries() const;
};

// Frozen pieces shared by every loss: renderer, embedder, perceptual net and
// the reference generator that evaluates targets.
struct LossContext {
  const Renderer* renderer = nullptr;
  const PretrainedModels* models = nullptr;
  const ParamSet* reference = nullptr;
};

struct RemapWeights {
  double mse = 0.01;
  double per = 1.0;
  double id = 0.1;
};

// Mean over rows of
//   w.mse*MSE(F_theta(src), F_ref(tgt)) + w.per*L_per(R_theta(src,c), R_ref(tgt,c))
//   + w.id*L_id(same pair).
// The target side is computed under the frozen reference, off the tape.
ad::Var remap_loss(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const Tensor& sources,
                   const Tensor& targets, std::span<const int> poses, const RemapWeights& w);
// Single-pair value.
double remap_loss(const ParamSet& theta, const LossContext& ctx, const Tensor& w_src, const Tensor& w_tgt, int pose,
                  const RemapWeights& w);

struct NeighborDraw {
  Tensor latent;
  double alpha = 0.0;
  std::size_t reference = 0;  // row of the retain set used as direction
};

// w_u + alpha (w_r - w_u)/||w_r - w_u|| with alpha ~ U(0, alpha_max) and w_r
// drawn uniformly from the rows of `retain` (redrawn if it coincides with
// w_u). Throws DegenerateDirectionError if every reference coincides.
NeighborDraw sample_neighbor(const Tensor& w_u, const Tensor& retain, double alpha_max, Rng& rng);

// Maps a source latent to the latent whose reference render it should match.
class TargetRule {
 public:
  enum class Kind { deident, mean, guide };

  static TargetRule deident(const DeIdentNet& net, Tensor w_bar, double d);
  static TargetRule mean(Tensor w_bar);
  static TargetRule guide(Tensor w_bar, double d);
  // Rule used by `method` (net may be null for guide and ours-v3).
  static TargetRule for_method(Method method, const DeIdentNet* net, Tensor w_bar, double d);

  Kind kind() const { return kind_; }
  Tensor operator()(const Tensor& w) const;
  Tensor apply_rows(const Tensor& rows) const;

 private:
  Kind kind_ = Kind::mean;
  const DeIdentNet* net_ = nullptr;
  Tensor w_bar_;
  double d_ = 0.0;
};

// w_u + (||w_bar - w_u|| + d) (w_bar - w_u)/||w_bar - w_u||: d beyond the mean
// along the source-to-mean direction. Throws DegenerateDirectionError if
// w_u == w_bar.
Tensor guide_target(const Tensor& w_u, const Tensor& w_bar, double d);

// Random choices of one objective evaluation, drawn up front so variants can
// be compared on identical draws.
struct ForgetDraws {
  int pose = 0;
  std::vector<NeighborDraw> neighbors;  // one per source row
};

ForgetDraws draw_forget(const Tensor& sources, const Tensor& retain, double alpha_max, std::size_t n_poses, Rng& rng);

struct ForgetTerms {
  RemapWeights weights;
  double lambda_nei = 0.1;
  bool neighbor_term = true;  // false for ours-v1
};

// Mean over rows of L_map(w_u, rule(w_u)) + lambda_nei * L_map(w_ua, rule(w_ua)).
ad::Var forget_loss(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const TargetRule& rule,
                    const Tensor& sources, const ForgetDraws& draws, const ForgetTerms& terms);
// Single-identity value with fresh draws from `rng`.
double forget_loss(const ParamSet& theta, const LossContext& ctx, const TargetRule& rule, const Tensor& w_u,
                   const Tensor& retain, const UnlearnConfig& cfg, double alpha_max, Rng& rng);

struct VicinitySet {
  std::vector<Tensor> probes;
  std::vector<std::size_t> anchors;  // source row of each probe
};

// probes_per_id points on the alpha_r sphere around every row of `latents`.
VicinitySet vicinity_set(const Tensor& latents, double alpha_r, std::size_t probes_per_id, Rng& rng);

enum class FisherMode { gauss_newton, empirical };

struct FisherDiagonal {
  ParamSet values;
  bool empty_probes = false;  // set when no probes were supplied; values are zero
};

// Model output R_theta(probe) as a row vector.
using OutputFn = std::function<ad::Var(ad::Graph&, const ad::ParamVars&, const Tensor& probe)>;
// Reference loss l_ref(theta; probe) as a scalar.
using RefLossFn = std::function<ad::Var(ad::Graph&, const ad::ParamVars&, const Tensor& probe)>;

// gauss-newton: F_i = mean over probes of sum_j (dR_j/dtheta_i)^2 at theta_star.
FisherDiagonal fisher_gauss_newton(const ParamSet& theta_star, const std::vector<Tensor>& probes,
                                   const OutputFn& output);
// empirical: mean over probes of (d l_ref/dtheta_i)^2 at theta_star + delta,
// where delta is a fixed +-1e-3 sign pattern drawn from `seed`.
FisherDiagonal fisher_empirical(const ParamSet& theta_star, const std::vector<Tensor>& probes,
                                const RefLossFn& ref_loss, std::uint64_t seed);

// Fisher of the generator's rendered output over a vicinity set. The summed
// squared Jacobian is the same for every pose (poses permute pixels), so pose
// 0 is used.
FisherDiagonal fisher_diag(const ParamSet& theta_star, const LossContext& ctx, const VicinitySet& probes,
                           FisherMode mode, const RemapWeights& weights, std::uint64_t seed);

// 0.5 * sum F_i (theta_i - theta_star_i)^2.
double ewc_penalty(const ParamSet& theta, const ParamSet& theta_star, const FisherDiagonal& fisher);
ad::Var ewc_penalty(ad::Graph& g, const ad::ParamVars& theta, const ParamSet& theta_star,
                    const FisherDiagonal& fisher);

// Mean forgetting loss over the batch plus lambda_ewc * EWC (dropped for
// ours-v2 and guide). The neighbor term is dropped for ours-v1.
ad::Var unlearn_objective(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const TargetRule& rule,
                          const Tensor& sources, const ForgetDraws& draws, const FisherDiagonal* fisher,
                          const UnlearnConfig& cfg);

ForgetTerms forget_terms(const UnlearnConfig& cfg);
bool uses_ewc(Method m);

}  // namespace idf
