#include "idforget/losses.hpp"

#include <cmath>

#include "idforget/errors.hpp"
#include "idforget/mlp.hpp"

namespace idf {

namespace {
constexpr double kMinDistance = 1e-12;
constexpr double kFisherPerturbation = 1e-3;

Tensor flat(const Tensor& t) { return t.reshaped({t.size()}); }

std::size_t uniform_index(Rng& rng, std::size_t n) {
  const auto i = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(n));
  return i < n ? i : n - 1;
}
}  // namespace

// --- method / config ----------------------------------------------------------

std::string method_name(Method m) {
  switch (m) {
    case Method::ours: return "ours";
    case Method::guide: return "guide";
    case Method::ours_v1: return "ours-v1";
    case Method::ours_v2: return "ours-v2";
    case Method::ours_v3: return "ours-v3";
  }
  return "ours";
}

Method parse_method(const std::string& text) {
  for (Method m : {Method::ours, Method::guide, Method::ours_v1, Method::ours_v2, Method::ours_v3}) {
    if (method_name(m) == text) return m;
  }
  throw ConfigError("unknown method '" + text + "' (expected ours, guide, ours-v1, ours-v2, ours-v3)");
}

bool uses_deident(Method m) { return m == Method::ours || m == Method::ours_v1 || m == Method::ours_v2; }
bool uses_ewc(Method m) { return m == Method::ours || m == Method::ours_v1 || m == Method::ours_v3; }

void UnlearnConfig::validate() const {
  for (double l : {lambda_mse, lambda_per, lambda_id, lambda_nei, lambda_ewc}) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw ConfigError("unlearn: every lambda must be finite and >= 0");
  }
  if (!(alpha_max > 0.0) || !std::isfinite(alpha_max)) throw ConfigError("unlearn: alpha_max must be > 0");
  if (!(alpha_r > 0.0) || !std::isfinite(alpha_r)) throw ConfigError("unlearn: alpha_r must be > 0");
  if (!std::isfinite(d)) throw ConfigError("unlearn: d must be finite");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("unlearn: lr must be > 0");
}

std::vector<std::pair<std::string, std::string>> UnlearnConfig::entries() const {
  std::vector<std::pair<std::string, std::string>> out{
      {"lambda_mse", format_double(lambda_mse)},
      {"lambda_per", format_double(lambda_per)},
      {"lambda_id", format_double(lambda_id)},
      {"lambda_nei", format_double(lambda_nei)},
      {"lambda_ewc", format_double(lambda_ewc)},
      {"alpha_max", format_double(alpha_max)},
      {"alpha_r", format_double(alpha_r)},
      {"probes_per_id", std::to_string(probes_per_id)},
      {"d", format_double(d)},
      {"distances_absolute", distances_absolute ? "true" : "false"},
      {"steps", std::to_string(steps)},
      {"lr", format_double(lr)},
      {"method", method_name(method)},
      {"fisher", empirical_fisher ? "empirical" : "gauss-newton"},
      {"seed", std::to_string(seed)},
  };
  out.insert(out.end(), echo.begin(), echo.end());
  return out;
}

// --- remapping loss -------------------------------------------------------------

ad::Var remap_loss(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const Tensor& sources,
                   const Tensor& targets, std::span<const int> poses, const RemapWeights& w) {
  const PretrainedModels& m = *ctx.models;
  const Tensor src = sources.as_matrix();
  const Tensor tgt = targets.as_matrix();
  if (src.rows() != tgt.rows() || src.cols() != tgt.cols()) {
    throw ShapeError("remap_loss: sources " + shape_string(src.shape()) + " vs targets " + shape_string(tgt.shape()));
  }
  if (poses.size() != src.rows()) throw ShapeError("remap_loss: need one pose per row");

  // Target side under the frozen reference; enters the tape as constants.
  const Tensor f_t = m.features(*ctx.reference, tgt);
  const Tensor x_t = ctx.renderer->render_rows(f_t, poses);
  const Tensor p_t = m.perceive(x_t);
  const Tensor e_t = m.embed(x_t);

  const ad::ParamVars per = ad::bind(g, m.perceptual, false);
  const ad::ParamVars emb = ad::bind(g, m.embedder, false);
  const ad::Var f_s = forward_mlp(g, theta, g.constant(src), m.generator_arch);
  const ad::Var x_s = ctx.renderer->render(g, f_s, poses);
  const ad::Var p_s = forward_mlp(g, per, x_s, m.perceptual_arch);
  const ad::Var e_s = m.embed(g, emb, x_s);

  const ad::Var l_mse = ad::mse(g, f_s, g.constant(f_t));
  const ad::Var l_per = ad::mse(g, p_s, g.constant(p_t));
  const ad::Var l_id = ad::affine_scalar(g, ad::mean(g, ad::dot_rows(g, e_s, g.constant(e_t))), -1.0, 1.0);
  ad::Var total = ad::affine_scalar(g, l_mse, w.mse, 0.0);
  total = ad::add(g, total, ad::affine_scalar(g, l_per, w.per, 0.0));
  return ad::add(g, total, ad::affine_scalar(g, l_id, w.id, 0.0));
}

double remap_loss(const ParamSet& theta, const LossContext& ctx, const Tensor& w_src, const Tensor& w_tgt, int pose,
                  const RemapWeights& w) {
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, theta, false);
  const int poses[1] = {pose};
  return g.value(remap_loss(g, vars, ctx, flat(w_src), flat(w_tgt), poses, w))[0];
}

// --- neighbors and targets ------------------------------------------------------------

NeighborDraw sample_neighbor(const Tensor& w_u, const Tensor& retain, double alpha_max, Rng& rng) {
  if (!(alpha_max >= 0.0)) throw ConfigError("sample_neighbor: alpha_max must be >= 0");
  const Tensor refs = retain.as_matrix();
  const Tensor src = flat(w_u);
  if (refs.empty() || refs.rows() == 0) throw ConfigError("sample_neighbor: empty retain set");
  if (refs.cols() != src.size()) throw ShapeError("sample_neighbor: retain width differs from latent");
  bool any = false;
  for (std::size_t r = 0; r < refs.rows() && !any; ++r) any = norm(refs.row(r) - src) > kMinDistance;
  if (!any) throw DegenerateDirectionError("sample_neighbor: every reference latent coincides with w_u");

  NeighborDraw draw;
  Tensor dir;
  double dist = 0.0;
  do {
    draw.reference = uniform_index(rng, refs.rows());
    dir = refs.row(draw.reference) - src;
    dist = norm(dir);
  } while (!(dist > kMinDistance));
  draw.alpha = alpha_max * uniform01(rng);
  draw.latent = src + (draw.alpha / dist) * dir;
  return draw;
}

Tensor guide_target(const Tensor& w_u, const Tensor& w_bar, double d) {
  const Tensor src = flat(w_u);
  const Tensor to_mean = flat(w_bar) - src;
  const double n = norm(to_mean);
  if (!(n > kMinDistance)) throw DegenerateDirectionError("guide target: source latent equals the mean latent");
  return src + ((n + d) / n) * to_mean;
}

TargetRule TargetRule::deident(const DeIdentNet& net, Tensor w_bar, double d) {
  TargetRule r;
  r.kind_ = Kind::deident;
  r.net_ = &net;
  r.w_bar_ = flat(w_bar);
  r.d_ = d;
  return r;
}

TargetRule TargetRule::mean(Tensor w_bar) {
  TargetRule r;
  r.kind_ = Kind::mean;
  r.w_bar_ = flat(w_bar);
  return r;
}

TargetRule TargetRule::guide(Tensor w_bar, double d) {
  TargetRule r;
  r.kind_ = Kind::guide;
  r.w_bar_ = flat(w_bar);
  r.d_ = d;
  return r;
}

TargetRule TargetRule::for_method(Method method, const DeIdentNet* net, Tensor w_bar, double d) {
  switch (method) {
    case Method::guide: return guide(std::move(w_bar), d);
    case Method::ours_v3: return mean(std::move(w_bar));
    default:
      if (net == nullptr) throw ConfigError("method " + method_name(method) + " needs a de-identification net");
      return deident(*net, std::move(w_bar), d);
  }
}

Tensor TargetRule::operator()(const Tensor& w) const {
  switch (kind_) {
    case Kind::deident: return deident_target(*net_, flat(w), w_bar_, d_);
    case Kind::guide: return guide_target(w, w_bar_, d_);
    case Kind::mean: break;
  }
  if (w.size() != w_bar_.size()) throw ShapeError("target: latent length differs from mean latent");
  return w_bar_;
}

Tensor TargetRule::apply_rows(const Tensor& rows) const {
  const Tensor m = rows.as_matrix();
  std::vector<Tensor> out;
  out.reserve(m.rows());
  for (std::size_t r = 0; r < m.rows(); ++r) out.push_back((*this)(m.row(r)));
  return Tensor::stack(out);
}

// --- forgetting loss ------------------------------------------------------------

ForgetDraws draw_forget(const Tensor& sources, const Tensor& retain, double alpha_max, std::size_t n_poses, Rng& rng) {
  if (n_poses == 0) throw ConfigError("draw_forget: no poses");
  ForgetDraws draws;
  draws.pose = static_cast<int>(uniform_index(rng, n_poses));
  const Tensor src = sources.as_matrix();
  for (std::size_t r = 0; r < src.rows(); ++r) draws.neighbors.push_back(sample_neighbor(src.row(r), retain, alpha_max, rng));
  return draws;
}

ForgetTerms forget_terms(const UnlearnConfig& cfg) {
  ForgetTerms t;
  t.weights = {cfg.lambda_mse, cfg.lambda_per, cfg.lambda_id};
  t.lambda_nei = cfg.lambda_nei;
  t.neighbor_term = cfg.method != Method::ours_v1;
  return t;
}

ad::Var forget_loss(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const TargetRule& rule,
                    const Tensor& sources, const ForgetDraws& draws, const ForgetTerms& terms) {
  const Tensor src = sources.as_matrix();
  const std::vector<int> poses(src.rows(), draws.pose);
  ad::Var loss = remap_loss(g, theta, ctx, src, rule.apply_rows(src), poses, terms.weights);
  if (!terms.neighbor_term) return loss;
  if (draws.neighbors.size() != src.rows()) throw ShapeError("forget_loss: need one neighbor draw per source");
  std::vector<Tensor> rows;
  for (const auto& n : draws.neighbors) rows.push_back(n.latent);
  const Tensor nb = Tensor::stack(rows);
  const ad::Var l_nei = remap_loss(g, theta, ctx, nb, rule.apply_rows(nb), poses, terms.weights);
  return ad::add(g, loss, ad::affine_scalar(g, l_nei, terms.lambda_nei, 0.0));
}

double forget_loss(const ParamSet& theta, const LossContext& ctx, const TargetRule& rule, const Tensor& w_u,
                   const Tensor& retain, const UnlearnConfig& cfg, double alpha_max, Rng& rng) {
  const Tensor src = flat(w_u);
  const ForgetDraws draws = draw_forget(src, retain, alpha_max, ctx.renderer->n_poses, rng);
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, theta, false);
  return g.value(forget_loss(g, vars, ctx, rule, src, draws, forget_terms(cfg)))[0];
}

// --- vicinity and Fisher -------------------------------------------------------------

VicinitySet vicinity_set(const Tensor& latents, double alpha_r, std::size_t probes_per_id, Rng& rng) {
  if (!(alpha_r > 0.0)) throw ConfigError("vicinity_set: alpha_r must be > 0");
  const Tensor rows = latents.as_matrix();
  VicinitySet set;
  for (std::size_t r = 0; r < rows.rows(); ++r) {
    const Tensor anchor = rows.row(r);
    for (std::size_t k = 0; k < probes_per_id; ++k) {
      Tensor dir({anchor.size()});
      double n = 0.0;
      while (!(n > kMinDistance)) {
        for (double& x : dir.values()) x = standard_normal(rng);
        n = norm(dir);
      }
      set.probes.push_back(anchor + (alpha_r / n) * dir);
      set.anchors.push_back(r);
    }
  }
  return set;
}

FisherDiagonal fisher_gauss_newton(const ParamSet& theta_star, const std::vector<Tensor>& probes,
                                   const OutputFn& output) {
  FisherDiagonal f;
  f.values = theta_star.filled(0.0);
  if (probes.empty()) {
    f.empty_probes = true;
    return f;
  }
  for (const Tensor& probe : probes) {
    ad::Graph g;
    const ad::ParamVars vars = ad::bind(g, theta_star, true);
    const ad::Var out = output(g, vars, probe);
    const std::size_t n_out = g.value(out).size();
    Tensor seed(g.value(out).shape(), 0.0);
    for (std::size_t j = 0; j < n_out; ++j) {
      seed[j] = 1.0;
      g.backward(out, seed);
      seed[j] = 0.0;
      for (const auto& [name, v] : vars) {
        const Tensor grad = g.grad(v);
        Tensor& acc = f.values.at(name);
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad[i] * grad[i];
      }
    }
  }
  const double scale = 1.0 / static_cast<double>(probes.size());
  for (auto& [name, t] : f.values) t = scale * t;
  return f;
}

FisherDiagonal fisher_empirical(const ParamSet& theta_star, const std::vector<Tensor>& probes,
                                const RefLossFn& ref_loss, std::uint64_t seed) {
  FisherDiagonal f;
  f.values = theta_star.filled(0.0);
  if (probes.empty()) {
    f.empty_probes = true;
    return f;
  }
  Rng rng = derive_stream(seed, "fisher.perturb");
  ParamSet shifted = theta_star;
  for (auto& [name, t] : shifted) {
    for (double& x : t.values()) x += uniform01(rng) < 0.5 ? -kFisherPerturbation : kFisherPerturbation;
  }
  for (const Tensor& probe : probes) {
    ad::Graph g;
    const ad::ParamVars vars = ad::bind(g, shifted, true);
    g.backward(ref_loss(g, vars, probe));
    for (const auto& [name, v] : vars) {
      const Tensor grad = g.grad(v);
      Tensor& acc = f.values.at(name);
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += grad[i] * grad[i];
    }
  }
  const double scale = 1.0 / static_cast<double>(probes.size());
  for (auto& [name, t] : f.values) t = scale * t;
  return f;
}

FisherDiagonal fisher_diag(const ParamSet& theta_star, const LossContext& ctx, const VicinitySet& probes,
                           FisherMode mode, const RemapWeights& weights, std::uint64_t seed) {
  const PretrainedModels& m = *ctx.models;
  const Renderer& renderer = *ctx.renderer;
  if (mode == FisherMode::gauss_newton) {
    return fisher_gauss_newton(theta_star, probes.probes, [&](ad::Graph& g, const ad::ParamVars& v, const Tensor& p) {
      const int pose0[1] = {0};
      return renderer.render(g, forward_mlp(g, v, g.constant(flat(p)), m.generator_arch), pose0);
    });
  }
  LossContext frozen = ctx;
  frozen.reference = &theta_star;
  return fisher_empirical(
      theta_star, probes.probes,
      [&](ad::Graph& g, const ad::ParamVars& v, const Tensor& p) {
        const int pose0[1] = {0};
        return remap_loss(g, v, frozen, flat(p), flat(p), pose0, weights);
      },
      seed);
}

// --- EWC and the full objective --------------------------------------------------------

double ewc_penalty(const ParamSet& theta, const ParamSet& theta_star, const FisherDiagonal& fisher) {
  require_same_layout(theta, theta_star, "ewc_penalty");
  require_same_layout(theta, fisher.values, "ewc_penalty");
  double total = 0.0;
  for (const auto& [name, f] : fisher.values) {
    const Tensor& a = theta.at(name);
    const Tensor& b = theta_star.at(name);
    for (std::size_t i = 0; i < f.size(); ++i) total += f[i] * (a[i] - b[i]) * (a[i] - b[i]);
  }
  return 0.5 * total;
}

ad::Var ewc_penalty(ad::Graph& g, const ad::ParamVars& theta, const ParamSet& theta_star,
                    const FisherDiagonal& fisher) {
  require_same_layout(theta_star, fisher.values, "ewc_penalty");
  ad::Var total{};
  bool first = true;
  for (const auto& [name, f] : fisher.values) {
    const auto it = theta.find(name);
    if (it == theta.end()) throw ShapeError("ewc_penalty: parameter '" + name + "' not on the tape");
    const ad::Var diff = ad::sub(g, it->second, g.constant(theta_star.at(name)));
    const ad::Var term = ad::sum(g, ad::mul(g, ad::mul(g, diff, diff), g.constant(f)));
    total = first ? term : ad::add(g, total, term);
    first = false;
  }
  if (first) throw ShapeError("ewc_penalty: empty parameter set");
  return ad::affine_scalar(g, total, 0.5, 0.0);
}

ad::Var unlearn_objective(ad::Graph& g, const ad::ParamVars& theta, const LossContext& ctx, const TargetRule& rule,
                          const Tensor& sources, const ForgetDraws& draws, const FisherDiagonal* fisher,
                          const UnlearnConfig& cfg) {
  const ad::Var forget = forget_loss(g, theta, ctx, rule, sources, draws, forget_terms(cfg));
  if (!uses_ewc(cfg.method)) return forget;
  if (fisher == nullptr) throw ConfigError("unlearn_objective: method " + method_name(cfg.method) + " needs a Fisher diagonal");
  const ad::Var ewc = ewc_penalty(g, theta, *ctx.reference, *fisher);
  return ad::add(g, forget, ad::affine_scalar(g, ewc, cfg.lambda_ewc, 0.0));
}

}  // namespace idf
