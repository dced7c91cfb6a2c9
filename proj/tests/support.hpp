#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "idforget/autodiff.hpp"
#include "idforget/deident.hpp"
#include "idforget/losses.hpp"
#include "idforget/metrics.hpp"
#include "idforget/mlp.hpp"
#include "idforget/params.hpp"
#include "idforget/rng.hpp"
#include "idforget/tensor.hpp"
#include "idforget/world.hpp"

namespace idf::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& x : t.values()) x = scale * standard_normal(rng);
  return t;
}

inline Tensor random_vector(std::size_t n, Rng& rng, double scale = 1.0) { return random_tensor({n}, rng, scale); }

inline ParamSet random_params(const ParamSet& layout, Rng& rng, double scale = 1.0) {
  ParamSet out = layout;
  for (auto& [name, t] : out) {
    for (double& x : t.values()) x = scale * standard_normal(rng);
  }
  return out;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  double m = 0.0;
  for (const auto& [name, t] : a) m = std::max(m, max_abs_diff(t, b.at(name)));
  return m;
}

// A world small enough for exhaustive finite differences: 4-D latents,
// one-channel 3x3 features, 4x4 images.
inline WorldSpec tiny_spec(std::uint64_t seed = 0, std::size_t identities = 10) {
  WorldSpec s;
  s.seed = seed;
  s.n_identities = identities;
  s.latent_dim = 4;
  s.channels = 1;
  s.feature_h = 3;
  s.feature_w = 3;
  s.image_side = 4;
  s.n_poses = 2;
  return s;
}

// Untrained but fully wired models for `world`: random generator and encoder,
// random embedder and perceptual nets, mean latent over all identities.
inline PretrainedModels random_models(const World& world, std::uint64_t seed, std::size_t hidden = 6) {
  const WorldSpec& s = world.spec;
  Rng rng = derive_stream(seed, "test.models");
  PretrainedModels m;
  m.generator_arch.widths = {s.latent_dim, hidden, s.feature_size()};
  m.encoder_arch.widths = {s.image_size(), hidden, s.latent_dim};
  m.embedder_arch.widths = {s.image_size(), hidden, 5};
  m.perceptual_arch.widths = {s.image_size(), hidden, 4};
  m.generator = init_mlp(m.generator_arch, rng);
  m.encoder = init_mlp(m.encoder_arch, rng);
  m.embedder = init_mlp(m.embedder_arch, rng);
  m.perceptual = init_mlp(m.perceptual_arch, rng);
  // Non-zero biases so every parameter carries gradient.
  for (ParamSet* p : {&m.generator, &m.encoder, &m.embedder, &m.perceptual}) {
    for (auto& [name, t] : *p) {
      if (name.ends_with(".bias")) {
        for (double& x : t.values()) x = 0.3 * standard_normal(rng);
      }
    }
  }
  m.mean_latent = mean_latent_rows(identity_latents(world, m));
  return m;
}

struct GradCheck {
  double rel_error = 0.0;  // ||g_ad - g_fd|| / max(||g_ad|| + ||g_fd||, 1e-12)
  double value = 0.0;
  double ad_norm = 0.0;
};

// Compares reverse-mode gradients of f at `params` with central differences.
inline GradCheck check_gradient(const ParamSet& params, const ad::ScalarFn& f, double h = 1e-6) {
  const ad::GradResult ad_result = ad::grad_scalar(f, params);
  const auto eval = [&](const ParamSet& p) {
    ad::Graph g;
    const ad::ParamVars vars = ad::bind(g, p, false);
    return g.value(f(g, vars))[0];
  };
  ParamSet probe = params;
  double diff_sq = 0.0, ad_sq = 0.0, fd_sq = 0.0;
  for (const auto& [name, t] : params) {
    const Tensor& grad = ad_result.grads.at(name);
    for (std::size_t i = 0; i < t.size(); ++i) {
      Tensor& slot = probe.at(name);
      const double x = slot[i];
      slot[i] = x + h;
      const double up = eval(probe);
      slot[i] = x - h;
      const double down = eval(probe);
      slot[i] = x;
      const double fd = (up - down) / (2.0 * h);
      diff_sq += (grad[i] - fd) * (grad[i] - fd);
      ad_sq += grad[i] * grad[i];
      fd_sq += fd * fd;
    }
  }
  GradCheck out;
  out.value = ad_result.value;
  out.ad_norm = std::sqrt(ad_sq);
  out.rel_error = std::sqrt(diff_sq) / std::max(std::sqrt(ad_sq) + std::sqrt(fd_sq), 1e-12);
  return out;
}

// Tiny world, random frozen models, and a generator nudged away from the
// reference so every term is non-trivial.
struct LossSetup {
  World world;
  PretrainedModels models;
  ParamSet theta;
  DeIdentNet net;
  Tensor latents;

  explicit LossSetup(std::uint64_t seed) : world(synth_world(tiny_spec(seed))), models(random_models(world, seed)) {
    Rng rng = derive_stream(seed, "test.losses.setup");
    theta = models.generator;
    for (auto& [name, t] : theta) {
      for (double& x : t.values()) x += 0.05 * standard_normal(rng);
    }
    net = make_deident_net(world.spec.latent_dim, seed);
    latents = identity_latents(world, models);
  }

  LossContext ctx() const { return LossContext{&world.renderer, &models, &models.generator}; }
  Tensor rows(std::initializer_list<std::size_t> ids) const {
    std::vector<Tensor> out;
    for (std::size_t i : ids) out.push_back(latents.row(i));
    return Tensor::stack(out);
  }
};

inline FisherDiagonal random_fisher(const ParamSet& layout, Rng& rng) {
  FisherDiagonal f;
  f.values = layout;
  for (auto& [name, t] : f.values) {
    for (double& x : t.values()) x = uniform01(rng);
  }
  return f;
}

// Linear model R(probe) = M(probe) theta with M built from the probe entries.
inline Tensor probe_matrix(const Tensor& probe, std::size_t outputs, std::size_t params) {
  Tensor m({outputs, params});
  for (std::size_t j = 0; j < outputs; ++j) {
    for (std::size_t i = 0; i < params; ++i) m(j, i) = probe[(j * params + i) % probe.size()] * (1.0 + 0.1 * j);
  }
  return m;
}

inline OutputFn linear_output(std::size_t outputs, std::size_t params) {
  return [=](ad::Graph& g, const ad::ParamVars& v, const Tensor& probe) {
    return ad::affine(g, v.at("theta"), g.constant(probe_matrix(probe, outputs, params)),
                      g.constant(Tensor({outputs}, 0.0)));
  };
}

inline Tensor random_psd(std::size_t n, Rng& rng) {
  const Tensor a = random_tensor({n, n}, rng);
  Tensor out({n, n}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t k = 0; k < n; ++k) out(i, j) += a(i, k) * a(j, k);
    }
  }
  return out;
}

inline GaussianStats stats_1d(double mean, double var) {
  return GaussianStats{Tensor::vector({mean}), Tensor({1, 1}, var)};
}

}  // namespace idf::test
