#include <doctest.h>

#include "idforget/checkpoint.hpp"
#include "idforget/deident.hpp"
#include "idforget/errors.hpp"
#include "idforget/metrics.hpp"
#include "support.hpp"

using namespace idf;
using idf::test::check_gradient;
using idf::test::max_abs_diff;
using idf::test::random_models;
using idf::test::random_tensor;
using idf::test::tiny_spec;

namespace {

// Single linear layer with the identity as weight: T(v) = v.
DeIdentNet identity_net(std::size_t dim) {
  ParamSet p;
  Tensor w({dim, dim}, 0.0);
  for (std::size_t i = 0; i < dim; ++i) w(i, i) = 1.0;
  p.set("fc0.weight", w);
  p.set("fc0.bias", Tensor({dim}, 0.0));
  return deident_net_from_params(std::move(p));
}

// Every layer scaled so the final output is multiplied by `k` (leaky ReLU is
// positively homogeneous).
DeIdentNet scaled_net(const DeIdentNet& net, double k) {
  DeIdentNet out = net;
  const std::size_t last = net.arch.layers() - 1;
  out.params.at(layer_weight_name("", last)) = k * net.params.at(layer_weight_name("", last));
  out.params.at(layer_bias_name("", last)) = k * net.params.at(layer_bias_name("", last));
  return out;
}

// L_de for one latent computed from separate forward passes.
double objective_oracle(const World& w, const PretrainedModels& m, const DeIdentNet& net, const Tensor& w_u,
                        const Tensor& x_u, const Tensor& w_bar, double d, const DeIdentWeights& k) {
  const Tensor w_t = deident_target(net, w_u, w_bar, d);
  const Tensor f_u = forward_mlp(m.generator, w_u, m.generator_arch);
  const Tensor f_t = forward_mlp(m.generator, w_t, m.generator_arch);
  const Tensor x_t = w.renderer.render(f_t, 0);
  return k.mse * mean_squared_error(f_u, f_t) - k.per * perceptual_distance(x_u, x_t, m) -
         k.id * (1.0 - id_similarity(x_u, x_t, m));
}

double objective_value(const World& w, const PretrainedModels& m, const DeIdentNet& net, const Tensor& latents,
                       const Tensor& images, const Tensor& w_bar, double d, const DeIdentWeights& k) {
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, net.params, false);
  return g.value(deident_objective(g, vars, net.arch, m, w.renderer, latents, images, w_bar, d, k))[0];
}

}  // namespace

TEST_CASE("id_vector") {
  Rng rng = derive_stream(0, "test.idvec");
  const Tensor a = random_tensor({6}, rng), b = random_tensor({6}, rng);
  CHECK(id_vector(a, a) == Tensor({6}, 0.0));
  CHECK(id_vector(a, Tensor({6}, 0.0)) == a);
  const Tensor diff = id_vector(a, b);
  for (std::size_t i = 0; i < 6; ++i) CHECK(diff[i] == a[i] - b[i]);
  CHECK_THROWS_AS(id_vector(a, Tensor({5}, 0.0)), ShapeError);
}

TEST_CASE("deident net shape") {
  const DeIdentNet net = make_deident_net(7, 3);
  CHECK(net.arch.widths == std::vector<std::size_t>{7, 64, 64, 7});
  Rng rng = derive_stream(3, "test.net");
  CHECK(net.transform(random_tensor({7}, rng)).size() == 7);
  CHECK(params_digest(make_deident_net(7, 3).params) == params_digest(net.params));
}

TEST_CASE("deident_target analytic cases") {
  const DeIdentNet id = identity_net(4);
  const Tensor w_u = Tensor::vector({3, 4, 0, 0});
  const Tensor zero({4}, 0.0);
  const Tensor t = deident_target(id, w_u, zero, 5.0);
  CHECK(max_abs_diff(t, Tensor::vector({-3, -4, 0, 0})) < 1e-15);

  Rng rng = derive_stream(1, "test.target");
  const DeIdentNet net = make_deident_net(4, 1);
  const Tensor w_bar = random_tensor({4}, rng);
  CHECK(deident_target(net, random_tensor({4}, rng), w_bar, 0.0) == w_bar);
  CHECK_THROWS_AS(deident_target(id, w_bar, w_bar, 1.0), DegenerateDirectionError);
  CHECK_THROWS_AS(displaced_target(Tensor({4}, 1e-13), w_bar, 1.0), DegenerateDirectionError);
}

TEST_CASE("target lies exactly d from the mean for any net and input") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng = derive_stream(seed, "test.geometry");
    const std::size_t dim = 2 + seed % 7;
    const DeIdentNet net = make_deident_net(dim, seed);
    const Tensor w_u = random_tensor({dim}, rng, 3.0);
    const Tensor w_bar = random_tensor({dim}, rng);
    const double d = seed == 0 ? 25.0 : 0.1 + 10.0 * uniform01(rng);
    CHECK(std::abs(norm(deident_target(net, w_u, w_bar, d) - w_bar) - d) < 1e-9);
  }
}

TEST_CASE("target is invariant to positive rescaling of the net output") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng = derive_stream(seed, "test.scale");
    const DeIdentNet net = make_deident_net(5, seed);
    const DeIdentNet big = scaled_net(net, 10.0);
    const Tensor w_u = random_tensor({5}, rng), w_bar = random_tensor({5}, rng);
    const Tensor v = net.transform(id_vector(w_u, w_bar));
    CHECK(max_abs_diff(big.transform(id_vector(w_u, w_bar)), 10.0 * v) < 1e-12 * norm(v) * 10.0);
    CHECK(max_abs_diff(deident_target(net, w_u, w_bar, 2.5), deident_target(big, w_u, w_bar, 2.5)) < 1e-12);
    CHECK(max_abs_diff(displaced_target(v, w_bar, 2.5), displaced_target(10.0 * v, w_bar, 2.5)) < 1e-12);
  }
}

TEST_CASE("taped target matches the plain target row by row") {
  Rng rng = derive_stream(4, "test.taped");
  const DeIdentNet net = make_deident_net(4, 4);
  const Tensor latents = random_tensor({3, 4}, rng);
  const Tensor w_bar = random_tensor({4}, rng);
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, net.params, false);
  const Tensor out = g.value(deident_target(g, vars, net.arch, latents, w_bar, 1.7));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(max_abs_diff(out.row(i), deident_target(net, latents.row(i), w_bar, 1.7)) < 1e-12);
  }
}

TEST_CASE("identity radius and distance resolution") {
  const Tensor rows = Tensor::matrix(2, 2, {3, 4, 0, 1});
  CHECK(identity_radius(rows, Tensor({2}, 0.0)) == doctest::Approx(3.0));
  CHECK(resolve_distance(0.5, false, 4.0) == 2.0);
  CHECK(resolve_distance(0.5, true, 4.0) == 0.5);
}

TEST_CASE("deident objective matches a term-by-term oracle") {
  const World w = synth_world(tiny_spec(2));
  const PretrainedModels m = random_models(w, 2);
  const DeIdentNet net = make_deident_net(w.spec.latent_dim, 2);
  const std::vector<int> ids{0, 3, 5};
  const Tensor latents = identity_latents(w, m);
  std::vector<Tensor> rows;
  for (int id : ids) rows.push_back(latents.row(static_cast<std::size_t>(id)));
  const Tensor w_u = Tensor::stack(rows);
  const Tensor x_u = w.images(ids, 0);
  const DeIdentWeights k{0.3, 1.0, 0.7};
  double oracle = 0.0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    oracle += objective_oracle(w, m, net, w_u.row(i), x_u.row(i), m.mean_latent, 1.3, k) / 3.0;
  }
  CHECK(objective_value(w, m, net, w_u, x_u, m.mean_latent, 1.3, k) == doctest::Approx(oracle).epsilon(1e-12));
}

TEST_CASE("perceptual and identity distance enter with a negative sign") {
  const World w = synth_world(tiny_spec(5));
  const PretrainedModels m = random_models(w, 5);
  const DeIdentNet net = make_deident_net(w.spec.latent_dim, 5);
  const Tensor w_u = identity_latents(w, m).row(1);
  const Tensor x_u = w.records[1].images[0];
  const Tensor rows = Tensor::stack(std::vector<Tensor>{w_u});
  const Tensor img_rows = Tensor::stack(std::vector<Tensor>{x_u});
  const auto x_t = [&](double d) {
    return w.renderer.render(forward_mlp(m.generator, deident_target(net, w_u, m.mean_latent, d), m.generator_arch), 0);
  };
  // Two displacements whose surrogates sit at different distances from x_u.
  const double near = 0.05, far = 3.0;
  const double per_near = perceptual_distance(x_u, x_t(near), m), per_far = perceptual_distance(x_u, x_t(far), m);
  const double id_near = 1.0 - id_similarity(x_u, x_t(near), m), id_far = 1.0 - id_similarity(x_u, x_t(far), m);
  REQUIRE(per_far != per_near);
  REQUIRE(id_far != id_near);
  const double per_obj_near = objective_value(w, m, net, rows, img_rows, m.mean_latent, near, {0, 1, 0});
  const double per_obj_far = objective_value(w, m, net, rows, img_rows, m.mean_latent, far, {0, 1, 0});
  const double id_obj_near = objective_value(w, m, net, rows, img_rows, m.mean_latent, near, {0, 0, 1});
  const double id_obj_far = objective_value(w, m, net, rows, img_rows, m.mean_latent, far, {0, 0, 1});
  CHECK(per_obj_near == doctest::Approx(-per_near).epsilon(1e-12));
  CHECK(id_obj_far == doctest::Approx(-id_far).epsilon(1e-12));
  CHECK(((per_far > per_near) == (per_obj_far < per_obj_near)));
  CHECK(((id_far > id_near) == (id_obj_far < id_obj_near)));
}

TEST_CASE("deident objective gradient matches finite differences") {
  const World w = synth_world(tiny_spec(9));
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PretrainedModels m = random_models(w, seed);
    const DeIdentNet net = make_deident_net(w.spec.latent_dim, seed);
    const std::vector<int> ids{static_cast<int>(seed), static_cast<int>(seed + 2)};
    const Tensor all = identity_latents(w, m);
    const Tensor w_u = Tensor::stack(std::vector<Tensor>{all.row(seed), all.row(seed + 2)});
    const Tensor x_u = w.images(ids, 0);
    const auto check = check_gradient(net.params, [&](ad::Graph& g, const ad::ParamVars& v) {
      return deident_objective(g, v, net.arch, m, w.renderer, w_u, x_u, m.mean_latent, 0.8, {0.01, 1.0, 0.1});
    });
    CHECK(check.rel_error < 1e-4);
  }
}

TEST_CASE("train_deident: reduced objective descends and frozen models stay untouched") {
  const World w = synth_world(tiny_spec(11));
  const PretrainedModels m = random_models(w, 11);
  const PretrainedModels before = m;
  DeIdentConfig cfg;
  cfg.lambda_per = 0.0;
  cfg.lambda_id = 0.0;
  cfg.lambda_mse = 1.0;
  cfg.epochs = 60;
  cfg.lr = 1e-3;
  const std::vector<int> ids{0, 1, 2};
  const DeIdentTrainResult r = train_deident(w, m, ids, cfg);
  REQUIRE(r.epoch_loss.size() == 60);
  CHECK(r.epoch_loss.back() < r.epoch_loss.front());
  CHECK(params_digest(m.generator) == params_digest(before.generator));
  CHECK(params_digest(m.encoder) == params_digest(before.encoder));
  CHECK(params_digest(m.embedder) == params_digest(before.embedder));
  CHECK(params_digest(m.perceptual) == params_digest(before.perceptual));
  CHECK(r.d == doctest::Approx(identity_radius(
                   Tensor::stack(std::vector<Tensor>{identity_latents(w, m).row(0), identity_latents(w, m).row(1),
                                                     identity_latents(w, m).row(2)}),
                   m.mean_latent)));
  const DeIdentTrainResult again = train_deident(w, m, ids, cfg);
  CHECK(params_digest(again.net.params) == params_digest(r.net.params));
}

TEST_CASE("train_deident rejects bad input") {
  const World w = synth_world(tiny_spec(12));
  const PretrainedModels m = random_models(w, 12);
  DeIdentConfig cfg;
  cfg.epochs = 1;
  CHECK_THROWS_AS(train_deident(w, m, std::vector<int>{}, cfg), ConfigError);
  CHECK_THROWS_AS(train_deident(w, m, std::vector<int>{99}, cfg), UnknownIdentityError);
  cfg.lambda_id = -1.0;
  CHECK_THROWS_AS(train_deident(w, m, std::vector<int>{0}, cfg), ConfigError);
}
