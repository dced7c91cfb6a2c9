#include <doctest.h>

#include "idforget/errors.hpp"
#include "idforget/losses.hpp"
#include "idforget/metrics.hpp"
#include "support.hpp"

using namespace idf;
using idf::test::check_gradient;
using idf::test::linear_output;
using idf::test::probe_matrix;
using idf::test::random_fisher;
using idf::test::max_abs_diff;
using idf::test::random_models;
using idf::test::random_params;
using idf::test::random_tensor;
using idf::test::tiny_spec;

namespace {

using Setup = idf::test::LossSetup;

double remap_oracle(const Setup& s, const ParamSet& theta, const Tensor& src, const Tensor& tgt, int pose,
                    const RemapWeights& w) {
  const PretrainedModels& m = s.models;
  const Tensor f_s = forward_mlp(theta, src, m.generator_arch);
  const Tensor f_t = forward_mlp(m.generator, tgt, m.generator_arch);
  const Tensor x_s = s.world.renderer.render(f_s, pose);
  const Tensor x_t = s.world.renderer.render(f_t, pose);
  return w.mse * mean_squared_error(f_s, f_t) + w.per * perceptual_distance(x_s, x_t, m) +
         w.id * (1.0 - id_similarity(x_s, x_t, m));
}

double objective_value(const Setup& s, const ParamSet& theta, const TargetRule& rule, const Tensor& src,
                       const ForgetDraws& draws, const FisherDiagonal* fisher, const UnlearnConfig& cfg) {
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, theta, false);
  const LossContext ctx = s.ctx();
  return g.value(unlearn_objective(g, vars, ctx, rule, src, draws, fisher, cfg))[0];
}

}  // namespace

TEST_CASE("method names round trip") {
  for (Method m : {Method::ours, Method::guide, Method::ours_v1, Method::ours_v2, Method::ours_v3}) {
    CHECK(parse_method(method_name(m)) == m);
  }
  CHECK(method_name(Method::ours_v2) == "ours-v2");
  CHECK_THROWS_AS(parse_method("ours-v4"), ConfigError);
  CHECK(uses_deident(Method::ours_v2));
  CHECK_FALSE(uses_deident(Method::ours_v3));
  CHECK_FALSE(uses_ewc(Method::ours_v2));
  CHECK_FALSE(uses_ewc(Method::guide));
}

TEST_CASE("unlearn config validation") {
  UnlearnConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.lambda_nei = -1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = UnlearnConfig{};
  cfg.alpha_max = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = UnlearnConfig{};
  cfg.alpha_r = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = UnlearnConfig{};
  cfg.steps = 0;
  CHECK_NOTHROW(cfg.validate());
}

TEST_CASE("remap loss cases") {
  const Setup s(1);
  const LossContext ctx = s.ctx();
  const Tensor a = s.latents.row(0), b = s.latents.row(3);
  CHECK(std::abs(remap_loss(s.models.generator, ctx, a, a, 1, {0.01, 1.0, 0.1})) < 1e-12);
  CHECK(remap_loss(s.theta, ctx, a, b, 1, {0, 0, 0}) == 0.0);
  for (int pose : {0, 1}) {
    const RemapWeights w{0.3, 1.2, 0.7};
    CHECK(remap_loss(s.theta, ctx, a, b, pose, w) == doctest::Approx(remap_oracle(s, s.theta, a, b, pose, w)).epsilon(1e-12));
  }
  const Tensor two = s.rows({0, 1});
  const std::vector<int> one_pose{0};
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, s.theta, false);
  CHECK_THROWS_AS(remap_loss(g, vars, ctx, two, two, one_pose, {}), ShapeError);
}

TEST_CASE("sample_neighbor geometry") {
  Rng rng = derive_stream(3, "test.neighbor");
  SUBCASE("1-D analytic case") {
    Rng fixed = derive_stream(0, "test.neighbor.1d");
    const NeighborDraw n = sample_neighbor(Tensor::vector({0.0}), Tensor::vector({2.0}), 1.0, fixed);
    // The neighbor sits at alpha along the positive axis, so alpha = 0.5 gives 0.5.
    CHECK(n.latent[0] == doctest::Approx(n.alpha).epsilon(1e-15));
  }
  SUBCASE("alpha_max = 0 returns w_u") {
    const Tensor w_u = random_tensor({5}, rng);
    CHECK(sample_neighbor(w_u, random_tensor({4, 5}, rng), 0.0, rng).latent == w_u);
  }
  SUBCASE("distance equals the drawn alpha and points at the reference") {
    for (int trial = 0; trial < 200; ++trial) {
      const Tensor w_u = random_tensor({6}, rng, 2.0);
      const Tensor retain = random_tensor({5, 6}, rng, 2.0);
      const NeighborDraw n = sample_neighbor(w_u, retain, 0.8, rng);
      CHECK(n.alpha <= 0.8);
      CHECK(n.alpha >= 0.0);
      CHECK(std::abs(norm(n.latent - w_u) - n.alpha) < 1e-9);
      if (n.alpha > 1e-6) {
        const Tensor to_ref = retain.row(n.reference) - w_u;
        const Tensor step = n.latent - w_u;
        CHECK(dot(to_ref, step) / (norm(to_ref) * norm(step)) == doctest::Approx(1.0).epsilon(1e-12));
      }
    }
  }
  SUBCASE("references coinciding with w_u") {
    const Tensor w_u = random_tensor({3}, rng);
    CHECK_THROWS_AS(sample_neighbor(w_u, Tensor::stack(std::vector<Tensor>{w_u, w_u}), 0.5, rng),
                    DegenerateDirectionError);
    // A coinciding row is skipped when another reference exists.
    const Tensor other = random_tensor({3}, rng);
    for (int i = 0; i < 20; ++i) {
      CHECK(sample_neighbor(w_u, Tensor::stack(std::vector<Tensor>{w_u, other}), 0.5, rng).reference == 1);
    }
  }
}

TEST_CASE("guide target geometry") {
  Rng rng = derive_stream(4, "test.guide");
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor w_u = random_tensor({5}, rng), w_bar = random_tensor({5}, rng);
    CHECK(max_abs_diff(guide_target(w_u, w_bar, 0.0), w_bar) < 1e-12);
    const double d = 3.0 * uniform01(rng);
    const Tensor t = guide_target(w_u, w_bar, d);
    CHECK(std::abs(norm(t - w_bar) - d) < 1e-9);
    // Beyond the mean, on the source-to-mean ray.
    CHECK(std::abs(norm(t - w_u) - (norm(w_bar - w_u) + d)) < 1e-9);
  }
  const Tensor v = random_tensor({5}, rng);
  CHECK_THROWS_AS(guide_target(v, v, 1.0), DegenerateDirectionError);
}

TEST_CASE("forget loss composition") {
  const Setup s(5);
  const LossContext ctx = s.ctx();
  const Tensor w_u = s.latents.row(2);
  const Tensor retain = s.rows({4, 5, 6, 7});
  const TargetRule rule = TargetRule::deident(s.net, s.models.mean_latent, 0.9);
  UnlearnConfig cfg;
  const RemapWeights w{cfg.lambda_mse, cfg.lambda_per, cfg.lambda_id};

  Rng replay = derive_stream(5, "test.forget");
  const ForgetDraws draws = draw_forget(w_u, retain, 0.6, s.world.spec.n_poses, replay);
  Rng rng = derive_stream(5, "test.forget");
  const double value = forget_loss(s.theta, ctx, rule, w_u, retain, cfg, 0.6, rng);
  const Tensor& nb = draws.neighbors[0].latent;
  const double oracle = remap_oracle(s, s.theta, w_u, rule(w_u), draws.pose, w) +
                        cfg.lambda_nei * remap_oracle(s, s.theta, nb, rule(nb), draws.pose, w);
  CHECK(value == doctest::Approx(oracle).epsilon(1e-12));

  UnlearnConfig no_nei = cfg;
  no_nei.lambda_nei = 0.0;
  Rng r1 = derive_stream(5, "test.forget");
  const double plain = forget_loss(s.theta, ctx, rule, w_u, retain, no_nei, 0.6, r1);
  CHECK(plain == doctest::Approx(remap_loss(s.theta, ctx, w_u, rule(w_u), draws.pose, w)).epsilon(1e-12));

  UnlearnConfig v1 = cfg;
  v1.method = Method::ours_v1;
  Rng r2 = derive_stream(5, "test.forget");
  CHECK(forget_loss(s.theta, ctx, rule, w_u, retain, v1, 0.6, r2) == plain);
}

TEST_CASE("forget loss ignores the scale of the net output") {
  const Setup s(6);
  const LossContext ctx = s.ctx();
  DeIdentNet big = s.net;
  const std::size_t last = big.arch.layers() - 1;
  big.params.at(layer_weight_name("", last)) = 10.0 * big.params.at(layer_weight_name("", last));
  big.params.at(layer_bias_name("", last)) = 10.0 * big.params.at(layer_bias_name("", last));
  const UnlearnConfig cfg;
  for (std::size_t id = 0; id < 4; ++id) {
    Rng r1 = derive_stream(id, "test.scale"), r2 = derive_stream(id, "test.scale");
    const double a = forget_loss(s.theta, ctx, TargetRule::deident(s.net, s.models.mean_latent, 1.0),
                                 s.latents.row(id), s.rows({5, 6, 7}), cfg, 0.6, r1);
    const double b = forget_loss(s.theta, ctx, TargetRule::deident(big, s.models.mean_latent, 1.0),
                                 s.latents.row(id), s.rows({5, 6, 7}), cfg, 0.6, r2);
    CHECK(a == doctest::Approx(b).epsilon(1e-10));
  }
}

TEST_CASE("vicinity set") {
  Rng rng = derive_stream(7, "test.vicinity");
  const Tensor anchors = random_tensor({5, 6}, rng, 3.0);
  Rng a = derive_stream(7, "v"), b = derive_stream(7, "v");
  const VicinitySet set = vicinity_set(anchors, 1.7, 3, a);
  CHECK(set.probes.size() == 15);
  for (std::size_t i = 0; i < set.probes.size(); ++i) {
    CHECK(std::abs(norm(set.probes[i] - anchors.row(set.anchors[i])) - 1.7) < 1e-9);
  }
  const VicinitySet again = vicinity_set(anchors, 1.7, 3, b);
  CHECK(again.probes == set.probes);
  CHECK(vicinity_set(anchors, 1.7, 0, rng).probes.empty());
  CHECK_THROWS_AS(vicinity_set(anchors, 0.0, 1, rng), ConfigError);
}

TEST_CASE("gauss-newton Fisher on linear models") {
  SUBCASE("scalar model a * theta") {
    ParamSet p;
    p.set("theta", Tensor::vector({0.7}));
    const double a = -2.5;
    const FisherDiagonal f = fisher_gauss_newton(p, {Tensor::vector({a})}, linear_output(1, 1));
    CHECK(f.values.at("theta")[0] == doctest::Approx(a * a).epsilon(1e-15));
  }
  SUBCASE("brute-force oracle and duplicate probes") {
    Rng rng = derive_stream(8, "test.fisher");
    for (std::size_t n = 1; n <= 8; ++n) {
      const std::size_t outputs = 1 + n % 3;
      ParamSet p;
      p.set("theta", random_tensor({n}, rng));
      std::vector<Tensor> probes;
      for (int k = 0; k < 4; ++k) probes.push_back(random_tensor({5}, rng));
      const FisherDiagonal f = fisher_gauss_newton(p, probes, linear_output(outputs, n));
      for (std::size_t i = 0; i < n; ++i) {
        double oracle = 0.0;
        for (const Tensor& probe : probes) {
          const Tensor m = probe_matrix(probe, outputs, n);
          for (std::size_t j = 0; j < outputs; ++j) oracle += m(j, i) * m(j, i);
        }
        oracle /= static_cast<double>(probes.size());
        CHECK(std::abs(f.values.at("theta")[i] - oracle) < 1e-9);
      }
      std::vector<Tensor> doubled = probes;
      doubled.insert(doubled.end(), probes.begin(), probes.end());
      CHECK(max_abs_diff(fisher_gauss_newton(p, doubled, linear_output(outputs, n)).values, f.values) < 1e-12);
    }
  }
  SUBCASE("empty probes give a flagged zero diagonal") {
    ParamSet p;
    p.set("theta", Tensor::vector({1.0, 2.0}));
    const FisherDiagonal f = fisher_gauss_newton(p, {}, linear_output(1, 2));
    CHECK(f.empty_probes);
    CHECK(f.values == p.filled(0.0));
  }
}

TEST_CASE("generator Fisher is nonnegative, finite and layout-aligned") {
  const Setup s(9);
  const LossContext ctx = s.ctx();
  Rng rng = derive_stream(9, "test.fisher.gen");
  const VicinitySet probes = vicinity_set(s.rows({0, 1}), 0.5, 2, rng);
  for (FisherMode mode : {FisherMode::gauss_newton, FisherMode::empirical}) {
    const FisherDiagonal f = fisher_diag(s.models.generator, ctx, probes, mode, {0.01, 1.0, 0.1}, 9);
    CHECK(f.values.same_layout(s.models.generator));
    double total = 0.0;
    for (const auto& [name, t] : f.values) {
      CHECK(t.all_finite());
      for (double x : t.values()) {
        CHECK(x >= 0.0);
        total += x;
      }
    }
    CHECK(total > 0.0);
  }
  // Gauss-Newton Fisher against the oracle of squared pixel Jacobians from
  // finite differences, for one probe.
  const std::vector<Tensor> one{probes.probes[0]};
  const FisherDiagonal f = fisher_gauss_newton(s.models.generator, one, [&](ad::Graph& g, const ad::ParamVars& v,
                                                                            const Tensor& p) {
    const int pose0[1] = {0};
    return s.world.renderer.render(g, forward_mlp(g, v, g.constant(p), s.models.generator_arch), pose0);
  });
  ParamSet probe_params = s.models.generator;
  const auto render = [&](const ParamSet& p) {
    return s.world.renderer.render(forward_mlp(p, one[0], s.models.generator_arch), 0);
  };
  const double h = 1e-6;
  for (const std::string name : {"fc0.bias", "fc1.weight"}) {
    for (std::size_t i = 0; i < 3; ++i) {
      Tensor& slot = probe_params.at(name);
      const double x = slot[i];
      slot[i] = x + h;
      const Tensor up = render(probe_params);
      slot[i] = x - h;
      const Tensor down = render(probe_params);
      slot[i] = x;
      double oracle = 0.0;
      for (std::size_t j = 0; j < up.size(); ++j) oracle += std::pow((up[j] - down[j]) / (2 * h), 2);
      CHECK(f.values.at(name)[i] == doctest::Approx(oracle).epsilon(1e-6));
    }
  }
}

TEST_CASE("EWC penalty") {
  Rng rng = derive_stream(10, "test.ewc");
  ParamSet star;
  star.set("a", random_tensor({3, 2}, rng));
  star.set("b", random_tensor({4}, rng));
  const ParamSet theta = random_params(star, rng);
  const FisherDiagonal f = random_fisher(star, rng);
  CHECK(ewc_penalty(star, star, f) == 0.0);
  FisherDiagonal ones;
  ones.values = star.filled(1.0);
  double sq = 0.0, oracle = 0.0;
  for (const auto& [name, t] : star) {
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double d = theta.at(name)[i] - t[i];
      sq += d * d;
      oracle += 0.5 * f.values.at(name)[i] * d * d;
    }
  }
  CHECK(ewc_penalty(theta, star, ones) == doctest::Approx(0.5 * sq).epsilon(1e-14));
  CHECK(ewc_penalty(theta, star, f) == doctest::Approx(oracle).epsilon(1e-14));
  CHECK(ewc_penalty(theta, star, f) >= 0.0);
  // Scaling the displacement by k scales the penalty by k^2.
  ParamSet scaled = star;
  for (auto& [name, t] : scaled) {
    for (std::size_t i = 0; i < t.size(); ++i) t[i] += 3.0 * (theta.at(name)[i] - t[i]);
  }
  CHECK(ewc_penalty(scaled, star, f) == doctest::Approx(9.0 * oracle).epsilon(1e-12));
  ad::Graph g;
  const ad::ParamVars vars = ad::bind(g, theta, false);
  CHECK(g.value(ewc_penalty(g, vars, star, f))[0] == doctest::Approx(oracle).epsilon(1e-14));
  ParamSet wrong;
  wrong.set("a", Tensor({3, 2}));
  CHECK_THROWS_AS(ewc_penalty(wrong, star, f), ShapeError);
}

TEST_CASE("unlearn objective composition and variant algebra") {
  const Setup s(11);
  Rng rng = derive_stream(11, "test.objective");
  const Tensor src = s.rows({0, 1, 2});
  const Tensor retain = s.rows({4, 5, 6, 7, 8});
  const ForgetDraws draws = draw_forget(src, retain, 0.6, s.world.spec.n_poses, rng);
  const FisherDiagonal fisher = random_fisher(s.theta, rng);
  const TargetRule ours_rule = TargetRule::deident(s.net, s.models.mean_latent, 1.1);
  UnlearnConfig cfg;
  cfg.lambda_ewc = 3.0;

  const LossContext ctx = s.ctx();
  const auto forget_value = [&](const TargetRule& rule, const UnlearnConfig& c) {
    ad::Graph g;
    const ad::ParamVars vars = ad::bind(g, s.theta, false);
    return g.value(forget_loss(g, vars, ctx, rule, src, draws, forget_terms(c)))[0];
  };
  const double full = objective_value(s, s.theta, ours_rule, src, draws, &fisher, cfg);
  CHECK(full == doctest::Approx(forget_value(ours_rule, cfg) +
                                cfg.lambda_ewc * ewc_penalty(s.theta, s.models.generator, fisher))
                    .epsilon(1e-12));
  // Term-by-term oracle for the batch mean.
  double oracle = 0.0;
  const RemapWeights w{cfg.lambda_mse, cfg.lambda_per, cfg.lambda_id};
  for (std::size_t r = 0; r < 3; ++r) {
    const Tensor nb = draws.neighbors[r].latent;
    oracle += (remap_oracle(s, s.theta, src.row(r), ours_rule(src.row(r)), draws.pose, w) +
               cfg.lambda_nei * remap_oracle(s, s.theta, nb, ours_rule(nb), draws.pose, w)) /
              3.0;
  }
  oracle += cfg.lambda_ewc * ewc_penalty(s.theta, s.models.generator, fisher);
  CHECK(full == doctest::Approx(oracle).epsilon(1e-12));

  SUBCASE("theta = theta* leaves no EWC contribution") {
    UnlearnConfig big = cfg;
    big.lambda_ewc = 1e6;
    UnlearnConfig none = cfg;
    none.lambda_ewc = 0.0;
    CHECK(objective_value(s, s.models.generator, ours_rule, src, draws, &fisher, big) ==
          objective_value(s, s.models.generator, ours_rule, src, draws, &fisher, none));
  }
  SUBCASE("single identity without EWC is the forgetting loss") {
    UnlearnConfig none = cfg;
    none.lambda_ewc = 0.0;
    const Tensor one = s.rows({3});
    ForgetDraws d1 = draws;
    d1.neighbors.resize(1);
    ad::Graph g;
    const ad::ParamVars vars = ad::bind(g, s.theta, false);
    const double f1 = g.value(forget_loss(g, vars, ctx, ours_rule, one, d1, forget_terms(none)))[0];
    CHECK(objective_value(s, s.theta, ours_rule, one, d1, &fisher, none) == f1);
  }
  SUBCASE("ours-v1 equals ours with lambda_nei = 0") {
    UnlearnConfig v1 = cfg, ref = cfg;
    v1.method = Method::ours_v1;
    ref.lambda_nei = 0.0;
    CHECK(objective_value(s, s.theta, ours_rule, src, draws, &fisher, v1) ==
          objective_value(s, s.theta, ours_rule, src, draws, &fisher, ref));
  }
  SUBCASE("ours-v2 equals ours with lambda_ewc = 0") {
    UnlearnConfig v2 = cfg, ref = cfg;
    v2.method = Method::ours_v2;
    ref.lambda_ewc = 0.0;
    CHECK(objective_value(s, s.theta, ours_rule, src, draws, nullptr, v2) ==
          objective_value(s, s.theta, ours_rule, src, draws, &fisher, ref));
  }
  SUBCASE("ours-v3 equals ours with the constant mean target") {
    UnlearnConfig v3 = cfg;
    v3.method = Method::ours_v3;
    const TargetRule v3_rule = TargetRule::for_method(Method::ours_v3, nullptr, s.models.mean_latent, 1.1);
    CHECK(v3_rule.kind() == TargetRule::Kind::mean);
    CHECK(objective_value(s, s.theta, v3_rule, src, draws, &fisher, v3) ==
          objective_value(s, s.theta, TargetRule::mean(s.models.mean_latent), src, draws, &fisher, cfg));
  }
  SUBCASE("methods needing a Fisher diagonal reject a missing one") {
    CHECK_THROWS_AS(objective_value(s, s.theta, ours_rule, src, draws, nullptr, cfg), ConfigError);
    CHECK_THROWS_AS(TargetRule::for_method(Method::ours, nullptr, s.models.mean_latent, 1.0), ConfigError);
  }
}

TEST_CASE("loss gradients match finite differences for every variant") {
  for (std::uint64_t seed = 0; seed < 4; ++seed) {
    const Setup s(20 + seed);
    const LossContext ctx = s.ctx();
    Rng rng = derive_stream(seed, "test.loss.grad");
    const Tensor src = s.rows({0, 1});
    const ForgetDraws draws = draw_forget(src, s.rows({3, 4, 5}), 0.6, s.world.spec.n_poses, rng);
    const FisherDiagonal fisher = random_fisher(s.theta, rng);
    for (Method m : {Method::ours, Method::guide, Method::ours_v1, Method::ours_v2, Method::ours_v3}) {
      UnlearnConfig cfg;
      cfg.method = m;
      cfg.lambda_ewc = 2.0;
      const TargetRule rule = TargetRule::for_method(m, &s.net, s.models.mean_latent, 0.7);
      const auto check = check_gradient(s.theta, [&](ad::Graph& g, const ad::ParamVars& v) {
        return unlearn_objective(g, v, ctx, rule, src, draws, &fisher, cfg);
      });
      INFO(method_name(m));
      CHECK(check.rel_error < 1e-4);
    }
  }
}
