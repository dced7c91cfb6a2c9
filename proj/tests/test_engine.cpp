#include <doctest.h>

#include "idforget/checkpoint.hpp"
#include "idforget/engine.hpp"
#include "idforget/errors.hpp"
#include "idforget/metrics.hpp"
#include "support.hpp"

using namespace idf;
using idf::test::max_abs_diff;
using idf::test::random_models;
using idf::test::tiny_spec;

namespace {

struct Fixture {
  World world;
  PretrainedModels models;
  DeIdentNet net;

  explicit Fixture(std::uint64_t seed, std::size_t identities = 12)
      : world(synth_world(tiny_spec(seed, identities))),
        models(random_models(world, seed)),
        net(make_deident_net(world.spec.latent_dim, seed)) {}
};

UnlearnConfig quick_config(Method m = Method::ours) {
  UnlearnConfig cfg;
  cfg.method = m;
  cfg.steps = 12;
  cfg.lr = 1e-3;
  cfg.lambda_ewc = 1.0;
  return cfg;
}

}  // namespace

TEST_CASE("zero steps returns the start generator unchanged") {
  const Fixture f(1);
  const World w = f.world.with_forget_set(std::vector<int>{0, 1});
  UnlearnConfig cfg = quick_config();
  cfg.steps = 0;
  const UnlearnRun run = unlearn(w, f.models, &f.net, cfg);
  CHECK(run.generator == f.models.generator);
  CHECK(run.manifest.input_digest == run.manifest.output_digest);
  CHECK(run.manifest.loss_trace.empty());
}

TEST_CASE("unlearn is deterministic, changes only the generator, and logs every step") {
  const Fixture f(2);
  const World w = f.world.with_forget_set(std::vector<int>{0, 3});
  const PretrainedModels before = f.models;
  const UnlearnRun a = unlearn(w, f.models, &f.net, quick_config());
  const UnlearnRun b = unlearn(w, f.models, &f.net, quick_config());
  CHECK(a.manifest.text() == b.manifest.text());
  CHECK(a.manifest.digest() == b.manifest.digest());
  CHECK(params_digest(a.generator) == params_digest(b.generator));
  CHECK(a.manifest.loss_trace.size() == 12);
  CHECK(a.manifest.output_digest == params_digest(a.generator));
  CHECK(a.manifest.input_digest == params_digest(f.models.generator));
  CHECK(a.generator != f.models.generator);
  for (const auto& [p, q] : {std::pair{&before.encoder, &f.models.encoder}, std::pair{&before.embedder, &f.models.embedder},
                             std::pair{&before.perceptual, &f.models.perceptual}}) {
    CHECK(params_digest(*p) == params_digest(*q));
  }
  // Wall-clock time stays out of the manifest text.
  UnlearnRun c = a;
  c.manifest.wall_seconds += 100.0;
  CHECK(c.manifest.text() == a.manifest.text());
  UnlearnConfig other = quick_config();
  other.seed = 1;
  CHECK(params_digest(unlearn(w, f.models, &f.net, other).generator) != params_digest(a.generator));
}

TEST_CASE("manifest text layout") {
  RunManifest m;
  m.method = "ours";
  m.stage = 2;
  m.forget_ids = {3, 5};
  m.config = {{"lr", "0.0001"}};
  m.input_digest = "in";
  m.output_digest = "out";
  m.parent_digest = "p";
  m.loss_trace = {0.5, 0.25};
  CHECK(m.text() ==
        "method=ours\nstage=2\nforget_ids=3,5\ninput_digest=in\noutput_digest=out\nparent_manifest=p\n"
        "config.lr=0.0001\nsteps_run=2\n---\nstep,loss\n0,0.5\n1,0.25\n");
  CHECK(m.digest() == sha256_hex(m.text()));
}

TEST_CASE("unlearning descends its objective on a small world") {
  const Fixture f(3);
  const World w = f.world.with_forget_set(std::vector<int>{1, 2});
  UnlearnConfig cfg = quick_config();
  cfg.steps = 60;
  const UnlearnRun run = unlearn(w, f.models, &f.net, cfg);
  const auto& trace = run.manifest.loss_trace;
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 10; ++i) {
    head += trace[i];
    tail += trace[trace.size() - 1 - i];
  }
  CHECK(tail < head);
}

TEST_CASE("method requirements") {
  const Fixture f(4);
  const World w = f.world.with_forget_set(std::vector<int>{0});
  CHECK_THROWS_AS(unlearn(w, f.models, nullptr, quick_config(Method::ours)), ConfigError);
  CHECK_NOTHROW(unlearn(w, f.models, nullptr, quick_config(Method::ours_v3)));
  CHECK_THROWS_AS(guide_baseline(w, f.models, quick_config(Method::ours)), ConfigError);
  const UnlearnRun g1 = guide_baseline(w, f.models, quick_config(Method::guide));
  const UnlearnRun g2 = unlearn(w, f.models, nullptr, quick_config(Method::guide));
  CHECK(g1.manifest.text() == g2.manifest.text());
  CHECK(g1.manifest.method == "guide");
}

TEST_CASE("guide targets sit d beyond the mean latent") {
  const Fixture f(5);
  const LatentFrame frame = latent_frame(f.world.with_forget_set(std::vector<int>{0, 1, 2}), f.models);
  for (double d : {0.0, 0.5, 2.0}) {
    const TargetRule rule = TargetRule::guide(frame.w_bar, d);
    for (std::size_t r = 0; r < 3; ++r) {
      const Tensor t = rule(frame.forget.row(r));
      CHECK(std::abs(norm(t - frame.w_bar) - d) < 1e-9);
      if (d == 0.0) CHECK(max_abs_diff(t, frame.w_bar) < 1e-12);
    }
  }
}

TEST_CASE("latent frame") {
  const Fixture f(6);
  const World w = f.world.with_forget_set(std::vector<int>{4, 2});
  const LatentFrame frame = latent_frame(w, f.models);
  CHECK(frame.all.rows() == 12);
  CHECK(frame.forget.row(0) == frame.all.row(4));
  CHECK(frame.retain.rows() == 10);
  CHECK(frame.w_bar == mean_latent_rows(frame.all));
  CHECK(frame.radius == doctest::Approx(0.5 * (norm(frame.all.row(4) - frame.w_bar) + norm(frame.all.row(2) - frame.w_bar))));
}

TEST_CASE("sequential unlearning") {
  const Fixture f(7);
  const UnlearnConfig cfg = quick_config();
  SUBCASE("single stage equals plain unlearning") {
    const StagePlan plan{{{0, 1}}};
    const auto runs = sequential_unlearn(f.world, f.models, &f.net, plan, cfg);
    REQUIRE(runs.size() == 1);
    const UnlearnRun single = unlearn(f.world.with_forget_set(std::vector<int>{0, 1}), f.models, &f.net, cfg);
    CHECK(runs[0].manifest.output_digest == single.manifest.output_digest);
    CHECK(runs[0].manifest.stage == 1);
    CHECK(runs[0].manifest.parent_digest.empty());
  }
  SUBCASE("stages chain by digest and start from the previous output") {
    const StagePlan plan{{{0, 1}, {}, {2, 3}, {4, 5}}};
    const auto runs = sequential_unlearn(f.world, f.models, &f.net, plan, cfg);
    REQUIRE(runs.size() == 4);
    CHECK(runs[0].manifest.input_digest == params_digest(f.models.generator));
    for (std::size_t k = 1; k < 4; ++k) {
      CHECK(runs[k].manifest.input_digest == runs[k - 1].manifest.output_digest);
      CHECK(runs[k].manifest.parent_digest == runs[k - 1].manifest.digest());
      CHECK(runs[k].manifest.stage == k + 1);
    }
    // The empty stage is a no-op.
    CHECK(runs[1].generator == runs[0].generator);
    CHECK(runs[1].manifest.loss_trace.empty());
    const auto again = sequential_unlearn(f.world, f.models, &f.net, plan, cfg);
    CHECK(again[3].manifest.text() == runs[3].manifest.text());
  }
  SUBCASE("each stage asks for its own net") {
    std::vector<std::size_t> asked;
    const StagePlan plan{{{0}, {1}}};
    sequential_unlearn(
        f.world, f.models,
        [&](std::size_t stage, std::span<const int>) {
          asked.push_back(stage);
          return &f.net;
        },
        plan, cfg);
    CHECK(asked == std::vector<std::size_t>{1, 2});
  }
  SUBCASE("invalid plans") {
    CHECK_THROWS_AS(sequential_unlearn(f.world, f.models, &f.net, StagePlan{{{0, 1}, {1, 2}}}, cfg), ConfigError);
    CHECK_THROWS_AS(sequential_unlearn(f.world, f.models, &f.net, StagePlan{{{0, 0}}}, cfg), ConfigError);
    CHECK_THROWS_AS(sequential_unlearn(f.world, f.models, &f.net, StagePlan{{{77}}}, cfg), UnknownIdentityError);
    CHECK_THROWS_AS(sequential_unlearn(f.world, f.models, &f.net, StagePlan{{{0, 1, 2, 3, 4, 5, 6}}}, cfg),
                    ConfigError);
  }
  SUBCASE("retained ids") {
    const StagePlan plan{{{0, 1}, {5}}};
    const std::vector<int> r = plan.retained(f.world);
    CHECK(r.size() == 9);
    CHECK(r.front() == 2);
  }
}

TEST_CASE("d sweep") {
  const Fixture f(8);
  const World w = f.world.with_forget_set(std::vector<int>{0, 1});
  const UnlearnConfig cfg = quick_config();
  const std::vector<double> values{0.5, 0.5};
  const auto points = sweep_d(w, f.models, &f.net, cfg, values);
  REQUIRE(points.size() == 2);
  CHECK(report_csv_row("ours", 2, 0.5, 0, points[0].report) == report_csv_row("ours", 2, 0.5, 0, points[1].report));
  UnlearnConfig single = cfg;
  single.d = 0.5;
  const UnlearnRun run = unlearn(w, f.models, &f.net, single);
  const EvalReport rep = evaluate(w, f.models.generator, run.generator, f.models, w.forget_ids, w.retain_ids);
  CHECK(run.manifest.output_digest == points[0].run.manifest.output_digest);
  CHECK(report_csv_row("ours", 2, 0.5, 0, rep) == report_csv_row("ours", 2, 0.5, 0, points[0].report));
  CHECK_THROWS_AS(sweep_d(w, f.models, &f.net, cfg, std::vector<double>{}), ConfigError);
}

TEST_CASE("distance sweep") {
  const Fixture f(9);
  const World w = f.world.with_forget_set(std::vector<int>{0, 1});
  const UnlearnRun run = unlearn(w, f.models, &f.net, quick_config());
  const Tensor w_f = identity_latents(w, f.models).row(0);
  const std::vector<double> deltas{0.0, 0.5, 3.0};
  const auto same = distance_sweep(w, f.models, f.models.generator, f.models.generator, w_f, deltas);
  for (const auto& [delta, sim] : same) CHECK(sim == doctest::Approx(1.0).epsilon(1e-12));
  const auto sweep = distance_sweep(w, f.models, run.generator, f.models.generator, w_f, deltas, 5, 3);
  REQUIRE(sweep.size() == 3);
  CHECK(sweep[1].first == 0.5);
  // At delta 0 every sample is w_f itself.
  const Tensor xb = w.renderer.render(forward_mlp(f.models.generator, w_f, f.models.generator_arch), 0);
  const Tensor xa = w.renderer.render(forward_mlp(run.generator, w_f, f.models.generator_arch), 0);
  CHECK(sweep[0].second == doctest::Approx(id_similarity(xb, xa, f.models)).epsilon(1e-12));
  CHECK(distance_sweep(w, f.models, run.generator, f.models.generator, w_f, deltas, 5, 3) == sweep);
  CHECK_THROWS_AS(distance_sweep(w, f.models, run.generator, f.models.generator, w_f, std::vector<double>{-1.0}),
                  ConfigError);
}

TEST_CASE("batches of eight when the forget set is larger") {
  const Fixture f(10, 24);
  const World w = f.world.with_forget_set(std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7, 8, 9});
  UnlearnConfig cfg = quick_config(Method::ours_v3);
  cfg.steps = 3;
  const UnlearnRun a = unlearn(w, f.models, nullptr, cfg);
  const UnlearnRun b = unlearn(w, f.models, nullptr, cfg);
  CHECK(a.manifest.loss_trace.size() == 3);
  CHECK(a.manifest.text() == b.manifest.text());
}
