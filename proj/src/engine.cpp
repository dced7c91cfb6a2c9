#include "idforget/engine.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <set>
#include <sstream>

#include "idforget/adam.hpp"
#include "idforget/checkpoint.hpp"
#include "idforget/errors.hpp"
#include "idforget/rng.hpp"

namespace idf {

namespace {

std::string join_ids(std::span<const int> ids) {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) out += (i ? "," : "") + std::to_string(ids[i]);
  return out;
}

Tensor rows_of(const Tensor& all, std::span<const int> ids) {
  std::vector<Tensor> rows;
  for (int id : ids) rows.push_back(all.row(static_cast<std::size_t>(id)));
  return rows.empty() ? Tensor() : Tensor::stack(rows);
}

}  // namespace

std::string RunManifest::text() const {
  std::ostringstream out;
  out << "method=" << method << '\n'
      << "stage=" << stage << '\n'
      << "forget_ids=" << join_ids(forget_ids) << '\n'
      << "input_digest=" << input_digest << '\n'
      << "output_digest=" << output_digest << '\n'
      << "parent_manifest=" << parent_digest << '\n';
  for (const auto& [k, v] : config) out << "config." << k << '=' << v << '\n';
  out << "steps_run=" << loss_trace.size() << '\n' << "---\n" << "step,loss\n";
  for (std::size_t i = 0; i < loss_trace.size(); ++i) out << i << ',' << format_double(loss_trace[i]) << '\n';
  return out.str();
}

std::string RunManifest::digest() const { return sha256_hex(text()); }

LatentFrame latent_frame(const World& world, const PretrainedModels& models) {
  LatentFrame f;
  f.all = identity_latents(world, models);
  f.w_bar = mean_latent_rows(f.all);
  f.forget = rows_of(f.all, world.forget_ids);
  f.retain = rows_of(f.all, world.retain_ids);
  if (!world.forget_ids.empty()) f.radius = identity_radius(f.forget, f.w_bar);
  return f;
}

UnlearnRun unlearn(const World& world, const PretrainedModels& models, const DeIdentNet* net, const UnlearnConfig& cfg,
                   const ParamSet* start) {
  cfg.validate();
  const auto clock_start = std::chrono::steady_clock::now();
  const ParamSet& reference = start ? *start : models.generator;

  UnlearnRun run;
  run.generator = reference;
  RunManifest& man = run.manifest;
  man.method = method_name(cfg.method);
  man.forget_ids = world.forget_ids;
  man.config = cfg.entries();
  man.input_digest = params_digest(reference);

  if (!world.forget_ids.empty() && cfg.steps > 0) {
    if (uses_deident(cfg.method) && net == nullptr) {
      throw ConfigError("method " + man.method + " needs a trained de-identification net");
    }
    if (world.retain_ids.empty()) throw ConfigError("unlearn: retain set is empty");
    const LatentFrame frame = latent_frame(world, models);
    const double d = resolve_distance(cfg.d, cfg.distances_absolute, frame.radius);
    const double alpha_max = resolve_distance(cfg.alpha_max, cfg.distances_absolute, frame.radius);
    const double alpha_r = resolve_distance(cfg.alpha_r, cfg.distances_absolute, frame.radius);
    const TargetRule rule = TargetRule::for_method(cfg.method, net, frame.w_bar, d);
    const LossContext ctx{&world.renderer, &models, &reference};

    FisherDiagonal fisher;
    if (uses_ewc(cfg.method)) {
      Rng probe_rng = derive_stream(cfg.seed, "unlearn.probes");
      const VicinitySet probes = vicinity_set(frame.forget, alpha_r, cfg.probes_per_id, probe_rng);
      fisher = fisher_diag(reference, ctx, probes, cfg.empirical_fisher ? FisherMode::empirical : FisherMode::gauss_newton,
                           RemapWeights{cfg.lambda_mse, cfg.lambda_per, cfg.lambda_id}, cfg.seed);
    }

    Rng draw_rng = derive_stream(cfg.seed, "unlearn.draws");
    Rng batch_rng = derive_stream(cfg.seed, "unlearn.batches");
    constexpr std::size_t kBatch = 8;
    const std::size_t k = frame.forget.rows();
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = k;  // forces a shuffle on the first batched step

    AdamState adam = make_adam_state(run.generator);
    man.loss_trace.reserve(cfg.steps);
    for (std::size_t step = 0; step < cfg.steps; ++step) {
      Tensor batch;
      if (k <= kBatch) {
        batch = frame.forget;
      } else {
        std::vector<Tensor> rows;
        while (rows.size() < kBatch) {
          if (cursor == k) {
            std::shuffle(order.begin(), order.end(), batch_rng);
            cursor = 0;
          }
          rows.push_back(frame.forget.row(order[cursor++]));
        }
        batch = Tensor::stack(rows);
      }
      try {
        const ForgetDraws draws = draw_forget(batch, frame.retain, alpha_max, world.spec.n_poses, draw_rng);
        ad::Graph g;
        const ad::ParamVars vars = ad::bind(g, run.generator, true);
        const ad::Var loss =
            unlearn_objective(g, vars, ctx, rule, batch, draws, uses_ewc(cfg.method) ? &fisher : nullptr, cfg);
        g.backward(loss);
        man.loss_trace.push_back(g.value(loss)[0]);
        adam_step(run.generator, ad::gradients(g, vars), adam, cfg.lr);
      } catch (const NumericalError& e) {
        throw NumericalError("unlearning aborted at step " + std::to_string(step) + ": " + e.what());
      } catch (const DegenerateDirectionError& e) {
        throw DegenerateDirectionError("unlearning aborted at step " + std::to_string(step) + ": " + e.what());
      }
    }
  }
  man.output_digest = params_digest(run.generator);
  man.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count();
  return run;
}

UnlearnRun guide_baseline(const World& world, const PretrainedModels& models, const UnlearnConfig& cfg,
                          const ParamSet* start) {
  if (cfg.method != Method::guide) throw ConfigError("guide_baseline: config method must be guide");
  return unlearn(world, models, nullptr, cfg, start);
}

void StagePlan::validate(const World& world) const {
  std::set<int> seen;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (int id : stages[s]) {
      world.record(id);
      if (!seen.insert(id).second) {
        throw ConfigError("stage plan: identity " + std::to_string(id) + " repeated (stage " + std::to_string(s + 1) + ")");
      }
    }
  }
  const std::size_t left = world.size() - seen.size();
  for (const auto& stage : stages) {
    if (stage.size() > left) throw ConfigError("stage plan: too few identities left to retain");
  }
}

std::vector<int> StagePlan::retained(const World& world) const {
  std::set<int> used;
  for (const auto& s : stages) used.insert(s.begin(), s.end());
  std::vector<int> out;
  for (std::size_t i = 0; i < world.size(); ++i) {
    if (!used.contains(static_cast<int>(i))) out.push_back(static_cast<int>(i));
  }
  return out;
}

std::vector<UnlearnRun> sequential_unlearn(const World& world, const PretrainedModels& models, const NetProvider& nets,
                                           const StagePlan& plan, const UnlearnConfig& cfg) {
  plan.validate(world);
  const std::vector<int> retain = plan.retained(world);
  std::vector<UnlearnRun> runs;
  runs.reserve(plan.stages.size());  // `current` points into `runs`
  const ParamSet* current = &models.generator;
  std::string parent;
  for (std::size_t s = 0; s < plan.stages.size(); ++s) {
    const std::vector<int>& ids = plan.stages[s];
    const World stage_world = world.with_partition(ids, retain);
    try {
      const DeIdentNet* net = ids.empty() || !uses_deident(cfg.method) ? nullptr : nets(s + 1, ids);
      runs.push_back(unlearn(stage_world, models, net, cfg, current));
    } catch (const NumericalError& e) {
      throw NumericalError("stage " + std::to_string(s + 1) + ": " + e.what());
    } catch (const DegenerateDirectionError& e) {
      throw DegenerateDirectionError("stage " + std::to_string(s + 1) + ": " + e.what());
    } catch (const ConfigError& e) {
      throw ConfigError("stage " + std::to_string(s + 1) + ": " + e.what());
    }
    RunManifest& man = runs.back().manifest;
    man.stage = s + 1;
    man.parent_digest = parent;
    parent = man.digest();
    current = &runs.back().generator;
  }
  return runs;
}

std::vector<UnlearnRun> sequential_unlearn(const World& world, const PretrainedModels& models, const DeIdentNet* net,
                                           const StagePlan& plan, const UnlearnConfig& cfg) {
  return sequential_unlearn(world, models, [net](std::size_t, std::span<const int>) { return net; }, plan, cfg);
}

std::vector<SweepPoint> sweep_d(const World& world, const PretrainedModels& models, const DeIdentNet* net,
                                const UnlearnConfig& cfg, std::span<const double> d_values) {
  if (d_values.empty()) throw ConfigError("sweep_d: empty value list");
  std::vector<SweepPoint> out;
  for (double d : d_values) {
    UnlearnConfig c = cfg;
    c.d = d;
    SweepPoint p;
    p.value = d;
    p.run = unlearn(world, models, net, c);
    p.report = evaluate(world, models.generator, p.run.generator, models, world.forget_ids, world.retain_ids);
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::pair<double, double>> distance_sweep(const World& world, const PretrainedModels& models,
                                                      const ParamSet& theta_after, const ParamSet& theta_before,
                                                      const Tensor& w_f, std::span<const double> deltas,
                                                      std::size_t count, std::uint64_t seed) {
  if (count == 0) throw ConfigError("distance_sweep: count must be >= 1");
  const Tensor center = w_f.reshaped({w_f.size()});
  Rng rng = derive_stream(seed, "distance_sweep");
  std::vector<Tensor> dirs;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor dir({center.size()});
    double n = 0.0;
    while (!(n > 0.0)) {
      for (double& x : dir.values()) x = standard_normal(rng);
      n = norm(dir);
    }
    dirs.push_back((1.0 / n) * dir);
  }
  std::vector<std::pair<double, double>> out;
  const std::vector<int> pose0(count, 0);
  for (double delta : deltas) {
    if (!(delta >= 0.0)) throw ConfigError("distance_sweep: deltas must be >= 0");
    std::vector<Tensor> rows;
    for (const Tensor& dir : dirs) rows.push_back(center + delta * dir);
    const Tensor latents = Tensor::stack(rows);
    const Tensor before = models.embed(world.renderer.render_rows(models.features(theta_before, latents), pose0));
    const Tensor after = models.embed(world.renderer.render_rows(models.features(theta_after, latents), pose0));
    double sim = 0.0;
    for (std::size_t i = 0; i < count; ++i) sim += dot(before.row(i), after.row(i));
    out.emplace_back(delta, sim / static_cast<double>(count));
  }
  return out;
}

}  // namespace idf
