#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "idforget/deident.hpp"
#include "idforget/losses.hpp"
#include "idforget/metrics.hpp"
#include "idforget/params.hpp"
#include "idforget/world.hpp"

namespace idf {

// Audit record of one unlearning run. `text()` is byte-stable for identical
// inputs; wall-clock time is kept out of it.
struct RunManifest {
  std::string method;
  std::size_t stage = 0;  // 0 for a standalone run
  std::vector<int> forget_ids;
  std::vector<std::pair<std::string, std::string>> config;
  std::string input_digest;
  std::string output_digest;
  std::string parent_digest;  // digest of the previous stage's manifest, if any
  std::vector<double> loss_trace;
  double wall_seconds = 0.0;

  std::string text() const;
  std::string digest() const;
};

struct UnlearnRun {
  ParamSet generator;
  RunManifest manifest;
};

// Latent-space quantities every run derives from the world and frozen models.
struct LatentFrame {
  Tensor all;      // latent of every identity, one row per id
  Tensor w_bar;    // mean latent
  Tensor forget;   // rows of the forget set
  Tensor retain;   // rows of the retain set
  double radius = 0.0;  // mean ||w_u - w_bar|| over the forget set
};

LatentFrame latent_frame(const World& world, const PretrainedModels& models);

// Unlearns world.forget_ids starting from `start` (the pretrained generator
// when null), which also serves as the frozen reference. `net` is required
// for ours, ours-v1 and ours-v2.
UnlearnRun unlearn(const World& world, const PretrainedModels& models, const DeIdentNet* net, const UnlearnConfig& cfg,
                   const ParamSet* start = nullptr);

// Fixed-target baseline; cfg.method must be guide.
UnlearnRun guide_baseline(const World& world, const PretrainedModels& models, const UnlearnConfig& cfg,
                          const ParamSet* start = nullptr);

struct StagePlan {
  std::vector<std::vector<int>> stages;  // stage k+1 forgets stages[k]

  // Throws ConfigError on repeated ids (within or across stages) or when the
  // ids left for retention are fewer than a stage's forget set.
  void validate(const World& world) const;
  // Ids appearing in no stage.
  std::vector<int> retained(const World& world) const;
};

// Net to use for a stage given its index (1-based) and forget ids.
using NetProvider = std::function<const DeIdentNet*(std::size_t stage, std::span<const int> ids)>;

// Stage k starts from and is regularized toward the output of stage k-1.
std::vector<UnlearnRun> sequential_unlearn(const World& world, const PretrainedModels& models, const NetProvider& nets,
                                           const StagePlan& plan, const UnlearnConfig& cfg);
std::vector<UnlearnRun> sequential_unlearn(const World& world, const PretrainedModels& models, const DeIdentNet* net,
                                           const StagePlan& plan, const UnlearnConfig& cfg);

struct SweepPoint {
  double value = 0.0;
  EvalReport report;
  UnlearnRun run;
};

// One independent unlearning run per d (identity radii unless the config
// says absolute), each from the pretrained generator.
std::vector<SweepPoint> sweep_d(const World& world, const PretrainedModels& models, const DeIdentNet* net,
                                const UnlearnConfig& cfg, std::span<const double> d_values);

// Mean ID similarity between renders under theta_before and theta_after of
// `count` latents on the delta-sphere around w_f, for every delta.
std::vector<std::pair<double, double>> distance_sweep(const World& world, const PretrainedModels& models,
                                                      const ParamSet& theta_after, const ParamSet& theta_before,
                                                      const Tensor& w_f, std::span<const double> deltas,
                                                      std::size_t count = 8, std::uint64_t seed = 0);

}  // namespace idf
