#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "idforget/deident.hpp"
#include "idforget/losses.hpp"
#include "idforget/world.hpp"

namespace idf {

struct EvalConfig {
  // Latents sampled per sphere in the closeness sweep.
  std::size_t sweep_count = 8;
  // Sphere radii of the closeness sweep, in identity radii.
  std::vector<double> sweep_deltas{0.25, 0.6, 1.0, 2.0, 100.0};
};

// Everything a command needs. A single top-level `seed` feeds every section.
struct RunConfig {
  std::uint64_t seed = 0;
  WorldSpec world;
  PretrainConfig pretrain;
  DeIdentConfig deident;
  UnlearnConfig unlearn;
  EvalConfig eval;

  // Canonical `key=value` listing, keys prefixed by section.
  std::vector<std::pair<std::string, std::string>> entries() const;
  // Propagates `seed` into world, deident and unlearn and validates each part.
  void finalize();
};

// Parses `key = value` lines under [world], [pretrain], [deident], [unlearn]
// and [eval] headers; `seed` may only appear before the first header.
// Missing keys keep their defaults. Throws ConfigError naming the offending
// key for unknown keys or malformed values.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Comma-separated lists used by flags and plan files.
std::vector<int> parse_id_list(const std::string& text);
std::vector<double> parse_number_list(const std::string& text);
double parse_number(const std::string& text, const std::string& what);

// One stage per non-blank line, ids comma-separated.
std::vector<std::vector<int>> parse_stage_plan(const std::string& text);

}  // namespace idf
