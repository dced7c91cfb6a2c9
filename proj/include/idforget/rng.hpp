#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace idf {

using Rng = std::mt19937_64;

// Independent generator for one subsystem: the master seed is combined with a
// fixed label ("world.noise", "unlearn.steps", ...) so every stream can be
// reproduced without replaying the others.
Rng derive_stream(std::uint64_t seed, std::string_view label);

// U[0, 1) and N(0, 1) draws shared by all modules.
double uniform01(Rng& rng);
double standard_normal(Rng& rng);

}  // namespace idf
