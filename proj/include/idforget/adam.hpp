#pragma once

#include <cstdint>

#include "idforget/params.hpp"

namespace idf {

struct AdamState {
  ParamSet m;  // first-moment estimate
  ParamSet v;  // second-moment estimate
  std::int64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Zero moments laid out like `params`.
AdamState make_adam_state(const ParamSet& params);

// One bias-corrected Adam update of `params` in place. Throws NumericalError
// if `grads` holds NaN/Inf (the loss diverged) and ShapeError on layout
// mismatch; on error neither params nor state are modified.
void adam_step(ParamSet& params, const ParamSet& grads, AdamState& state, double lr);

}  // namespace idf
