#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "hica/tape.hpp"

namespace hica {

struct FdConfig {
  double eps = 1e-6;
  int coords = 200;       // coordinates sampled across all parameters
  uint64_t seed = 0;
};

struct FdReport {
  double max_rel_err = 0.0;
  int coords_checked = 0;
};

// Central-difference check of an analytic gradient. `loss` must recompute
// the scalar loss from the current parameter values (it is called with
// single coordinates perturbed in place, which are restored afterwards).
// Relative error uses denominator max(|analytic|, |numeric|, 1e-8).
// Parameters absent from `analytic` are treated as zero-gradient.
FdReport finite_diff_check(const std::vector<Param*>& params,
                           const std::function<double()>& loss, const GradSet& analytic,
                           const FdConfig& cfg = {});

}  // namespace hica
