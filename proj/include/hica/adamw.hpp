#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hica/tape.hpp"

namespace hica {

struct AdamWConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// Per-parameter moments are keyed by parameter name and created lazily on
// the first gradient. Step counters are per parameter: a parameter absent
// from a GradSet is untouched (no moment update, no decay, no bias-
// correction advance), so isolated submodels stay bitwise frozen.
struct AdamWState {
  struct Moments {
    Tensor2 m, v;
    int64_t t = 0;
  };
  AdamWConfig cfg;
  int64_t global_step = 0;
  std::unordered_map<std::string, Moments> moments;
};

// Decoupled-weight-decay update for exactly the parameters present in
// grads. Throws on a shape mismatch between a parameter and its gradient.
void adamw_step(const std::vector<Param*>& params, const GradSet& grads, AdamWState& state);

}  // namespace hica
