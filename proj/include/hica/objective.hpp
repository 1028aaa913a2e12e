#pragma once

#include <vector>

#include "hica/tape.hpp"

namespace hica {

enum class ChoiceKind { single, multi };

// 0/1 validity vector over the global answer vocabulary. Levels 1-2 select
// exactly {yes,no}; level 3 masks {yes,no} out and selects the question's
// own candidates.
struct AnswerMask {
  std::vector<unsigned char> valid;

  int count() const {
    int c = 0;
    for (unsigned char v : valid) c += v;
    return c;
  }
  Tensor2 as_row() const {
    Tensor2 t(1, static_cast<int>(valid.size()));
    for (size_t i = 0; i < valid.size(); ++i) t.data[i] = valid[i] ? 1.0 : 0.0;
    return t;
  }
};

// Positive-class weights, one per vocabulary entry, all > 0.
struct ClassWeights {
  std::vector<double> w;
  Tensor2 as_row() const {
    Tensor2 t(1, static_cast<int>(w.size()));
    for (size_t i = 0; i < w.size(); ++i) t.data[i] = w[i];
    return t;
  }
};

struct LossBreakdown {
  Tensor2 raw;        // per-entry losses before masking
  Tensor2 masked;     // raw * mask
  double valid_count = 0.0;
  double loss = 0.0;
  Tensor2 gold;
};

// Algorithm-1 weighted masked BCE-with-logits: raw_i = -(gt_i log(sig z_i) w_i
// + (1-gt_i) log(1-sig z_i)), L = sum(raw * mask) / count(mask). Gradient
// flows only through unmasked entries. Returns the scalar loss node.
ValueId weighted_masked_bce(Tape& tape, ValueId z, const Tensor2& gold, const ClassWeights& w,
                            const AnswerMask& mask, LossBreakdown* breakdown = nullptr);

// Inverse-odds weights from training gold labels, counted only where the
// class was a valid candidate: w[c] = clamp(neg(c)/max(pos(c),1), 1, w_max).
ClassWeights class_weights(const std::vector<Tensor2>& golds, const std::vector<AnswerMask>& masks,
                           int vocab_size, double w_max = 100.0);

}  // namespace hica
