#include "hica/objective.hpp"

#include <algorithm>
#include <stdexcept>

namespace hica {

ValueId weighted_masked_bce(Tape& tape, ValueId z, const Tensor2& gold, const ClassWeights& w,
                            const AnswerMask& mask, LossBreakdown* breakdown) {
  const Tensor2& zv = tape.val(z);
  if (static_cast<int>(w.w.size()) != zv.size() ||
      static_cast<int>(mask.valid.size()) != zv.size())
    throw std::invalid_argument("weighted_masked_bce: logits " + zv.shape_str() + " vs " +
                                std::to_string(w.w.size()) + " weights, " +
                                std::to_string(mask.valid.size()) + " mask entries");
  const Tensor2 wrow = w.as_row();
  const Tensor2 mrow = mask.as_row();
  Tensor2 raw, masked;
  const ValueId loss =
      tape.bce_with_logits_masked(z, gold, wrow, mrow, breakdown ? &raw : nullptr,
                                  breakdown ? &masked : nullptr);
  if (breakdown != nullptr) {
    breakdown->raw = std::move(raw);
    breakdown->masked = std::move(masked);
    breakdown->valid_count = static_cast<double>(mask.count());
    breakdown->loss = tape.val(loss).at(0, 0);
    breakdown->gold = gold;
  }
  return loss;
}

ClassWeights class_weights(const std::vector<Tensor2>& golds, const std::vector<AnswerMask>& masks,
                           int vocab_size, double w_max) {
  if (golds.empty()) throw std::invalid_argument("class_weights: empty dataset");
  if (golds.size() != masks.size())
    throw std::invalid_argument("class_weights: gold/mask count mismatch");
  std::vector<double> pos(vocab_size, 0.0), neg(vocab_size, 0.0);
  for (size_t s = 0; s < golds.size(); ++s) {
    const Tensor2& g = golds[s];
    if (g.size() != vocab_size)
      throw std::invalid_argument("class_weights: gold vector " + g.shape_str() +
                                  " vs vocab size " + std::to_string(vocab_size));
    for (int c = 0; c < vocab_size; ++c) {
      if (!masks[s].valid[static_cast<size_t>(c)]) continue;
      (g.data[c] > 0.5 ? pos : neg)[static_cast<size_t>(c)] += 1.0;
    }
  }
  ClassWeights out;
  out.w.resize(static_cast<size_t>(vocab_size));
  for (int c = 0; c < vocab_size; ++c) {
    const double ratio = neg[c] / std::max(pos[c], 1.0);
    out.w[static_cast<size_t>(c)] = std::clamp(ratio, 1.0, w_max);
  }
  return out;
}

}  // namespace hica
