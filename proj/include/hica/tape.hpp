#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "hica/tensor.hpp"

namespace hica {

// A named trainable array. Models own their Params; the tape references
// them by address for the duration of one forward/backward pass, and the
// optimizer/checkpoint layers key on the name.
struct Param {
  std::string name;
  Tensor2 value;

  Param() = default;
  Param(std::string n, Tensor2 v) : name(std::move(n)), value(std::move(v)) {}
};

// Gradients for the parameters reachable from a backward() root. Parameters
// the loss does not depend on are absent, not zero-filled; adamw_step skips
// them entirely, which is what makes per-level decoder isolation exact.
struct GradSet {
  std::vector<std::pair<const Param*, Tensor2>> entries;

  const Tensor2* find(const Param& p) const {
    for (const auto& [ptr, g] : entries)
      if (ptr == &p) return &g;
    return nullptr;
  }
  Tensor2* find(const Param& p) {
    for (auto& [ptr, g] : entries)
      if (ptr == &p) return &g;
    return nullptr;
  }
  bool contains(const Param& p) const { return find(p) != nullptr; }
  size_t size() const { return entries.size(); }

  // Accumulate another grad set (gradient accumulation across a batch).
  void add(const GradSet& other);
};

using ValueId = int;

// Reverse-mode tape over Tensor2 values. One tape per forward pass; nodes
// are appended in topological order, so backward is a reverse sweep.
class Tape {
 public:
  ValueId input(Tensor2 v);          // constant, no gradient
  ValueId param(Param& p);           // leaf; repeated calls return the same node

  const Tensor2& val(ValueId id) const { return nodes_[check(id)].value; }
  size_t num_nodes() const { return nodes_.size(); }

  // c = a * b
  ValueId matmul(ValueId a, ValueId b);
  // c = a * b^T, with b stored n x k
  ValueId matmul_nt(ValueId a, ValueId b);
  // same-shape elementwise
  ValueId add(ValueId a, ValueId b);
  ValueId hadamard(ValueId a, ValueId b);
  // x (n x c) + row (1 x c) broadcast over rows
  ValueId add_row(ValueId x, ValueId row);
  ValueId scale(ValueId x, double s);
  // row-wise softmax with max subtraction
  ValueId softmax_rows(ValueId x);
  // per-row normalization, then gain/bias (each 1 x cols)
  ValueId layer_norm(ValueId x, ValueId gain, ValueId bias, double eps);
  // exact erf-based GELU
  ValueId gelu(ValueId x);
  ValueId concat_cols(const std::vector<ValueId>& parts);
  ValueId concat_rows(const std::vector<ValueId>& parts);
  // n x c -> 1 x c, mean over rows
  ValueId mean_rows(ValueId x);
  // any -> 1 x 1
  ValueId sum_all(ValueId x);

  // Weighted masked binary cross-entropy with logits over a 1 x V row.
  // loss = sum_i mask_i * raw_i / sum(mask), raw per Algorithm-1 form,
  // computed with the stable log-sigmoid formulation. raw_out/masked_out,
  // when non-null, receive the per-entry pieces.
  ValueId bce_with_logits_masked(ValueId z, const Tensor2& gold, const Tensor2& pos_weight,
                                 const Tensor2& mask, Tensor2* raw_out = nullptr,
                                 Tensor2* masked_out = nullptr);

  // Reverse sweep from a scalar root. Throws if root is not 1x1.
  GradSet backward(ValueId root);

 private:
  enum class Op : unsigned char {
    input, leaf, matmul, matmul_nt, add, hadamard, add_row, scale, softmax_rows,
    layer_norm, gelu, concat_cols, concat_rows, mean_rows, sum_all, bce_masked
  };

  struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    std::vector<int> list;   // concat parents
    Tensor2 value;
    Tensor2 aux;             // op-specific cache
    Tensor2 aux2;
    double scalar = 0.0;
    Param* leaf = nullptr;
    bool needs_grad = false;
  };

  int check(ValueId id) const;
  ValueId push(Node n);
  bool needs(ValueId id) const { return nodes_[id].needs_grad; }

  std::vector<Node> nodes_;
  std::unordered_map<const Param*, ValueId> leaf_ids_;
};

}  // namespace hica
