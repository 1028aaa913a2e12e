#pragma once

// Brute-force evaluation oracles, independent of src/metrics.cpp: a
// permutation matcher and a per-path recursive report scorer. Kept naive on
// purpose; agreement with the production walker is the test.

#include <algorithm>
#include <map>
#include <string>
#include <vector>

#include "hica/hierarchy.hpp"
#include "hica/inference.hpp"

namespace oracle_eval {

using hica::AnswerRecord;
using hica::GoldReport;
using hica::PredictedReport;
using hica::QuestionNode;
using hica::QuestionTree;

inline double dice(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::map<std::string, int> counts;
  for (const std::string& s : a) counts[s] += 1;
  int common = 0;
  for (const std::string& s : b) {
    auto it = counts.find(s);
    if (it != counts.end() && it->second > 0) {
      ++common;
      it->second -= 1;
    }
  }
  return 2.0 * common / static_cast<double>(a.size() + b.size());
}

struct Match {
  std::vector<std::pair<int, int>> pairs;  // (pred, gold)
  double total = -1.0;
};

// All injective maps of the smaller side, max total, lexicographically
// smallest sorted pair list on ties.
inline Match exhaustive_match(const std::vector<std::vector<std::string>>& pred,
                              const std::vector<std::vector<std::string>>& gold) {
  Match best;
  if (pred.empty() || gold.empty()) {
    best.total = 0.0;
    best.pairs.clear();
    return best;
  }
  const bool pred_small = pred.size() <= gold.size();
  const auto& small = pred_small ? pred : gold;
  const auto& large = pred_small ? gold : pred;
  std::vector<int> assign(small.size(), -1);
  std::vector<char> used(large.size(), 0);
  auto rec = [&](size_t i, double total, auto&& self) -> void {
    if (i == small.size()) {
      std::vector<std::pair<int, int>> pairs;
      for (size_t k = 0; k < small.size(); ++k) {
        const int j = assign[k];
        pairs.emplace_back(pred_small ? static_cast<int>(k) : j,
                           pred_small ? j : static_cast<int>(k));
      }
      std::sort(pairs.begin(), pairs.end());
      if (total > best.total || (total == best.total && pairs < best.pairs)) {
        best.total = total;
        best.pairs = std::move(pairs);
      }
      return;
    }
    for (size_t j = 0; j < large.size(); ++j) {
      if (used[j]) continue;
      used[j] = 1;
      assign[i] = static_cast<int>(j);
      self(i + 1, total + dice(small[i], large[j]), self);
      used[j] = 0;
    }
  };
  rec(0, 0.0, rec);
  return best;
}

// ---- record helpers over raw answer vectors ----

inline const AnswerRecord* find_rec(const std::vector<AnswerRecord>& rs, const std::string& id,
                                    const std::vector<int>& inst) {
  for (const AnswerRecord& r : rs)
    if (r.key.node_id == id && r.key.instance == inst) return &r;
  return nullptr;
}

inline int yes_count(const std::vector<AnswerRecord>& rs, const QuestionNode& n,
                     const std::vector<int>& prefix) {
  int c = 0;
  for (int o = 1; o <= n.max_occurrences; ++o) {
    std::vector<int> inst = prefix;
    inst.push_back(o);
    const AnswerRecord* r = find_rec(rs, n.id, inst);
    if (r == nullptr || !(r->selected.size() == 1 && r->selected[0] == "yes")) break;
    ++c;
  }
  return c;
}

inline std::vector<std::string> l3_answer(const std::vector<AnswerRecord>& rs,
                                          const QuestionNode& n,
                                          const std::vector<int>& prefix, bool present) {
  std::vector<std::string> sel{"no selection"};
  if (present) {
    std::vector<int> inst = prefix;
    inst.push_back(1);
    if (const AnswerRecord* r = find_rec(rs, n.id, inst)) sel = r->selected;
  }
  std::sort(sel.begin(), sel.end());
  return sel;
}

inline void positives(const std::vector<AnswerRecord>& rs, const QuestionNode& n,
                      const std::vector<int>& inst, std::vector<std::string>& acc) {
  for (const QuestionNode& c : n.children) {
    for (int o = 1; o <= c.max_occurrences; ++o) {
      std::vector<int> child = inst;
      child.push_back(o);
      const AnswerRecord* r = find_rec(rs, c.id, child);
      if (r == nullptr) break;
      if (c.level <= 2) {
        if (!(r->selected.size() == 1 && r->selected[0] == "yes")) break;
        acc.push_back(c.id + "|yes");
        positives(rs, c, child, acc);
      } else {
        for (const std::string& s : r->selected) acc.push_back(c.id + "|" + s);
        break;
      }
    }
  }
}

// Recursive per-path check: every instance chain along the path must agree
// after occurrence alignment.
inline bool path_correct(const std::vector<const QuestionNode*>& path, size_t k,
                         const std::vector<AnswerRecord>& gold,
                         const std::vector<AnswerRecord>& pred, const std::vector<int>& g_prefix,
                         bool g_present, const std::vector<int>& p_prefix, bool p_present) {
  const QuestionNode& n = *path[k];
  if (n.level >= 3)
    return l3_answer(gold, n, g_prefix, g_present) == l3_answer(pred, n, p_prefix, p_present);

  const int G = g_present ? yes_count(gold, n, g_prefix) : 0;
  const int P = p_present ? yes_count(pred, n, p_prefix) : 0;
  if (G != P) return false;  // some existence slot disagrees
  if (k + 1 == path.size()) return true;

  std::vector<std::vector<std::string>> g_sum, p_sum;
  for (int o = 1; o <= G; ++o) {
    std::vector<int> inst = g_prefix;
    inst.push_back(o);
    std::vector<std::string> acc;
    positives(gold, n, inst, acc);
    std::sort(acc.begin(), acc.end());
    g_sum.push_back(std::move(acc));
  }
  for (int o = 1; o <= P; ++o) {
    std::vector<int> inst = p_prefix;
    inst.push_back(o);
    std::vector<std::string> acc;
    positives(pred, n, inst, acc);
    std::sort(acc.begin(), acc.end());
    p_sum.push_back(std::move(acc));
  }
  const Match match = exhaustive_match(p_sum, g_sum);

  std::vector<char> g_used(static_cast<size_t>(G), 0), p_used(static_cast<size_t>(P), 0);
  for (const auto& [pi, gi] : match.pairs) {
    p_used[static_cast<size_t>(pi)] = 1;
    g_used[static_cast<size_t>(gi)] = 1;
    std::vector<int> gp = g_prefix, pp = p_prefix;
    gp.push_back(gi + 1);
    pp.push_back(pi + 1);
    if (!path_correct(path, k + 1, gold, pred, gp, g_present, pp, p_present)) return false;
  }
  for (int gi = 0; gi < G; ++gi) {
    if (g_used[static_cast<size_t>(gi)]) continue;
    std::vector<int> gp = g_prefix;
    gp.push_back(gi + 1);
    if (!path_correct(path, k + 1, gold, pred, gp, true, {}, false)) return false;
  }
  for (int pi = 0; pi < P; ++pi) {
    if (p_used[static_cast<size_t>(pi)]) continue;
    std::vector<int> pp = p_prefix;
    pp.push_back(pi + 1);
    if (!path_correct(path, k + 1, gold, pred, {}, false, pp, true)) return false;
  }
  for (int o = std::max(G, P); o < n.max_occurrences; ++o) {
    if (!path_correct(path, k + 1, gold, pred, {}, false, {}, false)) return false;
  }
  return true;
}

inline double report_accuracy(const std::vector<PredictedReport>& preds,
                              const std::vector<GoldReport>& golds, const QuestionTree& tree) {
  std::map<std::string, const PredictedReport*> by_id;
  for (const PredictedReport& p : preds) by_id[p.image_id] = &p;
  long total = 0, correct = 0;
  for (const GoldReport& g : golds) {
    const PredictedReport& p = *by_id.at(g.image_id);
    // one recursive check per template path
    std::vector<const QuestionNode*> path;
    auto walk = [&](const QuestionNode& n, auto&& self) -> void {
      path.push_back(&n);
      if (n.children.empty()) {
        ++total;
        if (path_correct(path, 0, g.answers, p.answers, {}, true, {}, true)) ++correct;
      } else {
        for (const QuestionNode& c : n.children) self(c, self);
      }
      path.pop_back();
    };
    for (const QuestionNode& r : tree.roots) walk(r, walk);
  }
  return total == 0 ? 0.0 : static_cast<double>(correct) / total;
}

}  // namespace oracle_eval
