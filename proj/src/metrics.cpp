#include "hica/metrics.hpp"

#include <algorithm>
#include <bit>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace hica {

namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& what) {
  throw std::invalid_argument("metrics: " + what);
}

struct ReportIndex {
  std::map<std::pair<std::string, std::vector<int>>, const AnswerRecord*> by_key;

  static ReportIndex build(const std::vector<AnswerRecord>& answers) {
    ReportIndex idx;
    for (const AnswerRecord& r : answers)
      idx.by_key.emplace(std::make_pair(r.key.node_id, r.key.instance), &r);
    return idx;
  }

  const AnswerRecord* find(const std::string& node_id, const std::vector<int>& inst) const {
    auto it = by_key.find(std::make_pair(node_id, inst));
    return it == by_key.end() ? nullptr : it->second;
  }

  // consecutive yes-answered occurrences of n under a parent instance
  int yes_count(const QuestionNode& n, const std::vector<int>& prefix) const {
    int count = 0;
    for (int o = 1; o <= n.max_occurrences; ++o) {
      std::vector<int> inst = prefix;
      inst.push_back(o);
      const AnswerRecord* rec = find(n.id, inst);
      if (rec == nullptr || !rec->is_yes()) break;
      ++count;
    }
    return count;
  }

  std::vector<std::string> l3_selection(const QuestionNode& n,
                                        const std::vector<int>& prefix) const {
    std::vector<int> inst = prefix;
    inst.push_back(1);
    const AnswerRecord* rec = find(n.id, inst);
    // absent means pruned above: the consistency-forced value
    std::vector<std::string> sel =
        rec == nullptr ? std::vector<std::string>{"no selection"} : rec->selected;
    std::sort(sel.begin(), sel.end());
    return sel;
  }
};

// One scored question instance after alignment.
struct Decision {
  const QuestionNode* node;
  std::vector<std::string> gold_sel, pred_sel;  // sorted
  bool correct;
};

struct Walker {
  const QuestionTree& tree;
  const ReportIndex& gold;
  const ReportIndex& pred;
  std::vector<Decision>& out;

  void emit(const QuestionNode& n, std::vector<std::string> g, std::vector<std::string> p) {
    std::sort(g.begin(), g.end());
    std::sort(p.begin(), p.end());
    const bool ok = g == p;
    out.push_back({&n, std::move(g), std::move(p), ok});
  }

  // flattened positive answers of the subtree below instance `inst` of `n`
  void collect_positives(const ReportIndex& view, const QuestionNode& n,
                         const std::vector<int>& inst, std::vector<std::string>& acc) const {
    for (const QuestionNode& c : n.children) {
      for (int o = 1; o <= c.max_occurrences; ++o) {
        std::vector<int> child_inst = inst;
        child_inst.push_back(o);
        const AnswerRecord* rec = view.find(c.id, child_inst);
        if (rec == nullptr) break;
        if (c.level <= 2) {
          if (!rec->is_yes()) break;
          acc.push_back(c.id + "|yes");
          collect_positives(view, c, child_inst, acc);
        } else {
          for (const std::string& s : rec->selected) acc.push_back(c.id + "|" + s);
          break;
        }
      }
    }
  }

  InstanceAnswers summarize(const ReportIndex& view, const QuestionNode& n,
                            const std::vector<int>& inst) const {
    InstanceAnswers a;
    collect_positives(view, n, inst, a.positives);
    std::sort(a.positives.begin(), a.positives.end());
    return a;
  }

  void walk_children(const QuestionNode& n, const std::vector<int>* gold_inst,
                     const std::vector<int>* pred_inst) {
    for (const QuestionNode& c : n.children) walk_node(c, gold_inst, pred_inst);
  }

  // gold_prefix/pred_prefix: the parent instance in each report's own
  // coordinates, or null when that side was pruned away (scored as forced
  // no / no-selection).
  void walk_node(const QuestionNode& n, const std::vector<int>* gold_prefix,
                 const std::vector<int>* pred_prefix) {
    const std::vector<int> empty;
    const std::vector<int>& gp = gold_prefix ? *gold_prefix : empty;
    const std::vector<int>& pp = pred_prefix ? *pred_prefix : empty;

    if (n.level >= 3) {
      emit(n, gold_prefix ? gold.l3_selection(n, gp) : std::vector<std::string>{"no selection"},
           pred_prefix ? pred.l3_selection(n, pp) : std::vector<std::string>{"no selection"});
      return;
    }

    const int g_count = gold_prefix ? gold.yes_count(n, gp) : 0;
    const int p_count = pred_prefix ? pred.yes_count(n, pp) : 0;
    for (int o = 1; o <= n.max_occurrences; ++o)
      emit(n, {o <= g_count ? "yes" : "no"}, {o <= p_count ? "yes" : "no"});

    if (n.children.empty()) return;

    auto inst_of = [](const std::vector<int>& prefix, int o) {
      std::vector<int> inst = prefix;
      inst.push_back(o);
      return inst;
    };

    // align repeated findings before descending
    std::vector<InstanceAnswers> g_sum, p_sum;
    for (int o = 1; o <= g_count; ++o) g_sum.push_back(summarize(gold, n, inst_of(gp, o)));
    for (int o = 1; o <= p_count; ++o) p_sum.push_back(summarize(pred, n, inst_of(pp, o)));
    const MatchResult match = match_instances(p_sum, g_sum);

    std::vector<char> g_used(static_cast<size_t>(g_count), 0);
    std::vector<char> p_used(static_cast<size_t>(p_count), 0);
    for (const auto& [pi, gi] : match.pairs) {
      p_used[static_cast<size_t>(pi)] = 1;
      g_used[static_cast<size_t>(gi)] = 1;
      const std::vector<int> gi_inst = inst_of(gp, gi + 1);
      const std::vector<int> pi_inst = inst_of(pp, pi + 1);
      walk_children(n, &gi_inst, &pi_inst);
    }
    for (int gi = 0; gi < g_count; ++gi) {
      if (g_used[static_cast<size_t>(gi)]) continue;
      const std::vector<int> gi_inst = inst_of(gp, gi + 1);
      walk_children(n, &gi_inst, nullptr);
    }
    for (int pi = 0; pi < p_count; ++pi) {
      if (p_used[static_cast<size_t>(pi)]) continue;
      const std::vector<int> pi_inst = inst_of(pp, pi + 1);
      walk_children(n, nullptr, &pi_inst);
    }
    for (int o = std::max(g_count, p_count); o < n.max_occurrences; ++o)
      walk_children(n, nullptr, nullptr);
  }
};

struct PairedReports {
  std::vector<std::pair<const PredictedReport*, const GoldReport*>> pairs;
};

PairedReports pair_reports(const std::vector<PredictedReport>& preds,
                           const std::vector<GoldReport>& golds) {
  std::map<std::string, const PredictedReport*> by_id;
  for (const PredictedReport& p : preds)
    if (!by_id.emplace(p.image_id, &p).second) fail("duplicate predicted report " + p.image_id);
  std::map<std::string, const GoldReport*> gold_by_id;
  for (const GoldReport& g : golds)
    if (!gold_by_id.emplace(g.image_id, &g).second) fail("duplicate gold report " + g.image_id);
  if (by_id.size() != gold_by_id.size())
    fail("report sets differ: " + std::to_string(preds.size()) + " predictions vs " +
         std::to_string(golds.size()) + " gold reports");
  PairedReports out;
  for (const auto& [id, g] : gold_by_id) {
    auto it = by_id.find(id);
    if (it == by_id.end()) fail("missing prediction for report " + id);
    out.pairs.emplace_back(it->second, g);
  }
  return out;
}

PrfRow prf_from_counts(long tp, long fp, long fn) {
  PrfRow row;
  row.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
  row.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
  row.f1 = row.precision + row.recall == 0.0
               ? 0.0
               : 2.0 * row.precision * row.recall / (row.precision + row.recall);
  return row;
}

}  // namespace

PrfRow ClassCounts::prf() const { return prf_from_counts(tp, fp, fn); }

double f1_of_multisets(const std::vector<std::string>& a, const std::vector<std::string>& b) {
  if (a.empty() && b.empty()) return 1.0;
  std::vector<std::string> sa = a, sb = b;
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  size_t i = 0, j = 0, common = 0;
  while (i < sa.size() && j < sb.size()) {
    if (sa[i] == sb[j]) {
      ++common;
      ++i;
      ++j;
    } else if (sa[i] < sb[j]) {
      ++i;
    } else {
      ++j;
    }
  }
  return 2.0 * static_cast<double>(common) / static_cast<double>(sa.size() + sb.size());
}

namespace {

// Exhaustive search over injective assignments of the smaller side, keeping
// the maximum-total pairing whose sorted pair list is lexicographically
// smallest. This is the canonical definition; the DP below must agree on
// totals where they overlap.
MatchResult match_exhaustive(const std::vector<InstanceAnswers>& pred,
                             const std::vector<InstanceAnswers>& gold) {
  const int np = static_cast<int>(pred.size());
  const int ng = static_cast<int>(gold.size());
  const bool pred_is_small = np <= ng;
  const int m = pred_is_small ? np : ng;
  const int n = pred_is_small ? ng : np;

  auto score = [&](int i, int j) {
    const InstanceAnswers& a = pred_is_small ? pred[static_cast<size_t>(i)]
                                             : pred[static_cast<size_t>(j)];
    const InstanceAnswers& b = pred_is_small ? gold[static_cast<size_t>(j)]
                                             : gold[static_cast<size_t>(i)];
    return f1_of_multisets(a.positives, b.positives);
  };

  MatchResult best;
  best.total_f1 = -1.0;
  std::vector<int> assign(static_cast<size_t>(m), -1);
  std::vector<char> used(static_cast<size_t>(n), 0);
  auto rec = [&](int i, double total, auto&& self) -> void {
    if (i == m) {
      std::vector<std::pair<int, int>> pairs;
      for (int k = 0; k < m; ++k) {
        const int j = assign[static_cast<size_t>(k)];
        pairs.emplace_back(pred_is_small ? k : j, pred_is_small ? j : k);
      }
      std::sort(pairs.begin(), pairs.end());
      if (total > best.total_f1 || (total == best.total_f1 && pairs < best.pairs)) {
        best.total_f1 = total;
        best.pairs = std::move(pairs);
      }
      return;
    }
    for (int j = 0; j < n; ++j) {
      if (used[static_cast<size_t>(j)]) continue;
      used[static_cast<size_t>(j)] = 1;
      assign[static_cast<size_t>(i)] = j;
      self(i + 1, total + score(i, j), self);
      used[static_cast<size_t>(j)] = 0;
    }
  };
  rec(0, 0.0, rec);
  return best;
}

// Bitmask assignment for larger instance counts (desk-scale templates cap
// occurrences at 12). Optimal total; tie pairing unspecified.
MatchResult match_bitmask(const std::vector<InstanceAnswers>& pred,
                          const std::vector<InstanceAnswers>& gold) {
  const int np = static_cast<int>(pred.size());
  const int ng = static_cast<int>(gold.size());
  const bool pred_is_small = np <= ng;
  const int m = pred_is_small ? np : ng;
  const int n = pred_is_small ? ng : np;
  if (n > 20) fail("instance matching beyond 20 occurrences is unsupported");

  auto score = [&](int i, int j) {
    const InstanceAnswers& a = pred_is_small ? pred[static_cast<size_t>(i)]
                                             : pred[static_cast<size_t>(j)];
    const InstanceAnswers& b = pred_is_small ? gold[static_cast<size_t>(j)]
                                             : gold[static_cast<size_t>(i)];
    return f1_of_multisets(a.positives, b.positives);
  };

  const size_t masks = size_t{1} << n;
  std::vector<double> dp(masks, -1.0);
  std::vector<signed char> choice(masks, -1);
  dp[0] = 0.0;
  for (size_t mask = 1; mask < masks; ++mask) {
    const int i = std::popcount(mask) - 1;
    if (i >= m) continue;
    for (int j = 0; j < n; ++j) {
      if (!(mask >> j & 1)) continue;
      const size_t prev = mask ^ (size_t{1} << j);
      if (dp[prev] < 0.0) continue;
      const double cand = dp[prev] + score(i, j);
      if (cand > dp[mask]) {
        dp[mask] = cand;
        choice[mask] = static_cast<signed char>(j);
      }
    }
  }

  MatchResult result;
  double bestv = -1.0;
  size_t best_mask = 0;
  for (size_t mask = 0; mask < masks; ++mask) {
    if (std::popcount(mask) != m) continue;
    if (dp[mask] > bestv) {
      bestv = dp[mask];
      best_mask = mask;
    }
  }
  result.total_f1 = bestv;
  size_t mask = best_mask;
  for (int i = m - 1; i >= 0; --i) {
    const int j = choice[mask];
    if (pred_is_small)
      result.pairs.emplace_back(i, j);
    else
      result.pairs.emplace_back(j, i);
    mask ^= size_t{1} << j;
  }
  std::sort(result.pairs.begin(), result.pairs.end());
  return result;
}

}  // namespace

MatchResult match_instances(const std::vector<InstanceAnswers>& pred,
                            const std::vector<InstanceAnswers>& gold) {
  if (pred.empty() || gold.empty()) return {};
  return std::max(pred.size(), gold.size()) <= 6 ? match_exhaustive(pred, gold)
                                                 : match_bitmask(pred, gold);
}

MetricsReport compute_metrics(const std::vector<PredictedReport>& preds,
                              const std::vector<GoldReport>& golds, const QuestionTree& tree,
                              const MetricsOptions& opts) {
  const PairedReports paired = pair_reports(preds, golds);
  const auto paths = enumerate_paths(tree);

  MetricsReport rep;
  rep.reports = static_cast<int>(paired.pairs.size());

  std::map<std::string, ClassCounts> counts_all;
  std::map<std::string, ClassCounts> counts_by_level[3];
  long level_decisions[3] = {0, 0, 0};
  long level_correct[3] = {0, 0, 0};
  double level_dice_sum[3] = {0.0, 0.0, 0.0};

  for (const auto& [pred, gold] : paired.pairs) {
    const ReportIndex gi = ReportIndex::build(gold->answers);
    const ReportIndex pi = ReportIndex::build(pred->answers);
    std::vector<Decision> decisions;
    Walker w{tree, gi, pi, decisions};
    const std::vector<int> root_prefix;  // roots are present on both sides
    for (const QuestionNode& r : tree.roots) w.walk_node(r, &root_prefix, &root_prefix);

    std::set<const QuestionNode*> wrong_nodes;
    for (const Decision& d : decisions) {
      const int li = d.node->level - 1;
      level_decisions[li] += 1;
      if (d.correct)
        level_correct[li] += 1;
      else
        wrong_nodes.insert(d.node);
      level_dice_sum[li] += f1_of_multisets(d.gold_sel, d.pred_sel);

      std::set<std::string> classes(d.gold_sel.begin(), d.gold_sel.end());
      classes.insert(d.pred_sel.begin(), d.pred_sel.end());
      for (const std::string& c : classes) {
        const bool in_gold = std::binary_search(d.gold_sel.begin(), d.gold_sel.end(), c);
        const bool in_pred = std::binary_search(d.pred_sel.begin(), d.pred_sel.end(), c);
        for (auto* bucket : {&counts_all, &counts_by_level[li]}) {
          ClassCounts& cc = (*bucket)[c];
          cc.cls = c;
          if (in_gold && in_pred) cc.tp += 1;
          if (!in_gold && in_pred) cc.fp += 1;
          if (in_gold && !in_pred) cc.fn += 1;
        }
      }
    }

    for (const auto& path : paths) {
      rep.paths_total += 1;
      bool ok = true;
      for (const QuestionNode* n : path)
        if (wrong_nodes.count(n)) ok = false;
      if (ok) rep.paths_correct += 1;
    }
  }

  rep.report_accuracy = rep.paths_total == 0
                            ? 0.0
                            : static_cast<double>(rep.paths_correct) / rep.paths_total;

  // classes reported in vocabulary order
  auto macro_of = [&](const std::map<std::string, ClassCounts>& counts) {
    PrfRow macro;
    int n = 0;
    for (const auto& [_, cc] : counts) {
      if (cc.tp + cc.fp + cc.fn == 0) continue;
      const PrfRow row = cc.prf();
      macro.precision += row.precision;
      macro.recall += row.recall;
      macro.f1 += row.f1;
      ++n;
    }
    if (n > 0) {
      macro.precision /= n;
      macro.recall /= n;
      macro.f1 /= n;
    }
    return std::make_pair(macro, n);
  };

  if (!opts.macro_by_question) {
    auto [macro, n] = macro_of(counts_all);
    (void)n;
    rep.overall_macro = macro;
  } else {
    double dice = 0.0;
    long total = level_decisions[0] + level_decisions[1] + level_decisions[2];
    for (int li = 0; li < 3; ++li) dice += level_dice_sum[li];
    rep.overall_macro.f1 = total == 0 ? 0.0 : dice / static_cast<double>(total);
    rep.overall_macro.precision = rep.overall_macro.f1;
    rep.overall_macro.recall = rep.overall_macro.f1;
  }

  for (int li = 0; li < 3; ++li) {
    if (level_decisions[li] == 0) continue;  // absent, not zero
    LevelMetrics lm;
    if (!opts.macro_by_question) {
      auto [macro, n] = macro_of(counts_by_level[li]);
      lm.macro = macro;
      lm.classes = n;
    } else {
      lm.macro.f1 = level_dice_sum[li] / static_cast<double>(level_decisions[li]);
      lm.macro.precision = lm.macro.f1;
      lm.macro.recall = lm.macro.f1;
      lm.classes = 0;
    }
    lm.decisions = level_decisions[li];
    lm.accuracy = static_cast<double>(level_correct[li]) / level_decisions[li];
    rep.levels[li] = lm;
  }

  for (const std::string& cls : tree.vocab) {
    auto it = counts_all.find(cls);
    if (it == counts_all.end()) continue;
    if (it->second.tp + it->second.fp + it->second.fn == 0) continue;
    rep.per_class.push_back(it->second);
  }
  return rep;
}

double report_accuracy(const std::vector<PredictedReport>& preds,
                       const std::vector<GoldReport>& golds, const QuestionTree& tree) {
  return compute_metrics(preds, golds, tree).report_accuracy;
}

PrfRow macro_prf(const std::vector<PredictedReport>& preds, const std::vector<GoldReport>& golds,
                 const QuestionTree& tree, std::optional<int> level_filter) {
  const MetricsReport rep = compute_metrics(preds, golds, tree);
  if (!level_filter.has_value()) return rep.overall_macro;
  if (*level_filter < 1 || *level_filter > 3) fail("level filter out of range 1..3");
  const auto& lm = rep.levels[*level_filter - 1];
  return lm.has_value() ? lm->macro : PrfRow{};
}

std::string metrics_to_json(const MetricsReport& rep) {
  ordered_json j;
  j["reports"] = rep.reports;
  j["paths_total"] = rep.paths_total;
  j["paths_correct"] = rep.paths_correct;
  j["report_accuracy"] = rep.report_accuracy;
  j["overall"] = {{"precision", rep.overall_macro.precision},
                  {"recall", rep.overall_macro.recall},
                  {"f1", rep.overall_macro.f1}};
  ordered_json levels = ordered_json::object();
  for (int li = 0; li < 3; ++li) {
    if (!rep.levels[li].has_value()) continue;
    const LevelMetrics& lm = *rep.levels[li];
    levels[std::to_string(li + 1)] = {{"precision", lm.macro.precision},
                                      {"recall", lm.macro.recall},
                                      {"f1", lm.macro.f1},
                                      {"accuracy", lm.accuracy},
                                      {"decisions", lm.decisions},
                                      {"classes", lm.classes}};
  }
  j["levels"] = std::move(levels);
  ordered_json per_class = ordered_json::array();
  for (const ClassCounts& cc : rep.per_class) {
    const PrfRow row = cc.prf();
    per_class.push_back({{"class", cc.cls},
                         {"tp", cc.tp},
                         {"fp", cc.fp},
                         {"fn", cc.fn},
                         {"precision", row.precision},
                         {"recall", row.recall},
                         {"f1", row.f1}});
  }
  j["per_class"] = std::move(per_class);
  return j.dump(2);
}

}  // namespace hica
