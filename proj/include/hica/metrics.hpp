#pragma once

#include <optional>
#include <string>
#include <vector>

#include "hica/hierarchy.hpp"
#include "hica/inference.hpp"

namespace hica {

struct PrfRow {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

struct ClassCounts {
  std::string cls;
  long tp = 0, fp = 0, fn = 0;
  PrfRow prf() const;
};

struct LevelMetrics {
  PrfRow macro;
  double accuracy = 0.0;  // fraction of question instances answered fully correctly
  long decisions = 0;
  int classes = 0;
};

struct MetricsReport {
  int reports = 0;
  long paths_total = 0;
  long paths_correct = 0;
  double report_accuracy = 0.0;
  PrfRow overall_macro;
  std::optional<LevelMetrics> levels[3];
  std::vector<ClassCounts> per_class;  // vocabulary order, only classes that occur
};

struct MetricsOptions {
  // macro over per-question Dice scores instead of per-class P/R/F1
  bool macro_by_question = false;
};

// Flattened positive answers of one instance subtree ("node|class" strings,
// sorted); the pairwise score for matching is the multiset F1.
struct InstanceAnswers {
  std::vector<std::string> positives;
};

struct MatchResult {
  std::vector<std::pair<int, int>> pairs;  // (pred index, gold index)
  double total_f1 = 0.0;
};

// Optimal injective pairing covering the smaller side, maximizing summed
// pairwise F1 (exact bitmask assignment; ties resolved toward the
// lexicographically smallest pairing).
MatchResult match_instances(const std::vector<InstanceAnswers>& pred,
                            const std::vector<InstanceAnswers>& gold);

double f1_of_multisets(const std::vector<std::string>& a, const std::vector<std::string>& b);

// Fraction of root-to-leaf template paths, over all reports, on which every
// question instance (dense to the occurrence bounds, forced answers scored
// as real ones, instances aligned by match_instances) is answered
// correctly.
double report_accuracy(const std::vector<PredictedReport>& preds,
                       const std::vector<GoldReport>& golds, const QuestionTree& tree);

// Macro precision/recall/F1 over answer classes at the filtered level
// (nullopt = all levels). Classes with no gold and no predicted occurrences
// are excluded; per-class F1 is 0 when P+R = 0.
PrfRow macro_prf(const std::vector<PredictedReport>& preds, const std::vector<GoldReport>& golds,
                 const QuestionTree& tree, std::optional<int> level_filter);

MetricsReport compute_metrics(const std::vector<PredictedReport>& preds,
                              const std::vector<GoldReport>& golds, const QuestionTree& tree,
                              const MetricsOptions& opts = {});

std::string metrics_to_json(const MetricsReport& report);

}  // namespace hica
