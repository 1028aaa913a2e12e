#pragma once

#include <functional>
#include <string>
#include <vector>

#include "hica/hierarchy.hpp"
#include "hica/model.hpp"

namespace hica {

// Tree-shaped answer assignment from autoregressive traversal. Forced
// records are exactly the descendants of a predicted "no", valued "no"
// (levels 1-2) or "no selection" (level 3); the model is never invoked
// for them.
struct PredictedReport {
  std::string image_id;
  std::vector<AnswerRecord> answers;

  const AnswerRecord* find(const AnswerKey& key) const;
};

// Answers one question given its full descriptor (prompt, question text,
// accumulated predicted history, mask). Returns selected candidates.
using AnswerFn = std::function<std::vector<std::string>(const Sample& question)>;

struct InferenceStats {
  int model_invocations = 0;
};

// Depth-first traversal in document order. History carries predicted
// answers (ancestors plus prior same-parent siblings); "yes" on a node
// with occurrences re-asks follow_up_text until "no" or the bound.
PredictedReport answer_report_with(const std::string& image_id, const QuestionTree& tree,
                                   const PromptTable& prompts, const AnswerFn& fn,
                                   InferenceStats* stats = nullptr);

AnswerFn model_answer_fn(Model& model, const QuestionTree& tree);

PredictedReport answer_report(const std::string& image_id, const QuestionTree& tree, Model& model,
                              const PromptTable& prompts, InferenceStats* stats = nullptr);

// Throws unless the report satisfies every PredictedReport invariant
// (consistency, forced-set shape, occurrence bounds, completeness).
void validate_predicted(const PredictedReport& report, const QuestionTree& tree);

// Prediction dump: [{"image_id", "answers": [{"node_id", "instance",
// "answer", "forced"}]}]
std::string predictions_to_json(const std::vector<PredictedReport>& reports);
std::vector<PredictedReport> parse_predictions(const std::string& json_text,
                                               const QuestionTree& tree);

}  // namespace hica
