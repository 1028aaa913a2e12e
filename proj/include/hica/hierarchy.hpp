#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "hica/featurizers.hpp"
#include "hica/objective.hpp"
#include "hica/prompting.hpp"
#include "hica/tensor.hpp"

namespace hica {

// One question in the three-level report template. Levels 1-2 carry exactly
// {yes,no}; level-3 nodes are leaves whose candidates exclude yes/no and
// usually include "no selection". A node with max_occurrences > 1 is
// re-asked via follow_up_text until "no" or the bound.
struct QuestionNode {
  std::string id;
  int level = 1;
  std::string text;
  ChoiceKind kind = ChoiceKind::single;
  std::vector<std::string> candidates;
  std::vector<QuestionNode> children;
  int max_occurrences = 1;
  std::string follow_up_text;
};

struct QuestionTree {
  std::vector<QuestionNode> roots;
  std::vector<std::string> vocab;  // canonical order: yes, no, then DFS encounter
  int no_selection_index = -1;

  struct NodeInfo {
    const QuestionNode* node = nullptr;
    std::string parent_id;  // empty for roots
  };
  std::unordered_map<std::string, NodeInfo> index;

  const QuestionNode* find(const std::string& id) const;
  int vocab_index(const std::string& candidate) const;
  AnswerMask mask_for(const QuestionNode& node) const;
};

// Identifies one asked instance of a question: one occurrence index per
// hop on the root-to-node path (so a level-3 node has three entries, the
// last always 1 since attribute questions do not repeat themselves).
struct AnswerKey {
  std::string node_id;
  std::vector<int> instance;
  bool operator==(const AnswerKey&) const = default;
};

struct AnswerRecord {
  AnswerKey key;
  std::vector<std::string> selected;  // empty never stored; "no selection" is explicit
  bool forced = false;

  bool is_yes() const { return selected.size() == 1 && selected[0] == "yes"; }
};

// Full question/answer transcript for one image under teacher forcing:
// every asked question has a record, including the terminating "no" ones.
struct GoldReport {
  std::string image_id;
  std::vector<AnswerRecord> answers;

  const AnswerRecord* find(const AnswerKey& key) const;
};

struct Dataset {
  FeaturizerConfig feat;
  QuestionTree tree;
  std::vector<GoldReport> reports;
};

// One training unit: prompt + question + image + history + gold + mask.
struct Sample {
  std::string image_id;
  std::string prompt;
  std::string question;
  std::vector<QaPair> ancestors;       // gold (question, answer) chain, root downward
  std::vector<QaPair> prior_siblings;  // earlier questions under the same parent instance
  int level = 1;
  const QuestionNode* node = nullptr;
  std::string parent_id;
  AnswerKey key;
  std::vector<std::string> gold_selected;
  Tensor2 gold;  // 1 x |vocab|
  AnswerMask mask;

  std::vector<QaPair> history() const;
};

// Strict-schema parsing: unknown fields are rejected, violations name the
// node path. Cycles cannot be expressed in the nested document form, so
// uniqueness of ids is the remaining aliasing check.
QuestionTree load_template(const std::string& json_text);
Dataset load_dataset_file(const std::string& path);
Dataset parse_dataset(const std::string& json_text);
std::string dataset_to_json(const Dataset& ds);
void save_dataset_file(const Dataset& ds, const std::string& path);

// Throws (naming the offending record) unless the transcript is complete
// and consistent: parents answered yes, occurrence chains unbroken,
// selections legal for their node.
void validate_report(const GoldReport& report, const QuestionTree& tree);

// Every maximal root-to-leaf chain, in document order.
std::vector<std::vector<const QuestionNode*>> enumerate_paths(const QuestionTree& tree);

// Teacher-forcing expansion of a transcript into per-question samples.
std::vector<Sample> build_samples(const GoldReport& report, const QuestionTree& tree,
                                  const PromptTable& prompts);

// answer-text rendering used in histories ("yes", "mild, left", ...)
std::string answer_text(const std::vector<std::string>& selected);

struct GenConfig {
  int num_reports = 300;
  int num_roots = 2;
  int l2_per_root = 2;
  int l3_per_l2 = 2;
  int max_occurrences = 2;   // given to the first level-2 node of each root
  bool level3_alt_rule = false;
  double multi_threshold_sd = 0.5;
  // Images whose existence-rule dots fall inside this margin (in sd units)
  // are skipped during generation, so every kept report is unambiguous
  // under the planted rule. 0 keeps every candidate image.
  double margin_sd = 0.5;
  FeaturizerConfig feat;
};

// Synthetic template plus reports whose answers are planted as linear
// threshold rules on the image features, so the labels are recoverable
// from the pseudo-encoders by construction.
Dataset generate_synthetic(const GenConfig& cfg, uint64_t seed);

struct AugmentOptions {
  double p_drop = 0.1;
  bool reorder = true;
};

// Same-level sibling reordering (histories rebuilt to match the new ask
// order) plus independent sample dropping. Gold labels and hierarchy are
// untouched.
std::vector<Sample> augment(const std::vector<Sample>& samples, const AugmentOptions& opts,
                            uint64_t seed);

enum class Split { train, val, test };

// 80/10/10 by image-id hash; independent of any seed.
Split split_of(const std::string& image_id);

}  // namespace hica
