#include "hica/inference.hpp"

#include <algorithm>
#include <map>
#include <set>
#include <stdexcept>

#include "json.hpp"

namespace hica {

namespace {

using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw std::invalid_argument(where + ": " + what);
}

std::string instance_str(const std::vector<int>& inst) {
  std::string s = "[";
  for (size_t i = 0; i < inst.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(inst[i]);
  }
  return s + "]";
}

std::vector<std::string> forced_value(const QuestionNode& n) {
  return n.level <= 2 ? std::vector<std::string>{"no"}
                      : std::vector<std::string>{"no selection"};
}

// consistency pruning: one forced record per descendant, first occurrence
// only, deeper occurrences are implied "no"
void force_subtree(const QuestionNode& parent, const std::vector<int>& parent_inst,
                   PredictedReport& out) {
  for (const QuestionNode& c : parent.children) {
    std::vector<int> inst = parent_inst;
    inst.push_back(1);
    out.answers.push_back({{c.id, inst}, forced_value(c), true});
    force_subtree(c, inst, out);
  }
}

struct Traversal {
  const QuestionTree& tree;
  const PromptTable& prompts;
  const AnswerFn& fn;
  const std::string& image_id;
  PredictedReport& out;
  InferenceStats* stats;

  void walk(const QuestionNode& n, const std::vector<int>& parent_inst,
            const std::vector<QaPair>& ancestors, std::vector<QaPair>& sibs) {
    for (int occ = 1; occ <= n.max_occurrences; ++occ) {
      std::vector<int> inst = parent_inst;
      inst.push_back(occ);
      const std::string& q = occ == 1 ? n.text : n.follow_up_text;

      Sample desc;
      desc.image_id = image_id;
      desc.prompt = prompt_for_level(n.level, prompts);
      desc.question = q;
      desc.ancestors = ancestors;
      desc.prior_siblings = sibs;
      desc.level = n.level;
      desc.node = &n;
      desc.parent_id = tree.index.at(n.id).parent_id;
      desc.key = {n.id, inst};
      desc.mask = tree.mask_for(n);

      std::vector<std::string> selected = fn(desc);
      if (stats != nullptr) stats->model_invocations += 1;
      for (const std::string& s : selected)
        if (std::find(n.candidates.begin(), n.candidates.end(), s) == n.candidates.end())
          fail("answer_report", "model selected '" + s + "', not a candidate of " + n.id);
      if (selected.empty()) fail("answer_report", "model returned an empty selection for " + n.id);

      out.answers.push_back({{n.id, inst}, selected, false});
      sibs.push_back({q, answer_text(selected)});

      if (n.level >= 3) break;
      const bool yes = selected.size() == 1 && selected[0] == "yes";
      if (yes) {
        if (!n.children.empty()) {
          std::vector<QaPair> child_ancestors = ancestors;
          child_ancestors.push_back({q, "yes"});
          std::vector<QaPair> child_sibs;
          for (const QuestionNode& c : n.children)
            walk(c, inst, child_ancestors, child_sibs);
        }
      } else {
        force_subtree(n, inst, out);
        break;
      }
    }
  }
};

}  // namespace

const AnswerRecord* PredictedReport::find(const AnswerKey& key) const {
  for (const AnswerRecord& r : answers)
    if (r.key == key) return &r;
  return nullptr;
}

PredictedReport answer_report_with(const std::string& image_id, const QuestionTree& tree,
                                   const PromptTable& prompts, const AnswerFn& fn,
                                   InferenceStats* stats) {
  if (image_id.empty()) fail("answer_report", "empty image id");
  PredictedReport out;
  out.image_id = image_id;
  Traversal tr{tree, prompts, fn, image_id, out, stats};
  std::vector<QaPair> root_sibs;
  for (const QuestionNode& r : tree.roots) tr.walk(r, {}, {}, root_sibs);
  return out;
}

AnswerFn model_answer_fn(Model& model, const QuestionTree& tree) {
  if (model.vocab != tree.vocab)
    fail("model_answer_fn", "model and tree answer vocabularies differ");
  return [&model, &tree](const Sample& q) {
    Tape tape;
    const ValueId logits =
        forward_logits_with_prompt(tape, model, q.level,
                                   model.options.use_prompts ? q.prompt : "none", q.question,
                                   q.history(), q.image_id);
    const std::vector<int> picked =
        predict_answer(tape.val(logits), q.mask, q.node->kind, model.no_selection_index);
    std::vector<std::string> out;
    for (int idx : picked) out.push_back(tree.vocab[static_cast<size_t>(idx)]);
    return out;
  };
}

PredictedReport answer_report(const std::string& image_id, const QuestionTree& tree, Model& model,
                              const PromptTable& prompts, InferenceStats* stats) {
  return answer_report_with(image_id, tree, prompts, model_answer_fn(model, tree), stats);
}

void validate_predicted(const PredictedReport& report, const QuestionTree& tree) {
  const std::string where = "prediction " + report.image_id;
  std::map<std::pair<std::string, std::vector<int>>, const AnswerRecord*> by_key;
  for (const AnswerRecord& rec : report.answers) {
    auto info = tree.index.find(rec.key.node_id);
    if (info == tree.index.end())
      fail(where, "unknown node " + rec.key.node_id);
    const QuestionNode& n = *info->second.node;
    if (static_cast<int>(rec.key.instance.size()) != n.level)
      fail(where, "bad instance depth at " + rec.key.node_id + instance_str(rec.key.instance));
    if (rec.selected.empty())
      fail(where, "empty selection at " + rec.key.node_id);
    for (const std::string& s : rec.selected)
      if (std::find(n.candidates.begin(), n.candidates.end(), s) == n.candidates.end())
        fail(where, "'" + s + "' is not a candidate of " + n.id);
    if (!by_key.emplace(std::make_pair(rec.key.node_id, rec.key.instance), &rec).second)
      fail(where, "duplicate record " + rec.key.node_id + instance_str(rec.key.instance));
  }

  // the exact traversal shape: real records where the model was invoked,
  // forced first-occurrence chains under every "no"
  size_t expected = 0;
  auto expect = [&](const QuestionNode& n, const std::vector<int>& parent_inst, bool forced_ctx,
                    auto&& self) -> void {
    for (int occ = 1; occ <= n.max_occurrences; ++occ) {
      std::vector<int> inst = parent_inst;
      inst.push_back(occ);
      auto it = by_key.find(std::make_pair(n.id, inst));
      if (forced_ctx) {
        if (it == by_key.end())
          fail(where, "missing forced record " + n.id + instance_str(inst));
        const AnswerRecord& rec = *it->second;
        if (!rec.forced) fail(where, "descendant of a no must be forced: " + n.id);
        if (rec.selected != forced_value(n))
          fail(where, "forced record " + n.id + " must be " + answer_text(forced_value(n)));
        expected += 1;
        for (const QuestionNode& c : n.children) self(c, inst, true, self);
        break;  // forced chains cover the first occurrence only
      }
      if (it == by_key.end())
        fail(where, "missing asked record " + n.id + instance_str(inst));
      const AnswerRecord& rec = *it->second;
      if (rec.forced) fail(where, "record " + n.id + instance_str(inst) + " wrongly forced");
      expected += 1;
      if (n.level >= 3) break;
      if (rec.is_yes()) {
        for (const QuestionNode& c : n.children) self(c, inst, false, self);
      } else {
        for (const QuestionNode& c : n.children) self(c, inst, true, self);
        break;
      }
    }
  };
  for (const QuestionNode& r : tree.roots) expect(r, {}, false, expect);
  if (expected != report.answers.size())
    fail(where, std::to_string(report.answers.size()) + " records, traversal produces " +
                    std::to_string(expected));
}

std::string predictions_to_json(const std::vector<PredictedReport>& reports) {
  ordered_json arr = ordered_json::array();
  for (const PredictedReport& rep : reports) {
    ordered_json rj;
    rj["image_id"] = rep.image_id;
    ordered_json answers = ordered_json::array();
    for (const AnswerRecord& rec : rep.answers) {
      ordered_json a;
      a["node_id"] = rec.key.node_id;
      a["instance"] = rec.key.instance;
      a["answer"] = rec.selected;
      a["forced"] = rec.forced;
      answers.push_back(std::move(a));
    }
    rj["answers"] = std::move(answers);
    arr.push_back(std::move(rj));
  }
  return arr.dump(2);
}

std::vector<PredictedReport> parse_predictions(const std::string& json_text,
                                               const QuestionTree& tree) {
  const nlohmann::json doc = nlohmann::json::parse(json_text);
  if (!doc.is_array()) fail("predictions", "expected a JSON array");
  std::vector<PredictedReport> out;
  std::set<std::string> seen;
  for (const auto& rj : doc) {
    for (const auto& [key, _] : rj.items())
      if (key != "image_id" && key != "answers") fail("predictions", "unknown field '" + key + "'");
    PredictedReport rep;
    rep.image_id = rj.at("image_id").get<std::string>();
    if (!seen.insert(rep.image_id).second)
      fail("predictions", "duplicate image_id " + rep.image_id);
    for (const auto& aj : rj.at("answers")) {
      for (const auto& [key, _] : aj.items())
        if (key != "node_id" && key != "instance" && key != "answer" && key != "forced")
          fail("predictions", "unknown field '" + key + "'");
      AnswerRecord rec;
      rec.key.node_id = aj.at("node_id").get<std::string>();
      for (const auto& v : aj.at("instance")) rec.key.instance.push_back(v.get<int>());
      for (const auto& v : aj.at("answer")) rec.selected.push_back(v.get<std::string>());
      if (aj.contains("forced")) rec.forced = aj.at("forced").get<bool>();
      rep.answers.push_back(std::move(rec));
    }
    validate_predicted(rep, tree);
    out.push_back(std::move(rep));
  }
  return out;
}

}  // namespace hica
