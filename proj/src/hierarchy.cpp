#include "hica/hierarchy.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "hica/rng.hpp"
#include "json.hpp"

namespace hica {

namespace {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

[[noreturn]] void fail(const std::string& where, const std::string& what) {
  throw std::invalid_argument(where + ": " + what);
}

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!obj.is_object()) fail(where, "expected an object");
  for (const auto& [key, _] : obj.items())
    if (allowed.find(key) == allowed.end()) fail(where, "unknown field '" + key + "'");
}

std::string instance_str(const std::vector<int>& inst) {
  std::string s = "[";
  for (size_t i = 0; i < inst.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(inst[i]);
  }
  return s + "]";
}

std::string record_str(const AnswerKey& key) {
  return key.node_id + instance_str(key.instance);
}

// Occurrence repetition above the matching solver's reach is rejected at
// load time; desk-scale templates sit well under this.
constexpr int kMaxOccurrenceBound = 12;

void validate_node(const QuestionNode& n, int expected_level, const std::string& path) {
  const std::string where = "node " + (path.empty() ? n.id : path + "/" + n.id);
  if (n.id.empty()) fail(where, "empty id");
  if (n.text.empty()) fail(where, "empty question text");
  if (n.level != expected_level)
    fail(where, "level " + std::to_string(n.level) + ", expected " +
                    std::to_string(expected_level));
  if (n.candidates.empty()) fail(where, "no candidates");
  std::set<std::string> uniq(n.candidates.begin(), n.candidates.end());
  if (uniq.size() != n.candidates.size()) fail(where, "duplicate candidates");
  if (n.max_occurrences < 1) fail(where, "max_occurrences must be >= 1");
  if (n.max_occurrences > kMaxOccurrenceBound)
    fail(where, "max_occurrences above desk-scale bound " +
                    std::to_string(kMaxOccurrenceBound));
  if (n.max_occurrences > 1 && n.follow_up_text.empty())
    fail(where, "max_occurrences > 1 requires follow_up_text");
  if (n.level <= 2) {
    if (uniq != std::set<std::string>{"yes", "no"})
      fail(where, "levels 1-2 must offer exactly {yes,no}");
    if (n.kind != ChoiceKind::single) fail(where, "levels 1-2 are single-choice");
  } else {
    if (uniq.count("yes") || uniq.count("no"))
      fail(where, "level-3 candidates must not contain yes/no");
    if (!uniq.count("no selection"))
      fail(where, "level-3 candidates must include 'no selection'");
    if (!n.children.empty()) fail(where, "level-3 nodes must be leaves");
    if (n.max_occurrences != 1) fail(where, "level-3 questions do not repeat");
  }
  for (const QuestionNode& c : n.children)
    validate_node(c, expected_level + 1, path.empty() ? n.id : path + "/" + n.id);
}

void index_node(QuestionTree& tree, const QuestionNode& n, const std::string& parent_id) {
  if (!tree.index.emplace(n.id, QuestionTree::NodeInfo{&n, parent_id}).second)
    fail("node " + n.id, "duplicate id");
  for (const std::string& c : n.candidates)
    if (tree.vocab_index(c) < 0) tree.vocab.push_back(c);
  for (const QuestionNode& child : n.children) index_node(tree, child, n.id);
}

// Validation plus vocabulary/index construction; called after roots are in
// their final storage location.
void finish_tree(QuestionTree& tree) {
  if (tree.roots.empty()) fail("tree", "no roots");
  for (const QuestionNode& r : tree.roots) validate_node(r, 1, "");
  tree.vocab = {"yes", "no"};
  tree.index.clear();
  for (const QuestionNode& r : tree.roots) index_node(tree, r, "");
  tree.no_selection_index = tree.vocab_index("no selection");
}

ChoiceKind kind_from_string(const std::string& s, const std::string& where) {
  if (s == "single") return ChoiceKind::single;
  if (s == "multi") return ChoiceKind::multi;
  fail(where, "kind must be 'single' or 'multi', got '" + s + "'");
}

QuestionNode node_from_json(const json& j, const std::string& path) {
  const std::string where = "node at " + (path.empty() ? "root" : path);
  check_keys(j, {"id", "level", "text", "kind", "candidates", "children", "max_occurrences",
                 "follow_up_text"},
             where);
  for (const char* req : {"id", "level", "text", "kind", "candidates"})
    if (!j.contains(req)) fail(where, std::string("missing field '") + req + "'");
  QuestionNode n;
  n.id = j.at("id").get<std::string>();
  n.level = j.at("level").get<int>();
  n.text = j.at("text").get<std::string>();
  n.kind = kind_from_string(j.at("kind").get<std::string>(), where + "/" + n.id);
  for (const auto& c : j.at("candidates")) n.candidates.push_back(c.get<std::string>());
  if (j.contains("max_occurrences")) n.max_occurrences = j.at("max_occurrences").get<int>();
  if (j.contains("follow_up_text")) n.follow_up_text = j.at("follow_up_text").get<std::string>();
  if (j.contains("children"))
    for (const auto& c : j.at("children"))
      n.children.push_back(node_from_json(c, path.empty() ? n.id : path + "/" + n.id));
  return n;
}

ordered_json node_to_json(const QuestionNode& n) {
  ordered_json j;
  j["id"] = n.id;
  j["level"] = n.level;
  j["text"] = n.text;
  j["kind"] = n.kind == ChoiceKind::single ? "single" : "multi";
  j["candidates"] = n.candidates;
  if (n.max_occurrences != 1) j["max_occurrences"] = n.max_occurrences;
  if (!n.follow_up_text.empty()) j["follow_up_text"] = n.follow_up_text;
  if (!n.children.empty()) {
    ordered_json kids = ordered_json::array();
    for (const QuestionNode& c : n.children) kids.push_back(node_to_json(c));
    j["children"] = std::move(kids);
  }
  return j;
}

AnswerRecord record_from_json(const json& j, const std::string& where) {
  check_keys(j, {"node_id", "instance", "answer"}, where);
  AnswerRecord rec;
  rec.key.node_id = j.at("node_id").get<std::string>();
  for (const auto& v : j.at("instance")) rec.key.instance.push_back(v.get<int>());
  for (const auto& v : j.at("answer")) rec.selected.push_back(v.get<std::string>());
  return rec;
}

ordered_json record_to_json(const AnswerRecord& rec) {
  ordered_json j;
  j["node_id"] = rec.key.node_id;
  j["instance"] = rec.key.instance;
  j["answer"] = rec.selected;
  return j;
}

}  // namespace

const QuestionNode* QuestionTree::find(const std::string& id) const {
  auto it = index.find(id);
  return it == index.end() ? nullptr : it->second.node;
}

int QuestionTree::vocab_index(const std::string& candidate) const {
  for (size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == candidate) return static_cast<int>(i);
  return -1;
}

AnswerMask QuestionTree::mask_for(const QuestionNode& node) const {
  AnswerMask m;
  m.valid.assign(vocab.size(), 0);
  if (node.level <= 2) {
    m.valid[static_cast<size_t>(vocab_index("yes"))] = 1;
    m.valid[static_cast<size_t>(vocab_index("no"))] = 1;
  } else {
    for (const std::string& c : node.candidates)
      m.valid[static_cast<size_t>(vocab_index(c))] = 1;
  }
  return m;
}

const AnswerRecord* GoldReport::find(const AnswerKey& key) const {
  for (const AnswerRecord& r : answers)
    if (r.key == key) return &r;
  return nullptr;
}

std::vector<QaPair> Sample::history() const {
  std::vector<QaPair> h = ancestors;
  h.insert(h.end(), prior_siblings.begin(), prior_siblings.end());
  return h;
}

QuestionTree load_template(const std::string& json_text) {
  json doc = json::parse(json_text);
  check_keys(doc, {"roots"}, "tree");
  if (!doc.contains("roots")) fail("tree", "missing 'roots'");
  QuestionTree tree;
  for (const auto& r : doc.at("roots")) tree.roots.push_back(node_from_json(r, ""));
  finish_tree(tree);
  return tree;
}

Dataset parse_dataset(const std::string& json_text) {
  json doc = json::parse(json_text);
  check_keys(doc, {"d_model", "featurizer", "tree", "reports"}, "dataset");
  for (const char* req : {"d_model", "tree"})
    if (!doc.contains(req)) fail("dataset", std::string("missing field '") + req + "'");

  Dataset ds;
  ds.feat.d_model = doc.at("d_model").get<int>();
  if (doc.contains("featurizer")) {
    const json& f = doc.at("featurizer");
    check_keys(f, {"seed", "image_tokens"}, "dataset.featurizer");
    if (f.contains("seed")) ds.feat.seed = f.at("seed").get<uint64_t>();
    if (f.contains("image_tokens")) ds.feat.image_tokens = f.at("image_tokens").get<int>();
  }

  const json& t = doc.at("tree");
  check_keys(t, {"roots"}, "dataset.tree");
  for (const auto& r : t.at("roots")) ds.tree.roots.push_back(node_from_json(r, ""));
  finish_tree(ds.tree);

  std::set<std::string> seen_ids;
  if (doc.contains("reports")) {
    for (const auto& rj : doc.at("reports")) {
      check_keys(rj, {"image_id", "answers"}, "report");
      GoldReport rep;
      rep.image_id = rj.at("image_id").get<std::string>();
      if (rep.image_id.empty()) fail("report", "empty image_id");
      if (!seen_ids.insert(rep.image_id).second)
        fail("report " + rep.image_id, "duplicate image_id");
      for (const auto& aj : rj.at("answers"))
        rep.answers.push_back(record_from_json(aj, "report " + rep.image_id));
      validate_report(rep, ds.tree);
      ds.reports.push_back(std::move(rep));
    }
  }
  return ds;
}

Dataset load_dataset_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_dataset(buf.str());
}

std::string dataset_to_json(const Dataset& ds) {
  ordered_json doc;
  doc["d_model"] = ds.feat.d_model;
  doc["featurizer"] = {{"seed", ds.feat.seed}, {"image_tokens", ds.feat.image_tokens}};
  ordered_json roots = ordered_json::array();
  for (const QuestionNode& r : ds.tree.roots) roots.push_back(node_to_json(r));
  doc["tree"] = {{"roots", std::move(roots)}};
  ordered_json reports = ordered_json::array();
  for (const GoldReport& rep : ds.reports) {
    ordered_json rj;
    rj["image_id"] = rep.image_id;
    ordered_json answers = ordered_json::array();
    for (const AnswerRecord& rec : rep.answers) answers.push_back(record_to_json(rec));
    rj["answers"] = std::move(answers);
    reports.push_back(std::move(rj));
  }
  doc["reports"] = std::move(reports);
  return doc.dump(2);
}

void save_dataset_file(const Dataset& ds, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write dataset file: " + path);
  out << dataset_to_json(ds) << "\n";
}

void validate_report(const GoldReport& report, const QuestionTree& tree) {
  const std::string where = "report " + report.image_id;
  std::map<std::pair<std::string, std::vector<int>>, const AnswerRecord*> by_key;

  for (const AnswerRecord& rec : report.answers) {
    const std::string rwhere = where + ", record " + record_str(rec.key);
    auto info = tree.index.find(rec.key.node_id);
    if (info == tree.index.end()) fail(rwhere, "unknown node id");
    const QuestionNode& n = *info->second.node;
    if (static_cast<int>(rec.key.instance.size()) != n.level)
      fail(rwhere, "instance chain length " + std::to_string(rec.key.instance.size()) +
                       ", expected " + std::to_string(n.level));
    // occurrence bounds along the ancestor chain
    std::vector<const QuestionNode*> chain(static_cast<size_t>(n.level));
    {
      const QuestionNode* cur = &n;
      for (int lvl = n.level; lvl >= 1; --lvl) {
        chain[static_cast<size_t>(lvl - 1)] = cur;
        const std::string& pid = tree.index.at(cur->id).parent_id;
        cur = pid.empty() ? nullptr : tree.find(pid);
      }
    }
    for (int h = 0; h < n.level; ++h) {
      const int occ = rec.key.instance[static_cast<size_t>(h)];
      if (occ < 1 || occ > chain[static_cast<size_t>(h)]->max_occurrences)
        fail(rwhere, "occurrence " + std::to_string(occ) + " out of bounds for node " +
                         chain[static_cast<size_t>(h)]->id);
    }
    if (rec.selected.empty()) fail(rwhere, "empty answer");
    std::set<std::string> uniq(rec.selected.begin(), rec.selected.end());
    if (uniq.size() != rec.selected.size()) fail(rwhere, "duplicate answer entries");
    for (const std::string& s : rec.selected)
      if (std::find(n.candidates.begin(), n.candidates.end(), s) == n.candidates.end())
        fail(rwhere, "answer '" + s + "' is not a candidate of " + n.id);
    if (n.kind == ChoiceKind::single && rec.selected.size() != 1)
      fail(rwhere, "single-choice question answered with " +
                       std::to_string(rec.selected.size()) + " entries");
    if (!by_key.emplace(std::make_pair(rec.key.node_id, rec.key.instance), &rec).second)
      fail(rwhere, "duplicate record");
  }

  auto find_yes = [&](const std::string& node_id, const std::vector<int>& inst) -> bool {
    auto it = by_key.find(std::make_pair(node_id, inst));
    return it != by_key.end() && it->second->is_yes();
  };

  for (const AnswerRecord& rec : report.answers) {
    const std::string rwhere = where + ", record " + record_str(rec.key);
    const auto& info = tree.index.at(rec.key.node_id);
    const int occ = rec.key.instance.back();
    std::vector<int> prefix(rec.key.instance.begin(), rec.key.instance.end() - 1);
    if (occ > 1) {
      std::vector<int> prev = prefix;
      prev.push_back(occ - 1);
      if (!find_yes(rec.key.node_id, prev))
        fail(rwhere, "occurrence " + std::to_string(occ) +
                         " without a yes at occurrence " + std::to_string(occ - 1));
    }
    if (!info.parent_id.empty() && !find_yes(info.parent_id, prefix))
      fail(rwhere, "answered without ancestor yes at " + info.parent_id +
                       instance_str(prefix));
  }

  // transcript completeness: every question teacher forcing would ask is
  // present exactly once
  size_t expected = 0;
  auto expect_node = [&](const QuestionNode& n, const std::vector<int>& parent_inst,
                         auto&& self) -> void {
    for (int o = 1; o <= n.max_occurrences; ++o) {
      std::vector<int> inst = parent_inst;
      inst.push_back(o);
      auto it = by_key.find(std::make_pair(n.id, inst));
      if (it == by_key.end())
        fail(where, "missing asked record " + record_str({n.id, inst}));
      expected += 1;
      if (!it->second->is_yes()) break;
      for (const QuestionNode& c : n.children) self(c, inst, self);
    }
  };
  for (const QuestionNode& r : tree.roots) expect_node(r, {}, expect_node);
  if (expected != report.answers.size())
    fail(where, std::to_string(report.answers.size()) +
                    " records, teacher forcing asks " + std::to_string(expected));
}

std::vector<std::vector<const QuestionNode*>> enumerate_paths(const QuestionTree& tree) {
  std::vector<std::vector<const QuestionNode*>> paths;
  std::vector<const QuestionNode*> cur;
  auto walk = [&](const QuestionNode& n, auto&& self) -> void {
    cur.push_back(&n);
    if (n.children.empty())
      paths.push_back(cur);
    else
      for (const QuestionNode& c : n.children) self(c, self);
    cur.pop_back();
  };
  for (const QuestionNode& r : tree.roots) walk(r, walk);
  return paths;
}

std::string answer_text(const std::vector<std::string>& selected) {
  std::string out;
  for (size_t i = 0; i < selected.size(); ++i) {
    if (i) out += ", ";
    out += selected[i];
  }
  return out;
}

namespace {

struct SampleWalker {
  const GoldReport& report;
  const QuestionTree& tree;
  const PromptTable& prompts;
  std::vector<Sample> out;

  void walk(const QuestionNode& n, const std::vector<int>& parent_inst,
            const std::vector<QaPair>& ancestors, std::vector<QaPair>& sibs) {
    for (int occ = 1; occ <= n.max_occurrences; ++occ) {
      AnswerKey key{n.id, parent_inst};
      key.instance.push_back(occ);
      const AnswerRecord* rec = report.find(key);
      if (rec == nullptr)
        fail("report " + report.image_id, "inconsistent: missing record " + record_str(key));
      const std::string& q = occ == 1 ? n.text : n.follow_up_text;

      Sample s;
      s.image_id = report.image_id;
      s.prompt = prompt_for_level(n.level, prompts);
      s.question = q;
      s.ancestors = ancestors;
      s.prior_siblings = sibs;
      s.level = n.level;
      s.node = &n;
      s.parent_id = tree.index.at(n.id).parent_id;
      s.key = key;
      s.gold_selected = rec->selected;
      s.gold = Tensor2(1, static_cast<int>(tree.vocab.size()));
      for (const std::string& sel : rec->selected)
        s.gold.at(0, tree.vocab_index(sel)) = 1.0;
      s.mask = tree.mask_for(n);
      out.push_back(std::move(s));

      sibs.push_back({q, answer_text(rec->selected)});

      if (!rec->is_yes()) break;
      if (!n.children.empty()) {
        std::vector<QaPair> child_ancestors = ancestors;
        child_ancestors.push_back({q, "yes"});
        std::vector<QaPair> child_sibs;
        for (const QuestionNode& c : n.children)
          walk(c, key.instance, child_ancestors, child_sibs);
      }
    }
  }
};

}  // namespace

std::vector<Sample> build_samples(const GoldReport& report, const QuestionTree& tree,
                                  const PromptTable& prompts) {
  SampleWalker w{report, tree, prompts, {}};
  std::vector<QaPair> root_sibs;
  for (const QuestionNode& r : tree.roots) w.walk(r, {}, {}, root_sibs);
  return std::move(w.out);
}

namespace {

// word banks for synthetic templates
const std::vector<std::string> kRegions = {"lungs",       "heart", "pleura",
                                           "mediastinum", "spine", "diaphragm"};
const std::vector<std::string> kFindings = {"opacity",      "nodule",      "effusion",
                                            "fracture",     "atelectasis", "granuloma",
                                            "cardiomegaly", "consolidation"};

struct AttrTemplate {
  const char* question;
  ChoiceKind kind;
  std::vector<std::string> candidates;
};

const std::vector<AttrTemplate> kAttrTemplates = {
    {"What is the degree of the %F?", ChoiceKind::single,
     {"mild", "moderate", "severe", "no selection"}},
    {"Where is the %F located?", ChoiceKind::multi,
     {"left", "right", "upper", "lower", "no selection"}},
    {"What are the border characteristics of the %F?", ChoiceKind::single,
     {"sharp", "fuzzy", "irregular", "no selection"}},
    {"What is the size of the %F?", ChoiceKind::single,
     {"small", "large", "no selection"}},
};

std::string subst(std::string tmpl, const std::string& finding) {
  const std::string marker = "%F";
  const size_t pos = tmpl.find(marker);
  if (pos != std::string::npos) tmpl.replace(pos, marker.size(), finding);
  return tmpl;
}

double planted_dot(const Tensor2& feature_row, uint64_t key) {
  const int d = feature_row.cols;
  double dot = 0.0, norm = 0.0;
  for (int j = 0; j < d; ++j) {
    const double u = keyed_gauss(key_mix(key, static_cast<uint64_t>(j)));
    dot += u * feature_row.at(0, j);
    norm += u * u;
  }
  return dot / std::sqrt(norm);
}

uint64_t rule_key(uint64_t base, const std::string& node_id, const std::vector<int>& inst,
                  const std::string& extra = "") {
  uint64_t k = key_mix(base, node_id);
  for (int o : inst) k = key_mix(k, static_cast<uint64_t>(o));
  if (!extra.empty()) k = key_mix(k, extra);
  return k;
}

struct RuleAnswerer {
  uint64_t base;
  const GenConfig& cfg;
  Tensor2 mean_row;   // 1 x d, mean of image tokens
  Tensor2 first_row;  // 1 x d, token 0 (the alternative level-3 statistic)

  bool exists(const QuestionNode& n, const std::vector<int>& inst) const {
    return planted_dot(mean_row, rule_key(base, n.id, inst)) > 0.0;
  }

  // smallest |dot| across every existence rule of the tree, in sd units
  double existence_margin(const QuestionTree& tree) const {
    const double sd = 1.0 / std::sqrt(static_cast<double>(cfg.feat.d_model) *
                                      static_cast<double>(cfg.feat.image_tokens));
    double worst = 1e300;
    auto visit = [&](const QuestionNode& n, const std::vector<int>& parent_inst,
                     auto&& self) -> void {
      if (n.level > 2) return;
      for (int o = 1; o <= n.max_occurrences; ++o) {
        std::vector<int> inst = parent_inst;
        inst.push_back(o);
        const double dot = planted_dot(mean_row, rule_key(base, n.id, inst));
        worst = std::min(worst, std::fabs(dot) / sd);
        for (const QuestionNode& c : n.children) self(c, inst, self);
      }
    };
    for (const QuestionNode& r : tree.roots) visit(r, {}, visit);
    return worst;
  }

  std::vector<std::string> attributes(const QuestionNode& n, const std::vector<int>& inst) const {
    const Tensor2& row = cfg.level3_alt_rule ? first_row : mean_row;
    const double sd =
        1.0 / std::sqrt(static_cast<double>(cfg.feat.d_model) *
                        (cfg.level3_alt_rule ? 1.0 : static_cast<double>(cfg.feat.image_tokens)));
    std::vector<std::string> selected;
    if (n.kind == ChoiceKind::single) {
      std::string best;
      double best_score = 0.0;
      for (const std::string& c : n.candidates) {
        const double s = planted_dot(row, rule_key(base, n.id, inst, c));
        if (best.empty() || s > best_score) {
          best = c;
          best_score = s;
        }
      }
      selected.push_back(best);
    } else {
      for (const std::string& c : n.candidates) {
        if (c == "no selection") continue;
        if (planted_dot(row, rule_key(base, n.id, inst, c)) > cfg.multi_threshold_sd * sd)
          selected.push_back(c);
      }
      if (selected.empty()) selected.push_back("no selection");
    }
    return selected;
  }
};

void gen_walk(const QuestionNode& n, const std::vector<int>& parent_inst,
              const RuleAnswerer& rule, GoldReport& report) {
  for (int occ = 1; occ <= n.max_occurrences; ++occ) {
    std::vector<int> inst = parent_inst;
    inst.push_back(occ);
    AnswerRecord rec;
    rec.key = {n.id, inst};
    if (n.level <= 2) {
      const bool yes = rule.exists(n, inst);
      rec.selected = {yes ? "yes" : "no"};
      report.answers.push_back(rec);
      if (!yes) break;
      for (const QuestionNode& c : n.children) gen_walk(c, inst, rule, report);
    } else {
      rec.selected = rule.attributes(n, inst);
      report.answers.push_back(rec);
      break;
    }
  }
}

}  // namespace

Dataset generate_synthetic(const GenConfig& cfg, uint64_t seed) {
  if (cfg.num_reports < 1 || cfg.num_roots < 1 || cfg.l2_per_root < 1 || cfg.l3_per_l2 < 1)
    throw std::invalid_argument("generate_synthetic: all sizes must be >= 1");
  if (cfg.max_occurrences < 1 || cfg.max_occurrences > kMaxOccurrenceBound)
    throw std::invalid_argument("generate_synthetic: max_occurrences out of range");

  Dataset ds;
  ds.feat = cfg.feat;

  Rng rng(key_mix(seed, "gen-tree"));
  std::vector<std::string> regions = kRegions;
  std::vector<std::string> findings = kFindings;
  rng.shuffle(regions);
  rng.shuffle(findings);

  int finding_cursor = 0;
  for (int r = 0; r < cfg.num_roots; ++r) {
    const std::string region =
        regions[static_cast<size_t>(r) % regions.size()] +
        (r >= static_cast<int>(regions.size()) ? " " + std::to_string(r) : "");
    QuestionNode root;
    root.id = "r" + std::to_string(r);
    root.level = 1;
    root.text = "Are there any abnormalities in the " + region + "?";
    root.kind = ChoiceKind::single;
    root.candidates = {"yes", "no"};
    for (int f = 0; f < cfg.l2_per_root; ++f) {
      const std::string finding =
          findings[static_cast<size_t>(finding_cursor) % findings.size()] +
          (finding_cursor >= static_cast<int>(findings.size())
               ? " " + std::to_string(finding_cursor)
               : "");
      ++finding_cursor;
      QuestionNode l2;
      l2.id = root.id + ".f" + std::to_string(f);
      l2.level = 2;
      l2.text = "Is there " + finding + " in the " + region + "?";
      l2.kind = ChoiceKind::single;
      l2.candidates = {"yes", "no"};
      if (f == 0 && cfg.max_occurrences > 1) {
        l2.max_occurrences = cfg.max_occurrences;
        l2.follow_up_text =
            "Are there any other findings of " + finding + " in the " + region + "?";
      }
      for (int a = 0; a < cfg.l3_per_l2; ++a) {
        const AttrTemplate& tm = kAttrTemplates[static_cast<size_t>(a) % kAttrTemplates.size()];
        QuestionNode l3;
        l3.id = l2.id + ".a" + std::to_string(a);
        l3.level = 3;
        l3.text = subst(tm.question, finding);
        l3.kind = tm.kind;
        l3.candidates = tm.candidates;
        l2.children.push_back(std::move(l3));
      }
      root.children.push_back(std::move(l2));
    }
    ds.tree.roots.push_back(std::move(root));
  }
  finish_tree(ds.tree);

  const uint64_t rule_base = key_mix(key_mix(key_mix(seed, "plant"), cfg.feat.seed), "rule");
  // candidate ids are scanned in order; images inside the ambiguity margin
  // are skipped, so the kept corpus is deterministic for a given config
  const int scan_limit = std::max(cfg.num_reports * 1000, 100000);
  int kept = 0;
  for (int i = 0; i < scan_limit && kept < cfg.num_reports; ++i) {
    GoldReport rep;
    {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "img%04d", i);
      rep.image_id = "s" + std::to_string(seed) + "-" + buf;
    }
    const TokenMatrix img = encode_image(rep.image_id, cfg.feat);
    RuleAnswerer rule{rule_base, cfg, Tensor2(1, cfg.feat.d_model), Tensor2(1, cfg.feat.d_model)};
    rule.mean_row = mean_image_token(rep.image_id, cfg.feat);
    for (int j = 0; j < cfg.feat.d_model; ++j) rule.first_row.at(0, j) = img.values.at(0, j);
    if (cfg.margin_sd > 0.0 && rule.existence_margin(ds.tree) < cfg.margin_sd) continue;
    for (const QuestionNode& r : ds.tree.roots) gen_walk(r, {}, rule, rep);
    validate_report(rep, ds.tree);
    ds.reports.push_back(std::move(rep));
    ++kept;
  }
  if (kept < cfg.num_reports)
    throw std::runtime_error("generate_synthetic: margin " + std::to_string(cfg.margin_sd) +
                             " rejected too many images");
  return ds;
}

std::vector<Sample> augment(const std::vector<Sample>& samples, const AugmentOptions& opts,
                            uint64_t seed) {
  if (opts.p_drop < 0.0 || opts.p_drop > 1.0)
    throw std::invalid_argument("augment: p_drop must be in [0,1]");

  std::vector<Sample> out = samples;

  if (opts.reorder) {
    // sibling group: same report, same parent instance
    std::map<std::string, std::vector<size_t>> groups;
    for (size_t i = 0; i < out.size(); ++i) {
      const Sample& s = out[i];
      std::string gk = s.image_id + "|" + s.parent_id + "|";
      for (size_t h = 0; h + 1 < s.key.instance.size(); ++h)
        gk += std::to_string(s.key.instance[h]) + ".";
      groups[gk].push_back(i);
    }
    for (auto& [gk, idxs] : groups) {
      // node subgroups in first-appearance order, occurrences kept in order
      std::vector<std::string> order;
      std::map<std::string, std::vector<size_t>> by_node;
      for (size_t i : idxs) {
        const std::string& nid = out[i].key.node_id;
        if (by_node.find(nid) == by_node.end()) order.push_back(nid);
        by_node[nid].push_back(i);
      }
      Rng rng(key_mix(key_mix(seed, "augment-order"), gk));
      rng.shuffle(order);
      std::vector<QaPair> sibs;
      for (const std::string& nid : order) {
        for (size_t i : by_node[nid]) {
          out[i].prior_siblings = sibs;
          sibs.push_back({out[i].question, answer_text(out[i].gold_selected)});
        }
      }
    }
  }

  if (opts.p_drop > 0.0) {
    Rng drop_rng(key_mix(seed, "augment-drop"));
    std::vector<Sample> kept;
    for (Sample& s : out)
      if (drop_rng.next_double() >= opts.p_drop) kept.push_back(std::move(s));
    out = std::move(kept);
  }
  return out;
}

Split split_of(const std::string& image_id) {
  const uint64_t bucket = mix64(fnv1a64(image_id)) % 10;
  if (bucket < 8) return Split::train;
  return bucket == 8 ? Split::val : Split::test;
}

}  // namespace hica
