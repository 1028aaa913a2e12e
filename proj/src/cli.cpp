#include "hica/cli.hpp"

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "hica/gradcheck_suite.hpp"
#include "hica/hierarchy.hpp"
#include "hica/inference.hpp"
#include "hica/metrics.hpp"
#include "hica/trainer.hpp"
#include "json.hpp"

namespace hica {

namespace {

using json = nlohmann::json;

[[noreturn]] void config_fail(const std::string& what) {
  throw std::invalid_argument("config: " + what);
}

void check_keys(const json& obj, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!obj.is_object()) config_fail(where + " must be an object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key)) config_fail("unknown key '" + key + "' in " + where);
}

// Fully resolved run settings: defaults, then config file, then flags.
struct RunConfig {
  FeaturizerConfig feat;
  ModelDims model_dims{64, 4, 128, 1};
  TrainConfig train;
  GenConfig gen;
  PromptTable prompts = default_prompts();
  ModelOptions options;
  std::string eval_split = "test";
  bool macro_by_question = false;
};

void apply_config_file(RunConfig& rc, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  const json doc = json::parse(buf.str());
  check_keys(doc, {"featurizer", "model", "train", "gen", "prompts", "ablation", "eval"},
             "config");

  if (doc.contains("featurizer")) {
    const json& f = doc.at("featurizer");
    check_keys(f, {"d_model", "image_tokens", "seed"}, "featurizer");
    if (f.contains("d_model")) rc.feat.d_model = f.at("d_model").get<int>();
    if (f.contains("image_tokens")) rc.feat.image_tokens = f.at("image_tokens").get<int>();
    if (f.contains("seed")) rc.feat.seed = f.at("seed").get<uint64_t>();
  }
  if (doc.contains("model")) {
    const json& m = doc.at("model");
    check_keys(m, {"heads", "ffn_hidden", "decoder_depth"}, "model");
    if (m.contains("heads")) rc.model_dims.heads = m.at("heads").get<int>();
    if (m.contains("ffn_hidden")) rc.model_dims.ffn_hidden = m.at("ffn_hidden").get<int>();
    if (m.contains("decoder_depth"))
      rc.model_dims.decoder_depth = m.at("decoder_depth").get<int>();
  }
  if (doc.contains("train")) {
    const json& t = doc.at("train");
    check_keys(t,
               {"learning_rate", "max_epochs", "batch_size", "p_drop", "seed", "weight_decay",
                "patience", "class_weight_max", "reorder_augment"},
               "train");
    if (t.contains("learning_rate")) rc.train.learning_rate = t.at("learning_rate").get<double>();
    if (t.contains("max_epochs")) rc.train.max_epochs = t.at("max_epochs").get<int>();
    if (t.contains("batch_size")) rc.train.batch_size = t.at("batch_size").get<int>();
    if (t.contains("p_drop")) rc.train.p_drop = t.at("p_drop").get<double>();
    if (t.contains("seed")) rc.train.seed = t.at("seed").get<uint64_t>();
    if (t.contains("weight_decay")) rc.train.weight_decay = t.at("weight_decay").get<double>();
    if (t.contains("patience")) rc.train.patience = t.at("patience").get<int>();
    if (t.contains("class_weight_max"))
      rc.train.class_weight_max = t.at("class_weight_max").get<double>();
    if (t.contains("reorder_augment"))
      rc.train.reorder_augment = t.at("reorder_augment").get<bool>();
  }
  if (doc.contains("gen")) {
    const json& g = doc.at("gen");
    check_keys(g,
               {"num_reports", "num_roots", "l2_per_root", "l3_per_l2", "max_occurrences",
                "level3_alt_rule", "multi_threshold_sd", "margin_sd"},
               "gen");
    if (g.contains("num_reports")) rc.gen.num_reports = g.at("num_reports").get<int>();
    if (g.contains("num_roots")) rc.gen.num_roots = g.at("num_roots").get<int>();
    if (g.contains("l2_per_root")) rc.gen.l2_per_root = g.at("l2_per_root").get<int>();
    if (g.contains("l3_per_l2")) rc.gen.l3_per_l2 = g.at("l3_per_l2").get<int>();
    if (g.contains("max_occurrences"))
      rc.gen.max_occurrences = g.at("max_occurrences").get<int>();
    if (g.contains("level3_alt_rule"))
      rc.gen.level3_alt_rule = g.at("level3_alt_rule").get<bool>();
    if (g.contains("multi_threshold_sd"))
      rc.gen.multi_threshold_sd = g.at("multi_threshold_sd").get<double>();
    if (g.contains("margin_sd")) rc.gen.margin_sd = g.at("margin_sd").get<double>();
  }
  if (doc.contains("prompts")) {
    const json& p = doc.at("prompts");
    check_keys(p, {"1", "2", "3"}, "prompts");
    for (int level = 1; level <= 3; ++level) {
      const std::string key = std::to_string(level);
      if (p.contains(key))
        rc.prompts.by_level[static_cast<size_t>(level - 1)] = p.at(key).get<std::string>();
    }
  }
  if (doc.contains("ablation")) {
    const json& a = doc.at("ablation");
    check_keys(a, {"no_history", "no_prompts", "shared_decoder", "no_alignment", "fusion"},
               "ablation");
    if (a.contains("no_history")) rc.options.use_history = !a.at("no_history").get<bool>();
    if (a.contains("no_prompts")) rc.options.use_prompts = !a.at("no_prompts").get<bool>();
    if (a.contains("shared_decoder"))
      rc.options.shared_decoder = a.at("shared_decoder").get<bool>();
    if (a.contains("no_alignment")) rc.options.use_alignment = !a.at("no_alignment").get<bool>();
    if (a.contains("fusion")) {
      const std::string f = a.at("fusion").get<std::string>();
      if (f == "cross")
        rc.options.fusion = FusionMode::cross_attention;
      else if (f == "self-attn")
        rc.options.fusion = FusionMode::self_attention_concat;
      else if (f == "text-as-query")
        rc.options.fusion = FusionMode::text_as_query;
      else
        config_fail("fusion must be cross|self-attn|text-as-query, got '" + f + "'");
    }
  }
  if (doc.contains("eval")) {
    const json& e = doc.at("eval");
    check_keys(e, {"split", "macro_by_question"}, "eval");
    if (e.contains("split")) rc.eval_split = e.at("split").get<std::string>();
    if (e.contains("macro_by_question"))
      rc.macro_by_question = e.at("macro_by_question").get<bool>();
  }
}

std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "all") return std::nullopt;
  throw std::invalid_argument("split must be train|val|test|all, got '" + s + "'");
}

void apply_ablation_name(RunConfig& rc, const std::string& name) {
  if (name.empty()) return;
  if (name == "self-attn-fusion")
    rc.options.fusion = FusionMode::self_attention_concat;
  else if (name == "text-as-query")
    rc.options.fusion = FusionMode::text_as_query;
  else if (name == "no-alignment")
    rc.options.use_alignment = false;
  else
    throw std::invalid_argument(
        "unknown ablation '" + name +
        "' (expected self-attn-fusion|text-as-query|no-alignment)");
}

int eval_threads() {
  const char* env = std::getenv("HICA_THREADS");
  if (env == nullptr) return 1;
  const int n = std::atoi(env);
  return n < 1 ? 1 : n;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << content;
  if (!content.empty() && content.back() != '\n') out << "\n";
}

int cmd_gen_data(const RunConfig& rc, uint64_t seed, const std::string& out_path) {
  GenConfig gen = rc.gen;
  gen.feat = rc.feat;
  const Dataset ds = generate_synthetic(gen, seed);
  save_dataset_file(ds, out_path);
  int train_n = 0, val_n = 0, test_n = 0;
  for (const GoldReport& r : ds.reports) {
    const Split s = split_of(r.image_id);
    (s == Split::train ? train_n : s == Split::val ? val_n : test_n) += 1;
  }
  std::cout << "wrote " << out_path << ": " << ds.reports.size() << " reports (train " << train_n
            << ", val " << val_n << ", test " << test_n << "), vocabulary "
            << ds.tree.vocab.size() << ", paths " << enumerate_paths(ds.tree).size() << "\n";
  return 0;
}

int cmd_train(const RunConfig& rc, const std::string& dataset_path, const std::string& out_path) {
  Dataset ds = load_dataset_file(dataset_path);
  ModelDims dims = rc.model_dims;
  dims.d_model = ds.feat.d_model;  // the dataset pins the feature width
  Model model = init_model(dims, ds.feat, rc.prompts, rc.options, ds.tree.vocab, rc.train.seed);
  const TrainResult result = train(model, ds, rc.train);
  save_checkpoint(out_path, model, rc.train, result);
  write_file(out_path + ".history.json", history_to_json(result));
  std::cout << "trained " << result.history.size() << " epochs";
  if (result.best_epoch > 0)
    std::cout << ", best epoch " << result.best_epoch << " (val report accuracy "
              << result.best_val_accuracy << ")";
  std::cout << "\nwrote " << out_path << " and " << out_path << ".history.json\n";
  return 0;
}

int cmd_eval(const std::string& dataset_path, const std::string& checkpoint_path,
             const std::string& score_path, const std::string& out_path,
             std::string predictions_path, const std::string& split,
             std::optional<int> level_filter, bool macro_by_question) {
  Dataset ds = load_dataset_file(dataset_path);
  EvalResult result;
  if (!score_path.empty()) {
    // standalone scoring of an existing prediction dump, no model involved
    std::ifstream in(score_path);
    if (!in) throw std::runtime_error("cannot open predictions: " + score_path);
    std::stringstream buf;
    buf << in.rdbuf();
    result.predictions = parse_predictions(buf.str(), ds.tree);
    std::vector<GoldReport> golds;
    std::set<std::string> predicted_ids;
    for (const PredictedReport& p : result.predictions) predicted_ids.insert(p.image_id);
    for (const GoldReport& g : ds.reports)
      if (predicted_ids.count(g.image_id)) golds.push_back(g);
    MetricsOptions mo;
    mo.macro_by_question = macro_by_question;
    result.metrics = compute_metrics(result.predictions, golds, ds.tree, mo);
  } else {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    if (ck.model.vocab != ds.tree.vocab) {
      std::cerr << "vocabulary mismatch between checkpoint and dataset:\n  checkpoint:";
      for (const std::string& v : ck.model.vocab) std::cerr << " '" << v << "'";
      std::cerr << "\n  dataset:   ";
      for (const std::string& v : ds.tree.vocab) std::cerr << " '" << v << "'";
      std::cerr << "\n";
      return 1;
    }
    EvalOptions opts;
    opts.split = parse_split(split);
    opts.metrics.macro_by_question = macro_by_question;
    opts.threads = eval_threads();
    result = evaluate(ck.model, ds, opts);
  }

  if (predictions_path.empty()) predictions_path = out_path + ".predictions.json";
  write_file(predictions_path, predictions_to_json(result.predictions));
  write_file(out_path, metrics_to_json(result.metrics));

  const MetricsReport& m = result.metrics;
  std::cout << "reports " << m.reports << ", report accuracy " << m.report_accuracy
            << " (" << m.paths_correct << "/" << m.paths_total << " paths)\n";
  if (level_filter.has_value()) {
    const auto& lm = m.levels[*level_filter - 1];
    if (lm.has_value())
      std::cout << "level " << *level_filter << ": P " << lm->macro.precision << " R "
                << lm->macro.recall << " F1 " << lm->macro.f1 << " acc " << lm->accuracy << "\n";
    else
      std::cout << "level " << *level_filter << ": absent (no decisions)\n";
  } else {
    std::cout << "overall macro: P " << m.overall_macro.precision << " R "
              << m.overall_macro.recall << " F1 " << m.overall_macro.f1 << "\n";
  }
  std::cout << "wrote " << out_path << " and " << predictions_path << "\n";
  return 0;
}

int cmd_gradcheck(uint64_t seed, double eps, int coords, bool exhaustive) {
  GradcheckConfig cfg;
  if (seed != 0) {
    cfg.model_seed = seed;
    cfg.fd_seed = seed + 1;
  }
  cfg.eps = eps;
  cfg.coords = coords;
  cfg.all_coords = exhaustive;
  const auto components = run_gradcheck_suite(cfg);
  for (const GradcheckComponent& c : components)
    std::cout << c.name << ": max rel err " << c.report.max_rel_err << " over "
              << c.report.coords_checked << " coordinates\n";
  const double worst = gradcheck_suite_max(components);
  std::cout << "max rel err " << worst << (worst < 1e-5 ? " < 1e-5: PASS" : " >= 1e-5: FAIL")
            << "\n";
  return worst < 1e-5 ? 0 : 1;
}

int cmd_inspect(const std::string& dataset_path, const std::string& checkpoint_path) {
  if (!dataset_path.empty()) {
    const Dataset ds = load_dataset_file(dataset_path);
    int per_level[3] = {0, 0, 0};
    for (const auto& [id, info] : ds.tree.index)
      per_level[info.node->level - 1] += 1;
    std::cout << "dataset: " << ds.reports.size() << " reports, d_model " << ds.feat.d_model
              << ", image_tokens " << ds.feat.image_tokens << ", featurizer seed "
              << ds.feat.seed << "\n";
    std::cout << "tree: " << per_level[0] << " level-1, " << per_level[1] << " level-2, "
              << per_level[2] << " level-3 nodes; " << enumerate_paths(ds.tree).size()
              << " paths\n";
    std::cout << "vocabulary (" << ds.tree.vocab.size() << "):";
    for (const std::string& v : ds.tree.vocab) std::cout << " '" << v << "'";
    std::cout << "\n";
  }
  if (!checkpoint_path.empty()) {
    Checkpoint ck = load_checkpoint(checkpoint_path);
    size_t coords = 0;
    for (const Param* p : ck.model.trainable_params()) coords += p->value.data.size();
    std::cout << "checkpoint: d_model " << ck.model.dims.d_model << ", heads "
              << ck.model.dims.heads << ", ffn_hidden " << ck.model.dims.ffn_hidden
              << ", decoder_depth " << ck.model.dims.decoder_depth << ", "
              << ck.model.trainable_params().size() << " arrays, " << coords << " parameters\n";
    std::cout << "train config: lr " << ck.train_config.learning_rate << ", seed "
              << ck.train_config.seed << ", epochs run " << ck.result.history.size();
    if (ck.result.best_epoch > 0)
      std::cout << ", best epoch " << ck.result.best_epoch << " (val "
                << ck.result.best_val_accuracy << ")";
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"hica: hierarchical cross-attention VQA at desk scale"};
  app.require_subcommand(1);

  std::string config_path, out_path, dataset_path, checkpoint_path, predictions_path;
  std::string split = "test", ablation;
  uint64_t seed = 0;
  bool seed_given = false;
  bool no_history = false, no_prompts = false, shared_decoder = false, macro_by_question = false;
  int level_filter = 0;
  double gc_eps = 1e-6;
  int gc_coords = 250;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "run config JSON file");
    cmd->add_option("--seed", seed, "override the run seed")->each([&](const std::string&) {
      seed_given = true;
    });
  };

  CLI::App* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  add_common(gen);
  gen->add_option("--out", out_path, "output dataset JSON")->required();

  CLI::App* tr = app.add_subcommand("train", "train a model with teacher forcing");
  add_common(tr);
  tr->add_option("--dataset", dataset_path, "dataset JSON")->required();
  tr->add_option("--out", out_path, "output checkpoint path")->required();
  tr->add_flag("--no-history", no_history, "drop history from the question encoding");
  tr->add_flag("--no-prompts", no_prompts, "replace level prompts with a neutral token");
  tr->add_flag("--shared-decoder", shared_decoder, "route every level through one decoder");
  tr->add_option("--ablation", ablation,
                 "self-attn-fusion | text-as-query | no-alignment");

  std::string score_path;
  CLI::App* ev = app.add_subcommand("eval", "autoregressive evaluation of a checkpoint");
  add_common(ev);
  ev->add_option("--dataset", dataset_path, "dataset JSON")->required();
  ev->add_option("--checkpoint", checkpoint_path, "trained checkpoint");
  ev->add_option("--score", score_path, "score an existing prediction dump instead");
  ev->add_option("--out", out_path, "output metrics JSON")->required();
  ev->add_option("--predictions", predictions_path, "prediction dump path");
  ev->add_option("--split", split, "train|val|test|all (default test)");
  ev->add_option("--level-filter", level_filter, "print one level's metrics")
      ->check(CLI::Range(1, 3));
  ev->add_flag("--macro-by-question", macro_by_question,
               "macro over questions instead of classes");

  bool gc_exhaustive = false;
  CLI::App* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  add_common(gc);
  gc->add_option("--eps", gc_eps, "central-difference step (default 1e-6)");
  gc->add_option("--coords", gc_coords, "sampled coordinates per component (default 250)");
  gc->add_flag("--exhaustive", gc_exhaustive,
               "check every coordinate (pair with a wider --eps)");

  CLI::App* ins = app.add_subcommand("inspect", "summarize a dataset or checkpoint");
  ins->add_option("--dataset", dataset_path, "dataset JSON");
  ins->add_option("--checkpoint", checkpoint_path, "checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    RunConfig rc;
    if (!config_path.empty()) apply_config_file(rc, config_path);
    if (seed_given) rc.train.seed = seed;
    if (no_history) rc.options.use_history = false;
    if (no_prompts) rc.options.use_prompts = false;
    if (shared_decoder) rc.options.shared_decoder = true;
    apply_ablation_name(rc, ablation);

    if (gen->parsed()) return cmd_gen_data(rc, seed_given ? seed : rc.train.seed, out_path);
    if (tr->parsed()) return cmd_train(rc, dataset_path, out_path);
    if (ev->parsed()) {
      if (checkpoint_path.empty() && score_path.empty()) {
        std::cerr << "eval: pass --checkpoint or --score\n";
        return 2;
      }
      return cmd_eval(dataset_path, checkpoint_path, score_path, out_path, predictions_path,
                      split, level_filter > 0 ? std::optional<int>(level_filter) : std::nullopt,
                      macro_by_question);
    }
    if (gc->parsed()) return cmd_gradcheck(seed_given ? seed : 0, gc_eps, gc_coords, gc_exhaustive);
    if (ins->parsed()) {
      if (dataset_path.empty() && checkpoint_path.empty()) {
        std::cerr << "inspect: pass --dataset and/or --checkpoint\n";
        return 2;
      }
      return cmd_inspect(dataset_path, checkpoint_path);
    }
    std::cerr << "no subcommand\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hica
