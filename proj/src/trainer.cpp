#include "hica/trainer.hpp"

#include <bit>
#include <atomic>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <thread>

#include "hica/rng.hpp"
#include "json.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian");

namespace hica {

namespace {

std::vector<const GoldReport*> reports_of(const Dataset& ds, std::optional<Split> split) {
  std::vector<const GoldReport*> out;
  for (const GoldReport& r : ds.reports)
    if (!split.has_value() || split_of(r.image_id) == *split) out.push_back(&r);
  return out;
}

std::vector<Sample> all_samples(const std::vector<const GoldReport*>& reports,
                                const QuestionTree& tree, const PromptTable& prompts) {
  std::vector<Sample> out;
  for (const GoldReport* r : reports) {
    auto s = build_samples(*r, tree, prompts);
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

struct ParamSnapshot {
  std::vector<Tensor2> values;

  static ParamSnapshot take(const std::vector<Param*>& params) {
    ParamSnapshot s;
    for (const Param* p : params) s.values.push_back(p->value);
    return s;
  }
  void restore(const std::vector<Param*>& params) const {
    for (size_t i = 0; i < params.size(); ++i) params[i]->value = values[i];
  }
};

double validation_accuracy(Model& model, const Dataset& ds,
                           const std::vector<const GoldReport*>& val_reports) {
  if (val_reports.empty()) return -1.0;
  std::vector<PredictedReport> preds;
  std::vector<GoldReport> golds;
  for (const GoldReport* g : val_reports) {
    preds.push_back(answer_report(g->image_id, ds.tree, model, model.prompts));
    golds.push_back(*g);
  }
  return report_accuracy(preds, golds, ds.tree);
}

}  // namespace

TrainResult train(Model& model, const Dataset& ds, const TrainConfig& cfg) {
  if (cfg.learning_rate < 0.0)
    throw std::invalid_argument("train: learning rate must be >= 0");
  if (cfg.max_epochs < 1) throw std::invalid_argument("train: max_epochs must be >= 1");
  if (model.vocab != ds.tree.vocab)
    throw std::invalid_argument("train: model and dataset vocabularies differ");

  const auto train_reports = reports_of(ds, Split::train);
  const auto val_reports = reports_of(ds, Split::val);
  if (train_reports.empty()) throw std::invalid_argument("train: empty training split");

  const std::vector<Sample> base = all_samples(train_reports, ds.tree, model.prompts);

  std::vector<Tensor2> golds;
  std::vector<AnswerMask> masks;
  for (const Sample& s : base) {
    golds.push_back(s.gold);
    masks.push_back(s.mask);
  }
  const ClassWeights weights =
      class_weights(golds, masks, static_cast<int>(ds.tree.vocab.size()), cfg.class_weight_max);

  AdamWState opt;
  opt.cfg.learning_rate = cfg.learning_rate;
  opt.cfg.weight_decay = cfg.weight_decay;

  const std::vector<Param*> params = model.trainable_params();
  Rng shuffle_rng(key_mix(cfg.seed, "train-shuffle"));

  TrainResult result;
  ParamSnapshot best = ParamSnapshot::take(params);
  int since_best = 0;

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    AugmentOptions aug;
    aug.p_drop = cfg.p_drop;
    aug.reorder = cfg.reorder_augment;
    std::vector<Sample> samples =
        augment(base, aug, key_mix(key_mix(cfg.seed, "epoch"), static_cast<uint64_t>(epoch)));
    shuffle_rng.shuffle(samples);

    double loss_sum = 0.0;
    long steps = 0;
    GradSet accumulated;
    int in_batch = 0;
    for (const Sample& s : samples) {
      Tape tape;
      const ValueId logits =
          forward_logits(tape, model, s.level, s.question, s.history(), s.image_id);
      const ValueId loss = weighted_masked_bce(tape, logits, s.gold, weights, s.mask);
      const double value = tape.val(loss).at(0, 0);
      if (!std::isfinite(value))
        throw std::runtime_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                                 ", image " + s.image_id + ", node " + s.key.node_id);
      loss_sum += value;
      ++steps;
      GradSet grads = tape.backward(loss);
      if (cfg.batch_size <= 1) {
        adamw_step(params, grads, opt);
      } else {
        accumulated.add(grads);
        if (++in_batch == cfg.batch_size) {
          adamw_step(params, accumulated, opt);
          accumulated = GradSet{};
          in_batch = 0;
        }
      }
    }
    if (in_batch > 0) adamw_step(params, accumulated, opt);

    EpochStats stats;
    stats.epoch = epoch;
    stats.train_loss = steps == 0 ? 0.0 : loss_sum / static_cast<double>(steps);
    stats.val_report_accuracy = validation_accuracy(model, ds, val_reports);
    result.history.push_back(stats);

    if (val_reports.empty()) continue;  // no early stopping without a val split
    if (stats.val_report_accuracy > result.best_val_accuracy) {
      result.best_val_accuracy = stats.val_report_accuracy;
      result.best_epoch = epoch;
      best = ParamSnapshot::take(params);
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }

  if (!val_reports.empty() && result.best_epoch > 0) best.restore(params);
  if (val_reports.empty() && !result.history.empty())
    result.best_epoch = result.history.back().epoch;
  result.rng_state = shuffle_rng.state();
  return result;
}

EvalResult evaluate(Model& model, const Dataset& ds, const EvalOptions& opts) {
  if (model.vocab != ds.tree.vocab)
    throw std::invalid_argument("evaluate: model and dataset vocabularies differ");
  const auto selected = reports_of(ds, opts.split);

  EvalResult out;
  out.predictions.resize(selected.size());
  const int threads = std::max(1, opts.threads);
  if (threads == 1 || selected.size() < 2) {
    for (size_t i = 0; i < selected.size(); ++i)
      out.predictions[i] = answer_report(selected[i]->image_id, ds.tree, model, model.prompts);
  } else {
    std::vector<std::thread> pool;
    std::atomic<size_t> next{0};
    for (int t = 0; t < threads; ++t) {
      pool.emplace_back([&]() {
        for (size_t i = next.fetch_add(1); i < selected.size(); i = next.fetch_add(1))
          out.predictions[i] =
              answer_report(selected[i]->image_id, ds.tree, model, model.prompts);
      });
    }
    for (std::thread& t : pool) t.join();
  }

  std::vector<GoldReport> golds;
  for (const GoldReport* g : selected) golds.push_back(*g);
  out.metrics = compute_metrics(out.predictions, golds, ds.tree, opts.metrics);
  return out;
}

// ---------------- checkpoint io ----------------

namespace {

constexpr char kMagic[4] = {'H', 'I', 'C', 'A'};
constexpr uint32_t kVersion = 1;

void put_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
void put_str(std::ostream& os, const std::string& s) {
  put_u32(os, static_cast<uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

uint32_t get_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
uint64_t get_u64(std::istream& is) {
  uint64_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
double get_f64(std::istream& is) {
  double v = 0;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string get_str(std::istream& is) {
  const uint32_t n = get_u32(is);
  std::string s(n, '\0');
  is.read(s.data(), n);
  return s;
}

uint32_t options_flags(const ModelOptions& o) {
  uint32_t f = 0;
  if (o.use_alignment) f |= 1u;
  if (o.use_history) f |= 2u;
  if (o.use_prompts) f |= 4u;
  if (o.shared_decoder) f |= 8u;
  return f;
}

}  // namespace

void save_checkpoint(const std::string& path, Model& model, const TrainConfig& cfg,
                     const TrainResult& result) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);

  os.write(kMagic, 4);
  put_u32(os, kVersion);
  put_u32(os, static_cast<uint32_t>(model.dims.d_model));
  put_u32(os, static_cast<uint32_t>(model.dims.heads));
  put_u32(os, static_cast<uint32_t>(model.dims.ffn_hidden));
  put_u32(os, static_cast<uint32_t>(model.dims.decoder_depth));
  put_u64(os, model.feat.seed);
  put_u32(os, static_cast<uint32_t>(model.feat.image_tokens));
  put_u32(os, options_flags(model.options));
  put_u32(os, static_cast<uint32_t>(model.options.fusion));
  put_u32(os, static_cast<uint32_t>(model.vocab.size()));
  for (const std::string& v : model.vocab) put_str(os, v);
  for (const std::string& p : model.prompts.by_level) put_str(os, p);

  const std::vector<Param*> params = model.trainable_params();
  put_u32(os, static_cast<uint32_t>(params.size()));
  for (const Param* p : params) {
    put_str(os, p->name);
    put_u32(os, static_cast<uint32_t>(p->value.rows));
    put_u32(os, static_cast<uint32_t>(p->value.cols));
    os.write(reinterpret_cast<const char*>(p->value.data.data()),
             static_cast<std::streamsize>(p->value.data.size() * sizeof(double)));
  }

  put_f64(os, cfg.learning_rate);
  put_u32(os, static_cast<uint32_t>(cfg.max_epochs));
  put_u32(os, static_cast<uint32_t>(cfg.batch_size));
  put_f64(os, cfg.p_drop);
  put_u64(os, cfg.seed);
  put_f64(os, cfg.weight_decay);
  put_u32(os, static_cast<uint32_t>(cfg.patience));
  put_f64(os, cfg.class_weight_max);
  put_u32(os, cfg.reorder_augment ? 1u : 0u);

  put_u64(os, result.rng_state);
  put_u32(os, static_cast<uint32_t>(result.history.size()));
  for (const EpochStats& e : result.history) {
    put_u32(os, static_cast<uint32_t>(e.epoch));
    put_f64(os, e.train_loss);
    put_f64(os, e.val_report_accuracy);
  }
  put_u32(os, static_cast<uint32_t>(result.best_epoch));
  put_f64(os, result.best_val_accuracy);
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);

  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  const uint32_t version = get_u32(is);
  if (version != kVersion)
    throw std::runtime_error("checkpoint version " + std::to_string(version) +
                             " unsupported (expected " + std::to_string(kVersion) + ")");

  ModelDims dims;
  dims.d_model = static_cast<int>(get_u32(is));
  dims.heads = static_cast<int>(get_u32(is));
  dims.ffn_hidden = static_cast<int>(get_u32(is));
  dims.decoder_depth = static_cast<int>(get_u32(is));
  FeaturizerConfig feat;
  feat.d_model = dims.d_model;
  feat.seed = get_u64(is);
  feat.image_tokens = static_cast<int>(get_u32(is));
  const uint32_t flags = get_u32(is);
  ModelOptions options;
  options.use_alignment = flags & 1u;
  options.use_history = flags & 2u;
  options.use_prompts = flags & 4u;
  options.shared_decoder = flags & 8u;
  options.fusion = static_cast<FusionMode>(get_u32(is));

  std::vector<std::string> vocab(get_u32(is));
  for (std::string& v : vocab) v = get_str(is);
  PromptTable prompts;
  for (std::string& p : prompts.by_level) p = get_str(is);

  Checkpoint ck;
  ck.model = init_model(dims, feat, prompts, options, vocab, /*seed=*/0);
  const std::vector<Param*> params = ck.model.trainable_params();

  const uint32_t count = get_u32(is);
  if (count != params.size())
    throw std::runtime_error("checkpoint has " + std::to_string(count) + " arrays, model needs " +
                             std::to_string(params.size()));
  for (uint32_t i = 0; i < count; ++i) {
    const std::string name = get_str(is);
    const int rows = static_cast<int>(get_u32(is));
    const int cols = static_cast<int>(get_u32(is));
    Param* target = nullptr;
    for (Param* p : params)
      if (p->name == name) target = p;
    if (target == nullptr) throw std::runtime_error("checkpoint array unknown to model: " + name);
    if (target->value.rows != rows || target->value.cols != cols)
      throw std::runtime_error("checkpoint array " + name + " is " + std::to_string(rows) + "x" +
                               std::to_string(cols) + ", model expects " +
                               target->value.shape_str());
    is.read(reinterpret_cast<char*>(target->value.data.data()),
            static_cast<std::streamsize>(target->value.data.size() * sizeof(double)));
  }

  ck.train_config.learning_rate = get_f64(is);
  ck.train_config.max_epochs = static_cast<int>(get_u32(is));
  ck.train_config.batch_size = static_cast<int>(get_u32(is));
  ck.train_config.p_drop = get_f64(is);
  ck.train_config.seed = get_u64(is);
  ck.train_config.weight_decay = get_f64(is);
  ck.train_config.patience = static_cast<int>(get_u32(is));
  ck.train_config.class_weight_max = get_f64(is);
  ck.train_config.reorder_augment = get_u32(is) != 0;

  ck.result.rng_state = get_u64(is);
  ck.result.history.resize(get_u32(is));
  for (EpochStats& e : ck.result.history) {
    e.epoch = static_cast<int>(get_u32(is));
    e.train_loss = get_f64(is);
    e.val_report_accuracy = get_f64(is);
  }
  ck.result.best_epoch = static_cast<int>(get_u32(is));
  ck.result.best_val_accuracy = get_f64(is);
  if (!is) throw std::runtime_error("checkpoint truncated: " + path);
  return ck;
}

std::string history_to_json(const TrainResult& result) {
  nlohmann::ordered_json j;
  j["best_epoch"] = result.best_epoch;
  j["best_val_report_accuracy"] = result.best_val_accuracy;
  nlohmann::ordered_json epochs = nlohmann::ordered_json::array();
  for (const EpochStats& e : result.history)
    epochs.push_back({{"epoch", e.epoch},
                      {"train_loss", e.train_loss},
                      {"val_report_accuracy", e.val_report_accuracy}});
  j["epochs"] = std::move(epochs);
  return j.dump(2);
}

}  // namespace hica
