#include "hica/gradcheck_suite.hpp"

#include <algorithm>

#include "hica/rng.hpp"

namespace hica {

namespace {

const std::vector<std::string> kVocab = {"yes", "no", "mild", "severe", "no selection"};

FdConfig fd_config(const GradcheckConfig& cfg, int total_coords) {
  FdConfig fd;
  fd.eps = cfg.eps;
  fd.coords = cfg.all_coords ? total_coords : cfg.coords;
  fd.seed = cfg.fd_seed;
  return fd;
}

int coord_count(const std::vector<Param*>& params) {
  int n = 0;
  for (const Param* p : params) n += p->value.size();
  return n;
}

template <class Build>
FdReport check(const std::vector<Param*>& params, Build&& build, const GradcheckConfig& cfg) {
  Tape t0;
  const GradSet analytic = t0.backward(build(t0));
  const auto forward = [&]() {
    Tape t;
    return t.val(build(t)).at(0, 0);
  };
  return finite_diff_check(params, forward, analytic, fd_config(cfg, coord_count(params)));
}

}  // namespace

std::vector<GradcheckComponent> run_gradcheck_suite(const GradcheckConfig& cfg) {
  ModelDims dims;
  dims.d_model = cfg.d_model;
  dims.heads = cfg.heads;
  dims.ffn_hidden = cfg.ffn_hidden;
  FeaturizerConfig feat;
  feat.d_model = cfg.d_model;
  feat.image_tokens = cfg.image_tokens;
  feat.seed = cfg.featurizer_seed;
  Model m = init_model(dims, feat, default_prompts(), {}, kVocab, cfg.model_seed);

  const ClassWeights weights{std::vector<double>(kVocab.size(), 1.5)};
  const Tensor2 f_p = encode_image("gradcheck", feat).values;
  const Tensor2 v_q = encode_text("is there a nodule in the lungs", feat).values;

  AnswerMask yn_mask;
  yn_mask.valid = {1, 1, 0, 0, 0};
  Tensor2 yn_gold(1, 5);
  yn_gold.at(0, 0) = 1.0;
  AnswerMask attr_mask;
  attr_mask.valid = {0, 0, 1, 1, 1};
  Tensor2 attr_gold(1, 5);
  attr_gold.at(0, 2) = 1.0;

  std::vector<GradcheckComponent> out;

  {
    Rng head_rng(5);
    Tensor2 head(cfg.d_model, 5);
    for (double& v : head.data) v = 0.3 * head_rng.gauss();
    auto build = [&](Tape& t) {
      const ValueId aligned = align(t, t.input(f_p), t.input(v_q), m.alignment);
      const ValueId logits = t.matmul(t.mean_rows(aligned), t.input(head));
      return weighted_masked_bce(t, logits, yn_gold, weights, yn_mask);
    };
    out.push_back({"alignment", check(m.alignment_param_list(), build, cfg)});
  }

  for (int level = 1; level <= 3; ++level) {
    const AnswerMask& mask = level <= 2 ? yn_mask : attr_mask;
    const Tensor2& gold = level <= 2 ? yn_gold : attr_gold;
    DecoderParams& dec = m.decoders[static_cast<size_t>(level - 1)];
    auto build = [&](Tape& t) {
      const ValueId logits =
          fuse_and_classify(t, t.input(f_p), t.input(v_q), dec, m.options);
      return weighted_masked_bce(t, logits, gold, weights, mask);
    };
    out.push_back({"decoder" + std::to_string(level),
                   check(m.decoder_param_list(level), build, cfg)});
  }

  {
    // wide synthetic logits row so the loss check covers >= 200 coordinates
    const int width = std::max(cfg.coords, 250);
    Rng z_rng(9);
    Param z("z", Tensor2(1, width));
    Tensor2 gold(1, width);
    AnswerMask mask;
    mask.valid.assign(static_cast<size_t>(width), 0);
    ClassWeights w;
    w.w.assign(static_cast<size_t>(width), 1.0);
    for (int i = 0; i < width; ++i) {
      z.value.data[i] = z_rng.gauss();
      gold.data[i] = z_rng.next_below(2) ? 1.0 : 0.0;
      mask.valid[static_cast<size_t>(i)] = z_rng.next_below(4) != 0;
      w.w[static_cast<size_t>(i)] = z_rng.uniform(1.0, 3.0);
    }
    mask.valid[0] = 1;
    auto build = [&](Tape& t) { return weighted_masked_bce(t, t.param(z), gold, w, mask); };
    out.push_back({"loss", check({&z}, build, cfg)});
  }
  return out;
}

double gradcheck_suite_max(const std::vector<GradcheckComponent>& components) {
  double worst = 0.0;
  for (const GradcheckComponent& c : components)
    worst = std::max(worst, c.report.max_rel_err);
  return worst;
}

}  // namespace hica
