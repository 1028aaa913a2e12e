#include <string>
#include <vector>

#include "doctest.h"
#include "hica/adamw.hpp"
#include "hica/gradcheck.hpp"
#include "hica/gradcheck_suite.hpp"
#include "hica/hierarchy.hpp"
#include "hica/model.hpp"
#include "hica/rng.hpp"
#include "oracles.hpp"

using namespace hica;

namespace {

Model tiny_model(uint64_t seed, int d_model = 16, int heads = 2,
                 const std::vector<std::string>& vocab = {"yes", "no", "mild", "severe",
                                                          "no selection"}) {
  ModelDims dims;
  dims.d_model = d_model;
  dims.heads = heads;
  dims.ffn_hidden = 2 * d_model;
  FeaturizerConfig feat;
  feat.d_model = d_model;
  feat.image_tokens = 3;
  feat.seed = 11;
  return init_model(dims, feat, default_prompts(), {}, vocab, seed);
}

Tensor2 oracle_block(const Tensor2& q_in, const Tensor2& kv, const BlockParams& p) {
  const std::vector<Tensor2> wq = [&] {
    std::vector<Tensor2> v;
    for (const Param& w : p.attn.w_q) v.push_back(w.value);
    return v;
  }();
  const std::vector<Tensor2> wk = [&] {
    std::vector<Tensor2> v;
    for (const Param& w : p.attn.w_k) v.push_back(w.value);
    return v;
  }();
  const std::vector<Tensor2> wv = [&] {
    std::vector<Tensor2> v;
    for (const Param& w : p.attn.w_v) v.push_back(w.value);
    return v;
  }();
  const Tensor2 attn = oracle::attention(q_in, kv, wq, wk, wv, p.attn.w_o.value, p.attn.d_k);
  const Tensor2 x = oracle::layer_norm(oracle::add(q_in, attn), p.ln_attn.gain.value,
                                       p.ln_attn.bias.value, kLayerNormEps);
  const Tensor2 f =
      oracle::ffn(x, p.ffn.w1.value, p.ffn.b1.value, p.ffn.w2.value, p.ffn.b2.value);
  return oracle::layer_norm(oracle::add(x, f), p.ln_ffn.gain.value, p.ln_ffn.bias.value,
                            kLayerNormEps);
}

}  // namespace

TEST_CASE("align matches a hand-composed straight-loop oracle") {
  Model m = tiny_model(21);
  Rng rng(22);
  for (int prompt_tokens : {1, 3}) {
    const Tensor2 v_i = oracle::random_tensor(4, m.dims.d_model, rng, 0.4);
    const Tensor2 v_p = oracle::random_tensor(prompt_tokens, m.dims.d_model, rng, 0.4);
    Tape t;
    const Tensor2 got = t.val(align(t, t.input(v_i), t.input(v_p), m.alignment));
    // layer-2 keys/values come from the original prompt features
    const Tensor2 want =
        oracle_block(oracle_block(v_i, v_p, m.alignment.layer1), v_p, m.alignment.layer2);
    CHECK(got.rows == v_i.rows);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("align: identical image rows give identical output rows") {
  Model m = tiny_model(23);
  Rng rng(24);
  const Tensor2 row = oracle::random_tensor(1, m.dims.d_model, rng);
  Tensor2 v_i(3, m.dims.d_model);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < m.dims.d_model; ++j) v_i.at(r, j) = row.at(0, j);
  const Tensor2 v_p = oracle::random_tensor(2, m.dims.d_model, rng);
  Tape t;
  const Tensor2 out = t.val(align(t, t.input(v_i), t.input(v_p), m.alignment));
  for (int r = 1; r < 3; ++r)
    for (int j = 0; j < m.dims.d_model; ++j)
      CHECK(out.at(r, j) == doctest::Approx(out.at(0, j)).epsilon(1e-14));
}

TEST_CASE("align: layer-2 attends over prompt tokens, not layer-1 output") {
  Model m = tiny_model(25);
  Rng rng(26);
  const Tensor2 v_i = oracle::random_tensor(5, m.dims.d_model, rng);
  const Tensor2 v_p = oracle::random_tensor(2, m.dims.d_model, rng);
  Tape t;
  AttentionTrace trace2;
  const ValueId first =
      transformer_block(t, t.input(v_i), t.input(v_p), m.alignment.layer1);
  transformer_block(t, first, t.input(v_p), m.alignment.layer2, &trace2);
  REQUIRE(!trace2.scores.empty());
  CHECK(trace2.scores[0].rows == 5);  // one row per image query token
  CHECK(trace2.scores[0].cols == 2);  // one column per original prompt token
}

TEST_CASE("align gradient passes the finite-difference check") {
  Model m = tiny_model(27, 8, 2);
  Rng rng(28);
  const Tensor2 v_i = oracle::random_tensor(3, 8, rng, 0.5);
  const Tensor2 v_p = oracle::random_tensor(2, 8, rng, 0.5);
  const Tensor2 probe = oracle::random_tensor(3, 8, rng);

  auto build = [&](Tape& t) {
    const ValueId out = align(t, t.input(v_i), t.input(v_p), m.alignment);
    return t.sum_all(t.hadamard(out, t.input(probe)));
  };
  Tape t0;
  const GradSet analytic = t0.backward(build(t0));
  const auto forward = [&]() {
    Tape t;
    return t.val(build(t)).at(0, 0);
  };
  const FdReport rep =
      finite_diff_check(m.alignment_param_list(), forward, analytic, {1e-6, 250, 5});
  CHECK(rep.coords_checked >= 200);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("select_decoder: distinct stores, routing, shared-decoder ablation") {
  Model m = tiny_model(29);
  CHECK(&select_decoder(1, m) == &m.decoders[0]);
  CHECK(&select_decoder(2, m) == &m.decoders[1]);
  CHECK(&select_decoder(3, m) == &m.decoders[2]);
  CHECK_THROWS_AS(select_decoder(0, m), std::invalid_argument);
  CHECK_THROWS_AS(select_decoder(4, m), std::invalid_argument);

  // no shared parameter storage between decoders
  auto p1 = m.decoder_param_list(1);
  auto p3 = m.decoder_param_list(3);
  for (Param* a : p1)
    for (Param* b : p3) CHECK(a != b);

  // mutating decoder 2 leaves 1 and 3 bitwise unchanged
  std::vector<std::vector<double>> before1, before3;
  for (Param* p : m.decoder_param_list(1)) before1.push_back(p->value.data);
  for (Param* p : m.decoder_param_list(3)) before3.push_back(p->value.data);
  for (Param* p : m.decoder_param_list(2))
    for (double& v : p->value.data) v += 1.0;
  size_t i = 0;
  for (Param* p : m.decoder_param_list(1)) CHECK(p->value.data == before1[i++]);
  i = 0;
  for (Param* p : m.decoder_param_list(3)) CHECK(p->value.data == before3[i++]);

  Model shared = tiny_model(29);
  shared.options.shared_decoder = true;
  CHECK(&select_decoder(3, shared) == &shared.decoders[0]);
}

TEST_CASE("fuse_and_classify: single question token case matches the hand oracle") {
  Model m = tiny_model(31, 8, 1);
  // identity output projection exposes the per-head context directly
  m.decoders[0].blocks[0].attn.w_o.value = Tensor2::identity(8);
  Rng rng(32);
  const Tensor2 f_p = oracle::random_tensor(3, 8, rng, 0.5);
  const Tensor2 v_q = oracle::random_tensor(1, 8, rng, 0.5);

  Tape t;
  AttentionTrace trace;
  const ValueId logits =
      fuse_and_classify(t, t.input(f_p), t.input(v_q), m.decoders[0], m.options, &trace);

  // one key: every query row attends to the single value row
  const Tensor2 vrow = oracle::matmul(v_q, m.decoders[0].blocks[0].attn.w_v[0].value);
  for (int r = 0; r < 3; ++r)
    for (int j = 0; j < 8; ++j)
      CHECK(trace.context[0].at(r, j) == doctest::Approx(vrow.at(0, j)).epsilon(1e-12));

  const Tensor2 fused = oracle_block(f_p, v_q, m.decoders[0].blocks[0]);
  const Tensor2 pooled = oracle::mean_rows(fused);
  Tensor2 want = oracle::matmul(pooled, m.decoders[0].cls_w.value);
  for (int j = 0; j < want.cols; ++j) want.at(0, j) += m.decoders[0].cls_b.value.at(0, j);
  CHECK(max_abs_diff(t.val(logits), want) < 1e-12);
}

TEST_CASE("fuse_and_classify: permuting question tokens leaves logits unchanged") {
  Model m = tiny_model(33);
  Rng rng(34);
  const Tensor2 f_p = oracle::random_tensor(3, m.dims.d_model, rng);
  const Tensor2 v_q = oracle::random_tensor(4, m.dims.d_model, rng);
  Tensor2 permuted(4, m.dims.d_model);
  const int perm[4] = {2, 0, 3, 1};
  for (int r = 0; r < 4; ++r)
    for (int j = 0; j < m.dims.d_model; ++j) permuted.at(r, j) = v_q.at(perm[r], j);

  Tape t;
  const Tensor2 a =
      t.val(fuse_and_classify(t, t.input(f_p), t.input(v_q), m.decoders[1], m.options));
  const Tensor2 b =
      t.val(fuse_and_classify(t, t.input(f_p), t.input(permuted), m.decoders[1], m.options));
  CHECK(max_abs_diff(a, b) < 1e-12);
}

TEST_CASE("gradcheck suite: alignment, each decoder and the loss pass at eps 1e-6") {
  const auto components = run_gradcheck_suite({});
  REQUIRE(components.size() == 5);
  for (const GradcheckComponent& c : components) {
    CAPTURE(c.name);
    CHECK(c.report.coords_checked >= 200);
    CHECK(c.report.max_rel_err < 1e-5);
  }
}

TEST_CASE("gradcheck suite: every coordinate verified at a resolvable eps") {
  // exhaustive rather than sampled; eps widened to 1e-4 because central
  // differences of a double-precision O(1) loss cannot resolve gradients
  // below ~1e-5 at eps 1e-6 (quantization of f dominates)
  GradcheckConfig cfg;
  cfg.all_coords = true;
  cfg.eps = 1e-4;
  for (const GradcheckComponent& c : run_gradcheck_suite(cfg)) {
    CAPTURE(c.name);
    CHECK(c.report.max_rel_err < 1e-5);
  }
}

TEST_CASE("composed end-to-end loss gradient is exact (round-off-limited)") {
  // one graph through featurizers, alignment, decoder and loss; at eps 1e-6
  // the composed check is dominated by evaluation round-off, so this runs
  // at 1e-5 where truncation and round-off balance
  Model m = tiny_model(35, 8, 2);
  const std::vector<QaPair> history{{"Any finding?", "yes"}};
  ClassWeights w{std::vector<double>(m.vocab.size(), 1.5)};
  AnswerMask mask;
  mask.valid.assign(m.vocab.size(), 0);
  mask.valid[0] = mask.valid[1] = 1;
  Tensor2 gold(1, static_cast<int>(m.vocab.size()));
  gold.at(0, 0) = 1.0;

  auto build = [&](Tape& t) {
    const ValueId logits = forward_logits(t, m, 1, "Is there a nodule?", history, "imgFD");
    return weighted_masked_bce(t, logits, gold, w, mask);
  };
  Tape t0;
  const GradSet analytic = t0.backward(build(t0));
  const auto forward = [&]() {
    Tape t;
    return t.val(build(t)).at(0, 0);
  };
  std::vector<Param*> params = m.alignment_param_list();
  auto dec = m.decoder_param_list(1);
  params.insert(params.end(), dec.begin(), dec.end());
  const FdReport rep = finite_diff_check(params, forward, analytic, {1e-5, 220, 7});
  CHECK(rep.coords_checked >= 200);
  CHECK(rep.max_rel_err < 1e-5);
}

TEST_CASE("one optimizer step on a level-2 sample leaves decoders 1 and 3 untouched") {
  Model m = tiny_model(37);
  ClassWeights w{std::vector<double>(m.vocab.size(), 1.0)};
  AnswerMask mask;
  mask.valid.assign(m.vocab.size(), 0);
  mask.valid[0] = mask.valid[1] = 1;
  Tensor2 gold(1, static_cast<int>(m.vocab.size()));
  gold.at(0, 1) = 1.0;

  std::vector<std::vector<double>> before1, before3;
  for (Param* p : m.decoder_param_list(1)) before1.push_back(p->value.data);
  for (Param* p : m.decoder_param_list(3)) before3.push_back(p->value.data);

  Tape t;
  const ValueId logits = forward_logits(t, m, 2, "Is there an opacity?", {}, "imgISO");
  const ValueId loss = weighted_masked_bce(t, logits, gold, w, mask);
  const GradSet grads = t.backward(loss);

  // gradient set contains alignment + decoder 2 only
  for (Param* p : m.decoder_param_list(1)) CHECK_FALSE(grads.contains(*p));
  for (Param* p : m.decoder_param_list(3)) CHECK_FALSE(grads.contains(*p));
  for (Param* p : m.alignment_param_list()) CHECK(grads.contains(*p));

  AdamWState st;
  st.cfg.learning_rate = 0.05;
  st.cfg.weight_decay = 0.01;
  adamw_step(m.trainable_params(), grads, st);

  size_t i = 0;
  for (Param* p : m.decoder_param_list(1)) CHECK(p->value.data == before1[i++]);
  i = 0;
  for (Param* p : m.decoder_param_list(3)) CHECK(p->value.data == before3[i++]);
  bool dec2_changed = false;
  for (Param* p : m.decoder_param_list(2))
    if (grads.contains(*p)) dec2_changed = true;
  CHECK(dec2_changed);
}

TEST_CASE("predict_answer: argmax, thresholding, tie-break, masking") {
  AnswerMask mask;
  mask.valid = {1, 1, 0, 0, 0};
  Tensor2 z(1, 5);
  z.at(0, 0) = 5.0;
  z.at(0, 1) = 1.0;
  z.at(0, 2) = 99.0;  // masked out, must never be selected
  CHECK(predict_answer(z, mask, ChoiceKind::single, 4) == std::vector<int>{0});

  // tie goes to the first valid candidate in canonical (vocabulary) order
  Tensor2 tie(1, 5);
  tie.at(0, 0) = 0.7;
  tie.at(0, 1) = 0.7;
  CHECK(predict_answer(tie, mask, ChoiceKind::single, 4) == std::vector<int>{0});

  AnswerMask l3;
  l3.valid = {0, 0, 1, 1, 1};
  Tensor2 low(1, 5);
  low.at(0, 2) = -2.0;
  low.at(0, 3) = -3.0;
  low.at(0, 4) = 9.0;  // the no-selection entry never wins by threshold
  CHECK(predict_answer(low, l3, ChoiceKind::multi, 4) == std::vector<int>{4});

  Tensor2 two(1, 5);
  two.at(0, 2) = 2.0;
  two.at(0, 3) = 1.0;
  two.at(0, 4) = 5.0;
  CHECK(predict_answer(two, l3, ChoiceKind::multi, 4) == std::vector<int>{2, 3});

  AnswerMask empty;
  empty.valid = {0, 0, 0, 0, 0};
  CHECK_THROWS_AS(predict_answer(z, empty, ChoiceKind::single, 4), std::invalid_argument);
}

TEST_CASE("ablation fusion modes produce valid logits and differ from the default") {
  Model base = tiny_model(41);
  Rng rng(42);
  const Tensor2 f_p = oracle::random_tensor(3, base.dims.d_model, rng);
  const Tensor2 v_q = oracle::random_tensor(2, base.dims.d_model, rng);

  Tape t;
  const Tensor2 cross =
      t.val(fuse_and_classify(t, t.input(f_p), t.input(v_q), base.decoders[0], base.options));

  ModelOptions swapped = base.options;
  swapped.fusion = FusionMode::text_as_query;
  const Tensor2 taq =
      t.val(fuse_and_classify(t, t.input(f_p), t.input(v_q), base.decoders[0], swapped));

  ModelOptions concat = base.options;
  concat.fusion = FusionMode::self_attention_concat;
  const Tensor2 sf =
      t.val(fuse_and_classify(t, t.input(f_p), t.input(v_q), base.decoders[0], concat));

  CHECK(cross.all_finite());
  CHECK(taq.all_finite());
  CHECK(sf.all_finite());
  CHECK(max_abs_diff(cross, taq) > 1e-9);
  CHECK(max_abs_diff(cross, sf) > 1e-9);
}
