#include "hica/model.hpp"

#include <cmath>
#include <stdexcept>

#include "hica/rng.hpp"

namespace hica {

namespace {

Tensor2 xavier_uniform(int rows, int cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / (rows + cols));
  Tensor2 t(rows, cols);
  for (double& v : t.data) v = rng.uniform(-limit, limit);
  return t;
}

AttentionParams init_attention(const std::string& prefix, const ModelDims& dims, Rng& rng) {
  AttentionParams p;
  p.heads = dims.heads;
  p.d_k = dims.d_k();
  for (int h = 0; h < dims.heads; ++h) {
    const std::string hp = prefix + ".h" + std::to_string(h);
    p.w_q.emplace_back(hp + ".wq", xavier_uniform(dims.d_model, p.d_k, rng));
    p.w_k.emplace_back(hp + ".wk", xavier_uniform(dims.d_model, p.d_k, rng));
    p.w_v.emplace_back(hp + ".wv", xavier_uniform(dims.d_model, p.d_k, rng));
  }
  p.w_o = Param(prefix + ".wo", xavier_uniform(dims.heads * p.d_k, dims.d_model, rng));
  return p;
}

LayerNormParams init_ln(const std::string& prefix, int d) {
  return LayerNormParams{Param(prefix + ".gain", Tensor2::full(1, d, 1.0)),
                         Param(prefix + ".bias", Tensor2(1, d))};
}

FfnParams init_ffn(const std::string& prefix, const ModelDims& dims, Rng& rng) {
  FfnParams p;
  p.hidden = dims.ffn_hidden;
  p.w1 = Param(prefix + ".w1", xavier_uniform(dims.d_model, dims.ffn_hidden, rng));
  p.b1 = Param(prefix + ".b1", Tensor2(1, dims.ffn_hidden));
  p.w2 = Param(prefix + ".w2", xavier_uniform(dims.ffn_hidden, dims.d_model, rng));
  p.b2 = Param(prefix + ".b2", Tensor2(1, dims.d_model));
  return p;
}

BlockParams init_block(const std::string& prefix, const ModelDims& dims, Rng& rng) {
  BlockParams b;
  b.attn = init_attention(prefix + ".attn", dims, rng);
  b.ln_attn = init_ln(prefix + ".ln_attn", dims.d_model);
  b.ffn = init_ffn(prefix + ".ffn", dims, rng);
  b.ln_ffn = init_ln(prefix + ".ln_ffn", dims.d_model);
  return b;
}

void collect_block(BlockParams& b, std::vector<Param*>& out) {
  for (auto& p : b.attn.w_q) out.push_back(&p);
  for (auto& p : b.attn.w_k) out.push_back(&p);
  for (auto& p : b.attn.w_v) out.push_back(&p);
  out.push_back(&b.attn.w_o);
  out.push_back(&b.ln_attn.gain);
  out.push_back(&b.ln_attn.bias);
  out.push_back(&b.ffn.w1);
  out.push_back(&b.ffn.b1);
  out.push_back(&b.ffn.w2);
  out.push_back(&b.ffn.b2);
  out.push_back(&b.ln_ffn.gain);
  out.push_back(&b.ln_ffn.bias);
}

}  // namespace

std::vector<Param*> Model::alignment_param_list() {
  std::vector<Param*> out;
  collect_block(alignment.layer1, out);
  collect_block(alignment.layer2, out);
  return out;
}

std::vector<Param*> Model::decoder_param_list(int level) {
  if (level < 1 || level > 3)
    throw std::invalid_argument("decoder_param_list: level " + std::to_string(level));
  std::vector<Param*> out;
  DecoderParams& d = decoders[static_cast<size_t>(level - 1)];
  for (BlockParams& b : d.blocks) collect_block(b, out);
  out.push_back(&d.cls_w);
  out.push_back(&d.cls_b);
  return out;
}

std::vector<Param*> Model::trainable_params() {
  std::vector<Param*> out = alignment_param_list();
  for (int level = 1; level <= 3; ++level) {
    auto dec = decoder_param_list(level);
    out.insert(out.end(), dec.begin(), dec.end());
  }
  return out;
}

int Model::vocab_index(const std::string& candidate) const {
  for (size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == candidate) return static_cast<int>(i);
  return -1;
}

Model init_model(const ModelDims& dims, const FeaturizerConfig& feat, const PromptTable& prompts,
                 const ModelOptions& options, const std::vector<std::string>& vocab,
                 uint64_t seed) {
  if (dims.d_model < 2 || dims.heads < 1 || dims.d_model % dims.heads != 0)
    throw std::invalid_argument("init_model: d_model " + std::to_string(dims.d_model) +
                                " must be a positive multiple of heads " +
                                std::to_string(dims.heads));
  if (dims.ffn_hidden < 1 || dims.decoder_depth < 1)
    throw std::invalid_argument("init_model: ffn_hidden and decoder_depth must be >= 1");
  if (vocab.empty()) throw std::invalid_argument("init_model: empty answer vocabulary");
  if (feat.d_model != dims.d_model)
    throw std::invalid_argument("init_model: featurizer width " + std::to_string(feat.d_model) +
                                " != d_model " + std::to_string(dims.d_model));

  Model m;
  m.dims = dims;
  m.feat = feat;
  m.prompts = prompts;
  m.options = options;
  m.vocab = vocab;
  for (size_t i = 0; i < vocab.size(); ++i)
    if (vocab[i] == "no selection") m.no_selection_index = static_cast<int>(i);

  Rng rng(key_mix(seed, "model-init"));
  m.alignment.layer1 = init_block("align.l1", dims, rng);
  m.alignment.layer2 = init_block("align.l2", dims, rng);
  const int vsize = static_cast<int>(vocab.size());
  for (int d = 0; d < 3; ++d) {
    DecoderParams& dec = m.decoders[static_cast<size_t>(d)];
    const std::string prefix = "dec" + std::to_string(d + 1);
    for (int b = 0; b < dims.decoder_depth; ++b)
      dec.blocks.push_back(init_block(prefix + ".b" + std::to_string(b), dims, rng));
    dec.cls_w = Param(prefix + ".cls.w", xavier_uniform(dims.d_model, vsize, rng));
    dec.cls_b = Param(prefix + ".cls.b", Tensor2(1, vsize));
  }
  return m;
}

ValueId multi_head_attention(Tape& tape, ValueId query_in, ValueId kv_in, AttentionParams& p,
                             AttentionTrace* trace) {
  const Tensor2& qv = tape.val(query_in);
  const Tensor2& kv = tape.val(kv_in);
  if (qv.cols != kv.cols)
    throw std::invalid_argument("multi_head_attention: query width " + qv.shape_str() +
                                " vs key/value width " + kv.shape_str());
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(p.d_k));
  std::vector<ValueId> contexts;
  contexts.reserve(static_cast<size_t>(p.heads));
  for (int h = 0; h < p.heads; ++h) {
    const ValueId q = tape.matmul(query_in, tape.param(p.w_q[static_cast<size_t>(h)]));
    const ValueId k = tape.matmul(kv_in, tape.param(p.w_k[static_cast<size_t>(h)]));
    const ValueId v = tape.matmul(kv_in, tape.param(p.w_v[static_cast<size_t>(h)]));
    const ValueId scores = tape.softmax_rows(tape.scale(tape.matmul_nt(q, k), inv_sqrt_dk));
    const ValueId ctx = tape.matmul(scores, v);
    if (trace != nullptr) {
      trace->scores.push_back(tape.val(scores));
      trace->context.push_back(tape.val(ctx));
    }
    contexts.push_back(ctx);
  }
  const ValueId merged = p.heads == 1 ? contexts[0] : tape.concat_cols(contexts);
  return tape.matmul(merged, tape.param(p.w_o));
}

ValueId ffn(Tape& tape, ValueId x, FfnParams& p) {
  const ValueId h =
      tape.gelu(tape.add_row(tape.matmul(x, tape.param(p.w1)), tape.param(p.b1)));
  return tape.add_row(tape.matmul(h, tape.param(p.w2)), tape.param(p.b2));
}

ValueId transformer_block(Tape& tape, ValueId q_in, ValueId kv_in, BlockParams& p,
                          AttentionTrace* trace) {
  const ValueId attn_out = multi_head_attention(tape, q_in, kv_in, p.attn, trace);
  const ValueId x = tape.layer_norm(tape.add(q_in, attn_out), tape.param(p.ln_attn.gain),
                                    tape.param(p.ln_attn.bias), kLayerNormEps);
  const ValueId f = ffn(tape, x, p.ffn);
  return tape.layer_norm(tape.add(x, f), tape.param(p.ln_ffn.gain), tape.param(p.ln_ffn.bias),
                         kLayerNormEps);
}

ValueId align(Tape& tape, ValueId v_i, ValueId v_p, AlignmentParams& p) {
  const ValueId first = transformer_block(tape, v_i, v_p, p.layer1);
  // layer 2: fresh queries, original prompt features as key/value
  return transformer_block(tape, first, v_p, p.layer2);
}

DecoderParams& select_decoder(int level, Model& model) {
  if (level < 1 || level > 3)
    throw std::invalid_argument("select_decoder: level " + std::to_string(level) +
                                " out of range 1..3");
  const int idx = model.options.shared_decoder ? 0 : level - 1;
  return model.decoders[static_cast<size_t>(idx)];
}

ValueId fuse_and_classify(Tape& tape, ValueId f_p, ValueId v_q, DecoderParams& d,
                          const ModelOptions& options, AttentionTrace* trace) {
  ValueId x;
  switch (options.fusion) {
    case FusionMode::cross_attention:
      x = f_p;
      for (BlockParams& b : d.blocks) x = transformer_block(tape, x, v_q, b, trace);
      break;
    case FusionMode::text_as_query:
      x = v_q;
      for (BlockParams& b : d.blocks) x = transformer_block(tape, x, f_p, b, trace);
      break;
    case FusionMode::self_attention_concat:
      x = tape.concat_rows({f_p, v_q});
      for (BlockParams& b : d.blocks) x = transformer_block(tape, x, x, b, trace);
      break;
    default:
      throw std::invalid_argument("fuse_and_classify: unknown fusion mode");
  }
  const ValueId pooled = tape.mean_rows(x);
  return tape.add_row(tape.matmul(pooled, tape.param(d.cls_w)), tape.param(d.cls_b));
}

std::string effective_prompt(const Model& model, int level, const PromptTable& prompts) {
  return model.options.use_prompts ? prompt_for_level(level, prompts) : "none";
}

ValueId forward_logits_with_prompt(Tape& tape, Model& model, int level,
                                   const std::string& prompt, const std::string& question,
                                   const std::vector<QaPair>& history,
                                   const std::string& image_id, AttentionTrace* trace) {
  const std::string text =
      model.options.use_history ? serialize_history(history, question) : question;
  const ValueId v_q = tape.input(encode_text(text, model.feat).values);
  const ValueId v_i = tape.input(encode_image(image_id, model.feat).values);
  ValueId f_p = v_i;
  if (model.options.use_alignment) {
    const ValueId v_p = tape.input(encode_text(prompt, model.feat).values);
    f_p = align(tape, v_i, v_p, model.alignment);
  }
  return fuse_and_classify(tape, f_p, v_q, select_decoder(level, model), model.options, trace);
}

ValueId forward_logits(Tape& tape, Model& model, int level, const std::string& question,
                       const std::vector<QaPair>& history, const std::string& image_id,
                       AttentionTrace* trace) {
  return forward_logits_with_prompt(tape, model, level,
                                    effective_prompt(model, level, model.prompts), question,
                                    history, image_id, trace);
}

std::vector<int> predict_answer(const Tensor2& logits, const AnswerMask& mask, ChoiceKind kind,
                                int no_selection_index, double threshold) {
  if (logits.rows != 1 || logits.cols != static_cast<int>(mask.valid.size()))
    throw std::invalid_argument("predict_answer: logits " + logits.shape_str() + " vs mask of " +
                                std::to_string(mask.valid.size()));
  if (mask.count() == 0) throw std::invalid_argument("predict_answer: all-invalid mask");

  if (kind == ChoiceKind::single) {
    int best = -1;
    for (int c = 0; c < logits.cols; ++c) {
      if (!mask.valid[static_cast<size_t>(c)]) continue;
      if (best == -1 || logits.at(0, c) > logits.at(0, best)) best = c;  // ties keep lowest index
    }
    return {best};
  }

  std::vector<int> selected;
  for (int c = 0; c < logits.cols; ++c) {
    if (!mask.valid[static_cast<size_t>(c)] || c == no_selection_index) continue;
    // sigmoid(z) > threshold  <=>  z > logit(threshold)
    const double cutoff = std::log(threshold / (1.0 - threshold));
    if (logits.at(0, c) > cutoff) selected.push_back(c);
  }
  if (selected.empty() && no_selection_index >= 0 &&
      mask.valid[static_cast<size_t>(no_selection_index)])
    selected.push_back(no_selection_index);
  return selected;
}

}  // namespace hica
