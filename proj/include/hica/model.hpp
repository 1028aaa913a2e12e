#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "hica/featurizers.hpp"
#include "hica/objective.hpp"
#include "hica/prompting.hpp"
#include "hica/tape.hpp"

namespace hica {

constexpr double kLayerNormEps = 1e-5;

// Per-head projection matrices (d_model x d_k each) plus the output
// projection (heads*d_k x d_model). No biases, matching Q = X W_Q form.
struct AttentionParams {
  std::vector<Param> w_q, w_k, w_v;
  Param w_o;
  int heads = 0;
  int d_k = 0;
};

// Row-stochastic score matrices and pre-projection per-head contexts,
// returned for inspection and tests.
struct AttentionTrace {
  std::vector<Tensor2> scores;
  std::vector<Tensor2> context;
};

struct LayerNormParams {
  Param gain, bias;  // each 1 x d_model
};

struct FfnParams {
  Param w1, b1, w2, b2;
  int hidden = 0;
};

// Post-norm transformer block: x = LN(q + attn(q, kv)); out = LN(x + ffn(x)).
struct BlockParams {
  AttentionParams attn;
  LayerNormParams ln_attn;
  FfnParams ffn;
  LayerNormParams ln_ffn;
};

// Two stacked cross-attention blocks; layer 2 keys/values come from the
// original prompt features, not from layer-1 output.
struct AlignmentParams {
  BlockParams layer1, layer2;
};

struct DecoderParams {
  std::vector<BlockParams> blocks;
  Param cls_w, cls_b;  // pooled d_model -> answer vocabulary
};

enum class FusionMode { cross_attention, self_attention_concat, text_as_query };

struct ModelOptions {
  bool use_alignment = true;
  bool use_history = true;
  bool use_prompts = true;
  bool shared_decoder = false;
  FusionMode fusion = FusionMode::cross_attention;
};

struct ModelDims {
  int d_model = 64;
  int heads = 4;
  int ffn_hidden = 128;
  int decoder_depth = 1;
  int d_k() const { return d_model / heads; }
};

struct Model {
  ModelDims dims;
  FeaturizerConfig feat;
  PromptTable prompts;
  ModelOptions options;
  std::vector<std::string> vocab;
  int no_selection_index = -1;  // -1 when the vocabulary has no such entry
  AlignmentParams alignment;
  std::array<DecoderParams, 3> decoders;

  std::vector<Param*> trainable_params();
  std::vector<Param*> alignment_param_list();
  std::vector<Param*> decoder_param_list(int level);
  int vocab_index(const std::string& candidate) const;  // -1 if absent
};

// Xavier-uniform matrices, unit gains, zero biases; parameter registration
// order is fixed so the same seed reproduces the same model bitwise.
Model init_model(const ModelDims& dims, const FeaturizerConfig& feat, const PromptTable& prompts,
                 const ModelOptions& options, const std::vector<std::string>& vocab,
                 uint64_t seed);

// softmax(Q K^T / sqrt(d_k)) V per head, heads concatenated then projected.
ValueId multi_head_attention(Tape& tape, ValueId query_in, ValueId kv_in, AttentionParams& p,
                             AttentionTrace* trace = nullptr);

// Two affine layers with GELU between.
ValueId ffn(Tape& tape, ValueId x, FfnParams& p);

ValueId transformer_block(Tape& tape, ValueId q_in, ValueId kv_in, BlockParams& p,
                          AttentionTrace* trace = nullptr);

// Image-prompt alignment (image tokens as queries throughout).
ValueId align(Tape& tape, ValueId v_i, ValueId v_p, AlignmentParams& p);

// The level's dedicated decoder (level-1 decoder for every level when the
// shared-decoder ablation is on).
DecoderParams& select_decoder(int level, Model& model);

// Cross-attention fusion (queries from the aligned image-prompt features,
// keys/values from the question), FFN/residual/layer-norm stack, mean pool,
// affine classifier. No positional embeddings anywhere.
ValueId fuse_and_classify(Tape& tape, ValueId f_p, ValueId v_q, DecoderParams& d,
                          const ModelOptions& options, AttentionTrace* trace = nullptr);

// The prompt actually fed to the encoder for a level ("none" when the
// prompts ablation is off).
std::string effective_prompt(const Model& model, int level, const PromptTable& prompts);

// Full forward for one question: encode, align, route, classify.
ValueId forward_logits(Tape& tape, Model& model, int level, const std::string& question,
                       const std::vector<QaPair>& history, const std::string& image_id,
                       AttentionTrace* trace = nullptr);

// Same, with the prompt text supplied by the caller (inference passes a
// possibly overridden prompt table).
ValueId forward_logits_with_prompt(Tape& tape, Model& model, int level,
                                   const std::string& prompt, const std::string& question,
                                   const std::vector<QaPair>& history,
                                   const std::string& image_id,
                                   AttentionTrace* trace = nullptr);

// single: arg-max over mask-valid entries (ties -> lowest vocabulary index).
// multi: valid entries with sigmoid > threshold, except the no-selection
// entry, which is the fallback when nothing else clears the bar.
std::vector<int> predict_answer(const Tensor2& logits, const AnswerMask& mask, ChoiceKind kind,
                                int no_selection_index, double threshold = 0.5);

}  // namespace hica
