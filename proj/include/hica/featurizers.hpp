#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "hica/tensor.hpp"

namespace hica {

// Deterministic stand-ins for the frozen pretrained image/text encoders.
// Same (config, input) always yields bitwise-identical features; there is
// no trainable state anywhere in this module.
struct FeaturizerConfig {
  int d_model = 64;
  int image_tokens = 16;
  uint64_t seed = 1001;
};

struct TokenMatrix {
  Tensor2 values;  // tokens x d_model
  int tokens() const { return values.rows; }
  int width() const { return values.cols; }
};

struct QaPair {
  std::string question;
  std::string answer;
};

// image_tokens rows of keyed gaussians, entries ~ N(0, 1/d_model) so
// attention logits start O(1). image_tokens = 1 reproduces the pooled
// single-vector reading of the encoder contract.
TokenMatrix encode_image(const std::string& image_id, const FeaturizerConfig& cfg);

// One row per whitespace token; rows are keyed by the normalized word, so
// a shared word yields the same row in any text.
TokenMatrix encode_text(const std::string& text, const FeaturizerConfig& cfg);

// lowercased, stripped of leading/trailing non-alphanumerics
std::string normalize_word(const std::string& word);

// "q1 <sep> a1 <sep> q2 <sep> a2 <sep> question"
std::string serialize_history(const std::vector<QaPair>& history, const std::string& question);

// Mean over image token rows; the carrier of the planted synthetic rule.
Tensor2 mean_image_token(const std::string& image_id, const FeaturizerConfig& cfg);

}  // namespace hica
