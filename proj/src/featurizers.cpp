#include "hica/featurizers.hpp"

#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hica/rng.hpp"

namespace hica {

namespace {

void check_cfg(const FeaturizerConfig& cfg) {
  if (cfg.d_model < 2) throw std::invalid_argument("featurizer: d_model must be >= 2");
  if (cfg.image_tokens < 1) throw std::invalid_argument("featurizer: image_tokens must be >= 1");
}

}  // namespace

std::string normalize_word(const std::string& word) {
  size_t lo = 0, hi = word.size();
  while (lo < hi && !std::isalnum(static_cast<unsigned char>(word[lo]))) ++lo;
  while (hi > lo && !std::isalnum(static_cast<unsigned char>(word[hi - 1]))) --hi;
  std::string out;
  out.reserve(hi - lo);
  for (size_t i = lo; i < hi; ++i)
    out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(word[i]))));
  return out;
}

TokenMatrix encode_image(const std::string& image_id, const FeaturizerConfig& cfg) {
  check_cfg(cfg);
  if (image_id.empty()) throw std::invalid_argument("encode_image: empty image id");
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  TokenMatrix out;
  out.values = Tensor2(cfg.image_tokens, cfg.d_model);
  uint64_t base = key_mix(cfg.seed, "image");
  base = key_mix(base, image_id);
  for (int t = 0; t < cfg.image_tokens; ++t) {
    const uint64_t row_key = key_mix(base, static_cast<uint64_t>(t));
    for (int j = 0; j < cfg.d_model; ++j)
      out.values.at(t, j) = scale * keyed_gauss(key_mix(row_key, static_cast<uint64_t>(j)));
  }
  return out;
}

TokenMatrix encode_text(const std::string& text, const FeaturizerConfig& cfg) {
  check_cfg(cfg);
  std::vector<std::string> words;
  std::istringstream ss(text);
  std::string w;
  while (ss >> w) {
    std::string norm = normalize_word(w);
    if (!norm.empty()) words.push_back(std::move(norm));
  }
  if (words.empty()) throw std::invalid_argument("encode_text: empty text");

  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
  const uint64_t base = key_mix(cfg.seed, "text");
  TokenMatrix out;
  out.values = Tensor2(static_cast<int>(words.size()), cfg.d_model);
  for (size_t t = 0; t < words.size(); ++t) {
    const uint64_t row_key = key_mix(base, words[t]);
    for (int j = 0; j < cfg.d_model; ++j)
      out.values.at(static_cast<int>(t), j) =
          scale * keyed_gauss(key_mix(row_key, static_cast<uint64_t>(j)));
  }
  return out;
}

std::string serialize_history(const std::vector<QaPair>& history, const std::string& question) {
  std::string out;
  for (const QaPair& qa : history) {
    out += qa.question;
    out += " <sep> ";
    out += qa.answer;
    out += " <sep> ";
  }
  out += question;
  return out;
}

Tensor2 mean_image_token(const std::string& image_id, const FeaturizerConfig& cfg) {
  const TokenMatrix tm = encode_image(image_id, cfg);
  Tensor2 mean(1, cfg.d_model);
  for (int t = 0; t < tm.tokens(); ++t)
    for (int j = 0; j < cfg.d_model; ++j) mean.at(0, j) += tm.values.at(t, j);
  for (int j = 0; j < cfg.d_model; ++j) mean.at(0, j) /= tm.tokens();
  return mean;
}

}  // namespace hica
