#include "hica/prompting.hpp"

#include <stdexcept>

namespace hica {

PromptTable default_prompts() {
  return PromptTable{{
      "Focus on the global image",
      "Focus on different organs in the image",
      "pay attention to the density difference between the lesion and the surrounding tissue",
  }};
}

const std::string& prompt_for_level(int level, const PromptTable& table) {
  if (level < 1 || level > 3)
    throw std::invalid_argument("prompt_for_level: level " + std::to_string(level) +
                                " out of range 1..3");
  const std::string& p = table.by_level[static_cast<size_t>(level - 1)];
  if (p.empty()) throw std::invalid_argument("prompt_for_level: empty prompt configured");
  return p;
}

}  // namespace hica
