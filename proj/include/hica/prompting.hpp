#pragma once

#include <array>
#include <string>

namespace hica {

// Level-indexed prompt strings. Defaults are the three hierarchical
// prompts; they are configuration so ablations are a config edit.
struct PromptTable {
  std::array<std::string, 3> by_level;
};

PromptTable default_prompts();

const std::string& prompt_for_level(int level, const PromptTable& table);

}  // namespace hica
