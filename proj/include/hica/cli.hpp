#pragma once

namespace hica {

// Entry point for the hica tool: gen-data | train | eval | gradcheck |
// inspect. Returns 0 on success, 1 on validation failure, 2 on usage
// errors.
int run_cli(int argc, const char* const* argv);

}  // namespace hica
