#pragma once

#include <string>
#include <vector>

namespace mirror::cli {

// Subcommands: synth, select-genes, pretrain, gradcheck, probe, attn, report.
// Returns 0 on success, 1 on invalid input or a failed check, 2 on any other failure.
int run(int argc, const char* const* argv);
// `args` excludes the program name.
int run(const std::vector<std::string>& args);

}  // namespace mirror::cli
