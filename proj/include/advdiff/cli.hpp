#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace advdiff {

inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitRuntime = 2;

// Subcommands: attack, baseline, defend, evaluate, train-denoiser,
// train-classifier, gen-data, report. `args` excludes the program name.
int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

int cli_main(int argc, char** argv);

}  // namespace advdiff
