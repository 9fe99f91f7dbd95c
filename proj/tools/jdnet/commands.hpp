#pragma once

#include <iosfwd>

namespace jdnet::cli {

enum ExitCode : int {
  kSuccess = 0,
  kUsageError = 2,
  kDataError = 3,
  kNumericalError = 4,
};

/// Entry point of the `jdnet` tool: train, eval, derain, gradcheck, synth.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run(int argc, const char* const* argv);

}  // namespace jdnet::cli
