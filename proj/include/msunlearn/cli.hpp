#pragma once

#include <filesystem>
#include <iosfwd>

#include "msunlearn/core.hpp"

namespace msu::cli {

/// Exit codes of every subcommand.
inline constexpr int kOk = 0;
inline constexpr int kRuntimeError = 1;
inline constexpr int kUsageError = 2;

/// Entry point behind the `msunlearn` executable. Output goes to `out`,
/// diagnostics to `err`.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Small configuration the recipe uses when no --config is given: depth 4,
/// 32^3 patches, 4 base channels.
RunConfig recipe_config(std::uint64_t seed);

}  // namespace msu::cli
