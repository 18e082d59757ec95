#pragma once

#include <CLI11.hpp>
#include <stdexcept>

namespace vlmprobe::cli {

/// A self-check ran to completion but did not meet its tolerance.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Adds every subcommand to the application.
void register_commands(CLI::App& app);

}  // namespace vlmprobe::cli
