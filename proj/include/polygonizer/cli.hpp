#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace polygonizer {

inline constexpr const char* kVersion = POLYGONIZER_VERSION;

/// Entry point for `polygonizer {generate|train|infer|eval|perturb-eval}`.
/// Returns the process exit code; errors are reported as one JSON line on `err`.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace polygonizer
