#pragma once

#include <exception>
#include <filesystem>
#include <string>
#include <vector>

#include "sprout/config.hpp"

namespace sprout {

const std::vector<std::string>& commands();

std::string version();

/// Runs one command and returns the files it wrote, relative to the output
/// directory, in write order. The resolved config is always among them.
std::vector<std::filesystem::path> run_command(const std::string& command, const ExperimentConfig& config);

/// 2 config, 3 data or shape, 4 numeric, 1 anything else.
int exit_code(const std::exception& e);

/// Single line: error kind=<kind> code=<n> message="<text>".
std::string error_line(const std::exception& e);

/// The module combinations of the ablation, in report order, as
/// (row name, train.mode, train.stages).
struct AblationRow {
  std::string name;
  std::string mode;
  std::string stages;
};
const std::vector<AblationRow>& ablation_rows();

}  // namespace sprout
