#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "json.hpp"
#include "volab/model.hpp"
#include "volab/phantom.hpp"
#include "volab/training.hpp"

namespace volab {

struct DatasetBlock {
  std::filesystem::path dir;                 // holds manifest.csv
  std::optional<PhantomDatasetSpec> phantom;  // generated into dir when the manifest is missing
};

struct AnalysisBlock {
  std::vector<std::string> instruments;  // erf, attn, cka
  std::vector<std::string> stages;       // empty: the instrument's default
  std::size_t k = 5;
  std::size_t inputs = 0;  // 0: every test record of the checkpoint's fold
};

struct ExperimentConfig {
  std::string name;
  std::uint64_t seed = 0;
  DatasetBlock dataset;
  ModelConfig model;
  TrainConfig train;
  CvOptions cv;
  AnalysisBlock analysis;
  std::filesystem::path output;
};

// Relative paths are resolved against `base_dir`. "seed" is required; the
// train block starts from "preset": "desk" | "paper" (default paper) and
// overrides individual keys.
ExperimentConfig experiment_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
nlohmann::json experiment_to_json(const ExperimentConfig& cfg);
ExperimentConfig load_experiment(const std::filesystem::path& path);

// File layouts and CSV headers written by the commands; printed by --help.
const std::string& cli_schemas();

// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace volab
