#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsim/data.hpp"
#include "fedsim/fed.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/nn.hpp"
#include "fedsim/partition.hpp"

namespace fedsim {

std::string version();

// Invalid or inconsistent configuration; `field` is the dotted path.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& message)
      : std::runtime_error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

struct DatasetSource {
  enum class Kind { synthetic, idx };
  Kind kind = Kind::synthetic;
  BlobSpec blobs;
  // idx: a single set that is split, or explicit train/test file pairs.
  std::string images, labels, test_images, test_labels;
  int num_classes = 0;
};

struct SplitConfig {
  double test_fraction = 0.2;
  std::uint64_t seed = 0;
};

struct ExperimentConfig {
  std::string name;
  DatasetSource dataset;
  SplitConfig split;
  PartitionPlan partition;
  std::vector<std::size_t> input_shape;  // empty: (num_features)
  std::vector<Layer> layers;             // empty: softmax regression
  FederationConfig federation;           // algorithm and seed vary per run
  std::vector<Algorithm> algorithms;
  std::vector<std::uint64_t> seeds;
  bool bmcta_weighted = false;
  std::size_t kde_grid_points = kDefaultGridPoints;
  std::string output_dir;
};

// Parses and validates; unknown keys are rejected. Throws ConfigError.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

// Fully resolved form: every default written out. Parses back to an
// equivalent config.
nlohmann::json to_json(const ExperimentConfig& config);

// Data loaded, split, partitioned and counted; the model checked against it.
struct PreparedExperiment {
  Dataset train;
  Dataset test;
  std::vector<ClientShard> shards;
  ClientLabelCounts counts;
  ModelSpec model;
};

PreparedExperiment prepare(const ExperimentConfig& config);

struct RunOptions {
  std::optional<std::filesystem::path> out;
  bool overwrite = false;
  int workers = 1;
  std::ostream* log = nullptr;
};

// Resolves the output directory: --out verbatim, otherwise config.output_dir,
// placed under $FEDSIM_OUTPUT_ROOT when that is set and the path is relative.
std::filesystem::path resolve_output_dir(const ExperimentConfig& config, const RunOptions& options);

// Throwing forms. Existing artifacts are never overwritten without
// options.overwrite.
void run_experiment(const ExperimentConfig& config, const RunOptions& options);
void describe_partition(const ExperimentConfig& config, const RunOptions& options);

// Command forms: 0 success, 2 invalid configuration, 1 any other failure.
// Diagnostics go to `err`.
int run_command(const std::filesystem::path& config_path, const RunOptions& options,
                std::ostream& err);
int describe_command(const std::filesystem::path& config_path, const RunOptions& options,
                     std::ostream& err);

}  // namespace fedsim
