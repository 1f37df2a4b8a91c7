#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fedsim/experiment.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Federated learning simulator: FedAvg, FedProx and FedSLD on partitioned data"};
  app.set_version_flag("--version", "fedsim " + fedsim::version());
  app.require_subcommand(1);

  std::string config;
  std::string out;
  bool overwrite = false;
  int workers = 1;
  bool quiet = false;

  auto* run = app.add_subcommand("run", "Run every (algorithm, seed) pair of a config");
  run->add_option("config", config, "Experiment config (JSON)")->required();
  run->add_option("--out", out, "Output directory (overrides output_dir)");
  run->add_flag("--overwrite", overwrite, "Replace artifacts of an earlier run");
  run->add_option("--workers", workers, "Client update threads")->check(CLI::Range(1, 1024));
  run->add_flag("-q,--quiet", quiet, "No progress lines");

  auto* describe = app.add_subcommand("describe", "Write partition.csv without training");
  describe->add_option("config", config, "Experiment config (JSON)")->required();
  describe->add_option("--out", out, "Output directory (overrides output_dir)");
  describe->add_flag("--overwrite", overwrite, "Replace an existing partition.csv");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  fedsim::RunOptions options;
  if (!out.empty()) options.out = out;
  options.overwrite = overwrite;
  options.workers = workers;
  if (!quiet) options.log = &std::cerr;

  if (*run) return fedsim::run_command(config, options, std::cerr);
  return fedsim::describe_command(config, options, std::cerr);
}
