#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "rgflow/config.hpp"

namespace rgflow {

// Command-line overrides. Each maps onto a RunConfig key.
struct CommandOptions {
  std::string config;      // JSON file
  std::string checkpoint;  // checkpoint
  std::string data;        // data
  std::string embedding;   // embedding
  std::string labels;      // labels
  std::string out;         // out_dir
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> count;
  bool no_noise = false;   // noise_sigma = 0
};

enum ExitCode { kExitOk = 0, kExitConfig = 1, kExitData = 2, kExitNumeric = 3 };

// Each writes <out_dir>/<command>_config.json with the resolved config.
// train:           checkpoint.rgf, best.rgf, train_log.csv
// sample:          samples.csv
// loglik:          loglik.csv
// encode:          latents.csv
// score-mutations: escape_report.csv
void cmd_train(const CommandOptions& opt);
void cmd_sample(const CommandOptions& opt);
void cmd_loglik(const CommandOptions& opt);
void cmd_encode(const CommandOptions& opt);
void cmd_score_mutations(const CommandOptions& opt);

// Dispatches by name and maps exceptions to exit codes, reporting on `err`.
int run_command(const std::string& name, const CommandOptions& opt, std::ostream& err);

}  // namespace rgflow
