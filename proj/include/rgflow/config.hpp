#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "rgflow/escape.hpp"
#include "rgflow/mera.hpp"
#include "rgflow/objective.hpp"
#include "rgflow/seq_data.hpp"

namespace rgflow {

// Everything a command needs, as one flat JSON object. Empty paths mean
// "not given"; an empty embedding selects the fallback table.
struct RunConfig {
  std::string data;
  std::string data_format = "fasta";
  std::size_t window_offset = 0;
  std::string embedding;
  std::string vocabulary = Vocabulary::kDefaultSymbols;
  MeraConfig model;
  TrainConfig train;  // train.noise_sigma defaults to 0.05 here
  std::string labels;
  std::string checkpoint;
  std::string out_dir = ".";
  bool record_wall_time = false;
  std::size_t count = 10;  // samples drawn by the sample command
  std::string grammaticality = "joint";  // or "conditional"

  RunConfig() { train.noise_sigma = 0.05; }

  // Throws ConfigError naming the offending key.
  void validate() const;
};

// Unknown keys and mistyped values are ConfigErrors. Missing keys keep
// their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig parse_run_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_run_config(const std::string& path);

// Every key, defaults filled.
nlohmann::json run_config_to_json(const RunConfig& cfg);
std::string dump_run_config(const RunConfig& cfg);

}  // namespace rgflow
