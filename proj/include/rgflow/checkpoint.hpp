#pragma once

#include <string>

#include "rgflow/config.hpp"
#include "rgflow/mera.hpp"
#include "rgflow/seq_data.hpp"

namespace rgflow {

constexpr const char* kCheckpointMagic = "RGFLOW-CHECKPOINT";
constexpr int kCheckpointVersion = 1;

// Layout:
//   RGFLOW-CHECKPOINT\n
//   header_bytes <N>\n
//   <N bytes of JSON: version, config (out_dir and checkpoint reset), registry with shapes, byte order,
//    creation seed, vocabulary, embedding table>
//   <parameter_count little-endian float64 values in registry order>
std::string serialize_checkpoint(const RunConfig& cfg, const MeraModel& model,
                                 const EmbeddingTable& embedding);

struct LoadedCheckpoint {
  RunConfig config;
  MeraModel model;
  EmbeddingTable embedding;
};

// DataError for a malformed file, ConfigError for an unsupported version.
LoadedCheckpoint deserialize_checkpoint(const std::string& bytes,
                                        const std::string& source = "<checkpoint>");

void save_checkpoint(const std::string& path, const RunConfig& cfg,
                     const MeraModel& model, const EmbeddingTable& embedding);
LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace rgflow
