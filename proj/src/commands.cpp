#include "rgflow/commands.hpp"

#include <filesystem>
#include <limits>
#include <ostream>
#include <sstream>

#include "rgflow/checkpoint.hpp"
#include "rgflow/csv.hpp"
#include "rgflow/errors.hpp"
#include "rgflow/escape.hpp"
#include "rgflow/objective.hpp"

namespace rgflow {

using nlohmann::json;

namespace {

void overlay_flags(json& j, const CommandOptions& opt) {
  if (!opt.checkpoint.empty()) j["checkpoint"] = opt.checkpoint;
  if (!opt.data.empty()) j["data"] = opt.data;
  if (!opt.embedding.empty()) j["embedding"] = opt.embedding;
  if (!opt.labels.empty()) j["labels"] = opt.labels;
  if (!opt.out.empty()) j["out_dir"] = opt.out;
  if (opt.seed) j["seed"] = *opt.seed;
  if (opt.count) j["count"] = *opt.count;
  if (opt.no_noise) j["noise_sigma"] = 0.0;
}

json user_json(const CommandOptions& opt) {
  json j = json::object();
  if (!opt.config.empty()) j = run_config_to_json(load_run_config(opt.config));
  return j;
}

std::string out_path(const RunConfig& cfg, const std::string& name) {
  return (std::filesystem::path(cfg.out_dir) / name).string();
}

void prepare_out_dir(const RunConfig& cfg, const std::string& command) {
  std::error_code ec;
  std::filesystem::create_directories(cfg.out_dir, ec);
  if (ec) throw DataError("cannot create output directory " + cfg.out_dir + ": " + ec.message());
  write_file_atomic(out_path(cfg, command + "_config.json"), dump_run_config(cfg));
}

EmbeddingTable resolve_embedding(const RunConfig& cfg, const Vocabulary& vocab) {
  EmbeddingTable t = cfg.embedding.empty() ? fallback_embedding(vocab, cfg.model.embed_dim)
                                           : load_embedding(cfg.embedding, vocab);
  if (t.dim() != cfg.model.embed_dim) {
    throw DataError("embedding " + cfg.embedding + " has dimension " + std::to_string(t.dim()) +
                    ", config embed_dim is " + std::to_string(cfg.model.embed_dim));
  }
  return t;
}

SequenceDataset load_data(const RunConfig& cfg, const Vocabulary& vocab,
                          const std::string& command) {
  if (cfg.data.empty()) {
    throw ConfigError("config key 'data': required by " + command);
  }
  return load_sequences(cfg.data, parse_seq_format(cfg.data_format), vocab,
                        cfg.window_offset, cfg.model.seq_len);
}

// Checkpoint config overlaid with the user's config file and flags. Keys
// that define the model must agree with the checkpoint.
struct Resolved {
  RunConfig cfg;
  LoadedCheckpoint ckpt;
};

Resolved resolve_from_checkpoint(const CommandOptions& opt, const std::string& command) {
  json user = json::object();
  if (!opt.config.empty()) {
    // Only keys present in the file override the checkpoint.
    json raw;
    try {
      raw = json::parse(read_file(opt.config));
    } catch (const json::parse_error& e) {
      throw ConfigError(opt.config + ": " + e.what());
    } catch (const DataError&) {
      throw ConfigError("cannot read config file " + opt.config);
    }
    run_config_from_json(raw);
    user = raw;
  }
  overlay_flags(user, opt);
  if (!user.contains("checkpoint") || user["checkpoint"].get<std::string>().empty()) {
    throw ConfigError("config key 'checkpoint': required by " + command);
  }
  LoadedCheckpoint ckpt = load_checkpoint(user["checkpoint"].get<std::string>());
  json merged = run_config_to_json(ckpt.config);
  static const char* kModelKeys[] = {"seq_len", "embed_dim", "kernel", "steps",
                                     "hidden_width", "num_layers", "position_dependent",
                                     "vocabulary", "embedding"};
  for (const char* k : kModelKeys) {
    if (user.contains(k) && user[k] != merged[k]) {
      throw ConfigError(std::string("config key '") + k + "' disagrees with checkpoint " +
                        user["checkpoint"].get<std::string>());
    }
  }
  for (const auto& [k, v] : user.items()) merged[k] = v;
  RunConfig cfg = run_config_from_json(merged);
  return {std::move(cfg), std::move(ckpt)};
}

// Dequantization with a fixed per-command sub-seed, so reruns agree.
void fields_noise(const RunConfig& cfg, std::vector<Tensor>& fields,
                  const std::string& label) {
  if (cfg.train.noise_sigma == 0.0) return;
  Rng rng(sub_seed(cfg.train.seed, label));
  for (auto& f : fields) f = dequantize(f, cfg.train.noise_sigma, rng);
}

}  // namespace

void cmd_train(const CommandOptions& opt) {
  json j = user_json(opt);
  overlay_flags(j, opt);
  const RunConfig cfg = run_config_from_json(j);
  const Vocabulary vocab(cfg.vocabulary);
  const SequenceDataset data = load_data(cfg, vocab, "train");
  const EmbeddingTable table = resolve_embedding(cfg, vocab);
  const std::vector<Tensor> fields = embed(data, table);
  prepare_out_dir(cfg, "train");

  MeraModel model(cfg.model);
  Rng init(sub_seed(cfg.train.seed, "init"));
  model.init_weights(init);

  const std::string ckpt_path = out_path(cfg, "checkpoint.rgf");
  const std::string best_path = out_path(cfg, "best.rgf");
  const std::string log_path = out_path(cfg, "train_log.csv");
  std::ostringstream log;
  write_csv_row(log, {"epoch", "mean_loss", "mean_norm_logprob", "seconds"});
  write_file_atomic(log_path, log.str());
  double best = std::numeric_limits<double>::infinity();

  auto on_epoch = [&](const EpochStats& s, const MeraModel& m) {
    write_csv_row(log, {std::to_string(s.epoch), format_double(s.mean_loss),
                        format_double(s.mean_norm_logprob),
                        format_double(cfg.record_wall_time ? s.seconds : 0.0)});
    write_file_atomic(log_path, log.str());
    const std::string bytes = serialize_checkpoint(cfg, m, table);
    write_file_atomic(ckpt_path, bytes);
    if (s.mean_loss < best) {
      best = s.mean_loss;
      write_file_atomic(best_path, bytes);
    }
  };
  try {
    train(model, fields, cfg.train, on_epoch);
  } catch (const DivergenceError&) {
    save_checkpoint(ckpt_path, cfg, model, table);
    throw;
  }
  save_checkpoint(ckpt_path, cfg, model, table);
  if (cfg.train.epochs == 0) save_checkpoint(best_path, cfg, model, table);
}

void cmd_sample(const CommandOptions& opt) {
  const auto [cfg, ckpt] = resolve_from_checkpoint(opt, "sample");
  prepare_out_dir(cfg, "sample");
  const Vocabulary vocab(cfg.vocabulary);
  Rng rng(sub_seed(cfg.train.seed, "sample"));
  const auto samples = sample(ckpt.model, rng, cfg.count);

  std::ostringstream os;
  std::vector<std::string> header = {"sample_id", "sequence"};
  for (std::size_t i = 0; i < cfg.model.seq_len; ++i)
    for (std::size_t c = 0; c < cfg.model.embed_dim; ++c)
      header.push_back("phi_" + std::to_string(i) + "_" + std::to_string(c));
  write_csv_row(os, header);
  for (std::size_t s = 0; s < samples.size(); ++s) {
    std::vector<std::string> row = {
        std::to_string(s), decode_tokens(decode_nearest(samples[s], ckpt.embedding), vocab)};
    for (double v : samples[s].data()) row.push_back(format_double(v));
    write_csv_row(os, row);
  }
  write_file_atomic(out_path(cfg, "samples.csv"), os.str());
}

void cmd_loglik(const CommandOptions& opt) {
  const auto [cfg, ckpt] = resolve_from_checkpoint(opt, "loglik");
  const Vocabulary vocab(cfg.vocabulary);
  const SequenceDataset data = load_data(cfg, vocab, "loglik");
  std::vector<Tensor> fields = embed(data, ckpt.embedding);
  fields_noise(cfg, fields, "loglik");
  prepare_out_dir(cfg, "loglik");

  std::ostringstream os;
  write_csv_row(os, {"id", "action", "normalized_log_prob"});
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const double s = total_action(ckpt.model, fields[i]).total;
    write_csv_row(os, {data.ids[i], format_double(s),
                       format_double(normalized_log_prob(s, cfg.model.seq_len,
                                                         cfg.model.embed_dim))});
  }
  write_file_atomic(out_path(cfg, "loglik.csv"), os.str());
}

void cmd_encode(const CommandOptions& opt) {
  const auto [cfg, ckpt] = resolve_from_checkpoint(opt, "encode");
  const Vocabulary vocab(cfg.vocabulary);
  const SequenceDataset data = load_data(cfg, vocab, "encode");
  std::vector<Tensor> fields = embed(data, ckpt.embedding);
  fields_noise(cfg, fields, "encode");
  prepare_out_dir(cfg, "encode");

  std::ostringstream os;
  write_csv_row(os, {"sample_id", "layer", "site", "channel", "value", "deepest"});
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const FlowResult f = rg_flow(ckpt.model, fields[i]);
    const auto& layers = f.bulk.layers;
    for (std::size_t k = 0; k < layers.size(); ++k) {
      const std::string deepest = k + 1 == layers.size() ? "1" : "0";
      for (std::size_t r = 0; r < layers[k].rows(); ++r)
        for (std::size_t c = 0; c < layers[k].cols(); ++c)
          write_csv_row(os, {data.ids[i], std::to_string(k + 1),
                             std::to_string(f.bulk.sites[k][r]), std::to_string(c),
                             format_double(layers[k].at(r, c)), deepest});
    }
  }
  write_file_atomic(out_path(cfg, "latents.csv"), os.str());
}

void cmd_score_mutations(const CommandOptions& opt) {
  const auto [cfg, ckpt] = resolve_from_checkpoint(opt, "score-mutations");
  const Vocabulary vocab(cfg.vocabulary);
  const SequenceDataset data = load_data(cfg, vocab, "score-mutations");
  if (data.sequences.size() != 1) {
    throw DataError(cfg.data + ": score-mutations needs exactly one sequence, found " +
                    std::to_string(data.sequences.size()));
  }
  std::vector<EscapeLabel> labels;
  if (!cfg.labels.empty()) labels = load_escape_labels(cfg.labels);
  const EscapeReport report =
      escape_report(ckpt.model, ckpt.embedding, vocab, data.sequences[0],
                    cfg.labels.empty() ? nullptr : &labels, CombineMode::RankSum,
                    parse_grammar_mode(cfg.grammaticality));
  prepare_out_dir(cfg, "score-mutations");
  std::ostringstream os;
  write_escape_csv(os, report, vocab);
  write_file_atomic(out_path(cfg, "escape_report.csv"), os.str());
}

int run_command(const std::string& name, const CommandOptions& opt, std::ostream& err) {
  try {
    if (name == "train") cmd_train(opt);
    else if (name == "sample") cmd_sample(opt);
    else if (name == "loglik") cmd_loglik(opt);
    else if (name == "encode") cmd_encode(opt);
    else if (name == "score-mutations") cmd_score_mutations(opt);
    else {
      err << "error: unknown command '" << name << "'\n";
      return kExitConfig;
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const ShapeError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace rgflow
