#include "rgflow/config.hpp"

#include <limits>

#include "rgflow/csv.hpp"
#include "rgflow/errors.hpp"

namespace rgflow {

using nlohmann::json;

namespace {

void need(bool ok, const std::string& key, const std::string& what) {
  if (!ok) throw ConfigError("config key '" + key + "': " + what);
}

std::string get_string(const json& v, const std::string& key) {
  need(v.is_string(), key, "expected a string");
  return v.get<std::string>();
}

std::size_t get_count(const json& v, const std::string& key) {
  need(v.is_number_unsigned() || (v.is_number_integer() && v.get<long long>() >= 0),
       key, "expected a non-negative integer");
  return v.get<std::size_t>();
}

double get_real(const json& v, const std::string& key) {
  need(v.is_number(), key, "expected a number");
  return v.get<double>();
}

bool get_bool(const json& v, const std::string& key) {
  need(v.is_boolean(), key, "expected true or false");
  return v.get<bool>();
}

}  // namespace

void RunConfig::validate() const {
  auto wrap = [](const std::string& key, auto&& fn) {
    try {
      fn();
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  };
  wrap("data_format", [&] { parse_seq_format(data_format); });
  wrap("vocabulary", [&] { Vocabulary{vocabulary}; });
  wrap("grammaticality", [&] { parse_grammar_mode(grammaticality); });
  wrap("seq_len/embed_dim/kernel/steps/hidden_width/num_layers",
       [&] { model.validate(); });
  wrap("learning_rate/batch_size/lambda_kinetic/lambda_jacobian/clip_norm/noise_sigma",
       [&] { train.validate(); });
  need(!out_dir.empty(), "out_dir", "must not be empty");
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "data") c.data = get_string(v, key);
    else if (key == "data_format") c.data_format = get_string(v, key);
    else if (key == "window_offset") c.window_offset = get_count(v, key);
    else if (key == "embedding") c.embedding = get_string(v, key);
    else if (key == "vocabulary") c.vocabulary = get_string(v, key);
    else if (key == "seq_len") c.model.seq_len = get_count(v, key);
    else if (key == "embed_dim") c.model.embed_dim = get_count(v, key);
    else if (key == "kernel") c.model.kernel = get_count(v, key);
    else if (key == "steps") {
      const std::size_t s = get_count(v, key);
      need(s <= static_cast<std::size_t>(std::numeric_limits<int>::max()), key, "too large");
      c.model.steps = static_cast<int>(s);
    }
    else if (key == "hidden_width") c.model.hidden_width = get_count(v, key);
    else if (key == "num_layers") c.model.num_layers = get_count(v, key);
    else if (key == "position_dependent") c.model.position_dependent = get_bool(v, key);
    else if (key == "learning_rate") c.train.learning_rate = get_real(v, key);
    else if (key == "batch_size") c.train.batch_size = get_count(v, key);
    else if (key == "epochs") c.train.epochs = get_count(v, key);
    else if (key == "lambda_kinetic") c.train.lambda_kinetic = get_real(v, key);
    else if (key == "lambda_jacobian") c.train.lambda_jacobian = get_real(v, key);
    else if (key == "seed") c.train.seed = get_count(v, key);
    else if (key == "clip_norm") c.train.clip_norm = get_real(v, key);
    else if (key == "noise_sigma") c.train.noise_sigma = get_real(v, key);
    else if (key == "labels") c.labels = get_string(v, key);
    else if (key == "checkpoint") c.checkpoint = get_string(v, key);
    else if (key == "out_dir") c.out_dir = get_string(v, key);
    else if (key == "record_wall_time") c.record_wall_time = get_bool(v, key);
    else if (key == "count") c.count = get_count(v, key);
    else if (key == "grammaticality") c.grammaticality = get_string(v, key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
  c.validate();
  return c;
}

RunConfig parse_run_config(const std::string& text, const std::string& source) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return run_config_from_json(j);
}

RunConfig load_run_config(const std::string& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const DataError&) {
    throw ConfigError("cannot read config file " + path);
  }
  return parse_run_config(text, path);
}

json run_config_to_json(const RunConfig& c) {
  return json{
      {"data", c.data},
      {"data_format", c.data_format},
      {"window_offset", c.window_offset},
      {"embedding", c.embedding},
      {"vocabulary", c.vocabulary},
      {"seq_len", c.model.seq_len},
      {"embed_dim", c.model.embed_dim},
      {"kernel", c.model.kernel},
      {"steps", c.model.steps},
      {"hidden_width", c.model.hidden_width},
      {"num_layers", c.model.num_layers},
      {"position_dependent", c.model.position_dependent},
      {"learning_rate", c.train.learning_rate},
      {"batch_size", c.train.batch_size},
      {"epochs", c.train.epochs},
      {"lambda_kinetic", c.train.lambda_kinetic},
      {"lambda_jacobian", c.train.lambda_jacobian},
      {"seed", c.train.seed},
      {"clip_norm", c.train.clip_norm},
      {"noise_sigma", c.train.noise_sigma},
      {"labels", c.labels},
      {"checkpoint", c.checkpoint},
      {"out_dir", c.out_dir},
      {"record_wall_time", c.record_wall_time},
      {"count", c.count},
      {"grammaticality", c.grammaticality},
  };
}

std::string dump_run_config(const RunConfig& cfg) {
  return run_config_to_json(cfg).dump(2) + "\n";
}

}  // namespace rgflow
