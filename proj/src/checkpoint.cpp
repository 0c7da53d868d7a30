#include "rgflow/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "rgflow/csv.hpp"
#include "rgflow/errors.hpp"
#include "rgflow/node_flow.hpp"

namespace rgflow {

using nlohmann::json;

namespace {

void put_le(std::string& out, double v) {
  auto bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) {
    out.push_back(static_cast<char>(bits & 0xff));
    bits >>= 8;
  }
}

double get_le(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 7; i >= 0; --i) bits = (bits << 8) | static_cast<unsigned char>(p[i]);
  return std::bit_cast<double>(bits);
}

json registry_json(const MeraModel& model) {
  json reg = json::array();
  for (std::size_t i = 0; i < model.registry().size(); ++i) {
    json shapes = json::array();
    std::size_t count = 0;
    for (const Tensor* p : parameters(model.block(i).func)) {
      shapes.push_back(p->shape());
      count += p->size();
    }
    reg.push_back({{"name", model.registry()[i].name()},
                   {"shapes", shapes},
                   {"count", count}});
  }
  return reg;
}

}  // namespace

std::string serialize_checkpoint(const RunConfig& cfg, const MeraModel& model,
                                 const EmbeddingTable& embedding) {
  // Where the file is written is not part of the model.
  RunConfig snapshot = cfg;
  snapshot.out_dir = RunConfig{}.out_dir;
  snapshot.checkpoint.clear();

  const auto& m = embedding.matrix;
  json rows = json::array();
  for (std::size_t r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (std::size_t c = 0; c < m.cols(); ++c) row.push_back(m.at(r, c));
    rows.push_back(std::move(row));
  }
  const json header = {
      {"format_version", kCheckpointVersion},
      {"byte_order", "little"},
      {"creation_seed", cfg.train.seed},
      {"config", run_config_to_json(snapshot)},
      {"vocabulary", cfg.vocabulary},
      {"registry", registry_json(model)},
      {"parameter_count", model.parameter_count()},
      {"embedding", {{"source", embedding.source}, {"rows", rows}}},
  };
  const std::string text = header.dump(1) + "\n";

  std::string out = std::string(kCheckpointMagic) + "\n";
  out += "header_bytes " + std::to_string(text.size()) + "\n";
  out += text;
  out.reserve(out.size() + 8 * model.parameter_count());
  for (const Tensor* p : model.parameters())
    for (double v : p->data()) put_le(out, v);
  return out;
}

LoadedCheckpoint deserialize_checkpoint(const std::string& bytes,
                                        const std::string& source) {
  auto bad = [&](const std::string& why) {
    return DataError(source + ": not a valid checkpoint (" + why + ")");
  };
  const std::string magic = std::string(kCheckpointMagic) + "\n";
  if (bytes.compare(0, magic.size(), magic) != 0) throw bad("missing magic line");
  std::size_t pos = magic.size();
  const std::string tag = "header_bytes ";
  const auto eol = bytes.find('\n', pos);
  if (eol == std::string::npos || bytes.compare(pos, tag.size(), tag) != 0) {
    throw bad("missing header_bytes line");
  }
  std::size_t header_size = 0;
  try {
    header_size = std::stoull(bytes.substr(pos + tag.size(), eol - pos - tag.size()));
  } catch (const std::exception&) {
    throw bad("unreadable header size");
  }
  pos = eol + 1;
  if (header_size > bytes.size() - pos) throw bad("truncated header");
  json h;
  try {
    h = json::parse(bytes.substr(pos, header_size));
  } catch (const json::exception& e) {
    throw bad(e.what());
  }
  pos += header_size;

  try {
    const int version = h.at("format_version").get<int>();
    if (version != kCheckpointVersion) {
      throw ConfigError(source + ": checkpoint format version " + std::to_string(version) +
                        " is not supported (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    if (h.at("byte_order").get<std::string>() != "little") throw bad("byte order");

    RunConfig cfg = run_config_from_json(h.at("config"));
    MeraModel model(cfg.model);
    const std::size_t count = h.at("parameter_count").get<std::size_t>();
    if (count != model.parameter_count()) throw bad("parameter count disagrees with config");
    if (h.at("registry") != registry_json(model)) throw bad("block registry disagrees with config");
    if (bytes.size() - pos != 8 * count) {
      throw bad("payload holds " + std::to_string(bytes.size() - pos) + " bytes, expected " +
                std::to_string(8 * count));
    }
    const char* p = bytes.data() + pos;
    for (Tensor* t : model.parameters())
      for (double& v : t->data()) {
        v = get_le(p);
        p += 8;
      }

    const auto& rows = h.at("embedding").at("rows");
    const Vocabulary vocab(cfg.vocabulary);
    if (rows.size() != vocab.size()) throw bad("embedding row count");
    EmbeddingTable table{Tensor({vocab.size(), cfg.model.embed_dim}),
                         h.at("embedding").at("source").get<std::string>()};
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != cfg.model.embed_dim) throw bad("embedding row width");
      for (std::size_t c = 0; c < cfg.model.embed_dim; ++c)
        table.matrix.at(r, c) = rows[r][c].get<double>();
    }
    table.validate(vocab);
    return {std::move(cfg), std::move(model), std::move(table)};
  } catch (const json::exception& e) {
    throw bad(e.what());
  }
}

void save_checkpoint(const std::string& path, const RunConfig& cfg,
                     const MeraModel& model, const EmbeddingTable& embedding) {
  write_file_atomic(path, serialize_checkpoint(cfg, model, embedding));
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  return deserialize_checkpoint(read_file(path), path);
}

}  // namespace rgflow
