#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>
#include <unistd.h>

#include "rgflow/checkpoint.hpp"
#include "rgflow/commands.hpp"
#include "rgflow/csv.hpp"
#include "rgflow/errors.hpp"

using namespace rgflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    static int counter = 0;
    path = fs::temp_directory_path() /
           ("rgflow_cli_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& name) const { return (path / name).string(); }
};

void write_text(const std::string& path, const std::string& text) {
  std::ofstream(path, std::ios::binary) << text;
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::istringstream in(read_file(path));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) rows.push_back(parse_csv_line(line));
  return rows;
}

std::string fasta(std::size_t records, std::size_t len, std::uint64_t seed) {
  Rng rng(seed);
  const std::string alphabet = "ACDEFG";
  std::ostringstream os;
  for (std::size_t r = 0; r < records; ++r) {
    os << ">r" << r << "\n";
    for (std::size_t i = 0; i < len; ++i) os << alphabet[rng.below(alphabet.size())];
    os << "\n";
  }
  return os.str();
}

RunConfig tiny_config() {
  RunConfig c;
  c.model.seq_len = 8;
  c.model.embed_dim = 2;
  c.model.kernel = 2;
  c.model.steps = 4;
  c.model.hidden_width = 8;
  c.model.num_layers = 2;
  c.train.epochs = 3;
  c.train.batch_size = 16;
  c.train.learning_rate = 0.01;
  c.train.seed = 7;
  return c;
}

int run(const std::string& cmd, const CommandOptions& opt, std::string* err = nullptr) {
  std::ostringstream os;
  const int code = run_command(cmd, opt, os);
  if (err) *err = os.str();
  return code;
}

}  // namespace

TEST_CASE("run config parsing") {
  SUBCASE("defaults") {
    const RunConfig c = parse_run_config("{}");
    CHECK(c.model.seq_len == 32);
    CHECK(c.model.embed_dim == 20);
    CHECK(c.train.noise_sigma == 0.05);
    CHECK(c.train.clip_norm == 10.0);
    CHECK(c.data_format == "fasta");
  }
  SUBCASE("unknown key is rejected by name") {
    try {
      parse_run_config(R"({"seq_len": 8, "kernel": 2, "lerning_rate": 0.1})");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("lerning_rate") != std::string::npos);
    }
  }
  SUBCASE("mistyped and invalid values name the key") {
    for (const char* text : {R"({"epochs": "ten"})", R"({"batch_size": -1})",
                             R"({"position_dependent": 1})", R"({"data_format": "csv"})",
                             R"({"seq_len": 12})"}) {
      CAPTURE(text);
      try {
        parse_run_config(text);
        FAIL("expected ConfigError");
      } catch (const ConfigError& e) {
        CHECK(std::string(e.what()).find("config key") != std::string::npos);
      }
    }
    CHECK_THROWS_AS(parse_run_config("{not json"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("[1, 2]"), ConfigError);
    CHECK_THROWS_AS(load_run_config("/nonexistent/config.json"), ConfigError);
  }
  SUBCASE("resolved echo round-trips") {
    RunConfig c = tiny_config();
    c.data = "x.fa";
    c.train.lambda_kinetic = 0.125;
    c.record_wall_time = true;
    const std::string text = dump_run_config(c);
    CHECK(dump_run_config(parse_run_config(text)) == text);
    CHECK(run_config_to_json(c).size() == 26);
  }
}

TEST_CASE("checkpoint format") {
  const RunConfig cfg = tiny_config();
  MeraModel model(cfg.model);
  Rng rng(3);
  model.randomize_weights(rng, 0.4);
  const Vocabulary vocab(cfg.vocabulary);
  const EmbeddingTable table = fallback_embedding(vocab, 2);

  const std::string bytes = serialize_checkpoint(cfg, model, table);
  const LoadedCheckpoint back = deserialize_checkpoint(bytes);
  CHECK(serialize_checkpoint(back.config, back.model, back.embedding) == bytes);
  const auto a = model.parameters();
  const auto b = back.model.parameters();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i]->storage() == b[i]->storage());
  CHECK(back.embedding.matrix == table.matrix);
  CHECK(back.embedding.source == "fallback");

  SUBCASE("header parameter count matches the payload") {
    const std::string tag = "header_bytes ";
    const auto at = bytes.find(tag);
    const auto eol = bytes.find('\n', at);
    const std::size_t header = std::stoull(bytes.substr(at + tag.size(), eol - at - tag.size()));
    const std::size_t payload = bytes.size() - (eol + 1) - header;
    const auto h = nlohmann::json::parse(bytes.substr(eol + 1, header));
    CHECK(h["parameter_count"].get<std::size_t>() * 8 == payload);
    CHECK(h["registry"].size() == model.registry().size());
    CHECK(h["creation_seed"] == 7);
    CHECK(h["byte_order"] == "little");
  }
  SUBCASE("corruption") {
    CHECK_THROWS_AS(deserialize_checkpoint("garbage"), DataError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes + "x"), DataError);
    std::string other = bytes;
    other.replace(other.find("\"format_version\": 1"), 19, "\"format_version\": 9");
    CHECK_THROWS_AS(deserialize_checkpoint(other), ConfigError);
  }
  SUBCASE("files") {
    TempDir dir;
    save_checkpoint(dir / "m.rgf", cfg, model, table);
    CHECK(read_file(dir / "m.rgf") == bytes);
    CHECK_FALSE(fs::exists(dir / "m.rgf.tmp"));
    CHECK(serialize_checkpoint(cfg, load_checkpoint(dir / "m.rgf").model, table) == bytes);
  }
}

TEST_CASE("train command") {
  TempDir dir;
  write_text(dir / "d.fa", fasta(40, 10, 1));
  RunConfig cfg = tiny_config();
  cfg.data = dir / "d.fa";
  write_text(dir / "c.json", dump_run_config(cfg));

  CommandOptions opt;
  opt.config = dir / "c.json";
  opt.out = dir / "a";
  REQUIRE(run("train", opt) == kExitOk);
  opt.out = dir / "b";
  REQUIRE(run("train", opt) == kExitOk);

  const auto log = read_csv(dir / "a/train_log.csv");
  REQUIRE(log.size() == 4);
  CHECK(log[0] == std::vector<std::string>{"epoch", "mean_loss", "mean_norm_logprob", "seconds"});
  CHECK(std::stod(log[3][1]) < std::stod(log[1][1]));
  for (const std::string f : {"train_log.csv", "checkpoint.rgf", "best.rgf", "train_config.json"}) {
    CAPTURE(f);
    CHECK(read_file(dir / ("a/" + f)).size() > 0);
    if (f != "train_config.json") CHECK(read_file(dir / ("a/" + f)) == read_file(dir / ("b/" + f)));
  }
  const RunConfig echo = load_run_config(dir / "a/train_config.json");
  CHECK(echo.out_dir == dir / "a");
  CHECK(echo.train.seed == 7);

  SUBCASE("rerun from the echo reproduces the outputs") {
    CommandOptions again;
    again.config = dir / "a/train_config.json";
    again.out = dir / "c";
    REQUIRE(run("train", again) == kExitOk);
    CHECK(read_file(dir / "c/train_log.csv") == read_file(dir / "a/train_log.csv"));
    CHECK(read_file(dir / "c/checkpoint.rgf") == read_file(dir / "a/checkpoint.rgf"));
  }
  SUBCASE("seed override changes the run") {
    CommandOptions other = opt;
    other.out = dir / "s";
    other.seed = 8;
    REQUIRE(run("train", other) == kExitOk);
    CHECK(read_file(dir / "s/train_log.csv") != read_file(dir / "a/train_log.csv"));
  }
  SUBCASE("missing data key") {
    RunConfig nodata = tiny_config();
    write_text(dir / "n.json", dump_run_config(nodata));
    CommandOptions o;
    o.config = dir / "n.json";
    o.out = dir / "n";
    std::string err;
    CHECK(run("train", o, &err) == kExitConfig);
    CHECK(err.find("'data'") != std::string::npos);
  }
  SUBCASE("unreadable data") {
    CommandOptions o = opt;
    o.data = dir / "absent.fa";
    CHECK(run("train", o) == kExitData);
  }
  SUBCASE("embedding of the wrong width") {
    write_text(dir / "e.tsv", "A\t1\nC\t2\n");
    CommandOptions o = opt;
    o.embedding = dir / "e.tsv";
    CHECK(run("train", o) == kExitData);
  }
  SUBCASE("divergence keeps the last finite checkpoint") {
    RunConfig wild = cfg;
    wild.train.learning_rate = 1e6;
    wild.train.clip_norm = 1e12;
    wild.train.epochs = 5;
    wild.out_dir = dir / "w";
    write_text(dir / "w.json", dump_run_config(wild));
    CommandOptions o;
    o.config = dir / "w.json";
    const int code = run("train", o);
    if (code == kExitNumeric) {
      const auto ck = load_checkpoint(dir / "w/checkpoint.rgf");
      for (const Tensor* p : ck.model.parameters()) CHECK(p->all_finite());
    } else {
      CHECK(code == kExitOk);
    }
  }
}

TEST_CASE("sample, loglik, encode and score-mutations") {
  TempDir dir;
  write_text(dir / "d.fa", fasta(12, 8, 2));
  write_text(dir / "one.fa", ">wt\nACDEFGAC\n");
  RunConfig cfg = tiny_config();
  cfg.data = dir / "d.fa";
  MeraModel model(cfg.model);
  Rng rng(5);
  model.randomize_weights(rng, 0.3);
  const Vocabulary vocab(cfg.vocabulary);
  const EmbeddingTable table = fallback_embedding(vocab, 2);
  save_checkpoint(dir / "m.rgf", cfg, model, table);

  CommandOptions base;
  base.checkpoint = dir / "m.rgf";

  SUBCASE("sample") {
    CommandOptions o = base;
    o.out = dir / "s1";
    o.count = 5;
    REQUIRE(run("sample", o) == kExitOk);
    o.out = dir / "s2";
    REQUIRE(run("sample", o) == kExitOk);
    CHECK(read_file(dir / "s1/samples.csv") == read_file(dir / "s2/samples.csv"));
    const auto rows = read_csv(dir / "s1/samples.csv");
    REQUIRE(rows.size() == 6);
    CHECK(rows[0].size() == 2 + 16);
    for (std::size_t r = 1; r < rows.size(); ++r) {
      CHECK(rows[r][1].size() == 8);
      for (char c : rows[r][1]) CHECK(vocab.contains(c));
    }
    o.out = dir / "s0";
    o.count = 0;
    REQUIRE(run("sample", o) == kExitOk);
    CHECK(read_csv(dir / "s0/samples.csv").size() == 1);
  }

  SUBCASE("loglik is identical across a checkpoint round trip") {
    CommandOptions o = base;
    o.out = dir / "l1";
    REQUIRE(run("loglik", o) == kExitOk);
    const auto ck = load_checkpoint(dir / "m.rgf");
    save_checkpoint(dir / "m2.rgf", ck.config, ck.model, ck.embedding);
    CHECK(read_file(dir / "m2.rgf") == read_file(dir / "m.rgf"));
    o.checkpoint = dir / "m2.rgf";
    o.out = dir / "l2";
    REQUIRE(run("loglik", o) == kExitOk);
    CHECK(read_file(dir / "l1/loglik.csv") == read_file(dir / "l2/loglik.csv"));
    CHECK(read_csv(dir / "l1/loglik.csv").size() == 13);

    o.no_noise = true;
    o.out = dir / "l3";
    REQUIRE(run("loglik", o) == kExitOk);
    CHECK(read_file(dir / "l3/loglik.csv") != read_file(dir / "l1/loglik.csv"));
    CHECK(load_run_config(dir / "l3/loglik_config.json").train.noise_sigma == 0.0);
  }

  SUBCASE("zero-weight checkpoint gives the Gaussian action") {
    save_checkpoint(dir / "z.rgf", cfg, MeraModel(cfg.model), table);
    CommandOptions o;
    o.checkpoint = dir / "z.rgf";
    o.out = dir / "z";
    o.no_noise = true;
    REQUIRE(run("loglik", o) == kExitOk);
    const auto rows = read_csv(dir / "z/loglik.csv");
    std::istringstream in(read_file(dir / "d.fa"));
    const auto data = parse_sequences(in, SeqFormat::Fasta, vocab, 0, 8);
    for (std::size_t i = 0; i < data.sequences.size(); ++i) {
      const Tensor phi = embed_sequence(data.sequences[i], table);
      double sq = 0.0;
      for (double v : phi.data()) sq += v * v;
      const double expected = 0.5 * sq + 8.0 * std::log(2 * std::numbers::pi);
      CHECK(std::abs(std::stod(rows[i + 1][1]) - expected) <= 1e-12);
    }
  }

  SUBCASE("encode") {
    CommandOptions o = base;
    o.out = dir / "e1";
    o.no_noise = true;
    REQUIRE(run("encode", o) == kExitOk);
    o.out = dir / "e2";
    REQUIRE(run("encode", o) == kExitOk);
    CHECK(read_file(dir / "e1/latents.csv") == read_file(dir / "e2/latents.csv"));
    const auto rows = read_csv(dir / "e1/latents.csv");
    CHECK(rows[0] == std::vector<std::string>{"sample_id", "layer", "site", "channel",
                                              "value", "deepest"});
    std::map<std::string, std::pair<int, int>> per;
    for (std::size_t r = 1; r < rows.size(); ++r) {
      per[rows[r][0]].first += 1;
      per[rows[r][0]].second += rows[r][5] == "1";
    }
    CHECK(per.size() == 12);
    for (const auto& [id, c] : per) {
      CHECK(c.first == 16);
      CHECK(c.second == 4);
    }
  }

  SUBCASE("loglik errors") {
    write_text(dir / "empty.fa", "");
    CommandOptions o = base;
    o.data = dir / "empty.fa";
    o.out = dir / "x";
    CHECK(run("loglik", o) == kExitData);
    CommandOptions none;
    none.data = dir / "d.fa";
    std::string err;
    CHECK(run("loglik", none, &err) == kExitConfig);
    CHECK(err.find("'checkpoint'") != std::string::npos);
    write_text(dir / "clash.json", R"({"seq_len": 16})");
    CommandOptions clash = base;
    clash.config = dir / "clash.json";
    CHECK(run("loglik", clash, &err) == kExitConfig);
    CHECK(err.find("seq_len") != std::string::npos);
    CHECK(run("frobnicate", base) == kExitConfig);
  }

  SUBCASE("score-mutations") {
    CommandOptions o = base;
    o.data = dir / "one.fa";
    o.out = dir / "m1";
    REQUIRE(run("score-mutations", o) == kExitOk);
    const std::string plain = read_file(dir / "m1/escape_report.csv");
    CHECK(read_csv(dir / "m1/escape_report.csv").size() == 1 + 8 * 24);
    CHECK(plain.find("AUC") == std::string::npos);

    write_text(dir / "lab.csv", "position,to_symbol,is_escape\n0,K,1\n5,W,1\n");
    o.labels = dir / "lab.csv";
    o.out = dir / "m2";
    REQUIRE(run("score-mutations", o) == kExitOk);
    o.out = dir / "m3";
    REQUIRE(run("score-mutations", o) == kExitOk);
    const std::string labelled = read_file(dir / "m2/escape_report.csv");
    CHECK(labelled == read_file(dir / "m3/escape_report.csv"));
    CHECK(labelled.find("AUC_combined") != std::string::npos);

    o.data = dir / "d.fa";
    CHECK(run("score-mutations", o) == kExitData);
    write_text(dir / "bad.csv", "position,to_symbol,is_escape\n99,K,1\n");
    o.data = dir / "one.fa";
    o.labels = dir / "bad.csv";
    CHECK(run("score-mutations", o) == kExitData);
  }
}
