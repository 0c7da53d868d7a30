#include "rgflow/seq_data.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <sstream>

#include "rgflow/errors.hpp"

namespace rgflow {

namespace {

WarningSink& sink() {
  static WarningSink s = [](const std::string& m) {
    std::cerr << "warning: " << m << '\n';
  };
  return s;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return in;
}

}  // namespace

void set_warning_sink(WarningSink s) { sink() = std::move(s); }
void warn(const std::string& message) {
  if (sink()) sink()(message);
}

const char* Vocabulary::kDefaultSymbols = "ACDEFGHIKLMNPQRSTVWYBOUXZ";

Vocabulary::Vocabulary(const std::string& symbols) : symbols_(symbols) {
  if (symbols_.empty()) throw ConfigError("vocabulary is empty");
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    const char c = symbols_[i];
    if (std::isspace(static_cast<unsigned char>(c)) || c == ',' || c == '"') {
      throw ConfigError("vocabulary symbols must be printable and not ',' or '\"'");
    }
    if (!index_.emplace(c, i).second) {
      throw ConfigError(std::string("duplicate vocabulary symbol '") + c + "'");
    }
  }
}

std::size_t Vocabulary::index(char c) const {
  const auto it = index_.find(c);
  if (it == index_.end()) {
    throw DataError(std::string("unknown symbol '") + c + "'");
  }
  return it->second;
}

void EmbeddingTable::validate(const Vocabulary& vocab) const {
  if (matrix.rank() != 2 || matrix.rows() != vocab.size() || matrix.cols() == 0) {
    throw DataError("embedding table has shape " + shape_string(matrix.shape()) +
                    ", vocabulary has " + std::to_string(vocab.size()) +
                    " symbols");
  }
  if (!matrix.all_finite()) throw DataError("embedding table holds non-finite values");
  const std::size_t n = matrix.cols();
  for (std::size_t i = 0; i < matrix.rows(); ++i)
    for (std::size_t j = i + 1; j < matrix.rows(); ++j)
      if (std::equal(matrix.data().begin() + static_cast<std::ptrdiff_t>(i * n),
                     matrix.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * n),
                     matrix.data().begin() + static_cast<std::ptrdiff_t>(j * n))) {
        throw DataError(std::string("embedding rows for '") + vocab.symbol(i) +
                        "' and '" + vocab.symbol(j) + "' are identical");
      }
}

EmbeddingTable parse_embedding(std::istream& in, const Vocabulary& vocab) {
  std::vector<std::vector<double>> rows(vocab.size());
  std::vector<bool> seen(vocab.size(), false);
  std::size_t n = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    std::istringstream ls(t);
    std::string sym;
    std::getline(ls, sym, '\t');
    sym = trim(sym);
    if (sym.size() != 1) {
      throw DataError("embedding line " + std::to_string(lineno) +
                      ": label '" + sym + "' is not a single symbol");
    }
    if (!vocab.contains(sym[0])) {
      throw DataError("embedding line " + std::to_string(lineno) +
                      ": symbol '" + sym + "' is not in the vocabulary");
    }
    const std::size_t idx = vocab.index(sym[0]);
    if (seen[idx]) {
      throw DataError("embedding line " + std::to_string(lineno) +
                      ": duplicate row for '" + sym + "'");
    }
    std::vector<double> values;
    std::string field;
    while (std::getline(ls, field, '\t')) {
      field = trim(field);
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(field, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used == 0 || used != field.size()) {
        throw DataError("embedding line " + std::to_string(lineno) +
                        ": cannot parse value '" + field + "'");
      }
      values.push_back(v);
    }
    if (values.empty()) {
      throw DataError("embedding line " + std::to_string(lineno) + " has no values");
    }
    if (n == 0) n = values.size();
    if (values.size() != n) {
      throw DataError("embedding line " + std::to_string(lineno) + " has " +
                      std::to_string(values.size()) + " values, expected " +
                      std::to_string(n));
    }
    rows[idx] = std::move(values);
    seen[idx] = true;
  }
  std::string missing;
  for (std::size_t i = 0; i < vocab.size(); ++i)
    if (!seen[i]) missing += vocab.symbol(i);
  if (!missing.empty()) {
    throw DataError("embedding is missing rows for symbols: " + missing);
  }
  EmbeddingTable table{Tensor({vocab.size(), n}), "file"};
  for (std::size_t i = 0; i < vocab.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(),
              table.matrix.data().begin() + static_cast<std::ptrdiff_t>(i * n));
  table.validate(vocab);
  return table;
}

EmbeddingTable load_embedding(const std::string& path, const Vocabulary& vocab) {
  auto in = open_or_throw(path);
  try {
    return parse_embedding(in, vocab);
  } catch (const DataError& e) {
    throw DataError(path + ": " + e.what());
  }
}

EmbeddingTable fallback_embedding(const Vocabulary& vocab, std::size_t n,
                                  std::uint64_t seed) {
  if (n == 0) throw ConfigError("embedding dimension must be positive");
  EmbeddingTable table{Tensor({vocab.size(), n}), "fallback"};
  if (n == 1) {
    const double a = vocab.size();
    for (std::size_t i = 0; i < vocab.size(); ++i)
      table.matrix[i] = a == 1 ? 0.0 : -1.0 + 2.0 * static_cast<double>(i) / (a - 1);
    return table;
  }
  Rng rng(seed);
  for (std::size_t i = 0; i < vocab.size(); ++i) {
    double norm = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      const double v = rng.normal();
      table.matrix.at(i, c) = v;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t c = 0; c < n; ++c) table.matrix.at(i, c) /= norm;
  }
  table.validate(vocab);
  return table;
}

SeqFormat parse_seq_format(const std::string& name) {
  if (name == "fasta") return SeqFormat::Fasta;
  if (name == "lines") return SeqFormat::Lines;
  throw ConfigError("data_format must be \"fasta\" or \"lines\", got \"" + name + "\"");
}

std::vector<std::size_t> encode_tokens(const std::string& seq,
                                       const Vocabulary& vocab) {
  std::vector<std::size_t> out;
  out.reserve(seq.size());
  for (char c : seq) out.push_back(vocab.index(c));
  return out;
}

std::string decode_tokens(const std::vector<std::size_t>& tokens,
                          const Vocabulary& vocab) {
  std::string out;
  for (std::size_t t : tokens) out += vocab.symbol(t);
  return out;
}

SequenceDataset parse_sequences(std::istream& in, SeqFormat format,
                                const Vocabulary& vocab, std::size_t offset,
                                std::size_t length, const std::string& source) {
  if (length == 0) throw ConfigError("window length must be positive");
  SequenceDataset data;
  data.source = source;
  data.offset = offset;
  data.length = length;

  struct Record {
    std::string id;
    std::string seq;
    std::size_t line = 0;
  };
  std::vector<Record> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (format == SeqFormat::Fasta) {
      if (!t.empty() && t[0] == '>') {
        std::istringstream hs(t.substr(1));
        Record r;
        hs >> r.id;
        if (r.id.empty()) r.id = "record" + std::to_string(records.size() + 1);
        r.line = lineno;
        records.push_back(std::move(r));
        continue;
      }
      if (t.empty() || t[0] == ';') continue;
      if (records.empty()) {
        throw DataError(source + ":" + std::to_string(lineno) +
                        ": sequence data before the first FASTA header");
      }
      for (char c : t)
        if (!std::isspace(static_cast<unsigned char>(c))) records.back().seq += c;
    } else {
      if (t.empty()) continue;
      records.push_back({"line" + std::to_string(lineno), t, lineno});
    }
  }

  for (const auto& r : records) {
    for (std::size_t i = 0; i < r.seq.size(); ++i) {
      const char c = static_cast<char>(std::toupper(static_cast<unsigned char>(r.seq[i])));
      if (!vocab.contains(c)) {
        throw DataError(source + ": unknown symbol '" + std::string(1, r.seq[i]) +
                        "' in record " + r.id + " (line " + std::to_string(r.line) +
                        ", position " + std::to_string(i) + ")");
      }
    }
    if (r.seq.size() < offset + length) {
      ++data.dropped;
      continue;
    }
    std::string window = r.seq.substr(offset, length);
    for (auto& c : window) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
    data.sequences.push_back(encode_tokens(window, vocab));
    data.ids.push_back(r.id);
  }
  if (data.dropped > 0) {
    warn(source + ": dropped " + std::to_string(data.dropped) +
         " record(s) shorter than " + std::to_string(offset + length));
  }
  if (data.sequences.empty()) {
    throw DataError(source + ": no sequences of length >= " +
                    std::to_string(offset + length));
  }
  return data;
}

SequenceDataset load_sequences(const std::string& path, SeqFormat format,
                               const Vocabulary& vocab, std::size_t offset,
                               std::size_t length) {
  auto in = open_or_throw(path);
  return parse_sequences(in, format, vocab, offset, length, path);
}

Tensor embed_sequence(const std::vector<std::size_t>& tokens,
                      const EmbeddingTable& table) {
  const std::size_t n = table.dim();
  Tensor phi({tokens.size(), n});
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= table.rows()) {
      throw DataError("token index " + std::to_string(tokens[i]) +
                      " outside the embedding table");
    }
    for (std::size_t c = 0; c < n; ++c) phi.at(i, c) = table.matrix.at(tokens[i], c);
  }
  return phi;
}

std::vector<Tensor> embed(const SequenceDataset& data,
                          const EmbeddingTable& table) {
  std::vector<Tensor> out;
  out.reserve(data.sequences.size());
  for (const auto& s : data.sequences) out.push_back(embed_sequence(s, table));
  return out;
}

Tensor dequantize(const Tensor& phi, double sigma, Rng& rng) {
  if (!(sigma >= 0.0)) throw ConfigError("dequantization sigma must be >= 0");
  Tensor out = phi;
  if (sigma == 0.0) return out;
  for (auto& v : out.data()) v += sigma * rng.normal();
  return out;
}

std::vector<std::size_t> decode_nearest(const Tensor& phi,
                                        const EmbeddingTable& table) {
  const std::size_t n = table.dim();
  if (phi.size() % n != 0) {
    throw ShapeError("field size " + std::to_string(phi.size()) +
                     " is not a multiple of the embedding dimension");
  }
  const std::size_t sites = phi.size() / n;
  std::vector<std::size_t> out(sites);
  for (std::size_t i = 0; i < sites; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t r = 0; r < table.rows(); ++r) {
      double d = 0.0;
      for (std::size_t c = 0; c < n; ++c) {
        const double diff = phi[i * n + c] - table.matrix.at(r, c);
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        out[i] = r;
      }
    }
  }
  return out;
}

}  // namespace rgflow
