#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <unordered_map>
#include <vector>

#include "rgflow/rng.hpp"
#include "rgflow/tensor.hpp"

namespace rgflow {

// Receives non-fatal warnings. Defaults to stderr.
using WarningSink = std::function<void(const std::string&)>;
void set_warning_sink(WarningSink sink);
void warn(const std::string& message);

class Vocabulary {
 public:
  // The 20 canonical amino acids followed by B, O, U, X, Z.
  static const char* kDefaultSymbols;

  Vocabulary() : Vocabulary(kDefaultSymbols) {}
  explicit Vocabulary(const std::string& symbols);

  std::size_t size() const { return symbols_.size(); }
  const std::string& symbols() const { return symbols_; }
  char symbol(std::size_t index) const { return symbols_.at(index); }
  bool contains(char c) const { return index_.count(c) != 0; }
  // Throws DataError for unknown symbols.
  std::size_t index(char c) const;

  bool operator==(const Vocabulary& o) const { return symbols_ == o.symbols_; }

 private:
  std::string symbols_;
  std::unordered_map<char, std::size_t> index_;
};

struct EmbeddingTable {
  Tensor matrix;  // |A| x n
  std::string source;  // "file" or "fallback"

  std::size_t dim() const { return matrix.cols(); }
  std::size_t rows() const { return matrix.rows(); }
  void validate(const Vocabulary& vocab) const;
};

constexpr std::uint64_t kFallbackEmbeddingSeed = 0x5eed5eedULL;

// TSV rows "symbol<TAB>v1<TAB>...<TAB>vn"; blank lines and '#' comments skipped.
EmbeddingTable load_embedding(const std::string& path, const Vocabulary& vocab);
EmbeddingTable parse_embedding(std::istream& in, const Vocabulary& vocab);
// Gaussian rows scaled to unit norm. For n = 1 the rows are evenly spaced
// on [-1, 1] instead, since unit norm leaves only two values.
EmbeddingTable fallback_embedding(const Vocabulary& vocab, std::size_t n,
                                  std::uint64_t seed = kFallbackEmbeddingSeed);

enum class SeqFormat { Fasta, Lines };
SeqFormat parse_seq_format(const std::string& name);

struct SequenceDataset {
  std::vector<std::vector<std::size_t>> sequences;
  std::vector<std::string> ids;
  std::string source;
  std::size_t offset = 0;
  std::size_t length = 0;
  std::size_t dropped = 0;  // records shorter than offset + length
};

SequenceDataset load_sequences(const std::string& path, SeqFormat format,
                               const Vocabulary& vocab, std::size_t offset,
                               std::size_t length);
SequenceDataset parse_sequences(std::istream& in, SeqFormat format,
                                const Vocabulary& vocab, std::size_t offset,
                                std::size_t length,
                                const std::string& source = "<stream>");

std::vector<std::size_t> encode_tokens(const std::string& seq,
                                       const Vocabulary& vocab);
std::string decode_tokens(const std::vector<std::size_t>& tokens,
                          const Vocabulary& vocab);

// [I x n] field of embedding rows.
Tensor embed_sequence(const std::vector<std::size_t>& tokens,
                      const EmbeddingTable& table);
std::vector<Tensor> embed(const SequenceDataset& data,
                          const EmbeddingTable& table);

// phi + N(0, sigma^2) per coordinate.
Tensor dequantize(const Tensor& phi, double sigma, Rng& rng);

// Nearest table row (Euclidean) for every site of an [I x n] field.
std::vector<std::size_t> decode_nearest(const Tensor& phi,
                                        const EmbeddingTable& table);

}  // namespace rgflow
