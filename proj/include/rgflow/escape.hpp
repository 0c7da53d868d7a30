#pragma once

#include <cstddef>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rgflow/mera.hpp"
#include "rgflow/seq_data.hpp"

namespace rgflow {

struct Mutation {
  std::size_t position = 0;
  std::size_t from = 0;  // vocabulary indices
  std::size_t to = 0;
  std::optional<bool> is_escape;
};

struct MutationScore {
  double delta_zeta = 0.0;
  double grammaticality = 0.0;
  double combined = 0.0;
  std::size_t rank = 0;  // 1 = strongest escape candidate
};

// Every single-site substitution, position-major, symbols in vocabulary order.
std::vector<Mutation> enumerate_mutations(const std::vector<std::size_t>& seq,
                                          const Vocabulary& vocab);
std::vector<std::size_t> apply_mutation(std::vector<std::size_t> seq,
                                        const Mutation& m);

// Deepest-layer bulk of the noiseless embedding, flattened.
Tensor deepest_latent(const MeraModel& model, const EmbeddingTable& table,
                      const std::vector<std::size_t>& seq);
// Euclidean distance between deepest-layer bulk fields.
double semantic_change(const MeraModel& model, const EmbeddingTable& table,
                       const std::vector<std::size_t>& a,
                       const std::vector<std::size_t>& b);
// Normalized log probability of the noiseless embedding.
double grammaticality(const MeraModel& model, const EmbeddingTable& table,
                      const std::vector<std::size_t>& seq);

struct RawScores {
  std::vector<double> delta_zeta;
  std::vector<double> grammaticality;  // joint, -S / (n I)
  // log p(mutant) - log sum_s p(sequence with symbol s at the position),
  // the sum running over the original symbol and the listed mutations there.
  std::vector<double> conditional;
};

enum class GrammarMode { Joint, Conditional };
GrammarMode parse_grammar_mode(const std::string& name);

// All scores for every mutation in one batched pass per chunk.
RawScores score_mutations(const MeraModel& model, const EmbeddingTable& table,
                          const std::vector<std::size_t>& seq,
                          const std::vector<Mutation>& mutations,
                          std::size_t chunk = 64);

enum class CombineMode { RankSum, RawSum };

// 1-based ascending ranks; ties share their average rank.
std::vector<double> average_ranks(std::span<const double> values);

// Rank-sum: combined = rank(dz) + rank(g) with ascending ranks, so larger
// values of either score raise the combined score. Raw-sum: dz + g.
// rank 1 goes to the largest combined score.
std::vector<MutationScore> cscs_rank(std::span<const double> delta_zeta,
                                     std::span<const double> gram,
                                     CombineMode mode = CombineMode::RankSum);

// Mann-Whitney: P(score_pos > score_neg) + P(equal) / 2.
double auc(std::span<const int> labels, std::span<const double> scores);

struct EscapeLabel {
  std::size_t position = 0;
  char to_symbol = 0;
  bool is_escape = false;
};

// CSV "position,to_symbol,is_escape" with a header row.
std::vector<EscapeLabel> parse_escape_labels(std::istream& in,
                                             const std::string& source = "<labels>");
std::vector<EscapeLabel> load_escape_labels(const std::string& path);

struct EscapeAucs {
  double combined = 0.0;
  double delta_zeta = 0.0;
  double grammaticality = 0.0;
};

struct EscapeReport {
  std::vector<Mutation> mutations;
  std::vector<MutationScore> scores;
  std::optional<EscapeAucs> aucs;  // present when labels hold both classes
  bool labelled = false;
};

// Marks mutations from labels; unlisted mutations count as non-escapes.
void apply_labels(std::vector<Mutation>& mutations,
                  const std::vector<EscapeLabel>& labels,
                  const Vocabulary& vocab);

EscapeReport escape_report(const MeraModel& model, const EmbeddingTable& table,
                           const Vocabulary& vocab,
                           const std::vector<std::size_t>& seq,
                           const std::vector<EscapeLabel>* labels,
                           CombineMode mode = CombineMode::RankSum,
                           GrammarMode grammar = GrammarMode::Joint);

void write_escape_csv(std::ostream& os, const EscapeReport& report,
                      const Vocabulary& vocab);

}  // namespace rgflow
