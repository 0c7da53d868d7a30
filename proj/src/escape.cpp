#include "rgflow/escape.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>

#include "rgflow/csv.hpp"
#include "rgflow/errors.hpp"
#include "rgflow/objective.hpp"

namespace rgflow {

std::vector<Mutation> enumerate_mutations(const std::vector<std::size_t>& seq,
                                          const Vocabulary& vocab) {
  std::vector<Mutation> out;
  out.reserve(seq.size() * (vocab.size() - 1));
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (seq[i] >= vocab.size()) throw DataError("token outside the vocabulary");
    for (std::size_t s = 0; s < vocab.size(); ++s)
      if (s != seq[i]) out.push_back({i, seq[i], s, std::nullopt});
  }
  return out;
}

std::vector<std::size_t> apply_mutation(std::vector<std::size_t> seq,
                                        const Mutation& m) {
  if (m.position >= seq.size() || seq[m.position] != m.from) {
    throw DataError("mutation does not match the sequence");
  }
  seq[m.position] = m.to;
  return seq;
}

namespace {

struct Pass {
  Tensor deepest;  // B x (l*n)
  Tensor action;   // B x 1
};

Pass run_pass(const MeraModel& model, const EmbeddingTable& table,
              const std::vector<std::vector<std::size_t>>& seqs) {
  std::vector<Tensor> fields;
  for (const auto& s : seqs) {
    if (s.size() != model.config().seq_len) {
      throw DataError("sequence of length " + std::to_string(s.size()) +
                      ", model expects " + std::to_string(model.config().seq_len));
    }
    fields.push_back(embed_sequence(s, table));
  }
  const BatchFlow f = rg_flow_batch(model, bind_constant(model),
                                    ad::Var::constant(stack_rows(fields)));
  return {f.bulk.back().value(), f.total.value()};
}

double row_distance(const Tensor& a, std::size_t ra, const Tensor& b,
                    std::size_t rb) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.cols(); ++c) {
    const double d = a.at(ra, c) - b.at(rb, c);
    s += d * d;
  }
  return std::sqrt(s);
}

}  // namespace

Tensor deepest_latent(const MeraModel& model, const EmbeddingTable& table,
                      const std::vector<std::size_t>& seq) {
  const Pass p = run_pass(model, table, {seq});
  return p.deepest.reshaped({p.deepest.size()});
}

double semantic_change(const MeraModel& model, const EmbeddingTable& table,
                       const std::vector<std::size_t>& a,
                       const std::vector<std::size_t>& b) {
  const Pass p = run_pass(model, table, {a, b});
  return row_distance(p.deepest, 0, p.deepest, 1);
}

double grammaticality(const MeraModel& model, const EmbeddingTable& table,
                      const std::vector<std::size_t>& seq) {
  const Pass p = run_pass(model, table, {seq});
  const auto& c = model.config();
  return normalized_log_prob(p.action[0], c.seq_len, c.embed_dim);
}

RawScores score_mutations(const MeraModel& model, const EmbeddingTable& table,
                          const std::vector<std::size_t>& seq,
                          const std::vector<Mutation>& mutations,
                          std::size_t chunk) {
  if (chunk == 0) chunk = 1;
  const auto& c = model.config();
  const Pass base = run_pass(model, table, {seq});
  RawScores out;
  out.delta_zeta.reserve(mutations.size());
  out.grammaticality.reserve(mutations.size());
  std::vector<double> log_p;
  for (std::size_t begin = 0; begin < mutations.size(); begin += chunk) {
    const std::size_t end = std::min(mutations.size(), begin + chunk);
    std::vector<std::vector<std::size_t>> seqs;
    for (std::size_t i = begin; i < end; ++i)
      seqs.push_back(apply_mutation(seq, mutations[i]));
    const Pass p = run_pass(model, table, seqs);
    for (std::size_t r = 0; r < seqs.size(); ++r) {
      out.delta_zeta.push_back(row_distance(p.deepest, r, base.deepest, 0));
      out.grammaticality.push_back(
          normalized_log_prob(p.action[r], c.seq_len, c.embed_dim));
      log_p.push_back(-p.action[r]);
    }
  }

  std::map<std::size_t, double> peak, total;
  for (std::size_t i = 0; i < mutations.size(); ++i) {
    const auto pos = mutations[i].position;
    if (!peak.count(pos)) peak[pos] = -base.action[0];
    peak[pos] = std::max(peak[pos], log_p[i]);
  }
  for (const auto& [pos, m] : peak) total[pos] = std::exp(-base.action[0] - m);
  for (std::size_t i = 0; i < mutations.size(); ++i)
    total[mutations[i].position] += std::exp(log_p[i] - peak[mutations[i].position]);
  out.conditional.reserve(mutations.size());
  for (std::size_t i = 0; i < mutations.size(); ++i) {
    const auto pos = mutations[i].position;
    out.conditional.push_back(log_p[i] - peak[pos] - std::log(total[pos]));
  }
  return out;
}

GrammarMode parse_grammar_mode(const std::string& name) {
  if (name == "joint") return GrammarMode::Joint;
  if (name == "conditional") return GrammarMode::Conditional;
  throw ConfigError("grammaticality must be 'joint' or 'conditional', got '" + name + "'");
}

std::vector<double> average_ranks(std::span<const double> values) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  std::vector<double> ranks(values.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && values[order[j + 1]] == values[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = avg;
    i = j + 1;
  }
  return ranks;
}

std::vector<MutationScore> cscs_rank(std::span<const double> delta_zeta,
                                     std::span<const double> gram,
                                     CombineMode mode) {
  if (delta_zeta.size() != gram.size()) {
    throw ShapeError("cscs_rank: score lists differ in length");
  }
  if (delta_zeta.empty()) throw DataError("cscs_rank: no mutations to rank");
  std::vector<MutationScore> out(delta_zeta.size());
  std::vector<double> rz, rg;
  if (mode == CombineMode::RankSum) {
    rz = average_ranks(delta_zeta);
    rg = average_ranks(gram);
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].delta_zeta = delta_zeta[i];
    out[i].grammaticality = gram[i];
    out[i].combined = mode == CombineMode::RankSum ? rz[i] + rg[i]
                                                   : delta_zeta[i] + gram[i];
  }
  std::vector<std::size_t> order(out.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return out[a].combined > out[b].combined;
  });
  for (std::size_t r = 0; r < order.size(); ++r) out[order[r]].rank = r + 1;
  return out;
}

double auc(std::span<const int> labels, std::span<const double> scores) {
  if (labels.size() != scores.size()) {
    throw ShapeError("auc: labels and scores differ in length");
  }
  std::size_t pos = 0;
  for (int l : labels) pos += l != 0;
  const std::size_t neg = labels.size() - pos;
  if (pos == 0 || neg == 0) {
    throw DataError("auc needs at least one positive and one negative label");
  }
  // Rank formulation of the Mann-Whitney statistic; average ranks give ties
  // half credit.
  const auto ranks = average_ranks(scores);
  double rank_sum = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i]) rank_sum += ranks[i];
  const double p = static_cast<double>(pos), q = static_cast<double>(neg);
  return (rank_sum - p * (p + 1) / 2) / (p * q);
}

std::vector<EscapeLabel> parse_escape_labels(std::istream& in,
                                             const std::string& source) {
  std::vector<EscapeLabel> out;
  std::string line;
  std::size_t lineno = 0;
  bool header = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    const auto f = parse_csv_line(line);
    if (header) {
      header = false;
      if (f.size() == 3 && f[0] == "position") continue;
    }
    auto fail = [&](const std::string& why) {
      return DataError(source + ":" + std::to_string(lineno) + ": " + why);
    };
    if (f.size() != 3) throw fail("expected 3 columns position,to_symbol,is_escape");
    EscapeLabel l;
    try {
      std::size_t used = 0;
      const long long p = std::stoll(f[0], &used);
      if (used != f[0].size() || p < 0) throw std::invalid_argument("position");
      l.position = static_cast<std::size_t>(p);
    } catch (const std::exception&) {
      throw fail("bad position '" + f[0] + "'");
    }
    if (f[1].size() != 1) throw fail("to_symbol must be a single symbol");
    l.to_symbol = f[1][0];
    if (f[2] != "0" && f[2] != "1") throw fail("is_escape must be 0 or 1");
    l.is_escape = f[2] == "1";
    out.push_back(l);
  }
  return out;
}

std::vector<EscapeLabel> load_escape_labels(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  return parse_escape_labels(in, path);
}

void apply_labels(std::vector<Mutation>& mutations,
                  const std::vector<EscapeLabel>& labels,
                  const Vocabulary& vocab) {
  for (auto& m : mutations) m.is_escape = false;
  for (const auto& l : labels) {
    const auto it = std::find_if(mutations.begin(), mutations.end(), [&](const Mutation& m) {
      return m.position == l.position && vocab.contains(l.to_symbol) &&
             m.to == vocab.index(l.to_symbol);
    });
    if (it == mutations.end()) {
      throw DataError("escape label (" + std::to_string(l.position) + ", " +
                      std::string(1, l.to_symbol) +
                      ") does not name a mutation of the sequence");
    }
    it->is_escape = l.is_escape;
  }
}

EscapeReport escape_report(const MeraModel& model, const EmbeddingTable& table,
                           const Vocabulary& vocab,
                           const std::vector<std::size_t>& seq,
                           const std::vector<EscapeLabel>* labels,
                           CombineMode mode, GrammarMode grammar) {
  EscapeReport r;
  r.mutations = enumerate_mutations(seq, vocab);
  if (labels) {
    apply_labels(r.mutations, *labels, vocab);
    r.labelled = true;
  }
  const RawScores raw = score_mutations(model, table, seq, r.mutations);
  const auto& gram =
      grammar == GrammarMode::Joint ? raw.grammaticality : raw.conditional;
  r.scores = cscs_rank(raw.delta_zeta, gram, mode);
  if (!labels) return r;

  std::vector<int> y;
  for (const auto& m : r.mutations) y.push_back(m.is_escape.value_or(false) ? 1 : 0);
  const std::size_t pos = static_cast<std::size_t>(std::count(y.begin(), y.end(), 1));
  if (labels->empty() || pos == 0 || pos == y.size()) {
    warn("escape labels do not contain both classes; AUC footer omitted");
    return r;
  }
  std::vector<double> combined;
  for (const auto& s : r.scores) combined.push_back(s.combined);
  r.aucs = EscapeAucs{auc(y, combined), auc(y, raw.delta_zeta),
                      auc(y, gram)};
  return r;
}

void write_escape_csv(std::ostream& os, const EscapeReport& report,
                      const Vocabulary& vocab) {
  write_csv_row(os, {"position", "from", "to", "delta_zeta", "grammaticality",
                     "combined", "rank", "is_escape"});
  for (std::size_t i = 0; i < report.mutations.size(); ++i) {
    const auto& m = report.mutations[i];
    const auto& s = report.scores[i];
    std::string flag;
    if (report.labelled) flag = m.is_escape.value_or(false) ? "1" : "0";
    write_csv_row(os, {std::to_string(m.position), std::string(1, vocab.symbol(m.from)),
                       std::string(1, vocab.symbol(m.to)), format_double(s.delta_zeta),
                       format_double(s.grammaticality), format_double(s.combined),
                       std::to_string(s.rank), flag});
  }
  if (report.aucs) {
    const std::vector<std::pair<const char*, double>> footer = {
        {"AUC_combined", report.aucs->combined},
        {"AUC_delta_zeta", report.aucs->delta_zeta},
        {"AUC_grammaticality", report.aucs->grammaticality}};
    for (const auto& [name, value] : footer)
      write_csv_row(os, {name, format_double(value), "", "", "", "", "", ""});
  }
}

}  // namespace rgflow
