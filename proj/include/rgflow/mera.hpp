#pragma once

#include <compare>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "rgflow/autodiff.hpp"
#include "rgflow/node_flow.hpp"
#include "rgflow/rng.hpp"
#include "rgflow/tensor.hpp"

namespace rgflow {

struct MeraConfig {
  std::size_t seq_len = 32;     // I, power of two
  std::size_t embed_dim = 20;   // n
  std::size_t kernel = 4;       // l, even power of two, l <= I
  int steps = 20;
  std::size_t hidden_width = 64;
  std::size_t num_layers = 4;
  bool position_dependent = true;

  void validate() const;
  // Number of (disentangler, decimator) layers: log2(I/l) + 1.
  std::size_t depth() const;
  // Halvings needed to reduce the lattice to nothing, log2(I).
  std::size_t single_site_rg_steps() const;
  std::size_t block_dim() const { return kernel * embed_dim; }
};

enum class BlockKind { Disentangler, Decimator };

const char* block_kind_name(BlockKind kind);

struct BlockKey {
  std::size_t layer = 0;
  BlockKind kind = BlockKind::Disentangler;
  std::size_t index = 0;

  auto operator<=>(const BlockKey&) const = default;
  std::string name() const;
};

// Static wiring of one layer. Slots index the relevant field entering it.
struct LayerPlan {
  std::size_t layer = 0;
  std::size_t sites = 0;  // D_k
  bool final = false;     // single decimator, every output becomes bulk
  std::vector<std::vector<std::size_t>> dis_groups;
  std::vector<std::vector<std::size_t>> dec_groups;
  std::vector<std::size_t> relevant_slots;  // ascending
  std::vector<std::size_t> bulk_slots;      // ascending
  std::vector<std::size_t> lattice;         // original site of every slot
};

std::vector<LayerPlan> build_plan(const MeraConfig& cfg);

class MeraModel {
 public:
  // Zero-weight blocks.
  explicit MeraModel(MeraConfig cfg);

  const MeraConfig& config() const { return cfg_; }
  const std::vector<LayerPlan>& plan() const { return plan_; }
  // Blocks owning parameters, ordered by layer, kind, index.
  const std::vector<BlockKey>& registry() const { return keys_; }

  // Position in registry() of the block applied at (layer, kind, index).
  std::size_t slot(std::size_t layer, BlockKind kind, std::size_t index) const;
  FlowBlock& block(std::size_t registry_index) { return blocks_[registry_index]; }
  const FlowBlock& block(std::size_t registry_index) const {
    return blocks_[registry_index];
  }
  const FlowBlock& block_at(std::size_t layer, BlockKind kind,
                            std::size_t index) const {
    return blocks_[slot(layer, kind, index)];
  }

  std::vector<Tensor*> parameters();
  std::vector<const Tensor*> parameters() const;
  std::size_t parameter_count() const;

  void init_weights(Rng& rng);
  void randomize_weights(Rng& rng, double scale);

 private:
  MeraConfig cfg_;
  std::vector<LayerPlan> plan_;
  std::vector<BlockKey> keys_;
  std::vector<FlowBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Single-configuration API. Fields are [sites x n].

struct LayerFields {
  std::size_t layer = 0;
  Tensor fields;                     // D_k x n
  std::vector<std::size_t> lattice;  // original site of every row
};

struct BulkHierarchy {
  // layers[k] holds the bulk produced by layer k, i.e. zeta^(k+1).
  std::vector<Tensor> layers;
  std::vector<std::vector<std::size_t>> sites;

  std::size_t total_coordinates() const;
  const Tensor& deepest() const { return layers.back(); }
};

struct ActionBreakdown {
  double total = 0.0;
  std::vector<double> s_z;
  std::vector<double> s_coupling;
  double prior_const = 0.0;
};

struct RgStepResult {
  LayerFields coarse;
  Tensor bulk;
  std::vector<std::size_t> bulk_sites;
  double coupling = 0.0;  // minus the summed forward logdets
};

struct GStepResult {
  LayerFields fine;
  double logdet = 0.0;  // log|det| of the generation step
};

LayerFields initial_fields(const MeraModel& model, const Tensor& phi);

RgStepResult rg_step(const MeraModel& model, std::size_t k,
                     const LayerFields& fields);
GStepResult g_step(const MeraModel& model, std::size_t k,
                   const LayerFields& coarse, const Tensor& bulk);

struct FlowResult {
  BulkHierarchy bulk;
  ActionBreakdown action;
};

FlowResult rg_flow(const MeraModel& model, const Tensor& phi);
Tensor g_flow(const MeraModel& model, const BulkHierarchy& bulk);

// Relevant field after `depth` layers. At depth() the field has no sites.
Tensor forgetful_coarse_grain(const MeraModel& model, const Tensor& phi,
                              std::size_t depth);

// Gaussian integration of the bulk around zeta = 0:
//   S(phi) + C(phi, 0) + (sum_j d2C/dzeta_j^2 - sum_j (dC/dzeta_j)^2) / 2
// with central differences of step h.
double effective_action_perturbative(
    const std::function<double(const Tensor& zeta)>& coupling,
    double coarse_action, std::size_t bulk_size, double h = 1e-3);

// Same at layer k < depth()-1 of a model: `coarse` is the relevant field
// after layer k, the coupling is the log-Jacobian of g_step at layer k and
// the coarse action runs the rest of the hierarchy.
double effective_action_perturbative(const MeraModel& model, std::size_t k,
                                     const Tensor& coarse, double h = 1e-3);

// Normalized action of a relevant field entering layer k.
double partial_action(const MeraModel& model, std::size_t k,
                      const Tensor& fields);

struct BulkCorrelation {
  Tensor matrix;  // |rho|, unit diagonal
  double max_offdiag = 0.0;
  bool degenerate = false;  // some coordinate had zero variance
};

BulkCorrelation bulk_independence_diagnostic(const MeraModel& model,
                                             std::span<const Tensor> phis);
// Same statistic on already flattened bulk rows (samples x coordinates).
BulkCorrelation bulk_correlation(const Tensor& rows);

// ---------------------------------------------------------------------------
// Batched API. Rows are samples; a field with D sites is B x (D*n), site-major.

struct BoundModel {
  std::vector<BoundFunc> funcs;  // registry order
};

BoundModel bind_constant(const MeraModel& model);
BoundModel bind_variables(const MeraModel& model, ad::Tape& tape,
                          std::vector<ad::Var>& leaves);

struct BatchFlow {
  std::vector<ad::Var> bulk;        // per layer, B x (|J|*n)
  std::vector<ad::Var> s_z;         // per layer, B x 1
  std::vector<ad::Var> s_coupling;  // per layer, B x 1
  ad::Var total;                    // B x 1, includes prior_const
  ad::Var kinetic;                  // B x 1, summed over blocks
  ad::Var jac_frob;                 // B x 1
  double prior_const = 0.0;
};

BatchFlow rg_flow_batch(const MeraModel& model, const BoundModel& bound,
                        const ad::Var& phi);

struct BatchGeneration {
  Tensor phi;     // B x (I*n)
  Tensor logdet;  // B x 1
};

BatchGeneration g_flow_batch(const MeraModel& model, const BoundModel& bound,
                             const std::vector<Tensor>& bulk);

// Sizes of the bulk produced by each layer, in sites.
std::vector<std::size_t> bulk_sites_per_layer(const MeraModel& model);

}  // namespace rgflow
