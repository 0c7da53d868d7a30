#include "rgflow/mera.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <numbers>
#include <string>

#include "rgflow/errors.hpp"

namespace rgflow {

namespace {

bool is_pow2(std::size_t v) { return v != 0 && (v & (v - 1)) == 0; }

std::size_t log2_exact(std::size_t v) {
  return static_cast<std::size_t>(std::countr_zero(v));
}

double gaussian_const(std::size_t coords) {
  return 0.5 * static_cast<double>(coords) * std::log(2.0 * std::numbers::pi);
}

}  // namespace

void MeraConfig::validate() const {
  if (!is_pow2(seq_len)) {
    throw ConfigError("seq_len must be a power of two, got " +
                      std::to_string(seq_len));
  }
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (kernel < 2 || !is_pow2(kernel)) {
    throw ConfigError("kernel must be an even power of two, got " +
                      std::to_string(kernel));
  }
  if (kernel > seq_len) {
    throw ConfigError("kernel " + std::to_string(kernel) +
                      " exceeds seq_len " + std::to_string(seq_len));
  }
  if (steps < 1) throw ConfigError("steps must be >= 1");
  if (num_layers == 0) throw ConfigError("num_layers must be >= 1");
  if (num_layers > 1 && hidden_width == 0) {
    throw ConfigError("hidden_width must be positive");
  }
}

std::size_t MeraConfig::depth() const {
  return log2_exact(seq_len / kernel) + 1;
}

std::size_t MeraConfig::single_site_rg_steps() const {
  return log2_exact(seq_len);
}

const char* block_kind_name(BlockKind kind) {
  return kind == BlockKind::Disentangler ? "dis" : "dec";
}

std::string BlockKey::name() const {
  return "layer" + std::to_string(layer) + "." + block_kind_name(kind) +
         std::to_string(index);
}

std::vector<LayerPlan> build_plan(const MeraConfig& cfg) {
  cfg.validate();
  const std::size_t l = cfg.kernel;
  std::vector<LayerPlan> plan;
  std::vector<std::size_t> lattice(cfg.seq_len);
  for (std::size_t i = 0; i < lattice.size(); ++i) lattice[i] = i;
  std::size_t sites = cfg.seq_len;
  for (std::size_t k = 0;; ++k) {
    LayerPlan p;
    p.layer = k;
    p.sites = sites;
    p.lattice = lattice;
    if (sites == l) {
      p.final = true;
      std::vector<std::size_t> all(l);
      for (std::size_t a = 0; a < l; ++a) all[a] = a;
      p.dec_groups.push_back(all);
      p.bulk_slots = all;
      plan.push_back(std::move(p));
      break;
    }
    const std::size_t blocks = sites / l;
    for (std::size_t m = 0; m < blocks; ++m) {
      std::vector<std::size_t> dis(l), dec(l);
      for (std::size_t a = 0; a < l; ++a) {
        dis[a] = m * l + a;
        dec[a] = (m * l + l / 2 + a) % sites;
      }
      p.dis_groups.push_back(std::move(dis));
      p.dec_groups.push_back(std::move(dec));
    }
    std::vector<std::size_t> next;
    // Parity of the slot's position inside its decimator group.
    for (std::size_t s = 0; s < sites; ++s) {
      if ((s + sites - l / 2) % l % 2 == 0) {
        p.relevant_slots.push_back(s);
        next.push_back(lattice[s]);
      } else {
        p.bulk_slots.push_back(s);
      }
    }
    if (p.relevant_slots.size() + p.bulk_slots.size() != sites) {
      throw ShapeError("layer cardinalities do not add up");
    }
    plan.push_back(std::move(p));
    lattice = std::move(next);
    sites /= 2;
  }
  if (plan.size() != cfg.depth()) throw ShapeError("unexpected layer count");
  return plan;
}

MeraModel::MeraModel(MeraConfig cfg) : cfg_(cfg), plan_(build_plan(cfg_)) {
  const std::size_t d = cfg_.block_dim();
  for (const auto& p : plan_) {
    const std::size_t count = cfg_.position_dependent ? p.dec_groups.size() : 1;
    for (BlockKind kind : {BlockKind::Disentangler, BlockKind::Decimator}) {
      const std::size_t groups = kind == BlockKind::Disentangler
                                     ? p.dis_groups.size()
                                     : p.dec_groups.size();
      if (groups == 0) continue;
      for (std::size_t m = 0; m < count; ++m) {
        keys_.push_back({p.layer, kind, m});
        blocks_.push_back(
            {OdeFunc::zeros(d, cfg_.hidden_width, cfg_.num_layers), cfg_.steps});
      }
    }
  }
}

std::size_t MeraModel::slot(std::size_t layer, BlockKind kind,
                            std::size_t index) const {
  const BlockKey key{layer, kind, cfg_.position_dependent ? index : 0};
  const auto it = std::lower_bound(keys_.begin(), keys_.end(), key);
  if (it == keys_.end() || *it != key) {
    throw ShapeError("no block " + key.name() + " in this model");
  }
  return static_cast<std::size_t>(it - keys_.begin());
}

std::vector<Tensor*> MeraModel::parameters() {
  std::vector<Tensor*> out;
  for (auto& b : blocks_)
    for (Tensor* p : rgflow::parameters(b.func)) out.push_back(p);
  return out;
}

std::vector<const Tensor*> MeraModel::parameters() const {
  std::vector<const Tensor*> out;
  for (const auto& b : blocks_)
    for (const Tensor* p : rgflow::parameters(b.func)) out.push_back(p);
  return out;
}

std::size_t MeraModel::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* p : parameters()) n += p->size();
  return n;
}

void MeraModel::init_weights(Rng& rng) {
  for (auto& b : blocks_) rgflow::init_weights(b.func, rng);
}

void MeraModel::randomize_weights(Rng& rng, double scale) {
  for (auto& b : blocks_) rgflow::randomize_weights(b.func, rng, scale);
}

// ---------------------------------------------------------------------------
// Batched core

BoundModel bind_constant(const MeraModel& model) {
  BoundModel b;
  for (std::size_t i = 0; i < model.registry().size(); ++i)
    b.funcs.push_back(bind_constant(model.block(i).func));
  return b;
}

BoundModel bind_variables(const MeraModel& model, ad::Tape& tape,
                          std::vector<ad::Var>& leaves) {
  BoundModel b;
  for (std::size_t i = 0; i < model.registry().size(); ++i)
    b.funcs.push_back(bind_variables(model.block(i).func, tape, leaves));
  return b;
}

namespace {

std::vector<std::size_t> site_columns(std::span<const std::size_t> slots,
                                      std::size_t n) {
  std::vector<std::size_t> cols;
  cols.reserve(slots.size() * n);
  for (std::size_t s : slots)
    for (std::size_t c = 0; c < n; ++c) cols.push_back(s * n + c);
  return cols;
}

// Column of the concatenated decimator output holding each slot.
std::vector<std::size_t> dec_positions(const LayerPlan& p) {
  std::vector<std::size_t> pos(p.sites);
  std::size_t at = 0;
  for (const auto& g : p.dec_groups)
    for (std::size_t s : g) pos[s] = at++;
  return pos;
}

std::vector<std::size_t> mapped(std::span<const std::size_t> slots,
                                const std::vector<std::size_t>& pos) {
  std::vector<std::size_t> out;
  for (std::size_t s : slots) out.push_back(pos[s]);
  return out;
}

Tensor take_cols(const Tensor& a, std::span<const std::size_t> cols) {
  const std::size_t rows = a.rows(), w = a.cols();
  Tensor out({rows, cols.size()});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols.size(); ++j)
      out.at(r, j) = a[r * w + cols[j]];
  return out;
}

void put_cols(Tensor& dst, const Tensor& src, std::span<const std::size_t> cols) {
  const std::size_t rows = dst.rows();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < cols.size(); ++j)
      dst.at(r, cols[j]) = src.at(r, j);
}

ad::Var accumulate(const ad::Var& acc, const ad::Var& v) {
  return acc.valid() ? ad::add(acc, v) : v;
}

struct StepVars {
  ad::Var coarse;  // B x (|I|n)
  ad::Var bulk;    // B x (|J|n)
  ad::Var logdet;  // B x 1, summed forward logdets
  ad::Var kinetic;
  ad::Var jac_frob;
};

StepVars step_forward(const MeraModel& model, const BoundModel& bound,
                      std::size_t k, const ad::Var& fields) {
  const LayerPlan& p = model.plan().at(k);
  const std::size_t n = model.config().embed_dim;
  const int steps = model.config().steps;
  if (fields.cols() != p.sites * n) {
    throw ShapeError("layer " + std::to_string(k) + " expects " +
                     std::to_string(p.sites * n) + " columns, got " +
                     std::to_string(fields.cols()));
  }
  StepVars out;
  auto run = [&](const std::vector<std::vector<std::size_t>>& groups,
                 BlockKind kind, const ad::Var& x) {
    std::vector<ad::Var> parts;
    for (std::size_t m = 0; m < groups.size(); ++m) {
      const auto cols = site_columns(groups[m], n);
      const ad::Var in = ad::gather_cols(x, cols);
      const auto r =
          flow_forward(bound.funcs[model.slot(k, kind, m)], in, steps);
      out.logdet = accumulate(out.logdet, r.logdet);
      out.kinetic = accumulate(out.kinetic, r.kinetic);
      out.jac_frob = accumulate(out.jac_frob, r.jac_frob);
      parts.push_back(r.state);
    }
    return ad::concat_cols(parts);
  };
  ad::Var x = fields;
  // Disentangler groups are contiguous and in order, so concatenation
  // restores slot order.
  if (!p.final) x = run(p.dis_groups, BlockKind::Disentangler, x);
  const ad::Var y = run(p.dec_groups, BlockKind::Decimator, x);
  const auto pos = dec_positions(p);
  const std::size_t batch = fields.rows();
  if (p.relevant_slots.empty()) {
    out.coarse = ad::Var::constant(Tensor({batch, 0}));
  } else {
    out.coarse = ad::gather_cols(y, site_columns(mapped(p.relevant_slots, pos), n));
  }
  out.bulk = ad::gather_cols(y, site_columns(mapped(p.bulk_slots, pos), n));
  return out;
}

struct StepInverse {
  Tensor fine;
  Tensor logdet;  // B x 1, log|det| of the generation step
};

StepInverse step_inverse(const MeraModel& model, const BoundModel& bound,
                         std::size_t k, const Tensor& coarse,
                         const Tensor& bulk) {
  const LayerPlan& p = model.plan().at(k);
  const std::size_t n = model.config().embed_dim;
  const int steps = model.config().steps;
  const std::size_t batch = bulk.rows();
  if (coarse.cols() != p.relevant_slots.size() * n ||
      bulk.cols() != p.bulk_slots.size() * n ||
      (coarse.size() > 0 && coarse.rows() != batch)) {
    throw ShapeError("g_step at layer " + std::to_string(k) +
                     ": coarse/bulk shapes do not match the layer");
  }
  const auto pos = dec_positions(p);
  Tensor y({batch, p.sites * n});
  if (!p.relevant_slots.empty())
    put_cols(y, coarse, site_columns(mapped(p.relevant_slots, pos), n));
  put_cols(y, bulk, site_columns(mapped(p.bulk_slots, pos), n));

  StepInverse out{Tensor({batch, p.sites * n}), Tensor({batch, 1})};
  // Decimators: input block m sits at columns [m*l*n, (m+1)*l*n) of y.
  const std::size_t width = model.config().kernel * n;
  Tensor x({batch, p.sites * n});
  for (std::size_t m = 0; m < p.dec_groups.size(); ++m) {
    std::vector<std::size_t> cols(width);
    for (std::size_t c = 0; c < width; ++c) cols[c] = m * width + c;
    const auto r = flow_inverse(bound.funcs[model.slot(k, BlockKind::Decimator, m)],
                                take_cols(y, cols), steps);
    put_cols(x, r.state, site_columns(p.dec_groups[m], n));
    for (std::size_t b = 0; b < batch; ++b) out.logdet[b] += r.logdet[b];
  }
  if (p.final) {
    out.fine = std::move(x);
    return out;
  }
  for (std::size_t m = 0; m < p.dis_groups.size(); ++m) {
    const auto cols = site_columns(p.dis_groups[m], n);
    const auto r = flow_inverse(
        bound.funcs[model.slot(k, BlockKind::Disentangler, m)],
        take_cols(x, cols), steps);
    put_cols(out.fine, r.state, cols);
    for (std::size_t b = 0; b < batch; ++b) out.logdet[b] += r.logdet[b];
  }
  return out;
}

}  // namespace

BatchFlow rg_flow_batch(const MeraModel& model, const BoundModel& bound,
                        const ad::Var& phi) {
  const MeraConfig& cfg = model.config();
  if (phi.cols() != cfg.seq_len * cfg.embed_dim) {
    throw ShapeError("rg_flow: field has " + std::to_string(phi.cols()) +
                     " columns, expected " +
                     std::to_string(cfg.seq_len * cfg.embed_dim));
  }
  BatchFlow out;
  out.prior_const = gaussian_const(cfg.seq_len * cfg.embed_dim);
  ad::Var fields = phi;
  ad::Var total;
  for (std::size_t k = 0; k < model.plan().size(); ++k) {
    StepVars s = step_forward(model, bound, k, fields);
    const ad::Var s_z = ad::scale(ad::row_sum(ad::square(s.bulk)), 0.5);
    const ad::Var coupling = ad::neg(s.logdet);
    out.bulk.push_back(s.bulk);
    out.s_z.push_back(s_z);
    out.s_coupling.push_back(coupling);
    total = accumulate(total, ad::add(s_z, coupling));
    out.kinetic = accumulate(out.kinetic, s.kinetic);
    out.jac_frob = accumulate(out.jac_frob, s.jac_frob);
    fields = s.coarse;
  }
  out.total = ad::add_scalar(total, out.prior_const);
  return out;
}

BatchGeneration g_flow_batch(const MeraModel& model, const BoundModel& bound,
                             const std::vector<Tensor>& bulk) {
  const auto& plan = model.plan();
  if (bulk.size() != plan.size()) {
    throw ShapeError("g_flow: expected bulk for " + std::to_string(plan.size()) +
                     " layers, got " + std::to_string(bulk.size()));
  }
  const std::size_t batch = bulk.back().rows();
  Tensor fields({batch, 0});
  Tensor logdet({batch, 1});
  for (std::size_t k = plan.size(); k-- > 0;) {
    StepInverse s = step_inverse(model, bound, k, fields, bulk[k].as_matrix());
    fields = std::move(s.fine);
    for (std::size_t b = 0; b < batch; ++b) logdet[b] += s.logdet[b];
  }
  return {std::move(fields), std::move(logdet)};
}

std::vector<std::size_t> bulk_sites_per_layer(const MeraModel& model) {
  std::vector<std::size_t> out;
  for (const auto& p : model.plan()) out.push_back(p.bulk_slots.size());
  return out;
}

// ---------------------------------------------------------------------------
// Single-configuration wrappers

std::size_t BulkHierarchy::total_coordinates() const {
  std::size_t n = 0;
  for (const auto& t : layers) n += t.size();
  return n;
}

LayerFields initial_fields(const MeraModel& model, const Tensor& phi) {
  const MeraConfig& cfg = model.config();
  if (phi.size() != cfg.seq_len * cfg.embed_dim) {
    throw ShapeError("field of shape " + shape_string(phi.shape()) +
                     " does not match I x n = " + std::to_string(cfg.seq_len) +
                     " x " + std::to_string(cfg.embed_dim));
  }
  require_finite(phi, "rg_flow input");
  return {0, phi.reshaped({cfg.seq_len, cfg.embed_dim}), model.plan()[0].lattice};
}

namespace {

std::vector<std::size_t> pick(const std::vector<std::size_t>& from,
                              const std::vector<std::size_t>& slots) {
  std::vector<std::size_t> out;
  for (std::size_t s : slots) out.push_back(from[s]);
  return out;
}

}  // namespace

RgStepResult rg_step(const MeraModel& model, std::size_t k,
                     const LayerFields& fields) {
  if (k >= model.plan().size()) {
    throw ShapeError("rg_step: layer " + std::to_string(k) + " beyond depth");
  }
  const LayerPlan& p = model.plan()[k];
  const std::size_t n = model.config().embed_dim;
  if (fields.fields.size() != p.sites * n) {
    throw ShapeError("rg_step: layer " + std::to_string(k) + " needs " +
                     std::to_string(p.sites) + " sites");
  }
  require_finite(fields.fields, "rg_step input");
  const StepVars s = step_forward(
      model, bind_constant(model), k,
      ad::Var::constant(fields.fields.reshaped({1, p.sites * n})));
  RgStepResult r;
  r.coarse.layer = k + 1;
  r.coarse.fields = s.coarse.value().reshaped({p.relevant_slots.size(), n});
  r.coarse.lattice = pick(p.lattice, p.relevant_slots);
  r.bulk = s.bulk.value().reshaped({p.bulk_slots.size(), n});
  r.bulk_sites = pick(p.lattice, p.bulk_slots);
  r.coupling = -s.logdet.value()[0];
  return r;
}

GStepResult g_step(const MeraModel& model, std::size_t k,
                   const LayerFields& coarse, const Tensor& bulk) {
  if (k >= model.plan().size()) {
    throw ShapeError("g_step: layer " + std::to_string(k) + " beyond depth");
  }
  const LayerPlan& p = model.plan()[k];
  const std::size_t n = model.config().embed_dim;
  if (coarse.fields.size() != p.relevant_slots.size() * n ||
      bulk.size() != p.bulk_slots.size() * n) {
    throw ShapeError("g_step: shapes do not match layer " + std::to_string(k));
  }
  const StepInverse s = step_inverse(
      model, bind_constant(model), k,
      coarse.fields.reshaped({1, coarse.fields.size()}),
      bulk.reshaped({1, bulk.size()}));
  return {{k, s.fine.reshaped({p.sites, n}), p.lattice}, s.logdet[0]};
}

FlowResult rg_flow(const MeraModel& model, const Tensor& phi) {
  const LayerFields start = initial_fields(model, phi);
  const std::size_t n = model.config().embed_dim;
  const BatchFlow f =
      rg_flow_batch(model, bind_constant(model),
                    ad::Var::constant(start.fields.reshaped({1, phi.size()})));
  FlowResult r;
  for (std::size_t k = 0; k < f.bulk.size(); ++k) {
    const auto& p = model.plan()[k];
    r.bulk.layers.push_back(f.bulk[k].value().reshaped({p.bulk_slots.size(), n}));
    r.bulk.sites.push_back(pick(p.lattice, p.bulk_slots));
    r.action.s_z.push_back(f.s_z[k].value()[0]);
    r.action.s_coupling.push_back(f.s_coupling[k].value()[0]);
  }
  r.action.prior_const = f.prior_const;
  r.action.total = f.total.value()[0];
  return r;
}

Tensor g_flow(const MeraModel& model, const BulkHierarchy& bulk) {
  const auto sizes = bulk_sites_per_layer(model);
  const std::size_t n = model.config().embed_dim;
  if (bulk.layers.size() != sizes.size()) {
    throw ShapeError("g_flow: bulk has " + std::to_string(bulk.layers.size()) +
                     " layers, model has " + std::to_string(sizes.size()));
  }
  std::vector<Tensor> rows;
  for (std::size_t k = 0; k < sizes.size(); ++k) {
    if (bulk.layers[k].size() != sizes[k] * n) {
      throw ShapeError("g_flow: layer " + std::to_string(k) +
                       " bulk has wrong size");
    }
    rows.push_back(bulk.layers[k].reshaped({1, sizes[k] * n}));
  }
  const BatchGeneration g = g_flow_batch(model, bind_constant(model), rows);
  return g.phi.reshaped({model.config().seq_len, n});
}

Tensor forgetful_coarse_grain(const MeraModel& model, const Tensor& phi,
                              std::size_t depth) {
  const std::size_t n = model.config().embed_dim;
  if (depth > model.plan().size()) {
    throw ShapeError("forgetful_coarse_grain: depth " + std::to_string(depth) +
                     " exceeds " + std::to_string(model.plan().size()));
  }
  LayerFields f = initial_fields(model, phi);
  for (std::size_t k = 0; k < depth; ++k) f = rg_step(model, k, f).coarse;
  return f.fields.reshaped({f.fields.size() / n, n});
}

double partial_action(const MeraModel& model, std::size_t k,
                      const Tensor& fields) {
  const auto& plan = model.plan();
  const std::size_t n = model.config().embed_dim;
  if (k == plan.size()) {
    if (fields.size() != 0) throw ShapeError("partial_action: no sites remain");
    return 0.0;
  }
  if (k > plan.size() || fields.size() != plan[k].sites * n) {
    throw ShapeError("partial_action: field does not match layer " +
                     std::to_string(k));
  }
  LayerFields f{k, fields.reshaped({plan[k].sites, n}), plan[k].lattice};
  double total = gaussian_const(plan[k].sites * n);
  for (std::size_t j = k; j < plan.size(); ++j) {
    RgStepResult r = rg_step(model, j, f);
    double s_z = 0.0;
    for (double v : r.bulk.data()) s_z += v * v;
    total += 0.5 * s_z + r.coupling;
    f = std::move(r.coarse);
  }
  return total;
}

double effective_action_perturbative(
    const std::function<double(const Tensor& zeta)>& coupling,
    double coarse_action, std::size_t bulk_size, double h) {
  Tensor zeta({bulk_size});
  const double c0 = coupling(zeta);
  double lap = 0.0, grad_sq = 0.0;
  for (std::size_t j = 0; j < bulk_size; ++j) {
    zeta[j] = h;
    const double cp = coupling(zeta);
    zeta[j] = -h;
    const double cm = coupling(zeta);
    zeta[j] = 0.0;
    const double d1 = (cp - cm) / (2 * h);
    lap += (cp - 2 * c0 + cm) / (h * h);
    grad_sq += d1 * d1;
  }
  const double result = coarse_action + c0 + 0.5 * (lap - grad_sq);
  if (!std::isfinite(result)) {
    throw NumericError("effective_action_perturbative: non-finite derivative estimate");
  }
  return result;
}

double effective_action_perturbative(const MeraModel& model, std::size_t k,
                                     const Tensor& coarse, double h) {
  const auto& plan = model.plan();
  const std::size_t n = model.config().embed_dim;
  if (k >= plan.size()) {
    throw ShapeError("effective_action_perturbative: layer " +
                     std::to_string(k) + " beyond depth");
  }
  const LayerPlan& p = plan[k];
  LayerFields c{k + 1,
                coarse.reshaped({p.relevant_slots.size(), n}),
                pick(p.lattice, p.relevant_slots)};
  const std::size_t bulk_size = p.bulk_slots.size() * n;
  auto coupling = [&](const Tensor& zeta) {
    return g_step(model, k, c, zeta.reshaped({p.bulk_slots.size(), n})).logdet;
  };
  return effective_action_perturbative(coupling,
                                       partial_action(model, k + 1, coarse),
                                       bulk_size, h);
}

BulkCorrelation bulk_correlation(const Tensor& rows) {
  const std::size_t samples = rows.rows(), m = rows.cols();
  if (samples < 2) {
    throw DataError("bulk correlation needs at least 2 samples, got " +
                    std::to_string(samples));
  }
  std::vector<double> mean(m, 0.0), sd(m, 0.0);
  for (std::size_t r = 0; r < samples; ++r)
    for (std::size_t j = 0; j < m; ++j) mean[j] += rows.at(r, j);
  for (auto& v : mean) v /= static_cast<double>(samples);
  Tensor centered({samples, m});
  for (std::size_t r = 0; r < samples; ++r)
    for (std::size_t j = 0; j < m; ++j) {
      centered.at(r, j) = rows.at(r, j) - mean[j];
      sd[j] += centered.at(r, j) * centered.at(r, j);
    }
  BulkCorrelation out{Tensor({m, m}), 0.0, false};
  for (auto& v : sd) {
    v = std::sqrt(v);
    if (v == 0.0) out.degenerate = true;
  }
  for (std::size_t i = 0; i < m; ++i) {
    out.matrix.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < m; ++j) {
      double rho = 0.0;
      if (sd[i] > 0.0 && sd[j] > 0.0) {
        double cov = 0.0;
        for (std::size_t r = 0; r < samples; ++r)
          cov += centered.at(r, i) * centered.at(r, j);
        rho = std::min(1.0, std::abs(cov) / (sd[i] * sd[j]));
      }
      out.matrix.at(i, j) = out.matrix.at(j, i) = rho;
      out.max_offdiag = std::max(out.max_offdiag, rho);
    }
  }
  return out;
}

BulkCorrelation bulk_independence_diagnostic(const MeraModel& model,
                                             std::span<const Tensor> phis) {
  const MeraConfig& cfg = model.config();
  if (phis.size() < 2) {
    throw DataError("bulk independence diagnostic needs at least 2 samples");
  }
  const std::size_t width = cfg.seq_len * cfg.embed_dim;
  Tensor batch({phis.size(), width});
  for (std::size_t i = 0; i < phis.size(); ++i) {
    if (phis[i].size() != width) {
      throw ShapeError("bulk independence diagnostic: sample " +
                       std::to_string(i) + " has wrong size");
    }
    std::copy(phis[i].data().begin(), phis[i].data().end(),
              batch.data().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  const BatchFlow f =
      rg_flow_batch(model, bind_constant(model), ad::Var::constant(batch));
  std::vector<ad::Var> parts = f.bulk;
  return bulk_correlation(ad::concat_cols(parts).value());
}

}  // namespace rgflow
