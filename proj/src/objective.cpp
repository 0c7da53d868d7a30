#include "rgflow/objective.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <numeric>
#include <string>

namespace rgflow {

namespace {

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

}  // namespace

double prior_action(const Tensor& zeta) {
  double s = 0.0;
  for (double v : zeta.data()) s += v * v;
  return 0.5 * s + kHalfLog2Pi * static_cast<double>(zeta.size());
}

double prior_action(const BulkHierarchy& zeta) {
  double s = 0.0;
  for (const auto& t : zeta.layers) s += prior_action(t);
  return s;
}

ActionBreakdown total_action(const MeraModel& model, const Tensor& phi) {
  return rg_flow(model, phi).action;
}

double normalized_log_prob(double action, std::size_t seq_len,
                           std::size_t embed_dim) {
  return -action / static_cast<double>(seq_len * embed_dim);
}

double normalized_log_prob(const MeraModel& model, const Tensor& phi) {
  const auto& c = model.config();
  return normalized_log_prob(total_action(model, phi).total, c.seq_len,
                             c.embed_dim);
}

Tensor stack_rows(std::span<const Tensor> fields) {
  if (fields.empty()) throw ShapeError("stack_rows: no fields");
  const std::size_t width = fields[0].size();
  Tensor out({fields.size(), width});
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (fields[i].size() != width) {
      throw ShapeError("stack_rows: field " + std::to_string(i) +
                       " has size " + std::to_string(fields[i].size()) +
                       ", expected " + std::to_string(width));
    }
    std::copy(fields[i].data().begin(), fields[i].data().end(),
              out.data().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return out;
}

std::vector<Tensor> sample(const MeraModel& model, Rng& rng,
                           std::size_t count) {
  const auto& cfg = model.config();
  if (count == 0) return {};
  const auto sizes = bulk_sites_per_layer(model);
  std::vector<Tensor> bulk;
  for (std::size_t s : sizes) bulk.emplace_back(Shape{count, s * cfg.embed_dim});
  for (std::size_t i = 0; i < count; ++i)
    for (auto& layer : bulk)
      for (std::size_t j = 0; j < layer.cols(); ++j) layer.at(i, j) = rng.normal();
  const BatchGeneration g = g_flow_batch(model, bind_constant(model), bulk);
  std::vector<Tensor> out;
  const std::size_t width = cfg.seq_len * cfg.embed_dim;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor phi({cfg.seq_len, cfg.embed_dim});
    std::copy_n(g.phi.data().begin() + static_cast<std::ptrdiff_t>(i * width),
                width, phi.data().begin());
    out.push_back(std::move(phi));
  }
  return out;
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning_rate must be finite and non-negative");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (!(lambda_kinetic >= 0.0) || !(lambda_jacobian >= 0.0)) {
    throw ConfigError("lambda_kinetic and lambda_jacobian must be >= 0");
  }
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) ||
      !(adam_eps > 0.0)) {
    throw ConfigError("Adam constants out of range");
  }
}

LossValue evaluate_loss(const MeraModel& model, const Tensor& batch,
                        const TrainConfig& cfg, bool with_grad) {
  const double inv_b = 1.0 / static_cast<double>(batch.rows());
  auto assemble = [&](const BatchFlow& f) {
    const ad::Var action = ad::scale(ad::sum(f.total), inv_b);
    ad::Var loss = action;
    if (cfg.lambda_kinetic != 0.0)
      loss = ad::add(loss, ad::scale(ad::sum(f.kinetic), cfg.lambda_kinetic * inv_b));
    if (cfg.lambda_jacobian != 0.0)
      loss = ad::add(loss, ad::scale(ad::sum(f.jac_frob), cfg.lambda_jacobian * inv_b));
    return std::pair{loss, action};
  };
  LossValue out;
  if (!with_grad) {
    const BatchFlow f =
        rg_flow_batch(model, bind_constant(model), ad::Var::constant(batch));
    const auto [loss, action] = assemble(f);
    out.loss = loss.value().item();
    out.mean_action = action.value().item();
    return out;
  }
  ad::Tape tape;
  std::vector<ad::Var> leaves;
  const BoundModel bound = bind_variables(model, tape, leaves);
  const BatchFlow f = rg_flow_batch(model, bound, ad::Var::constant(batch));
  const auto [loss, action] = assemble(f);
  out.loss = loss.value().item();
  out.mean_action = action.value().item();
  out.grads = tape.gradient(loss, leaves);
  return out;
}

TrainReport train(MeraModel& model, std::span<const Tensor> dataset,
                  const TrainConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  if (dataset.empty()) throw DataError("training dataset is empty");
  const auto& mc = model.config();
  const Tensor clean = stack_rows(dataset);
  if (clean.cols() != mc.seq_len * mc.embed_dim) {
    throw ShapeError("training fields have " + std::to_string(clean.cols()) +
                     " values, model expects " +
                     std::to_string(mc.seq_len * mc.embed_dim));
  }
  require_finite(clean, "training data");

  const std::size_t count = clean.rows(), width = clean.cols();
  Rng shuffle_rng(sub_seed(cfg.seed, "shuffle"));
  Rng noise_rng(sub_seed(cfg.seed, "noise"));

  auto params = model.parameters();
  std::vector<Tensor> m1, m2;
  for (const Tensor* p : params) {
    m1.emplace_back(p->shape());
    m2.emplace_back(p->shape());
  }
  std::size_t t = 0;

  TrainReport report;
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::size_t> order(count);

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = count; i > 1; --i)
      std::swap(order[i - 1], order[shuffle_rng.below(i)]);

    Tensor data = clean;
    if (cfg.noise_sigma > 0.0)
      for (auto& v : data.data()) v += cfg.noise_sigma * noise_rng.normal();

    double loss_sum = 0.0, action_sum = 0.0;
    for (std::size_t begin = 0; begin < count; begin += cfg.batch_size) {
      const std::size_t end = std::min(count, begin + cfg.batch_size);
      Tensor batch({end - begin, width});
      for (std::size_t r = begin; r < end; ++r)
        std::copy_n(data.data().begin() + static_cast<std::ptrdiff_t>(order[r] * width),
                    width,
                    batch.data().begin() + static_cast<std::ptrdiff_t>((r - begin) * width));

      LossValue lv;
      bool finite = true;
      try {
        lv = evaluate_loss(model, batch, cfg, true);
        finite = std::isfinite(lv.loss);
        for (const auto& g : lv.grads) finite = finite && g.all_finite();
      } catch (const NumericError&) {
        finite = false;
      }
      if (!finite) {
        // Parameters are only written after a finite step, so they still
        // hold the last finite state.
        report.wall_time = std::chrono::duration<double>(
                               std::chrono::steady_clock::now() - start)
                               .count();
        throw DivergenceError("training diverged in epoch " +
                                  std::to_string(epoch) +
                                  "; parameters restored to the last finite state",
                              report);
      }
      const double rows = static_cast<double>(end - begin);
      loss_sum += lv.loss * rows;
      action_sum += lv.mean_action * rows;

      double norm = 0.0;
      for (const auto& g : lv.grads)
        for (double v : g.data()) norm += v * v;
      norm = std::sqrt(norm);
      const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

      ++t;
      const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
      const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
      std::vector<Tensor> next;
      next.reserve(params.size());
      for (std::size_t p = 0; p < params.size(); ++p) {
        Tensor w = *params[p];
        for (std::size_t i = 0; i < w.size(); ++i) {
          const double g = lv.grads[p][i] * clip;
          m1[p][i] = cfg.beta1 * m1[p][i] + (1.0 - cfg.beta1) * g;
          m2[p][i] = cfg.beta2 * m2[p][i] + (1.0 - cfg.beta2) * g * g;
          w[i] -= cfg.learning_rate * (m1[p][i] / c1) /
                  (std::sqrt(m2[p][i] / c2) + cfg.adam_eps);
        }
        next.push_back(std::move(w));
      }
      bool ok = true;
      for (const auto& w : next) ok = ok && w.all_finite();
      if (!ok) {
        throw DivergenceError("parameter update produced non-finite weights in epoch " +
                                  std::to_string(epoch),
                              report);
      }
      for (std::size_t p = 0; p < params.size(); ++p) *params[p] = std::move(next[p]);
    }

    EpochStats stats;
    stats.epoch = epoch;
    stats.mean_loss = loss_sum / static_cast<double>(count);
    stats.mean_norm_logprob = normalized_log_prob(
        action_sum / static_cast<double>(count), mc.seq_len, mc.embed_dim);
    stats.seconds = std::chrono::duration<double>(
                        std::chrono::steady_clock::now() - epoch_start)
                        .count();
    report.epochs.push_back(stats);
    if (on_epoch) on_epoch(stats, model);
  }

  if (count >= 2) {
    report.max_bulk_correlation =
        bulk_independence_diagnostic(model, dataset).max_offdiag;
  }
  report.wall_time =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start)
          .count();
  return report;
}

}  // namespace rgflow
