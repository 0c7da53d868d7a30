#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "rgflow/errors.hpp"
#include "rgflow/mera.hpp"
#include "rgflow/rng.hpp"
#include "rgflow/tensor.hpp"

namespace rgflow {

// 0.5 * |zeta|^2 + (count/2) log(2 pi).
double prior_action(const Tensor& zeta);
double prior_action(const BulkHierarchy& zeta);

ActionBreakdown total_action(const MeraModel& model, const Tensor& phi);

// -S / (n I)
double normalized_log_prob(double action, std::size_t seq_len,
                           std::size_t embed_dim);
double normalized_log_prob(const MeraModel& model, const Tensor& phi);

// zeta ~ N(0, 1), phi = G(zeta). Each sample consumes I*n normals from `rng`
// in hierarchy order, so sample i does not depend on `count`.
std::vector<Tensor> sample(const MeraModel& model, Rng& rng, std::size_t count);

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 64;
  std::size_t epochs = 10;
  double lambda_kinetic = 0.01;
  double lambda_jacobian = 0.01;
  std::uint64_t seed = 0;
  double clip_norm = 10.0;
  double noise_sigma = 0.0;  // dequantization noise redrawn every epoch
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double mean_loss = 0.0;
  double mean_norm_logprob = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
  double wall_time = 0.0;
  double max_bulk_correlation = 0.0;
};

class DivergenceError : public NumericError {
 public:
  DivergenceError(const std::string& what, TrainReport report)
      : NumericError(what), report_(std::move(report)) {}
  const TrainReport& report() const { return report_; }

 private:
  TrainReport report_;
};

struct LossValue {
  double loss = 0.0;
  double mean_action = 0.0;
  std::vector<Tensor> grads;  // MeraModel::parameters() order
};

// mean S + lambda_k mean kinetic + lambda_j mean jac_frob over the rows of
// `batch` (B x I*n).
LossValue evaluate_loss(const MeraModel& model, const Tensor& batch,
                        const TrainConfig& cfg, bool with_grad);

using EpochCallback = std::function<void(const EpochStats&, const MeraModel&)>;

// Minibatch Adam with global-norm clipping. On a non-finite loss the last
// finite parameters are restored and DivergenceError is thrown.
TrainReport train(MeraModel& model, std::span<const Tensor> dataset,
                  const TrainConfig& cfg, const EpochCallback& on_epoch = {});

// Rows of a B x (I*n) matrix from fields of I*n values each.
Tensor stack_rows(std::span<const Tensor> fields);

}  // namespace rgflow
